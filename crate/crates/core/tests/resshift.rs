use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texbridge_core::resshift_sr::*;
use texbridge_core::tensor::Tensor;

fn img(vals: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap()
}

#[test]
fn default_schedule_sums() {
    let s = make_schedule(15, 2.0, 0.0016, 0.999).unwrap();
    assert!(s.alpha[1..].iter().all(|&a| a > 0.0));
    let total: f64 = s.alpha[1..].iter().sum();
    assert!((total - 0.999).abs() < 1e-12, "{total}");
    // residual added after the first step
    let after_first: f64 = s.alpha[2..].iter().sum();
    assert!((after_first - 0.9974).abs() < 1e-9, "{after_first}");
    let mut acc = 0.0;
    for t in 1..=15 {
        acc += s.alpha[t];
        assert!((acc - s.eta[t]).abs() < 1e-15);
        let (a, b, v) = s.posterior(t);
        assert!(a >= 0.0 && b >= 0.0 && v >= 0.0);
        assert!((a + b - 1.0).abs() < 1e-15);
    }
    let r: Vec<f64> = (2..=15).map(|t| (s.eta[t] / s.eta[t - 1]).sqrt()).collect();
    assert!(r.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "sqrt(eta) geometric");
}

#[test]
fn forward_step_noise_free_and_pure_noise() {
    let s = make_schedule(15, 1e-12, 0.0016, 0.999).unwrap();
    let pair = ResidualPair::new(img(&[0.2, 0.5, 0.9]), img(&[0.3, 0.4, 0.9])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = forward_step(&pair.hr, &pair, 4, &s, &mut rng).unwrap();
    for i in 0..3 {
        let expect = pair.hr.data()[i] + s.alpha[4] * pair.e0.data()[i];
        assert!((x.data()[i] - expect).abs() < 1e-11);
    }
    // e0 = 0: pure Gaussian increments of std κ√α
    let s = DiffusionSchedule::default();
    let n = 200_000;
    let same = Tensor::<f64>::full(&[n], 0.5);
    let pair = ResidualPair::new(same.clone(), same.clone()).unwrap();
    let x = forward_step(&same, &pair, 7, &s, &mut rng).unwrap();
    let std = (x.data().iter().map(|v| (v - 0.5).powi(2)).sum::<f64>() / n as f64).sqrt();
    let expect = s.kappa * s.alpha[7].sqrt();
    assert!((std / expect - 1.0).abs() < 0.01, "{std} vs {expect}");
}

#[test]
fn forward_step_monte_carlo_mean() {
    let s = DiffusionSchedule::default();
    let n = 10_000;
    let hr = Tensor::<f64>::full(&[n], 0.3);
    let lr = Tensor::full(&[n], 0.8);
    let pair = ResidualPair::new(hr.clone(), lr).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in [1, 8, 15] {
        let x = forward_step(&hr, &pair, t, &s, &mut rng).unwrap();
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let se = s.kappa * s.alpha[t].sqrt() / (n as f64).sqrt();
        assert!((mean - (0.3 + s.alpha[t] * 0.5)).abs() < 3.0 * se, "t={t}");
    }
}

#[test]
fn marginal_boundaries() {
    let s = make_schedule(15, 1e-12, 0.0016, 0.999).unwrap();
    let pair = ResidualPair::new(img(&[0.1, 0.6, 0.9]), img(&[0.5, 0.5, 0.2])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(forward_marginal(&pair.hr, &pair, 0, &s, &mut rng).unwrap(), pair.hr);
    let xt = forward_marginal(&pair.hr, &pair, 15, &s, &mut rng).unwrap();
    let bound = (1.0 - s.eta[15]) * pair.e0.max_abs() + 1e-10;
    for (a, b) in xt.data().iter().zip(pair.lr_on_hr_grid.data()) {
        assert!((a - b).abs() <= bound);
    }
}

/// Per-pixel mean and variance of iterated chains against the closed-form marginal.
#[test]
fn marginal_matches_iterated_chain() {
    let s = DiffusionSchedule::default();
    let pix = [(0.9, 1.0), (0.4, 0.9), (0.7, 0.6)];
    let chains = 400_000;
    let mut hr = Vec::new();
    let mut lr = Vec::new();
    for _ in 0..chains {
        for &(h, l) in &pix {
            hr.push(h);
            lr.push(l);
        }
    }
    let hr = Tensor::from_vec(&[chains * 3], hr).unwrap();
    let pair = ResidualPair::new(hr.clone(), Tensor::from_vec(&[chains * 3], lr).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = hr.clone();
    for t in 1..=15 {
        x = forward_step(&x, &pair, t, &s, &mut rng).unwrap();
        if t != 8 && t != 15 {
            continue;
        }
        for (p, &(h, l)) in pix.iter().enumerate() {
            let v: Vec<f64> = x.data().iter().skip(p).step_by(3).copied().collect();
            let mean = v.iter().sum::<f64>() / chains as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
            let m_ref = h + s.eta[t] * (l - h);
            let v_ref = s.kappa.powi(2) * s.eta[t];
            assert!((mean / m_ref - 1.0).abs() < 0.01, "t={t} pixel {p} mean {mean} vs {m_ref}");
            assert!((var / v_ref - 1.0).abs() < 0.01, "t={t} pixel {p} var {var} vs {v_ref}");
        }
    }
}

#[test]
fn reverse_step_first_step_is_deterministic() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = img(&[3.0, -1.0]);
    let x0 = img(&[0.25, 0.75]);
    assert_eq!(reverse_step(&xt, &x0, 1, &s, &mut rng).unwrap(), x0);
    assert!(reverse_step(&xt, &x0, 0, &s, &mut rng).is_err());
}

#[test]
fn noise_free_round_trip_recovers_x0() {
    let s = make_schedule(15, 1e-9, 0.0016, 0.999).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hr = Tensor::<f32>::randn(&[3, 8, 8], 0.2, &mut rng).map(|v: f32| v + 0.5);
    let lr = hr.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
    let pair = ResidualPair::new(hr.clone(), lr).unwrap();
    let mut x = forward_marginal(&hr, &pair, 15, &s, &mut rng).unwrap();
    for t in (2..=15).rev() {
        x = reverse_step(&x, &hr, t, &s, &mut rng).unwrap();
        // posterior mean telescopes back to the marginal mean
        let want = hr.zip_map(&pair.e0, |h, e| h + s.eta[t - 1] as f32 * e).unwrap();
        let err = x.zip_map(&want, |a, b| a - b).unwrap().max_abs();
        assert!(err <= 1e-5, "t={t}: {err}");
    }
    x = reverse_step(&x, &hr, 1, &s, &mut rng).unwrap();
    assert!(x.zip_map(&hr, |a, b| a - b).unwrap().max_abs() <= 1e-5);
}

#[test]
fn gradient_condition_cases() {
    let lr = Tensor::<f64>::full(&[3, 8, 8], 0.4);
    let flat = Tensor::full(&[3, 8, 8], 0.7);
    let d = DetailCondition::default();
    assert_eq!(grad_condition(&lr, &flat, &d).unwrap(), lr);
    let slope = 0.03;
    let mut ramp = Tensor::<f64>::zeros(&[3, 8, 8]);
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                ramp.set3(c, y, x, slope * y as f64 - 0.1);
            }
        }
    }
    for op in [GradOperator::CentralDiffMag, GradOperator::SobelMag] {
        let g = gradmag(&ramp, op, false).unwrap();
        for c in 0..3 {
            for y in 1..7 {
                for x in 1..7 {
                    assert!((g.at3(c, y, x) - slope).abs() < 1e-12, "{op:?}");
                }
            }
        }
    }
    let zero = DetailCondition { scale: 0.0, ..d };
    assert_eq!(grad_condition(&lr, &ramp, &zero).unwrap(), lr);
    assert!(grad_condition(&lr, &Tensor::zeros(&[3, 4, 4]), &DetailCondition::default()).is_err());
}

struct Oracle(Tensor<f64>);

impl X0Predictor<f64> for Oracle {
    fn predict_x0(&self, _: &Tensor<f64>, _: &Tensor<f64>, _: usize) -> texbridge_core::Result<Tensor<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn oracle_sampling_and_determinism() {
    let s = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hr = Tensor::<f64>::randn(&[3, 16, 16], 0.1, &mut rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let lr = hr.map(|v| 0.9 * v + 0.05);
    let out = sample(&lr, &hr, &Oracle(hr.clone()), &s, SampleMode::TrainAndInferCond, &DetailCondition::default(), 3).unwrap();
    let mse = out.zip_map(&hr, |a, b| (a - b).powi(2)).unwrap().mean();
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    assert!(psnr >= 40.0);

    let model = Denoiser::<f64>::new(DenoiserConfig { channels: 4 }, s.clone(), false, 1);
    let a = sample(&lr, &hr, &model, &s, SampleMode::Vanilla, &DetailCondition::default(), 9).unwrap();
    let b = sample(&lr, &hr, &model, &s, SampleMode::Vanilla, &DetailCondition::default(), 9).unwrap();
    assert_eq!(a, b);
    assert!(sample(&lr, &hr, &model, &s, SampleMode::TrainAndInferCond, &DetailCondition::default(), 9).is_err());
    let short = make_schedule(10, 2.0, 0.0016, 0.999).unwrap();
    assert!(sample(&lr, &hr, &model, &short, SampleMode::Vanilla, &DetailCondition::default(), 9).is_err());
}

#[test]
fn overfit_gate_on_two_images() {
    use texbridge_core::synthtex::{Dataset, DatasetConfig};
    use texbridge_core::tensor::resize_bilinear;
    let ds = Dataset::generate(&DatasetConfig { phone_ids: 2, studio_ids: 2, paired: 2, holdout_paired: 0, holdout_unpaired: 0, ..Default::default() }).unwrap();
    let hr = ds.manifest.resolution_hr;
    let examples: Vec<SrExample<f32>> = ds
        .manifest
        .paired_ids
        .iter()
        .map(|id| SrExample {
            hr: ds.studio_hr[id].image.clone(),
            lr_on_hr_grid: resize_bilinear(&ds.studio_lr[id].image, hr, hr),
            phone_hr: ds.phone_hr[id].image.clone(),
        })
        .collect();
    let cfg = SrTrainConfig::default();
    let (_, losses) = train_denoiser(&examples, &DiffusionSchedule::default(), &cfg).unwrap();
    assert_eq!(losses.len(), cfg.steps);
    let tail = &losses[losses.len() - 100..];
    let final_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    eprintln!("first {:.3e}, mean of last 100 steps {final_loss:.3e}", losses[0]);
    assert!(final_loss < 1e-3);
}
