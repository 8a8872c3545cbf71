//! W+ projection of phone textures through a frozen generator.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::netcore::{FeatureExtractor, Generator, WPlus};
use crate::scalar::Real;
use crate::synthtex::TextureSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionOptions {
    pub iterations: usize,
    pub step_size: f64,
    pub momentum: f64,
    /// Reject steps that raise the loss (halving the step size).
    pub backtracking: bool,
    /// Step size growth after an accepted step.
    pub growth: f64,
    pub init_samples: usize,
    pub init_seed: u64,
    pub l2_weight: f64,
    pub percp_weight: f64,
    /// Median masked PSNR (dB) the inverted set must reach.
    pub psnr_gate: f64,
    /// Largest tolerated fraction of failed items.
    pub max_failure_fraction: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            step_size: 0.05,
            momentum: 0.9,
            backtracking: true,
            growth: 1.1,
            init_samples: 1024,
            init_seed: 7,
            l2_weight: 1.0,
            percp_weight: 1.0,
            psnr_gate: 28.0,
            max_failure_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult<T> {
    pub w_plus: WPlus<T>,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub iterations: usize,
}

/// Visibility mask broadcast to `[N, 3, H, W]`.
pub fn mask3<T: Real>(masks: &[&[bool]], res: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(masks.len() * 3 * res * res);
    for m in masks {
        for _ in 0..3 {
            data.extend(m.iter().map(|&v| if v { T::one() } else { T::zero() }));
        }
    }
    Tensor::from_vec(&[masks.len(), 3, res, res], data).expect("mask shape")
}

/// `l2_weight · masked MSE + percp_weight · perceptual(pred ⊙ m, target ⊙ m)`.
/// Both images are masked before any term, so hidden pixels receive no gradient.
pub fn masked_objective_graph<T: Real>(
    g: &mut Graph<T>,
    fx: &FeatureExtractor<T>,
    pred: Var,
    target: Var,
    mask: Var,
    l2_weight: f64,
    percp_weight: f64,
) -> Var {
    let visible = g.value(mask).sum();
    let pm = g.mul(pred, mask);
    let tm = g.mul(target, mask);
    let d = g.sub(pm, tm);
    let sq = g.square(d);
    let sse = g.sum(sq);
    let mse = g.scale(sse, T::one() / visible.max(T::one()));
    let mut total = g.scale(mse, T::lit(l2_weight));
    if percp_weight != 0.0 {
        let p = fx.distance_graph(g, pm, tm);
        let p = g.scale(p, T::lit(percp_weight));
        total = g.add(total, p);
    }
    total
}

/// PSNR (dB, unit data range) over visible pixels.
pub fn masked_psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, mask: &[bool]) -> f64 {
    let plane = mask.len();
    let (mut se, mut n) = (0.0, 0usize);
    for c in 0..3 {
        for (p, &m) in mask.iter().enumerate() {
            if m {
                let d = a.data()[c * plane + p].to_f64_lossy() - b.data()[c * plane + p].to_f64_lossy();
                se += d * d;
                n += 1;
            }
        }
    }
    let mse = se / n.max(1) as f64;
    if mse < 1e-10 {
        99.0
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

struct Objective<'a, T> {
    gen: &'a Generator<T>,
    fx: &'a FeatureExtractor<T>,
    target: Tensor<T>,
    mask: Tensor<T>,
    opts: &'a InversionOptions,
}

impl<T: Real> Objective<'_, T> {
    fn eval(&self, w: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.gen.params.bind(&mut g, |_| false);
        let wv = g.param(w.clone());
        let styles: Vec<Var> = (0..w.dim(0)).map(|i| g.slice_batch(wv, i, 1)).collect();
        let img = self.gen.synthesize_graph(&mut g, &p, &styles)?;
        let t = g.constant(self.target.clone());
        let m = g.constant(self.mask.clone());
        let loss = masked_objective_graph(&mut g, self.fx, img, t, m, self.opts.l2_weight, self.opts.percp_weight);
        let value = g.item(loss).to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("inversion objective {value}")));
        }
        let mut grads = g.backward(loss);
        Ok((value, grads.take(wv).expect("W+ gradient")))
    }
}

/// Gradient of the inversion objective with respect to W+ (for tests and diagnostics).
pub fn objective_gradient<T: Real>(
    target: &TextureSample<T>,
    gen: &Generator<T>,
    fx: &FeatureExtractor<T>,
    opts: &InversionOptions,
    w: &WPlus<T>,
) -> Result<(f64, Tensor<T>)> {
    objective(target, gen, fx, opts)?.eval(&w.0)
}

fn objective<'a, T: Real>(
    target: &TextureSample<T>,
    gen: &'a Generator<T>,
    fx: &'a FeatureExtractor<T>,
    opts: &'a InversionOptions,
) -> Result<Objective<'a, T>> {
    let r = gen.cfg.output_res;
    if target.resolution != r || target.image.shape() != [3, r, r] {
        return Err(Error::Resolution(target.resolution));
    }
    Ok(Objective {
        gen,
        fx,
        target: target.image.clone().reshape(&[1, 3, r, r])?,
        mask: mask3(&[&target.mask], r),
        opts,
    })
}

/// Heavy-ball descent on W+ from `init`. With backtracking a step that raises
/// the loss is discarded, the velocity reset and the step size halved, so
/// the recorded curve never increases.
pub fn invert_wplus<T: Real>(
    target: &TextureSample<T>,
    gen: &Generator<T>,
    fx: &FeatureExtractor<T>,
    opts: &InversionOptions,
    init: &WPlus<T>,
) -> Result<InversionResult<T>> {
    gen.check_wplus(&[init])?;
    let obj = objective(target, gen, fx, opts)?;
    let mut w = init.0.clone();
    let (mut loss, mut grad) = obj.eval(&w)?;
    let mut curve = vec![loss];
    let mut vel = Tensor::<T>::zeros(w.shape());
    let mut lr = opts.step_size;
    let mu = T::lit(opts.momentum);
    for _ in 0..opts.iterations {
        let step = T::lit(lr);
        let cand_vel = vel.zip_map(&grad, |v, gr| mu * v - step * gr)?;
        let cand = w.zip_map(&cand_vel, |a, b| a + b)?;
        let (cl, cg) = obj.eval(&cand)?;
        if !opts.backtracking || cl <= loss {
            w = cand;
            vel = cand_vel;
            loss = cl;
            grad = cg;
            lr *= opts.growth;
        } else {
            vel = Tensor::zeros(w.shape());
            lr *= 0.5;
        }
        curve.push(loss);
    }
    Ok(InversionResult { w_plus: WPlus(w), final_loss: loss, iterations: opts.iterations, loss_curve: curve })
}

/// Inverted latents of a set of phone captures.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertedSet<T> {
    pub entries: BTreeMap<u64, WPlus<T>>,
    pub source_manifest_hash: String,
    pub psnr: BTreeMap<u64, f64>,
    pub final_loss: BTreeMap<u64, f64>,
    /// Items whose optimization failed; their entry holds the initialization.
    pub failures: BTreeMap<u64, String>,
}

impl<T: Real> InvertedSet<T> {
    pub fn median_psnr(&self) -> f64 {
        let mut v: Vec<f64> = self.psnr.values().copied().collect();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    /// Membership by exact equality of the stored latent.
    pub fn contains(&self, w: &WPlus<T>) -> bool {
        self.entries.values().any(|e| e == w)
    }
}

#[derive(Serialize, Deserialize)]
struct InvertedMeta {
    source_manifest_hash: String,
    psnr: BTreeMap<u64, f64>,
    final_loss: BTreeMap<u64, f64>,
    failures: BTreeMap<u64, String>,
}

impl<T: Real> InvertedSet<T> {
    /// One array `w.<id>` per identity; bookkeeping goes into the header.
    pub fn store(&self, ck: &mut Checkpoint) -> Result<()> {
        for (id, w) in &self.entries {
            ck.insert(format!("w.{id}"), &w.0);
        }
        let meta = InvertedMeta {
            source_manifest_hash: self.source_manifest_hash.clone(),
            psnr: self.psnr.clone(),
            final_loss: self.final_loss.clone(),
            failures: self.failures.clone(),
        };
        ck.set_meta("inverted", &meta)
    }

    pub fn restore(ck: &Checkpoint) -> Result<Self> {
        let m: InvertedMeta = ck.meta_field("inverted")?;
        let mut entries = BTreeMap::new();
        for (name, t) in ck.params::<T>("w.").iter() {
            let id = name.parse::<u64>().map_err(|_| Error::Format(format!("bad latent name w.{name}")))?;
            entries.insert(id, WPlus(t.clone()));
        }
        Ok(Self { entries, source_manifest_hash: m.source_manifest_hash, psnr: m.psnr, final_loss: m.final_loss, failures: m.failures })
    }
}

/// Inverts every sample in `ids`. Individual failures are recorded; the whole
/// batch fails when more than `max_failure_fraction` of items fail.
pub fn build_inverted_set<T: Real>(
    samples: &BTreeMap<u64, TextureSample<T>>,
    ids: &[u64],
    gen: &Generator<T>,
    fx: &FeatureExtractor<T>,
    opts: &InversionOptions,
    source_manifest_hash: &str,
) -> Result<InvertedSet<T>> {
    let init = gen.mean_wplus(opts.init_samples, opts.init_seed)?;
    let mut set = InvertedSet {
        entries: BTreeMap::new(),
        source_manifest_hash: source_manifest_hash.to_string(),
        psnr: BTreeMap::new(),
        final_loss: BTreeMap::new(),
        failures: BTreeMap::new(),
    };
    for &id in ids {
        let target = samples.get(&id).ok_or_else(|| Error::Invalid(format!("no phone sample for identity {id}")))?;
        match invert_wplus(target, gen, fx, opts, &init) {
            Ok(res) => {
                let img = gen.synthesize(&[&res.w_plus])?;
                set.psnr.insert(id, masked_psnr(&img, &target.image, &target.mask));
                set.final_loss.insert(id, res.final_loss);
                set.entries.insert(id, res.w_plus);
            }
            Err(e) => {
                log::warn!("inversion of identity {id} failed: {e}");
                set.failures.insert(id, e.to_string());
                set.entries.insert(id, init.clone());
            }
        }
    }
    let allowed = opts.max_failure_fraction * ids.len() as f64;
    if set.failures.len() as f64 > allowed {
        let list: Vec<String> = set.failures.iter().map(|(id, e)| format!("{id}: {e}")).collect();
        return Err(Error::NonFinite(format!("{} of {} inversions failed: {}", set.failures.len(), ids.len(), list.join("; "))));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::GenConfig;

    fn small_gen() -> Generator<f64> {
        let cfg = GenConfig { output_res: 16, z_dim: 8, w_dim: 8, mapping_layers: 2, channels: vec![8, 8, 4] };
        Generator::new(cfg, 1).unwrap()
    }

    fn sample(img: Tensor<f64>, mask: Vec<bool>) -> TextureSample<f64> {
        TextureSample {
            identity_id: 0,
            condition: crate::synthtex::LightingCondition::studio(),
            resolution: img.dim(1),
            image: img,
            mask,
        }
    }

    #[test]
    fn zero_budget_returns_the_initialization() {
        let gen = small_gen();
        let fx = FeatureExtractor::new(0);
        let init = gen.mean_wplus(16, 0).unwrap();
        let t = sample(Tensor::full(&[3, 16, 16], 0.5), vec![true; 256]);
        let opts = InversionOptions { iterations: 0, ..Default::default() };
        let r = invert_wplus(&t, &gen, &fx, &opts, &init).unwrap();
        assert_eq!(r.w_plus, init);
        assert_eq!(r.loss_curve.len(), 1);
        assert_eq!(r.final_loss, r.loss_curve[0]);
    }

    #[test]
    fn hidden_pixels_do_not_affect_the_gradient() {
        let gen = small_gen();
        let fx = FeatureExtractor::new(0);
        let w = gen.mean_wplus(16, 0).unwrap();
        let mask: Vec<bool> = (0..256).map(|p| p % 16 >= 3).collect();
        let mut a = Tensor::full(&[3, 16, 16], 0.4);
        let mut b = a.clone();
        for c in 0..3 {
            for p in 0..256 {
                if !mask[p] {
                    a.data_mut()[c * 256 + p] = 0.9;
                    b.data_mut()[c * 256 + p] = ((p * 7 + c) % 11) as f64 / 11.0;
                }
            }
        }
        let opts = InversionOptions::default();
        let (la, ga) = objective_gradient(&sample(a, mask.clone()), &gen, &fx, &opts, &w).unwrap();
        let (lb, gb) = objective_gradient(&sample(b, mask), &gen, &fx, &opts, &w).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn realizable_target_is_recovered_with_monotone_curve() {
        let gen = small_gen();
        let fx = FeatureExtractor::new(0);
        let mut w0 = gen.mean_wplus(64, 3).unwrap();
        for (i, v) in w0.0.data_mut().iter_mut().enumerate() {
            *v += 0.3 * ((i as f64 * 1.7).sin());
        }
        let img = gen.synthesize(&[&w0]).unwrap().reshape(&[3, 16, 16]).unwrap();
        let t = sample(img.clone(), vec![true; 256]);
        let opts = InversionOptions { iterations: 150, ..Default::default() };
        let r = invert_wplus(&t, &gen, &fx, &opts, &gen.mean_wplus(64, 9).unwrap()).unwrap();
        assert!(r.loss_curve.windows(2).all(|p| p[1] <= p[0]));
        let out = gen.synthesize(&[&r.w_plus]).unwrap();
        let mse = out.data().iter().zip(img.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 768.0;
        assert!(mse <= 1e-3, "mse {mse}");
        assert!(r.final_loss < r.loss_curve[0]);
    }
}
