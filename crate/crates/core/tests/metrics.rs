use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use texbridge_core::metrics::*;
use texbridge_core::netcore::{embedding_distance, EmbedderConfig, FeatureExtractor, IdentityEmbedder};
use texbridge_core::synthtex::{embedder_corpus, make_identity, Expression, LightingCondition, World};
use texbridge_core::{Error, Tensor};

fn noise(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn world(res: usize) -> World {
    World { lr: res, hr: 2 * res }
}

fn wild(id: u64, rng: &mut ChaCha8Rng, res: usize) -> Tensor<f32> {
    world(res).render(&make_identity(id), &LightingCondition::random_wild(rng), &[], Expression::NEUTRAL, res).unwrap().image
}

fn studio(id: u64, res: usize) -> Tensor<f32> {
    world(res).render(&make_identity(id), &LightingCondition::studio(), &[], Expression::NEUTRAL, res).unwrap().image
}

#[test]
fn psnr_of_uniform_error() {
    let a = noise(&[3, 16, 16], 1, 0.2, 0.8);
    let b = a.map(|v| v + 0.1);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 20.0).abs() < 1e-9, "{p}");
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let a = noise(&[3, 16, 16], 2, 0.0, 1.0);
    let n = noise(&[3, 16, 16], 3, -1.0, 1.0);
    let mut last = f64::INFINITY;
    for amp in [0.001, 0.01, 0.05, 0.1, 0.3] {
        let b = a.zip_map(&n, |x, e| x + amp * e).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_cases() {
    let a = noise(&[3, 16, 16], 4, 0.0, 1.0);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let bin = a.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let inv = bin.map(|v| 1.0 - v);
    assert!(ssim(&bin, &inv).unwrap() < 0.5);
    assert!(matches!(ssim(&a, &noise(&[3, 16, 8], 0, 0.0, 1.0)), Err(Error::Shape(_))));

    let b = a.zip_map(&noise(&[3, 16, 16], 5, -0.05, 0.05), |x, e| x + e).unwrap();
    let base = ssim(&a, &b).unwrap();
    let shifted = ssim(&a.map(|v| v + 0.2), &b.map(|v| v + 0.2)).unwrap();
    assert!((base - shifted).abs() < 1e-3, "{base} vs {shifted}");
}

fn embedder() -> IdentityEmbedder<f32> {
    let c = embedder_corpus(99, 40, 8, 2, 64).unwrap();
    IdentityEmbedder::pretrain(EmbedderConfig::default(), (&c.train_images, &c.train_labels), (&c.heldout_images, &c.heldout_labels))
        .unwrap()
        .0
}

#[test]
fn faceid_distance_properties() {
    let emb = embedder();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ids: Vec<u64> = (5000..5012).collect();
    let a: Vec<Tensor<f32>> = ids.iter().map(|&i| wild(i, &mut rng, 64)).collect();
    let b: Vec<Tensor<f32>> = ids.iter().map(|&i| wild(i, &mut rng, 64)).collect();
    let mut same = 0.0;
    let mut cross = 0.0;
    for i in 0..ids.len() {
        assert!(faceid_distance(&a[i], &a[i], &emb).unwrap().abs() < 1e-9);
        for j in 0..ids.len() {
            let d = faceid_distance(&a[i], &b[j], &emb).unwrap();
            assert!((0.0..=4.0 + 1e-6).contains(&d));
            if i == j {
                same += d;
            } else {
                cross += d;
            }
        }
    }
    let n = ids.len() as f64;
    let (same, cross) = (same / n, cross / (n * (n - 1.0)));
    eprintln!("same-identity {same:.4}, cross-identity {cross:.4}");
    assert!(same < cross);
}

#[test]
fn kid_on_identical_and_constant_sets() {
    let fx = FeatureExtractor::<f64>::new(7);
    let set: Vec<Tensor<f64>> = (0..6).map(|s| noise(&[3, 16, 16], 10 + s, 0.0, 1.0)).collect();
    assert!(kid(&set, &set, &fx).unwrap().abs() <= 1e-6);
    let zeros = vec![Tensor::<f64>::zeros(&[3, 16, 16]); 4];
    let ones = vec![Tensor::<f64>::full(&[3, 16, 16], 1.0); 4];
    assert!(kid(&zeros, &ones, &fx).unwrap() > 0.0);
    assert!(kid(&zeros[..1], &ones, &fx).is_err());
}

#[test]
fn kid_is_stable_across_half_splits() {
    let fx = FeatureExtractor::<f32>::new(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let phone: Vec<Tensor<f32>> = (0..200).map(|i| wild(7000 + i, &mut rng, 32)).collect();
    let stud: Vec<Tensor<f32>> = (0..200).map(|i| studio(9000 + i, 32)).collect();
    let k1 = kid(&phone[..100], &stud[..100], &fx).unwrap();
    let k2 = kid(&phone[100..], &stud[100..], &fx).unwrap();
    eprintln!("half-split KID {k1:.5} vs {k2:.5}");
    assert!(k1 > 0.0 && k2 > 0.0);
    assert!((k1 - k2).abs() <= 0.1 * k1.max(k2), "{k1} vs {k2}");
}

#[test]
fn paired_and_unpaired_drivers() {
    let emb = embedder();
    let fx = FeatureExtractor::<f32>::new(7);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ids: Vec<u64> = (6000..6004).collect();
    let phone: BTreeMap<u64, Tensor<f32>> = ids.iter().map(|&i| (i, wild(i, &mut rng, 64))).collect();
    let gt: BTreeMap<u64, Tensor<f32>> = ids.iter().map(|&i| (i, studio(i, 64))).collect();
    let studio_set: Vec<Tensor<f32>> = (0..8).map(|i| studio(8000 + i, 64)).collect();
    let training: BTreeSet<u64> = (0..100).collect();

    let base = evaluate_paired("identity", &phone, &gt, &fx, &training).unwrap();
    assert!(base.rows.iter().all(|r| r.psnr.is_finite() && r.psnr < PSNR_CAP && r.ssim < 1.0 && r.percp > 0.0 && r.dists_proxy > 0.0));
    let n = base.rows.len() as f64;
    assert_eq!(base.mean.psnr, base.rows.iter().map(|r| r.psnr).sum::<f64>() / n);
    assert_eq!(base.mean.percp, base.rows.iter().map(|r| r.percp).sum::<f64>() / n);

    let oracle = evaluate_paired("ground_truth", &gt, &gt, &fx, &training).unwrap();
    assert!(oracle.rows.iter().all(|r| r.psnr == PSNR_CAP));

    let un = evaluate_unpaired("ground_truth", &gt, &phone, &studio_set, &emb, &fx, &training).unwrap();
    for r in &un.rows {
        let (es, ep) = (emb.embed(&gt[&r.id]).unwrap(), emb.embed(&phone[&r.id]).unwrap());
        assert!((r.faceid - embedding_distance(&es[0], &ep[0]) as f64).abs() < 1e-9);
    }
    let again = evaluate_unpaired("ground_truth", &gt, &phone, &studio_set, &emb, &fx, &training).unwrap();
    assert_eq!(serde_json::to_string(&un).unwrap(), serde_json::to_string(&again).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let files = write_reports(dir.path(), &[base.clone(), oracle], &[un]).unwrap();
    let md = std::fs::read_to_string(dir.path().join("summary.md")).unwrap();
    assert!(md.contains(PERCP_LABEL) && md.contains(KID_FOOTNOTE));
    let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    write_reports(dir.path(), &[base, evaluate_paired("ground_truth", &gt, &gt, &fx, &training).unwrap()], &[again]).unwrap();
    for (f, b) in files.iter().zip(bytes) {
        assert_eq!(std::fs::read(f).unwrap(), b, "{f:?} changed on rerun");
    }

    let tainted: BTreeSet<u64> = [6002].into();
    assert!(matches!(evaluate_paired("x", &phone, &gt, &fx, &tainted), Err(Error::Contamination(_))));
    assert!(matches!(evaluate_unpaired("x", &gt, &phone, &studio_set, &emb, &fx, &tainted), Err(Error::Contamination(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000, amp in 0.0f64..0.5) {
        let a = noise(&[3, 12, 12], s1, 0.0, 1.0);
        let b = a.zip_map(&noise(&[3, 12, 12], s2 + 1000, -1.0, 1.0), |x, e| x + amp * e).unwrap();
        let (sab, sba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((sab - sba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&sab));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!(psnr(&a, &b).unwrap() <= PSNR_CAP);
    }

    #[test]
    fn kid_is_symmetric_in_its_sets(seed in 0u64..500, m in 2usize..6, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = |k: usize| -> Vec<Vec<f64>> { (0..k).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        let (a, b) = (feats(m), feats(n));
        let (ab, ba) = (kid_features(&a, &b).unwrap(), kid_features(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-10 * (1.0 + ab.abs()));
    }
}
