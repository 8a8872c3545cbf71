use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texbridge_core::inversion::InvertedSet;
use texbridge_core::netcore::{DiscConfig, Discriminator, EmbedderConfig, FeatureExtractor, GenConfig, Generator, IdentityEmbedder, WPlus};
use texbridge_core::studio_finetune::{finetune_step, run_finetune, FinetuneConfig, FinetuneContext, FinetuneState, LatentSource};
use texbridge_core::tensor::Tensor;

struct Nets {
    gen: Generator<f32>,
    disc: Discriminator<f32>,
    emb: IdentityEmbedder<f32>,
    fx: FeatureExtractor<f32>,
    inv: InvertedSet<f32>,
    studio: Vec<Tensor<f32>>,
    paired: BTreeMap<u64, Tensor<f32>>,
}

fn nets() -> Nets {
    let gen = Generator::new(GenConfig { output_res: 16, z_dim: 8, w_dim: 8, mapping_layers: 1, channels: vec![8, 8, 4] }, 1).unwrap();
    let disc = Discriminator::new(DiscConfig { input_res: 16, channels: vec![8, 8, 4] }, 2).unwrap();
    let emb = IdentityEmbedder::new(EmbedderConfig { input_res: 16, dim: 8, channels: [4, 4, 4], ..Default::default() }, 3);
    let fx = FeatureExtractor::with_shape(4, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut entries = BTreeMap::new();
    for id in 0..6u64 {
        entries.insert(id, WPlus(Tensor::randn(&[gen.n_layers(), 8], 1.0, &mut rng)));
    }
    let inv = InvertedSet { entries, source_manifest_hash: "x".into(), psnr: BTreeMap::new(), final_loss: BTreeMap::new(), failures: BTreeMap::new() };
    let studio: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::<f32>::randn(&[3, 16, 16], 0.2, &mut rng).map(|v: f32| (v + 0.5).clamp(0.0, 1.0))).collect();
    let paired = (0..2u64).map(|id| (id, studio[id as usize].clone())).collect();
    Nets { gen, disc, emb, fx, inv, studio, paired }
}

fn cfg() -> FinetuneConfig {
    FinetuneConfig { steps: 5, batch: 2, paired_batch: 2, paired_ids: vec![0, 1], ..Default::default() }
}

#[test]
fn frozen_parameters_stay_bitwise_identical() {
    let n = nets();
    let ctx = FinetuneContext::new(&n.gen, &n.emb, &n.fx, &n.inv, n.studio.clone(), n.paired.clone()).unwrap();
    let c = cfg();
    let (state, log) = run_finetune(&n.gen, &n.disc, &ctx, &c).unwrap();
    assert_eq!(log.len(), 5);
    assert!(!state.partition.frozen.is_empty());
    for name in &state.partition.frozen {
        assert_eq!(state.g.params.get(name).unwrap(), n.gen.params.get(name).unwrap(), "{name} moved");
    }
    let moved = state.partition.trainable.iter().filter(|k| state.g.params.get(k).unwrap() != n.gen.params.get(k).unwrap()).count();
    assert!(moved > 0);
}

#[test]
fn breakdown_total_recombines_terms() {
    let n = nets();
    let ctx = FinetuneContext::new(&n.gen, &n.emb, &n.fx, &n.inv, n.studio.clone(), n.paired.clone()).unwrap();
    let c = cfg();
    let mut st = FinetuneState::new(&n.gen, &n.disc, &c).unwrap();
    for _ in 0..3 {
        let lb = finetune_step(&mut st, &ctx, &c).unwrap();
        let expect = lb.adv_d + lb.r1 + lb.adv_g + lb.percp_recons + 0.5 * lb.percp + 10.0 * lb.faceid;
        assert!((lb.total - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        assert!(lb.percp_recons > 0.0);
        for w in &st.last_latents {
            assert!(n.inv.contains(w));
        }
    }
}

#[test]
fn z_space_and_unpaired_variants_run() {
    let n = nets();
    let ctx = FinetuneContext::new(&n.gen, &n.emb, &n.fx, &n.inv, n.studio.clone(), BTreeMap::new()).unwrap();
    let c = FinetuneConfig { latent_source: LatentSource::ZSpace, paired_ids: vec![], freeze_upto: None, ..cfg() };
    let (state, log) = run_finetune(&n.gen, &n.disc, &ctx, &c).unwrap();
    assert!(log.iter().all(|l| l.percp_recons == 0.0 && l.total.is_finite()));
    assert!(state.partition.frozen.iter().all(|k| k.starts_with("mapping.")));
}

#[test]
fn deterministic_under_seed() {
    let n = nets();
    let ctx = FinetuneContext::new(&n.gen, &n.emb, &n.fx, &n.inv, n.studio.clone(), n.paired.clone()).unwrap();
    let a = run_finetune(&n.gen, &n.disc, &ctx, &cfg()).unwrap().1;
    let b = run_finetune(&n.gen, &n.disc, &ctx, &cfg()).unwrap().1;
    assert_eq!(a, b);
}

#[test]
fn zero_weights_reduce_to_pure_adversarial_finetuning() {
    let n = nets();
    let c = FinetuneConfig { lambda1: 0.0, lambda2: 0.0, paired_ids: vec![], ..cfg() };
    let ctx = FinetuneContext::new(&n.gen, &n.emb, &n.fx, &n.inv, n.studio.clone(), BTreeMap::new()).unwrap();
    let (sa, la) = run_finetune(&n.gen, &n.disc, &ctx, &c).unwrap();
    for lb in &la {
        assert_eq!(lb.percp_recons, 0.0);
        assert!((lb.total - (lb.adv_d + lb.r1 + lb.adv_g)).abs() <= 1e-12 * lb.total.abs().max(1.0));
    }
    // the identity and perceptual networks no longer influence training
    let emb2 = IdentityEmbedder::new(EmbedderConfig { input_res: 16, dim: 8, channels: [4, 4, 4], ..Default::default() }, 99);
    let fx2 = FeatureExtractor::with_shape(98, 2, 4);
    let ctx2 = FinetuneContext::new(&n.gen, &emb2, &fx2, &n.inv, n.studio.clone(), BTreeMap::new()).unwrap();
    let (sb, lb) = run_finetune(&n.gen, &n.disc, &ctx2, &c).unwrap();
    assert_eq!(sa.g.params, sb.g.params);
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.adv_d, x.r1, x.adv_g), (y.adv_d, y.r1, y.adv_g));
    }
}

#[test]
fn loss_term_examples() {
    use texbridge_core::studio_finetune::{loss_faceid, loss_percp, loss_percp_recons};
    let n = nets();
    let (a, b) = (&n.studio[0], &n.studio[1]);
    assert_eq!(loss_percp(a, a, &n.fx).unwrap(), 0.0);
    assert_eq!(loss_percp(a, b, &n.fx).unwrap(), loss_percp(b, a, &n.fx).unwrap());
    assert!(loss_percp(a, b, &n.fx).unwrap() > 0.0);
    assert!(loss_faceid(a, a, &n.emb).unwrap().abs() < 1e-9);
    let f = loss_faceid(a, b, &n.emb).unwrap();
    assert!((0.0..=4.0).contains(&f));

    let (w0, w1) = (&n.inv.entries[&0], &n.inv.entries[&1]);
    let (g0, g1) = (&n.paired[&0], &n.paired[&1]);
    let both = loss_percp_recons(&[w0, w1], &n.gen, &[g0, g1], &n.fx).unwrap();
    let one = loss_percp_recons(&[w0], &n.gen, &[g0], &n.fx).unwrap();
    let two = loss_percp_recons(&[w1], &n.gen, &[g1], &n.fx).unwrap();
    assert!((both - 0.5 * (one + two)).abs() < 1e-6 * both);
    let out = n.gen.synthesize(&[w0]).unwrap().index0(0);
    assert_eq!(loss_percp_recons(&[w0], &n.gen, &[&out], &n.fx).unwrap(), 0.0);
}
