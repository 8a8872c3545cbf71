//! Adversarial finetuning of the phone generator into the studio generator,
//! with identity, perceptual and paired reconstruction terms, an R1 penalty
//! on the discriminator and resolution-based freezing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::inversion::InvertedSet;
use crate::netcore::{partition_trainables, split_layers, Discriminator, FeatureExtractor, Generator, IdentityEmbedder, LatentZ, Partition, WPlus};
use crate::params::{accumulate_grads, Adam, Bound, GradMap};
use crate::phone_gan::hinge_d_graph;
use crate::scalar::{Dual, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentSource {
    WPlusSet,
    ZSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma_r1: f64,
    /// Highest frozen synthesis resolution; `None` trains everything.
    /// Serialized as a plain integer with `0` standing for `None`.
    #[serde(with = "zero_is_none")]
    pub freeze_upto: Option<usize>,
    pub latent_source: LatentSource,
    /// Paired ids used by the reconstruction term; empty drops the term.
    pub paired_ids: Vec<u64>,
    pub steps: usize,
    pub batch: usize,
    pub paired_batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 10.0,
            gamma_r1: 10.0,
            freeze_upto: Some(8),
            latent_source: LatentSource::WPlusSet,
            paired_ids: Vec::new(),
            steps: 150,
            batch: 4,
            paired_batch: 4,
            lr_g: 2e-3,
            lr_d: 2e-3,
            seed: 0,
        }
    }
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let v = usize::deserialize(d)?;
        Ok((v != 0).then_some(v))
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.gamma_r1 < 0.0 {
            return Err(Error::Invalid("loss weights must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_g: f64,
    pub adv_d: f64,
    pub r1: f64,
    pub percp: f64,
    pub faceid: f64,
    pub percp_recons: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Discriminator objective plus generator objective with the configured weights.
    pub fn recombine(&self, cfg: &FinetuneConfig) -> f64 {
        self.adv_d + self.r1 + self.adv_g + self.percp_recons + cfg.lambda1 * self.percp + cfg.lambda2 * self.faceid
    }

    pub const CSV_HEADER: &'static str = "step,adv_g,adv_d,r1,percp,faceid,percp_recons,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.adv_g, self.adv_d, self.r1, self.percp, self.faceid, self.percp_recons, self.total
        )
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossBreakdown]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", LossBreakdown::CSV_HEADER)?;
    for (i, r) in rows.iter().enumerate() {
        writeln!(f, "{}", r.csv_row(i))?;
    }
    Ok(())
}

/// Hinge losses from logits: `d = mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`,
/// `g = −mean(D(fake))`.
pub fn hinge_losses(real_logits: &[f64], fake_logits: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let d = mean(&real_logits.iter().map(|r| (1.0 - r).max(0.0)).collect::<Vec<_>>())
        + mean(&fake_logits.iter().map(|f| (1.0 + f).max(0.0)).collect::<Vec<_>>());
    (d, -mean(fake_logits))
}

/// `(d_loss, g_loss)` of the hinge objective for image batches.
pub fn loss_adv<T: Real>(d: &Discriminator<T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<(f64, f64)> {
    let lr: Vec<f64> = d.logits(real)?.iter().map(|v| v.to_f64_lossy()).collect();
    let lf: Vec<f64> = d.logits(fake)?.iter().map(|v| v.to_f64_lossy()).collect();
    Ok(hinge_losses(&lr, &lf))
}

/// `∇ₓ Σᵢ f(x)ᵢ` for a critic `f` mapping a batch to per-image scores.
pub fn critic_input_grad<T: Real>(real: &Tensor<T>, f: impl Fn(&mut Graph<T>, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.param(real.clone());
    let out = f(&mut g, x)?;
    let s = g.sum(out);
    Ok(g.backward(s).take(x).expect("input gradient"))
}

/// Per-image input gradients `∇ₓ D(x)` of a batch.
pub fn disc_input_grad<T: Real>(d: &Discriminator<T>, real: &Tensor<T>) -> Result<Tensor<T>> {
    critic_input_grad(real, |g, x| {
        let p = d.params.bind(g, |_| false);
        d.forward_graph(g, &p, x)
    })
}

/// `(γ/2) · mean over the batch of ‖∇ₓ f(x)‖²` for any critic.
pub fn r1_of<T: Real>(real: &Tensor<T>, gamma: f64, f: impl Fn(&mut Graph<T>, Var) -> Result<Var>) -> Result<f64> {
    let gx = critic_input_grad(real, f)?;
    let n = real.dim(0) as f64;
    Ok(0.5 * gamma * gx.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / n)
}

/// `(γ/2) · mean over the batch of ‖∇ₓ D(x)‖²`.
pub fn loss_r1<T: Real>(d: &Discriminator<T>, real: &Tensor<T>, gamma: f64) -> Result<f64> {
    r1_of(real, gamma, |g, x| {
        let p = d.params.bind(g, |_| false);
        d.forward_graph(g, &p, x)
    })
}

/// R1 value and its gradient with respect to the discriminator parameters.
///
/// With `g = ∇ₓ Σ D(x)` held fixed, `∇_θ R1 = (γ/N) ∂/∂ε ∇_θ Σ D(x + ε g)`
/// at `ε = 0`; the ε-derivative is carried by dual numbers through one more
/// reverse pass.
pub fn r1_with_grads<T: Real>(d: &Discriminator<T>, real: &Tensor<T>, gamma: f64) -> Result<(f64, GradMap<T>)> {
    let gx = disc_input_grad(d, real)?;
    let n = real.dim(0) as f64;
    let value = 0.5 * gamma * gx.data().iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / n;
    if gamma == 0.0 {
        return Ok((0.0, GradMap::new()));
    }
    let dd = Discriminator::<Dual<T>> { cfg: d.cfg.clone(), params: d.params.to_dual() };
    let xd = real.zip_map_into(&gx, |re, eps| Dual { re, eps })?;
    let mut g = Graph::<Dual<T>>::new();
    let p = dd.params.bind(&mut g, |_| true);
    let x = g.constant(xd);
    let out = dd.forward_graph(&mut g, &p, x)?;
    let s = g.sum(out);
    let grads = g.backward(s);
    let scale = T::lit(gamma / n);
    let out = p.collect(&grads).into_iter().map(|(k, t)| (k, t.map_into(|v| v.eps * scale))).collect();
    Ok((value, out))
}

/// Batch mean of squared embedding distances; `phone` is treated as a constant target.
pub fn faceid_graph<T: Real>(g: &mut Graph<T>, emb: &IdentityEmbedder<T>, ep: &Bound, studio: Var, phone: Var) -> Var {
    let a = emb.embed_graph(g, ep, studio);
    let b = emb.embed_graph(g, ep, phone);
    let d = g.sub(a, b);
    let d = g.square(d);
    let s = g.sum(d);
    let n = g.shape(studio)[0];
    g.scale(s, T::one() / T::from_usize(n).unwrap())
}

pub fn loss_faceid<T: Real>(studio: &Tensor<T>, phone: &Tensor<T>, emb: &IdentityEmbedder<T>) -> Result<f64> {
    let mut g = Graph::new();
    let ep = emb.params.bind(&mut g, |_| false);
    let a = g.constant(batch4(studio)?);
    let b = g.constant(batch4(phone)?);
    let l = faceid_graph(&mut g, emb, &ep, a, b);
    Ok(g.item(l).to_f64_lossy())
}

pub fn loss_percp<T: Real>(studio: &Tensor<T>, phone: &Tensor<T>, fx: &FeatureExtractor<T>) -> Result<f64> {
    Ok(fx.distance(studio, phone)?.to_f64_lossy())
}

/// Mean perceptual distance between `G_studio(W+_i)` and the paired studio
/// ground truth; zero (term dropped) for an empty paired set.
pub fn loss_percp_recons<T: Real>(w: &[&WPlus<T>], gen: &Generator<T>, gt: &[&Tensor<T>], fx: &FeatureExtractor<T>) -> Result<f64> {
    if w.len() != gt.len() {
        return Err(Error::Invalid(format!("{} latents for {} paired targets", w.len(), gt.len())));
    }
    if w.is_empty() {
        return Ok(0.0);
    }
    let out = gen.synthesize(w)?;
    let gtb = Tensor::stack(&gt.iter().map(|t| (*t).clone()).collect::<Vec<_>>())?;
    Ok(fx.distance(&out, &gtb)?.to_f64_lossy())
}

fn batch4<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.shape().len() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)
        }
        4 => Ok(x.clone()),
        _ => Err(Error::Shape(format!("expected image or batch, got {:?}", x.shape()))),
    }
}

/// Everything the finetuning loop reads but never modifies.
pub struct FinetuneContext<'a, T> {
    pub g_phone: &'a Generator<T>,
    pub emb: &'a IdentityEmbedder<T>,
    pub fx: &'a FeatureExtractor<T>,
    pub inverted: &'a InvertedSet<T>,
    /// `G_phone(w)` for every inverted latent.
    pub phone_cache: BTreeMap<u64, Tensor<T>>,
    /// Studio training images `[3, R, R]`.
    pub studio_reals: Vec<Tensor<T>>,
    /// Ground-truth studio textures of the paired ids.
    pub paired_gt: BTreeMap<u64, Tensor<T>>,
}

impl<'a, T: Real> FinetuneContext<'a, T> {
    pub fn new(
        g_phone: &'a Generator<T>,
        emb: &'a IdentityEmbedder<T>,
        fx: &'a FeatureExtractor<T>,
        inverted: &'a InvertedSet<T>,
        studio_reals: Vec<Tensor<T>>,
        paired_gt: BTreeMap<u64, Tensor<T>>,
    ) -> Result<Self> {
        let ids: Vec<u64> = inverted.entries.keys().copied().collect();
        let mut phone_cache = BTreeMap::new();
        for chunk in ids.chunks(16) {
            let ws: Vec<&WPlus<T>> = chunk.iter().map(|id| &inverted.entries[id]).collect();
            let imgs = g_phone.synthesize(&ws)?;
            for (i, id) in chunk.iter().enumerate() {
                phone_cache.insert(*id, imgs.index0(i));
            }
        }
        for id in paired_gt.keys() {
            if !inverted.entries.contains_key(id) {
                return Err(Error::Invalid(format!("paired id {id} has no inverted latent")));
            }
        }
        if studio_reals.is_empty() {
            return Err(Error::Invalid("no studio images to finetune against".into()));
        }
        Ok(Self { g_phone, emb, fx, inverted, phone_cache, studio_reals, paired_gt })
    }
}

pub struct FinetuneState<T> {
    pub g: Generator<T>,
    pub d: Discriminator<T>,
    pub partition: Partition,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    pub step: usize,
    rng: ChaCha8Rng,
    paired_cursor: usize,
    /// Latents drawn in the latest step.
    pub last_latents: Vec<WPlus<T>>,
}

impl<T: Real> FinetuneState<T> {
    /// Copies of the phone generator and discriminator, partitioned by `cfg.freeze_upto`.
    pub fn new(g_phone: &Generator<T>, d_phone: &Discriminator<T>, cfg: &FinetuneConfig) -> Result<Self> {
        cfg.validate()?;
        let partition = partition_trainables(&g_phone.params, &g_phone.cfg, cfg.freeze_upto)?;
        Ok(Self {
            g: g_phone.clone(),
            d: d_phone.clone(),
            partition,
            opt_g: Adam::new(cfg.lr_g, 0.0, 0.99),
            opt_d: Adam::new(cfg.lr_d, 0.0, 0.99),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            paired_cursor: 0,
            last_latents: Vec::new(),
        })
    }
}

fn check(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("finetune loss term `{name}` = {v}")))
    }
}

/// One discriminator update (hinge + R1) followed by one generator update
/// (adversarial + paired reconstruction + λ₁ perceptual + λ₂ identity).
pub fn finetune_step<T: Real>(state: &mut FinetuneState<T>, ctx: &FinetuneContext<T>, cfg: &FinetuneConfig) -> Result<LossBreakdown> {
    let r = state.g.cfg.output_res;
    let b = cfg.batch;
    // latents and their phone renders
    let (latents, phone_imgs): (Vec<WPlus<T>>, Tensor<T>) = match cfg.latent_source {
        LatentSource::WPlusSet => {
            let ids: Vec<u64> = ctx.inverted.entries.keys().copied().collect();
            if ids.is_empty() {
                return Err(Error::Invalid("inverted set is empty".into()));
            }
            let pick: Vec<u64> = (0..b).map(|_| ids[state.rng.gen_range(0..ids.len())]).collect();
            let ws: Vec<WPlus<T>> = pick.iter().map(|id| ctx.inverted.entries[id].clone()).collect();
            for w in &ws {
                assert!(ctx.inverted.contains(w), "latent outside the inverted set");
            }
            let imgs = Tensor::stack(&pick.iter().map(|id| ctx.phone_cache[id].clone()).collect::<Vec<_>>())?;
            (ws, imgs)
        }
        LatentSource::ZSpace => {
            let zs: Vec<LatentZ<T>> =
                (0..b).map(|_| LatentZ(Tensor::<T>::randn(&[state.g.cfg.z_dim], 1.0, &mut state.rng).into_data())).collect();
            // the mapping network is shared and frozen, so G_phone's mapping gives the same W
            let ws = ctx.g_phone.map_latent(&zs)?;
            let imgs = ctx.g_phone.synthesize(&ws.iter().collect::<Vec<_>>())?;
            (ws, imgs)
        }
    };
    let reals: Vec<Tensor<T>> = (0..b).map(|_| ctx.studio_reals[state.rng.gen_range(0..ctx.studio_reals.len())].clone()).collect();
    let real = Tensor::stack(&reals)?;
    let paired: Vec<u64> = if cfg.paired_ids.is_empty() {
        Vec::new()
    } else {
        let k = cfg.paired_ids.len();
        let n = cfg.paired_batch.min(k);
        let v = (0..n).map(|i| cfg.paired_ids[(state.paired_cursor + i) % k]).collect();
        state.paired_cursor = (state.paired_cursor + n) % k;
        v
    };

    // generator forward over the sampled and paired latents at once
    let mut all_w: Vec<&WPlus<T>> = latents.iter().collect();
    for id in &paired {
        all_w.push(ctx.inverted.entries.get(id).ok_or_else(|| Error::Invalid(format!("paired id {id} not inverted")))?);
    }
    let mut g = Graph::new();
    let trainable = &state.partition.trainable;
    let gp = state.g.params.bind(&mut g, |n| trainable.contains(n));
    let styles: Vec<Var> = split_layers(&all_w).into_iter().map(|t| g.constant(t)).collect();
    let out = state.g.synthesize_graph(&mut g, &gp, &styles)?;
    let fake = if paired.is_empty() { out } else { g.slice_batch(out, 0, b) };
    let fake_value = g.value(fake).clone();

    // discriminator update
    let (adv_d, r1) = {
        let mut dg = Graph::new();
        let dp = state.d.params.bind(&mut dg, |_| true);
        let x = dg.constant(Tensor::stack(&[real.clone(), fake_value])?.reshape(&[2 * b, 3, r, r])?);
        let logits = state.d.forward_graph(&mut dg, &dp, x)?;
        let lr = dg.slice_batch(logits, 0, b);
        let lf = dg.slice_batch(logits, b, b);
        let ld = hinge_d_graph(&mut dg, lr, lf);
        let adv_d = check("adv_d", dg.item(ld).to_f64_lossy())?;
        let mut grads = dp.collect(&dg.backward(ld));
        let (r1, r1_grads) = r1_with_grads(&state.d, &real, cfg.gamma_r1)?;
        check("r1", r1)?;
        accumulate_grads(&mut grads, &r1_grads, T::one());
        state.opt_d.step(&mut state.d.params, &grads);
        (adv_d, r1)
    };

    // generator objective against the updated discriminator
    let dp = state.d.params.bind(&mut g, |_| false);
    let logits = state.d.forward_graph(&mut g, &dp, fake)?;
    let adv_g = g.mean(logits);
    let adv_g = g.scale(adv_g, -T::one());
    let phone = g.constant(phone_imgs);
    let percp = ctx.fx.distance_graph(&mut g, fake, phone);
    let ep = ctx.emb.params.bind(&mut g, |_| false);
    let faceid = faceid_graph(&mut g, ctx.emb, &ep, fake, phone);
    let pw = g.scale(percp, T::lit(cfg.lambda1));
    let mut total_g = g.add(adv_g, pw);
    let fw = g.scale(faceid, T::lit(cfg.lambda2));
    total_g = g.add(total_g, fw);
    let mut recons_v = 0.0;
    if !paired.is_empty() {
        let pred = g.slice_batch(out, b, paired.len());
        let gt = Tensor::stack(&paired.iter().map(|id| ctx.paired_gt[id].clone()).collect::<Vec<_>>())?;
        let gt = g.constant(gt);
        let rec = ctx.fx.distance_graph(&mut g, pred, gt);
        recons_v = g.item(rec).to_f64_lossy();
        total_g = g.add(total_g, rec);
    }
    let adv_g_v = check("adv_g", g.item(adv_g).to_f64_lossy())?;
    let percp_v = check("percp", g.item(percp).to_f64_lossy())?;
    let faceid_v = check("faceid", g.item(faceid).to_f64_lossy())?;
    check("percp_recons", recons_v)?;
    let grads = g.backward(total_g);
    state.opt_g.step(&mut state.g.params, &gp.collect(&grads));
    state.step += 1;
    state.last_latents = latents;
    let mut lb = LossBreakdown { adv_g: adv_g_v, adv_d, r1, percp: percp_v, faceid: faceid_v, percp_recons: recons_v, total: 0.0 };
    lb.total = lb.recombine(cfg);
    Ok(lb)
}

/// Runs `cfg.steps` finetuning steps from the phone networks.
pub fn run_finetune<T: Real>(
    g_phone: &Generator<T>,
    d_phone: &Discriminator<T>,
    ctx: &FinetuneContext<T>,
    cfg: &FinetuneConfig,
) -> Result<(FinetuneState<T>, Vec<LossBreakdown>)> {
    let mut state = FinetuneState::new(g_phone, d_phone, cfg)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        log.push(finetune_step(&mut state, ctx, cfg)?);
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_losses(&[2.0], &[-2.0]).0, 0.0);
        assert_eq!(hinge_losses(&[0.0], &[0.0]).0, 2.0);
        let (_, g1) = hinge_losses(&[0.0], &[0.5]);
        let (_, g2) = hinge_losses(&[0.0], &[1.5]);
        assert!(g2 < g1);
    }
}
