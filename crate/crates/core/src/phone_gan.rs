//! Training of the phone-domain generator and discriminator.
//!
//! The synthesis network is fitted jointly with one learned `w` code per
//! phone texture (masked reconstruction, as in generative latent
//! optimization), with an optional non-saturating adversarial term. The
//! discriminator is trained alongside with the hinge loss. Finally the
//! mapping network is fitted so that mapped Gaussian latents match the
//! learned codes in kernel MMD.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::inversion::{mask3, masked_objective_graph};
use crate::netcore::{DiscConfig, Discriminator, FeatureExtractor, GenConfig, Generator};
use crate::params::{Adam, ParamSet};
use crate::scalar::Real;
use crate::synthtex::TextureSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhoneGanConfig {
    pub gen: GenConfig,
    pub disc: DiscConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_code: f64,
    pub lr_d: f64,
    pub percp_weight: f64,
    pub adv_weight: f64,
    /// Discriminator update period in steps (0 disables it).
    pub d_every: usize,
    pub code_reg: f64,
    pub mapping_steps: usize,
    pub mapping_lr: f64,
    pub seed: u64,
}

impl Default for PhoneGanConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            disc: DiscConfig::default(),
            steps: 600,
            batch: 8,
            lr_g: 6e-3,
            lr_code: 5e-2,
            lr_d: 1e-3,
            percp_weight: 1.0,
            adv_weight: 0.0,
            d_every: 2,
            code_reg: 1e-3,
            mapping_steps: 400,
            mapping_lr: 3e-3,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhoneGanLog {
    pub step: usize,
    pub recon: f64,
    pub adv_d: f64,
}

pub struct PhoneGan<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub codes: BTreeMap<u64, Vec<T>>,
    pub log: Vec<PhoneGanLog>,
    pub mmd: f64,
}

fn code_name(id: u64) -> String {
    format!("code.{id}")
}

/// Hinge discriminator loss `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_d_graph<T: Real>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Var {
    let a = g.scale(real_logits, -T::one());
    let a = g.offset(a, T::one());
    let a = g.relu(a);
    let a = g.mean(a);
    let b = g.offset(fake_logits, T::one());
    let b = g.relu(b);
    let b = g.mean(b);
    g.add(a, b)
}

/// Squared pairwise distances `[N, M]` between the rows of `a[N, d]` and `b[M, d]`.
pub fn pairwise_sq_dist<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let (n, d) = (g.shape(a)[0], g.shape(a)[1]);
    let m = g.shape(b)[0];
    let asq = g.square(a);
    let asq = g.sum_inner(asq, d);
    let asq = g.reshape(asq, &[n, 1]);
    let bsq = g.square(b);
    let bsq = g.sum_inner(bsq, d);
    let bsq = g.reshape(bsq, &[m, 1]);
    let one_a = g.constant(Tensor::full(&[n, 1], T::one()));
    let one_b = g.constant(Tensor::full(&[m, 1], T::one()));
    let b2 = g.scale(b, T::lit(-2.0));
    let aa = g.concat_channels(&[a, asq, one_a]);
    let bb = g.concat_channels(&[b2, one_b, bsq]);
    g.linear(aa, bb)
}

/// Biased multi-bandwidth Gaussian-kernel MMD² between row sets.
pub fn mmd_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var, bandwidths: &[f64]) -> Var {
    let mut total: Option<Var> = None;
    for (x, y, sign) in [(a, a, 1.0), (b, b, 1.0), (a, b, -2.0)] {
        let d2 = pairwise_sq_dist(g, x, y);
        for &bw in bandwidths {
            let k = g.scale(d2, T::lit(-1.0 / (2.0 * bw)));
            let k = g.exp(k);
            let k = g.mean(k);
            let k = g.scale(k, T::lit(sign));
            total = Some(match total {
                None => k,
                Some(t) => g.add(t, k),
            });
        }
    }
    total.expect("non-empty bandwidths")
}

impl<T: Real> PhoneGan<T> {
    pub fn train(cfg: &PhoneGanConfig, samples: &BTreeMap<u64, TextureSample<T>>, ids: &[u64], fx: &FeatureExtractor<T>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Invalid("phone generator needs at least one training texture".into()));
        }
        let r = cfg.gen.output_res;
        let mut gen = Generator::<T>::new(cfg.gen.clone(), cfg.seed)?;
        let mut disc = Discriminator::<T>::new(cfg.disc.clone(), cfg.seed ^ 0xD15C)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut codes = ParamSet::<T>::new();
        for &id in ids {
            let s = samples.get(&id).ok_or_else(|| Error::Invalid(format!("missing phone sample {id}")))?;
            if s.resolution != r {
                return Err(Error::Resolution(s.resolution));
            }
            codes.insert(code_name(id), Tensor::randn(&[1, cfg.gen.w_dim], 0.5, &mut rng));
        }
        let mut opt_g = Adam::new(cfg.lr_g, 0.0, 0.99);
        let mut opt_c = Adam::new(cfg.lr_code, 0.0, 0.99);
        let mut opt_d = Adam::new(cfg.lr_d, 0.0, 0.99);
        let mut order: Vec<u64> = Vec::new();
        let mut log = Vec::new();
        let mapping = |name: &str| name.starts_with("mapping.");
        for step in 0..cfg.steps {
            // cosine decay to 10% of the base rates
            let decay = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
            opt_g.lr = cfg.lr_g * decay;
            opt_c.lr = cfg.lr_code * decay;
            if order.len() < cfg.batch {
                let mut more = ids.to_vec();
                more.shuffle(&mut rng);
                order.extend(more);
            }
            let batch: Vec<u64> = order.drain(..cfg.batch.min(ids.len())).collect();
            let imgs: Vec<Tensor<T>> = batch.iter().map(|id| samples[id].image.clone()).collect();
            let masks: Vec<&[bool]> = batch.iter().map(|id| samples[id].mask.as_slice()).collect();
            let target = Tensor::stack(&imgs)?;
            let mask = mask3::<T>(&masks, r);

            // generator and code update
            let mut g = Graph::new();
            let gp = gen.params.bind(&mut g, |n| !mapping(n));
            let cp = codes.bind(&mut g, |_| true);
            let cv: Vec<Var> = batch.iter().map(|&id| cp.var(&code_name(id))).collect();
            let w = g.concat_batch(&cv);
            let styles = vec![w; gen.n_layers()];
            let fake = gen.synthesize_graph(&mut g, &gp, &styles)?;
            let tv = g.constant(target.clone());
            let mv = g.constant(mask);
            let recon = masked_objective_graph(&mut g, fx, fake, tv, mv, 1.0, cfg.percp_weight);
            let wsq = g.square(w);
            let reg = g.mean(wsq);
            let reg = g.scale(reg, T::lit(cfg.code_reg));
            let mut loss = g.add(recon, reg);
            if cfg.adv_weight > 0.0 {
                let dp = disc.params.bind(&mut g, |_| false);
                let logits = disc.forward_graph(&mut g, &dp, fake)?;
                let adv = g.mean(logits);
                let adv = g.scale(adv, T::lit(-cfg.adv_weight));
                loss = g.add(loss, adv);
            }
            let recon_v = g.item(recon).to_f64_lossy();
            if !g.item(loss).is_finite() {
                return Err(Error::NonFinite(format!("phone generator loss at step {step}")));
            }
            let fake_img = g.value(fake).clone();
            let grads = g.backward(loss);
            opt_g.step(&mut gen.params, &gp.collect(&grads));
            opt_c.step(&mut codes, &cp.collect(&grads));

            // discriminator update
            let mut adv_d = f64::NAN;
            if cfg.d_every > 0 && step % cfg.d_every == 0 {
                let mut g = Graph::new();
                let dp = disc.params.bind(&mut g, |_| true);
                let both = Tensor::stack(&[target, fake_img])?.reshape(&[2 * batch.len(), 3, r, r])?;
                let x = g.constant(both);
                let logits = disc.forward_graph(&mut g, &dp, x)?;
                let real = g.slice_batch(logits, 0, batch.len());
                let fake = g.slice_batch(logits, batch.len(), batch.len());
                let ld = hinge_d_graph(&mut g, real, fake);
                adv_d = g.item(ld).to_f64_lossy();
                let grads = g.backward(ld);
                opt_d.step(&mut disc.params, &dp.collect(&grads));
            }
            log.push(PhoneGanLog { step, recon: recon_v, adv_d });
        }
        let codes: BTreeMap<u64, Vec<T>> = ids.iter().map(|&id| (id, codes.get(&code_name(id)).unwrap().data().to_vec())).collect();
        let mmd = fit_mapping(&mut gen, &codes, cfg.mapping_steps, cfg.mapping_lr, cfg.seed)?;
        Ok(Self { gen, disc, codes, log, mmd })
    }
}

/// Fits only the mapping network so that mapped standard-normal draws match
/// `codes` under multi-bandwidth MMD; returns the final MMD².
pub fn fit_mapping<T: Real>(gen: &mut Generator<T>, codes: &BTreeMap<u64, Vec<T>>, steps: usize, lr: f64, seed: u64) -> Result<f64> {
    let d = gen.cfg.w_dim;
    let all: Vec<T> = codes.values().flatten().copied().collect();
    let n = codes.len();
    let table = Tensor::from_vec(&[n, d], all)?;
    // bandwidths relative to the mean squared distance between codes
    let mut spread = 0.0;
    let rows: Vec<&[T]> = table.data().chunks(d).collect();
    for a in &rows {
        for b in &rows {
            spread += a.iter().zip(b.iter()).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2)).sum::<f64>();
        }
    }
    spread = (spread / (n * n) as f64).max(1e-6);
    let bws = [0.25 * spread, spread, 4.0 * spread];
    let mut opt = Adam::new(lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3A9);
    let batch = 64.min(4 * n).max(2);
    let mut last = f64::NAN;
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g, |name| name.starts_with("mapping."));
        let z = g.constant(Tensor::randn(&[batch, gen.cfg.z_dim], 1.0, &mut rng));
        let w = gen.map_graph(&mut g, &p, z);
        let c = g.constant(table.clone());
        let loss = mmd_graph(&mut g, w, c, &bws);
        last = g.item(loss).to_f64_lossy();
        if !last.is_finite() {
            return Err(Error::NonFinite("mapping MMD".into()));
        }
        let grads = g.backward(loss);
        opt.step(&mut gen.params, &p.collect(&grads));
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_distances_match_direct_computation() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[3, 2], vec![1.0, 1.0, -1.0, 0.0, 0.5, 2.0]).unwrap());
        let d = pairwise_sq_dist(&mut g, a, b);
        let v = g.value(d).data().to_vec();
        let expect = [1.0, 2.0, 1.25, 5.0, 18.0, 3.25];
        for (x, y) in v.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hinge_values() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_vec(&[1, 1], vec![2.0]).unwrap());
        let f = g.constant(Tensor::from_vec(&[1, 1], vec![-2.0]).unwrap());
        let l = hinge_d_graph(&mut g, r, f);
        assert_eq!(g.item(l), 0.0);
        let z = g.constant(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        let l = hinge_d_graph(&mut g, z, z);
        assert_eq!(g.item(l), 2.0);
    }
}
