use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dense, lrelu};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub output_res: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    /// Feature channels per synthesis block, ordered 4, 8, 16, ...
    pub channels: Vec<usize>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { output_res: 64, z_dim: 64, w_dim: 64, mapping_layers: 2, channels: vec![64, 64, 32, 16, 8] }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.output_res;
        if r < 4 || !r.is_power_of_two() {
            return Err(Error::Resolution(r));
        }
        if self.channels.len() != self.resolutions().len() {
            return Err(Error::Invalid(format!(
                "need {} channel entries for output resolution {r}, got {}",
                self.resolutions().len(),
                self.channels.len()
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Invalid("latent sizes and mapping depth must be positive".into()));
        }
        Ok(())
    }

    /// Synthesis block resolutions `4, 8, ..., output_res`.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut v = Vec::new();
        let mut r = 4;
        while r <= self.output_res {
            v.push(r);
            r *= 2;
        }
        v
    }

    /// `2·log2(R/4) + 2` style vectors: one per modulated layer.
    pub fn n_layers(&self) -> usize {
        2 * (self.output_res / 4).trailing_zeros() as usize + 2
    }

    fn channels_at(&self, res: usize) -> usize {
        self.channels[res.trailing_zeros() as usize - 2]
    }
}

/// Gaussian input latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ<T>(pub Vec<T>);

/// One style vector per synthesis layer, stored as `[n_layers, w_dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WPlus<T>(pub Tensor<T>);

impl<T: Real> WPlus<T> {
    pub fn broadcast(w: &[T], n_layers: usize) -> Self {
        let mut data = Vec::with_capacity(n_layers * w.len());
        for _ in 0..n_layers {
            data.extend_from_slice(w);
        }
        Self(Tensor::from_vec(&[n_layers, w.len()], data).expect("broadcast shape"))
    }

    pub fn n_layers(&self) -> usize {
        self.0.dim(0)
    }

    pub fn layer(&self, i: usize) -> &[T] {
        let d = self.0.dim(1);
        &self.0.data()[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Stacks layer `i` of every W+ in `batch` into a `[N, w_dim]` tensor per layer.
pub fn split_layers<T: Real>(batch: &[&WPlus<T>]) -> Vec<Tensor<T>> {
    let n_layers = batch[0].n_layers();
    let d = batch[0].0.dim(1);
    (0..n_layers)
        .map(|i| {
            let mut data = Vec::with_capacity(batch.len() * d);
            for w in batch {
                data.extend_from_slice(w.layer(i));
            }
            Tensor::from_vec(&[batch.len(), d], data).expect("layer shape")
        })
        .collect()
}

/// Style-modulated generator with per-resolution synthesis blocks.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub cfg: GenConfig,
    pub params: ParamSet<T>,
    /// Fixed per-layer noise planes, keyed by layer prefix.
    pub noise: BTreeMap<String, Tensor<T>>,
}

/// Frozen/trainable split of generator parameter names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

/// Synthesis resolution a parameter belongs to; `None` for the mapping network.
pub fn param_resolution(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("syn.")?;
    rest.split('.').next()?.parse().ok()
}

/// Splits generator parameters for resolution freezing.
///
/// `freeze_upto = Some(r)` freezes the mapping network and every synthesis
/// block at resolution `<= r`; `None` trains everything.
pub fn partition_trainables<T: Real>(params: &ParamSet<T>, cfg: &GenConfig, freeze_upto: Option<usize>) -> Result<Partition> {
    if let Some(r) = freeze_upto {
        if !cfg.resolutions().contains(&r) {
            return Err(Error::Resolution(r));
        }
    }
    let mut frozen = BTreeSet::new();
    let mut trainable = BTreeSet::new();
    for name in params.names() {
        let frozen_here = match (freeze_upto, param_resolution(name)) {
            (None, _) => false,
            (Some(_), None) => true,
            (Some(r), Some(res)) => res <= r,
        };
        if frozen_here {
            frozen.insert(name.to_string());
        } else {
            trainable.insert(name.to_string());
        }
    }
    Ok(Partition { frozen, trainable })
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

impl<T: Real> Generator<T> {
    pub fn new(cfg: GenConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        let mut noise = BTreeMap::new();
        let wd = cfg.w_dim;
        for i in 0..cfg.mapping_layers {
            let fan_in = if i == 0 { cfg.z_dim } else { wd };
            p.insert(format!("mapping.fc{i}.weight"), randn(&[wd, fan_in], (2.0 / fan_in as f64).sqrt(), &mut rng));
            p.insert(format!("mapping.fc{i}.bias"), Tensor::zeros(&[wd]));
        }
        let mut prev_c = 0;
        for res in cfg.resolutions() {
            let c = cfg.channels_at(res);
            let convs: Vec<(String, usize)> = if res == 4 {
                p.insert(format!("syn.{res}.const"), randn(&[1, c, 4, 4], 1.0, &mut rng));
                vec![(format!("syn.{res}.conv1"), c)]
            } else {
                vec![(format!("syn.{res}.conv0"), prev_c), (format!("syn.{res}.conv1"), c)]
            };
            for (prefix, cin) in convs {
                p.insert(format!("{prefix}.affine.weight"), randn(&[cin, wd], 0.5 / (wd as f64).sqrt(), &mut rng));
                p.insert(format!("{prefix}.affine.bias"), Tensor::full(&[cin], 1.0));
                p.insert(format!("{prefix}.weight"), randn(&[c, cin, 3, 3], 1.0, &mut rng));
                p.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
                p.insert(format!("{prefix}.noise_strength"), Tensor::zeros(&[1]));
                noise.insert(prefix, randn(&[res, res], 1.0, &mut rng).cast());
            }
            let prefix = format!("syn.{res}.torgb");
            p.insert(format!("{prefix}.affine.weight"), randn(&[c, wd], 0.5 / (wd as f64).sqrt(), &mut rng));
            p.insert(format!("{prefix}.affine.bias"), Tensor::full(&[c], 1.0));
            p.insert(format!("{prefix}.weight"), randn(&[3, c, 1, 1], 1.0 / (c as f64).sqrt(), &mut rng));
            p.insert(format!("{prefix}.bias"), Tensor::zeros(&[3]));
            prev_c = c;
        }
        Ok(Self { cfg, params: p.cast(), noise })
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers()
    }

    /// Mapping network on the graph: `z[N, z_dim] → w[N, w_dim]`.
    pub fn map_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Var {
        // unit second moment normalization of z
        let zn = g.normalize_channels(z, T::lit(1e-8));
        let mut h = g.scale(zn, T::lit((self.cfg.z_dim as f64).sqrt()));
        for i in 0..self.cfg.mapping_layers {
            h = dense(g, h, p.var(&format!("mapping.fc{i}.weight")), p.var(&format!("mapping.fc{i}.bias")));
            if i + 1 < self.cfg.mapping_layers {
                h = lrelu(g, h);
            }
        }
        h
    }

    /// Maps a batch of latents and broadcasts each `w` to every synthesis layer.
    pub fn map_latent(&self, zs: &[LatentZ<T>]) -> Result<Vec<WPlus<T>>> {
        let d = self.cfg.z_dim;
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            if z.0.len() != d {
                return Err(Error::Shape(format!("latent has {} values, expected {d}", z.0.len())));
            }
            if z.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("latent z".into()));
            }
            data.extend_from_slice(&z.0);
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let zv = g.constant(Tensor::from_vec(&[zs.len(), d], data)?);
        let w = self.map_graph(&mut g, &p, zv);
        let wt = g.value(w);
        Ok((0..zs.len()).map(|i| WPlus::broadcast(wt.index0(i).data(), self.n_layers())).collect())
    }

    fn modulated(&self, g: &mut Graph<T>, p: &Bound, x: Var, style: Var, prefix: &str, demod: bool, pad: usize) -> Var {
        let s = super::dense(g, style, p.var(&format!("{prefix}.affine.weight")), p.var(&format!("{prefix}.affine.bias")));
        let xm = g.channel_scale(x, s);
        let wv = p.var(&format!("{prefix}.weight"));
        let mut y = g.conv2d(xm, wv, pad);
        if demod {
            // d[n, o] = (Σ_c s[n,c]² Σ_k w[o,c,k]² + ε)^(-1/2)
            let ws = g.shape(wv).to_vec();
            let (o, c, kk) = (ws[0], ws[1], ws[2] * ws[3]);
            let wsq = g.square(wv);
            let wsum = g.sum_inner(wsq, kk);
            let wsum = g.reshape(wsum, &[o, c]);
            let s2 = g.square(s);
            let energy = g.linear(s2, wsum);
            let energy = g.offset(energy, T::lit(DEMOD_EPS));
            let d = g.rsqrt(energy);
            y = g.channel_scale(y, d);
        }
        y
    }

    fn styled_conv(&self, g: &mut Graph<T>, p: &Bound, x: Var, style: Var, prefix: &str) -> Var {
        let y = self.modulated(g, p, x, style, prefix, true, 1);
        let nz = g.constant(self.noise[prefix].clone());
        let y = g.add_noise(y, p.var(&format!("{prefix}.noise_strength")), nz);
        let y = g.add_bias(y, p.var(&format!("{prefix}.bias")));
        lrelu(g, y)
    }

    fn to_rgb(&self, g: &mut Graph<T>, p: &Bound, x: Var, style: Var, res: usize) -> Var {
        let prefix = format!("syn.{res}.torgb");
        let y = self.modulated(g, p, x, style, &prefix, false, 0);
        g.add_bias(y, p.var(&format!("{prefix}.bias")))
    }

    /// Synthesis network on the graph. `styles[i]` is the `[N, w_dim]` input
    /// of layer `i`. The skip-accumulated RGB logits are squashed with a
    /// logistic sigmoid so outputs lie in `[0, 1]`.
    pub fn synthesize_graph(&self, g: &mut Graph<T>, p: &Bound, styles: &[Var]) -> Result<Var> {
        if styles.len() != self.n_layers() {
            return Err(Error::Shape(format!("{} style vectors for {} layers", styles.len(), self.n_layers())));
        }
        let n = g.shape(styles[0])[0];
        for &s in styles {
            if g.shape(s) != [n, self.cfg.w_dim] {
                return Err(Error::Shape(format!("style shape {:?}", g.shape(s))));
            }
        }
        let konst = p.var("syn.4.const");
        let mut x = if n == 1 { konst } else { g.concat_batch(&vec![konst; n]) };
        let mut rgb: Option<Var> = None;
        for (k, res) in self.cfg.resolutions().into_iter().enumerate() {
            let torgb_style = if k == 0 {
                x = self.styled_conv(g, p, x, styles[0], "syn.4.conv1");
                styles[1]
            } else {
                x = g.upsample2x(x);
                x = self.styled_conv(g, p, x, styles[2 * k - 1], &format!("syn.{res}.conv0"));
                x = self.styled_conv(g, p, x, styles[2 * k], &format!("syn.{res}.conv1"));
                styles[2 * k + 1]
            };
            let y = self.to_rgb(g, p, x, torgb_style, res);
            rgb = Some(match rgb {
                None => y,
                Some(prev) => {
                    let up = g.upsample2x(prev);
                    g.add(up, y)
                }
            });
        }
        Ok(g.sigmoid(rgb.expect("at least one block")))
    }

    /// Renders a batch of W+ vectors with the current parameters.
    pub fn synthesize(&self, batch: &[&WPlus<T>]) -> Result<Tensor<T>> {
        self.check_wplus(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let styles: Vec<Var> = split_layers(batch).into_iter().map(|t| g.constant(t)).collect();
        let out = self.synthesize_graph(&mut g, &p, &styles)?;
        Ok(g.value(out).clone())
    }

    pub fn check_wplus(&self, batch: &[&WPlus<T>]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty W+ batch".into()));
        }
        for w in batch {
            if w.0.shape() != [self.n_layers(), self.cfg.w_dim] {
                return Err(Error::Shape(format!(
                    "W+ shape {:?}, generator expects [{}, {}]",
                    w.0.shape(),
                    self.n_layers(),
                    self.cfg.w_dim
                )));
            }
        }
        Ok(())
    }

    /// Average mapped `w` over `samples` standard-normal draws, broadcast to W+.
    pub fn mean_wplus(&self, samples: usize, seed: u64) -> Result<WPlus<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<LatentZ<T>> = (0..samples)
            .map(|_| LatentZ(Tensor::<T>::randn(&[self.cfg.z_dim], 1.0, &mut rng).into_data()))
            .collect();
        let ws = self.map_latent(&zs)?;
        let d = self.cfg.w_dim;
        let mut mean = vec![T::zero(); d];
        for w in &ws {
            for (m, &v) in mean.iter_mut().zip(w.layer(0)) {
                *m += v;
            }
        }
        let inv = T::one() / T::from_usize(samples.max(1)).unwrap();
        mean.iter_mut().for_each(|m| *m *= inv);
        Ok(WPlus::broadcast(&mean, self.n_layers()))
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            noise: self.noise.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::downsample_box;

    fn small() -> GenConfig {
        GenConfig { output_res: 16, z_dim: 8, w_dim: 8, mapping_layers: 2, channels: vec![8, 8, 4] }
    }

    #[test]
    fn layer_count_formula() {
        assert_eq!(GenConfig::default().n_layers(), 10);
        assert_eq!(small().n_layers(), 6);
        let g = Generator::<f32>::new(GenConfig::default(), 0).unwrap();
        assert_eq!(g.map_latent(&[LatentZ(vec![0.5; 64])]).unwrap()[0].n_layers(), 10);
    }

    #[test]
    fn zero_latent_broadcasts_identical_styles() {
        let g = Generator::<f64>::new(small(), 1).unwrap();
        let w = &g.map_latent(&[LatentZ(vec![0.0; 8])]).unwrap()[0];
        for i in 1..w.n_layers() {
            assert_eq!(w.layer(i), w.layer(0));
        }
    }

    #[test]
    fn distinct_latents_give_distinct_styles() {
        let g = Generator::<f64>::new(small(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zs: Vec<_> = (0..2).map(|_| LatentZ(Tensor::<f64>::randn(&[8], 1.0, &mut rng).into_data())).collect();
        let ws = g.map_latent(&zs).unwrap();
        assert_ne!(ws[0].layer(0), ws[1].layer(0));
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let g = Generator::<f32>::new(small(), 2).unwrap();
        let w = g.mean_wplus(16, 3).unwrap();
        let a = g.synthesize(&[&w]).unwrap();
        let b = g.synthesize(&[&w]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 3, 16, 16]);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_layer_count_is_rejected() {
        let g = Generator::<f32>::new(small(), 2).unwrap();
        let w = WPlus::broadcast(&[0.0; 8], 5);
        assert!(matches!(g.synthesize(&[&w]), Err(Error::Shape(_))));
    }

    #[test]
    fn coarse_style_dominates_low_frequencies() {
        let g = Generator::<f64>::new(GenConfig::default(), 7).unwrap();
        let base = g.mean_wplus(64, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let delta = Tensor::<f64>::randn(&[64], 1.0, &mut rng);
        let perturb = |layer: usize| {
            let mut w = base.clone();
            let d = 64;
            for (v, &e) in w.0.data_mut()[layer * d..(layer + 1) * d].iter_mut().zip(delta.data()) {
                *v += e;
            }
            w
        };
        let lo = |w: &WPlus<f64>| downsample_box(&g.synthesize(&[w]).unwrap(), 8);
        let ref_lo = lo(&base);
        let change = |w: &WPlus<f64>| {
            let x = lo(w);
            x.data().iter().zip(ref_lo.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let coarse = change(&perturb(0));
        assert!(coarse > 0.0);
        // finest modulated conv layer
        let fine = change(&perturb(8));
        assert!(fine < coarse, "fine {fine} vs coarse {coarse}");
    }

    #[test]
    fn partition_matches_freeze_depth() {
        let g = Generator::<f32>::new(GenConfig::default(), 0).unwrap();
        let res_of = |set: &BTreeSet<String>| -> BTreeSet<Option<usize>> { set.iter().map(|n| param_resolution(n)).collect() };
        let p8 = partition_trainables(&g.params, &g.cfg, Some(8)).unwrap();
        assert_eq!(res_of(&p8.frozen), [None, Some(4), Some(8)].into_iter().collect());
        assert_eq!(res_of(&p8.trainable), [Some(16), Some(32), Some(64)].into_iter().collect());
        let p16 = partition_trainables(&g.params, &g.cfg, Some(16)).unwrap();
        assert_eq!(res_of(&p16.frozen), [None, Some(4), Some(8), Some(16)].into_iter().collect());
        let full = partition_trainables(&g.params, &g.cfg, None).unwrap();
        assert!(full.frozen.is_empty());
        assert_eq!(full.trainable.len(), g.params.len());
        assert!(matches!(partition_trainables(&g.params, &g.cfg, Some(12)), Err(Error::Resolution(12))));
    }
}
