use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conv_bias, dense, lrelu};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub input_res: usize,
    /// Channels per block, ordered 4, 8, ..., input_res (mirrors the generator).
    pub channels: Vec<usize>,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { input_res: 64, channels: vec![32, 32, 16, 16, 8] }
    }
}

impl DiscConfig {
    fn channels_at(&self, res: usize) -> usize {
        self.channels[res.trailing_zeros() as usize - 2]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.input_res;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Resolution(r));
        }
        if self.channels.len() != r.trailing_zeros() as usize - 1 {
            return Err(Error::Invalid(format!("discriminator needs one channel count per resolution 4..{r}")));
        }
        Ok(())
    }
}

/// Mirrored conv stack: `[N, 3, R, R]` images to `[N, 1]` logits.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub cfg: DiscConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: DiscConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::<f64>::new();
        let top = cfg.input_res;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let c_top = cfg.channels_at(top);
        p.insert("d.fromrgb.weight", Tensor::randn(&[c_top, 3, 1, 1], he(3), &mut rng));
        p.insert("d.fromrgb.bias", Tensor::zeros(&[c_top]));
        let mut res = top;
        while res > 4 {
            let (cin, cout) = (cfg.channels_at(res), cfg.channels_at(res / 2));
            p.insert(format!("d.{res}.conv.weight"), Tensor::randn(&[cout, cin, 3, 3], he(cin * 9), &mut rng));
            p.insert(format!("d.{res}.conv.bias"), Tensor::zeros(&[cout]));
            res /= 2;
        }
        let c4 = cfg.channels_at(4);
        p.insert("d.4.conv.weight", Tensor::randn(&[c4, c4, 3, 3], he(c4 * 9), &mut rng));
        p.insert("d.4.conv.bias", Tensor::zeros(&[c4]));
        p.insert("d.fc.weight", Tensor::randn(&[c4, c4 * 16], he(c4 * 16), &mut rng));
        p.insert("d.fc.bias", Tensor::zeros(&[c4]));
        p.insert("d.out.weight", Tensor::randn(&[1, c4], he(c4) * 0.5, &mut rng));
        p.insert("d.out.bias", Tensor::zeros(&[1]));
        Ok(Self { cfg, params: p.cast() })
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = self.cfg.input_res;
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Shape(format!("discriminator expects [N, 3, {r}, {r}], got {s:?}")));
        }
        let n = s[0];
        let h = conv_bias(g, x, p.var("d.fromrgb.weight"), p.var("d.fromrgb.bias"), 0);
        let mut h = lrelu(g, h);
        let mut res = r;
        while res > 4 {
            h = conv_bias(g, h, p.var(&format!("d.{res}.conv.weight")), p.var(&format!("d.{res}.conv.bias")), 1);
            h = lrelu(g, h);
            h = g.avgpool2(h);
            res /= 2;
        }
        h = conv_bias(g, h, p.var("d.4.conv.weight"), p.var("d.4.conv.bias"), 1);
        h = lrelu(g, h);
        let c4 = self.cfg.channels_at(4);
        let h = g.reshape(h, &[n, c4 * 16]);
        let h = dense(g, h, p.var("d.fc.weight"), p.var("d.fc.bias"));
        let h = lrelu(g, h);
        Ok(dense(g, h, p.var("d.out.weight"), p.var("d.out.bias")))
    }

    /// Logits for a batch of images.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &p, xv)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator { cfg: self.cfg.clone(), params: self.params.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_logit_per_image() {
        let d = Discriminator::<f32>::new(DiscConfig::default(), 0).unwrap();
        let x = Tensor::full(&[3, 3, 64, 64], 0.5);
        assert_eq!(d.logits(&x).unwrap().len(), 3);
        let bad = Tensor::full(&[1, 3, 32, 32], 0.5);
        assert!(d.logits(&bad).is_err());
    }
}
