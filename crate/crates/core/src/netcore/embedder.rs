use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conv_bias, dense, lrelu};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Adam, Bound, ParamSet};
use crate::scalar::Real;
use crate::tensor::{Taps, Tensor};

const COSINE_SCALE: f64 = 16.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub input_res: usize,
    pub dim: usize,
    pub channels: [usize; 3],
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { input_res: 32, dim: 32, channels: [16, 32, 32], epochs: 12, batch: 32, lr: 2e-3, seed: 17 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub classes: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Small conv classifier whose penultimate layer, unit-normalized, is the
/// identity embedding. Trained once on synthetic identities, then frozen.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder<T> {
    pub cfg: EmbedderConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> IdentityEmbedder<T> {
    pub fn new(cfg: EmbedderConfig, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let [c1, c2, c3] = cfg.channels;
        let mut p = ParamSet::<f64>::new();
        let mut cin = 3;
        for (i, c) in [c1, c2, c3].into_iter().enumerate() {
            p.insert(format!("e.conv{i}.weight"), Tensor::randn(&[c, cin, 3, 3], he(cin * 9), &mut rng));
            p.insert(format!("e.conv{i}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        let side = cfg.input_res / 8;
        let flat = c3 * side * side;
        p.insert("e.fc.weight", Tensor::randn(&[cfg.dim, flat], he(flat), &mut rng));
        p.insert("e.fc.bias", Tensor::zeros(&[cfg.dim]));
        p.insert("e.cls.weight", Tensor::randn(&[classes.max(1), cfg.dim], 1.0, &mut rng));
        Self { cfg, params: p.cast() }
    }

    /// Unit-norm embeddings `[N, dim]` of `x[N, 3, H, W]`; other input sizes
    /// are resampled to the embedder resolution first.
    pub fn embed_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (n, h, w) = (s[0], s[2], s[3]);
        let r = self.cfg.input_res;
        let x = if (h, w) == (r, r) {
            x
        } else if h % r == 0 && w % r == 0 {
            g.resample(x, Arc::new((Taps::box_down(h, h / r), Taps::box_down(w, w / r))))
        } else {
            g.resample(x, Arc::new((Taps::bilinear(h, r), Taps::bilinear(w, r))))
        };
        let mut hdn = x;
        for i in 0..3 {
            hdn = conv_bias(g, hdn, p.var(&format!("e.conv{i}.weight")), p.var(&format!("e.conv{i}.bias")), 1);
            hdn = lrelu(g, hdn);
            hdn = g.avgpool2(hdn);
        }
        let flat = g.shape(hdn)[1..].iter().product();
        let hdn = g.reshape(hdn, &[n, flat]);
        let e = dense(g, hdn, p.var("e.fc.weight"), p.var("e.fc.bias"));
        g.normalize_channels(e, T::lit(1e-12))
    }

    fn logits_graph(&self, g: &mut Graph<T>, p: &Bound, emb: Var) -> Var {
        let centers = g.normalize_channels(p.var("e.cls.weight"), T::lit(1e-12));
        let l = g.linear(emb, centers);
        g.scale(l, T::lit(COSINE_SCALE))
    }

    /// Embeddings of a batch `[N, 3, H, W]` (or a single `[3, H, W]` image).
    pub fn embed(&self, x: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        let x = match x.shape().len() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                x.clone().reshape(&s)?
            }
            4 => x.clone(),
            _ => return Err(Error::Shape(format!("embedder input {:?}", x.shape()))),
        };
        let n = x.dim(0);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x);
        let e = self.embed_graph(&mut g, &p, xv);
        let t = g.value(e);
        Ok((0..n).map(|i| t.index0(i).into_data()).collect())
    }

    fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let e = self.embed_graph(&mut g, &p, xv);
        let l = self.logits_graph(&mut g, &p, e);
        let t = g.value(l);
        let k = t.dim(1);
        Ok(t.data()
            .chunks(k)
            .map(|row| row.iter().enumerate().fold((0, T::neg_infinity()), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect())
    }

    fn accuracy(&self, images: &[Tensor<T>], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0;
        for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
            let x = Tensor::stack(chunk)?;
            correct += self.predict(&x)?.iter().zip(lab).filter(|(a, b)| a == b).count();
        }
        Ok(correct as f64 / images.len() as f64)
    }

    /// Trains the classifier on `(image, identity label)` pairs and reports
    /// accuracy on a held-out set of renders of the same identities.
    pub fn pretrain(
        cfg: EmbedderConfig,
        train: (&[Tensor<T>], &[usize]),
        heldout: (&[Tensor<T>], &[usize]),
    ) -> Result<(Self, EmbedderReport)> {
        let (images, labels) = train;
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Invalid("embedder training set is empty or mislabeled".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut model = Self::new(cfg.clone(), classes);
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.batch) {
                let x = Tensor::stack(&idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, |_| true);
                let xv = g.constant(x);
                let e = model.embed_graph(&mut g, &p, xv);
                let l = model.logits_graph(&mut g, &p, e);
                let loss = g.softmax_xent(l, &y);
                final_loss = g.item(loss).to_f64_lossy();
                if !final_loss.is_finite() {
                    return Err(Error::NonFinite("embedder cross-entropy".into()));
                }
                let grads = g.backward(loss);
                opt.step(&mut model.params, &p.collect(&grads));
            }
        }
        let report = EmbedderReport {
            classes,
            train_accuracy: model.accuracy(images, labels)?,
            heldout_accuracy: model.accuracy(heldout.0, heldout.1)?,
            final_loss,
        };
        Ok((model, report))
    }

    pub fn cast<U: Real>(&self) -> IdentityEmbedder<U> {
        IdentityEmbedder { cfg: self.cfg.clone(), params: self.params.cast() }
    }
}

/// Squared L2 distance between two embeddings.
pub fn embedding_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm() {
        let e = IdentityEmbedder::<f64>::new(EmbedderConfig::default(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[2, 3, 64, 64], 0.3, &mut rng);
        for v in e.embed(&x).unwrap() {
            let n: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let y = Tensor::<f64>::randn(&[3, 48, 48], 0.3, &mut rng);
        assert_eq!(e.embed(&y).unwrap()[0].len(), 32);
        let same = e.embed(&y).unwrap();
        assert_eq!(embedding_distance(&same[0], &e.embed(&y).unwrap()[0]), 0.0);
    }
}
