use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lrelu;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-10;

/// Fixed, seeded multi-scale filter bank standing in for a pretrained
/// perceptual network.
///
/// Scale `s` sees the image box-downsampled by `2^s`, convolved with zero-mean
/// 3×3 filters and passed through a leaky ReLU. Distances compare the
/// per-position unit-normalized feature vectors (LPIPS style) and add a small
/// pixel MSE term so that the distance vanishes only for identical images.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    filters: Vec<Tensor<T>>,
    pub pixel_weight: f64,
    pub seed: u64,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(seed: u64) -> Self {
        Self::with_shape(seed, 3, 8)
    }

    pub fn with_shape(seed: u64, scales: usize, filters_per_scale: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..scales)
            .map(|_| {
                let mut w = Tensor::<f64>::randn(&[filters_per_scale, 3, 3, 3], 1.0, &mut rng);
                for f in w.data_mut().chunks_mut(27) {
                    let m = f.iter().sum::<f64>() / 27.0;
                    f.iter_mut().for_each(|v| *v -= m);
                    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                    f.iter_mut().for_each(|v| *v /= n);
                }
                w.cast()
            })
            .collect();
        Self { filters, pixel_weight: 0.1, seed }
    }

    pub fn scales(&self) -> usize {
        self.filters.len()
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor { filters: self.filters.iter().map(Tensor::cast).collect(), pixel_weight: self.pixel_weight, seed: self.seed }
    }

    fn raw_features(&self, g: &mut Graph<T>, x: Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.filters.len());
        let mut cur = x;
        for (s, w) in self.filters.iter().enumerate() {
            if s > 0 {
                cur = g.avgpool2(cur);
            }
            let wv = g.constant(w.clone());
            let f = g.conv2d(cur, wv, 1);
            out.push(lrelu(g, f));
        }
        out
    }

    /// Batch-mean perceptual distance between `a` and `b` (both `[N, 3, H, W]`).
    pub fn distance_graph(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        assert_eq!(g.shape(a), g.shape(b), "perceptual distance shapes");
        let n = g.shape(a)[0];
        let fa = self.raw_features(g, a);
        let fb = self.raw_features(g, b);
        let eps = T::lit(NORM_EPS);
        let diff = g.sub(a, b);
        let sq = g.square(diff);
        let pix = g.mean(sq);
        let mut total = g.scale(pix, T::lit(self.pixel_weight));
        for (x, y) in fa.into_iter().zip(fb) {
            let s = g.shape(x).to_vec();
            let positions = n * s[2] * s[3];
            let xn = g.normalize_channels(x, eps);
            let yn = g.normalize_channels(y, eps);
            let d = g.sub(xn, yn);
            let d = g.square(d);
            let d = g.sum(d);
            let d = g.scale(d, T::one() / T::from_usize(positions).unwrap());
            total = g.add(total, d);
        }
        total
    }

    /// Perceptual distance between two images (`[3, H, W]`) or equally sized batches.
    pub fn distance(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let (a, b) = (as_batch(a)?, as_batch(b)?);
        let mut g = Graph::new();
        let av = g.constant(a);
        let bv = g.constant(b);
        let d = self.distance_graph(&mut g, av, bv);
        Ok(g.item(d))
    }

    /// Global descriptor per image: spatial mean and standard deviation of
    /// every feature channel at every scale.
    pub fn descriptors(&self, x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let x = as_batch(x)?;
        let n = x.dim(0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let feats = self.raw_features(&mut g, xv);
        let mut out = vec![Vec::new(); n];
        for f in feats {
            let t = g.value(f);
            let (c, hw) = (t.dim(1), t.dim(2) * t.dim(3));
            for (i, desc) in out.iter_mut().enumerate() {
                for ch in 0..c {
                    let plane = &t.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    let m = plane.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64;
                    let var = plane.iter().map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / hw as f64;
                    desc.push(m);
                    desc.push(var.sqrt());
                }
            }
        }
        Ok(out)
    }

    /// Structure/texture similarity on the fixed features (DISTS-like, lower is closer).
    pub fn dists_proxy(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut g = Graph::new();
        let av = g.constant(as_batch(a)?);
        let bv = g.constant(as_batch(b)?);
        let fa = self.raw_features(&mut g, av);
        let fb = self.raw_features(&mut g, bv);
        let (c1, c2) = (1e-6, 1e-6);
        let mut total = 0.0;
        let mut count = 0usize;
        for (x, y) in fa.into_iter().zip(fb) {
            let (tx, ty) = (g.value(x), g.value(y));
            let hw = tx.dim(2) * tx.dim(3);
            for (px, py) in tx.data().chunks(hw).zip(ty.data().chunks(hw)) {
                let mx = px.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64;
                let my = py.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / hw as f64;
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for (u, v) in px.iter().zip(py) {
                    let (du, dv) = (u.to_f64_lossy() - mx, v.to_f64_lossy() - my);
                    vx += du * du;
                    vy += dv * dv;
                    cov += du * dv;
                }
                let (vx, vy, cov) = (vx / hw as f64, vy / hw as f64, cov / hw as f64);
                let texture = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                let structure = (2.0 * cov + c2) / (vx + vy + c2);
                total += 1.0 - 0.5 * (texture + structure);
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }
}

fn as_batch<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
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
