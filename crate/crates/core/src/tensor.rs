//! Dense row-major tensors and the few layout kernels the models need.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Contiguous row-major tensor. Images use `[C, H, W]`, batches `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z * std)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map_into<U>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map_into<U>(&self, other: &Self, f: impl Fn(T, T) -> U) -> Result<Tensor<U>> {
        self.same_shape(other)?;
        Ok(Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }

    /// Item `i` of the leading axis as a tensor of the remaining shape.
    pub fn index0(&self, i: usize) -> Tensor<T> {
        let inner: usize = self.shape[1..].iter().product();
        Tensor { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            first.same_shape(t)?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// `[C, H, W]` accessor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }
}

/// One-dimensional linear resampling operator stored as sparse taps.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub src_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Taps {
    pub fn dst_len(&self) -> usize {
        self.taps.len()
    }

    /// Bilinear interpolation with half-pixel centres (`align_corners = false`):
    /// destination sample `o` reads source coordinate `(o + 0.5)·src/dst − 0.5`,
    /// clamped to the valid range.
    pub fn bilinear(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                let f = pos - i0 as f64;
                if i1 == i0 || f == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i1, f)]
                }
            })
            .collect();
        Self { src_len, taps }
    }

    /// Bilinear interpolation with `align_corners = true`: the first and last
    /// samples of source and destination coincide, so linear ramps are
    /// reproduced exactly.
    pub fn bilinear_aligned(src_len: usize, dst_len: usize) -> Self {
        let taps = (0..dst_len)
            .map(|o| {
                if src_len == 1 || dst_len == 1 {
                    return vec![(0, 1.0)];
                }
                let pos = o as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
                let i0 = (pos.floor() as usize).min(src_len - 2);
                let f = pos - i0 as f64;
                if f == 0.0 {
                    vec![(i0, 1.0)]
                } else if f == 1.0 {
                    vec![(i0 + 1, 1.0)]
                } else {
                    vec![(i0, 1.0 - f), (i0 + 1, f)]
                }
            })
            .collect();
        Self { src_len, taps }
    }

    /// Box average over non-overlapping windows of `factor` samples.
    pub fn box_down(src_len: usize, factor: usize) -> Self {
        let w = 1.0 / factor as f64;
        let taps = (0..src_len / factor).map(|o| (0..factor).map(|j| (o * factor + j, w)).collect()).collect();
        Self { src_len, taps }
    }
}

/// Applies separable `rows`/`cols` taps over the two trailing axes.
pub fn resample2d<T: Real>(x: &Tensor<T>, rows: &Taps, cols: &Taps) -> Tensor<T> {
    let nd = x.shape().len();
    let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    assert_eq!((h, w), (rows.src_len, cols.src_len), "resample source size mismatch");
    let planes = x.len() / (h * w);
    let (oh, ow) = (rows.dst_len(), cols.dst_len());
    let rt: Vec<Vec<(usize, T)>> = rows.taps.iter().map(|t| t.iter().map(|&(i, v)| (i, T::lit(v))).collect()).collect();
    let ct: Vec<Vec<(usize, T)>> = cols.taps.iter().map(|t| t.iter().map(|&(i, v)| (i, T::lit(v))).collect()).collect();
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, taps) in ct.iter().enumerate() {
                let mut acc = T::zero();
                for &(i, wt) in taps {
                    acc += src[y * w + i] * wt;
                }
                tmp[y * ow + ox] = acc;
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, taps) in rt.iter().enumerate() {
            for &(i, wt) in taps {
                for ox in 0..ow {
                    dst[oy * ow + ox] += tmp[i * ow + ox] * wt;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[nd - 2] = oh;
    shape[nd - 1] = ow;
    Tensor::from_vec(&shape, out).expect("resample shape")
}

/// Adjoint of [`resample2d`]: maps a gradient on the destination grid back to the source grid.
pub fn resample2d_adjoint<T: Real>(g: &Tensor<T>, rows: &Taps, cols: &Taps) -> Tensor<T> {
    let nd = g.shape().len();
    let (oh, ow) = (g.shape()[nd - 2], g.shape()[nd - 1]);
    let (h, w) = (rows.src_len, cols.src_len);
    let planes = g.len() / (oh * ow);
    let mut tmp = vec![T::zero(); h * ow];
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        tmp.iter_mut().for_each(|v| *v = T::zero());
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        for (oy, taps) in rows.taps.iter().enumerate() {
            for &(i, wt) in taps {
                let wt = T::lit(wt);
                for ox in 0..ow {
                    tmp[i * ow + ox] += src[oy * ow + ox] * wt;
                }
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (ox, taps) in cols.taps.iter().enumerate() {
                let v = tmp[y * ow + ox];
                for &(i, wt) in taps {
                    dst[y * w + i] += v * T::lit(wt);
                }
            }
        }
    }
    let mut shape = g.shape().to_vec();
    shape[nd - 2] = h;
    shape[nd - 1] = w;
    Tensor::from_vec(&shape, out).expect("resample shape")
}

/// Bilinear resize of the two trailing axes.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let nd = x.shape().len();
    let rows = Taps::bilinear(x.shape()[nd - 2], out_h);
    let cols = Taps::bilinear(x.shape()[nd - 1], out_w);
    resample2d(x, &rows, &cols)
}

/// Box downsampling of the two trailing axes by an integer factor.
pub fn downsample_box<T: Real>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let nd = x.shape().len();
    let rows = Taps::box_down(x.shape()[nd - 2], factor);
    let cols = Taps::box_down(x.shape()[nd - 1], factor);
    resample2d(x, &rows, &cols)
}

/// Valid output column range `[lo, hi)` for kernel offset `kx` and the source offset of `lo`.
#[inline]
fn valid_cols(ow: usize, w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(ow);
    (lo, hi.max(lo))
}

/// Unfolds a `[C, H, W]` plane stack into `[C·k·k, H·W]` patches (stride 1, zero padding `pad`).
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let hw = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(ow, w, kx, pad);
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let sx = lo + kx - pad;
                    line[lo..hi].copy_from_slice(&x[base + sx..base + sx + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into planes.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let hw = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(ow, w, kx, pad);
                if lo >= hi {
                    continue;
                }
                let sx = lo + kx - pad;
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w + sx;
                    let dst = &mut x[base..base + (hi - lo)];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_reproduces_constants_and_identity() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 0.7);
        let y = resize_bilinear(&x, 11, 5);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        let z = Tensor::<f64>::from_vec(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(resize_bilinear(&z, 2, 3), z);
    }

    #[test]
    fn resample_adjoint_identity() {
        // <R x, g> = <x, Rᵀ g>
        let mut rng = rand::thread_rng();
        let x = Tensor::<f64>::randn(&[2, 5, 7], 1.0, &mut rng);
        let rows = Taps::bilinear(5, 12);
        let cols = Taps::bilinear(7, 3);
        let y = resample2d(&x, &rows, &cols);
        let g = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let xt = resample2d_adjoint(&g, &rows, &cols);
        let rhs: f64 = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = rand::thread_rng();
        let (c, h, w, k, pad) = (2, 5, 4, 3, 1);
        let x = Tensor::<f64>::randn(&[c, h, w], 1.0, &mut rng);
        let mut cols = vec![0.0; c * k * k * h * w];
        im2col(x.data(), c, h, w, k, pad, &mut cols);
        let g = Tensor::<f64>::randn(&[cols.len()], 1.0, &mut rng);
        let lhs: f64 = cols.iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im(g.data(), c, h, w, k, pad, &mut back);
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
