//! Low-resolution per-channel gain/bias maps that relight a phone texture
//! toward studio lighting: `out = Rsz(G) · phone + Rsz(B)`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{resample2d, Taps, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    /// `[3, k, k]`.
    pub gain: Tensor<f64>,
    /// `[3, k, k]`.
    pub bias: Tensor<f64>,
    pub k: usize,
    pub source_res: usize,
}

impl ColorTransform {
    pub fn identity(k: usize, source_res: usize) -> Self {
        Self { gain: Tensor::full(&[3, k, k], 1.0), bias: Tensor::zeros(&[3, k, k]), k, source_res }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.source_res {
            return Err(Error::Invalid(format!("k = {} must lie in 1..={}", self.k, self.source_res)));
        }
        if self.gain.shape() != [3, self.k, self.k] || self.bias.shape() != [3, self.k, self.k] {
            return Err(Error::Shape("gain and bias must be [3, k, k]".into()));
        }
        if !self.gain.is_finite() || !self.bias.is_finite() {
            return Err(Error::NonFinite("color transform".into()));
        }
        Ok(())
    }

    pub fn store(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert(format!("{prefix}gain"), &self.gain);
        ck.insert(format!("{prefix}bias"), &self.bias);
        ck.set_meta(&format!("{prefix}source_res"), &self.source_res)
    }

    pub fn restore(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let gain: Tensor<f64> = ck.get(&format!("{prefix}gain"))?;
        let xf = Self { k: gain.dim(1), gain, bias: ck.get(&format!("{prefix}bias"))?, source_res: ck.meta_field(&format!("{prefix}source_res"))? };
        xf.validate()?;
        Ok(xf)
    }

    /// Same maps, applied at another resolution.
    pub fn at_resolution(&self, res: usize) -> Self {
        Self { source_res: res, ..self.clone() }
    }
}

/// Separable bilinear resize of `[C, k, k]` with `align_corners = true`.
pub fn bilinear_resize<T: Real>(map: &Tensor<T>, target_res: usize) -> Tensor<T> {
    let nd = map.shape().len();
    let (h, w) = (map.shape()[nd - 2], map.shape()[nd - 1]);
    resample2d(map, &Taps::bilinear_aligned(h, target_res), &Taps::bilinear_aligned(w, target_res))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Data term plus ridge term at the solution, summed over channels.
    pub objective: f64,
    /// Data term alone.
    pub residual: f64,
    /// Largest `‖∇‖ / ‖rhs‖` over channels.
    pub rel_grad_norm: f64,
    pub iterations: usize,
    pub solver: String,
}

const DIRECT_MAX_K: usize = 8;
const REL_TOL: f64 = 1e-10;

/// Normal equations of one channel. Unknown `i·k + j` is the gain of cell
/// `(i, j)`, unknown `k² + i·k + j` its bias. Each unknown couples only with
/// the 3×3 cell neighbourhood of both kinds, stored as 18 stencil slots.
struct Normal {
    k: usize,
    a: Vec<[f64; 18]>,
    rhs: Vec<f64>,
    data_const: f64,
}

fn slot(kind: usize, di: isize, dj: isize) -> usize {
    kind * 9 + ((di + 1) * 3 + (dj + 1)) as usize
}

impl Normal {
    fn unknowns(&self) -> usize {
        2 * self.k * self.k
    }

    fn neighbours(&self, r: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = self.k as isize;
        let cell = (r % (self.k * self.k)) as isize;
        let (i, j) = (cell / k, cell % k);
        (0..2).flat_map(move |kind| {
            (-1..=1).flat_map(move |di| {
                (-1..=1).filter_map(move |dj| {
                    let (ni, nj) = (i + di, j + dj);
                    (ni >= 0 && nj >= 0 && ni < k && nj < k).then(|| (slot(kind, di, dj), kind * (k * k) as usize + (ni * k + nj) as usize))
                })
            })
        })
    }

    fn build(studio: &[f64], phone: &[f64], weight: Option<&[f64]>, res: usize, k: usize, ridge: f64) -> Self {
        let n = 2 * k * k;
        let mut a = vec![[0.0; 18]; n];
        let mut rhs = vec![0.0; n];
        let mut data_const = 0.0;
        let rows = Taps::bilinear_aligned(k, res);
        let cols = Taps::bilinear_aligned(k, res);
        for y in 0..res {
            for x in 0..res {
                let p = y * res + x;
                let wt = weight.map_or(1.0, |w| w[p]);
                if wt == 0.0 {
                    continue;
                }
                let (s, v) = (studio[p], phone[p]);
                data_const += wt * s * s;
                let mut terms: [(usize, f64); 8] = [(0, 0.0); 8];
                let mut m = 0;
                for &(ci, wi) in &rows.taps[y] {
                    for &(cj, wj) in &cols.taps[x] {
                        let cell = ci * k + cj;
                        terms[m] = (cell, wi * wj * v);
                        terms[m + 1] = (k * k + cell, wi * wj);
                        m += 2;
                    }
                }
                for &(r, cr) in &terms[..m] {
                    rhs[r] += wt * cr * s;
                    let (ri, rj) = ((r % (k * k)) / k, (r % (k * k)) % k);
                    for &(c, cc) in &terms[..m] {
                        let (ci, cj) = ((c % (k * k)) / k, (c % (k * k)) % k);
                        let sl = slot(c / (k * k), ci as isize - ri as isize, cj as isize - rj as isize);
                        a[r][sl] += wt * cr * cc;
                    }
                }
            }
        }
        for r in 0..n {
            a[r][slot(r / (k * k), 0, 0)] += ridge;
            if r < k * k {
                rhs[r] += ridge;
            }
        }
        // ridge constant ‖G − 1‖² contributes k² at G = 0
        data_const += ridge * (k * k) as f64;
        Self { k, a, rhs, data_const }
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.neighbours(r).map(|(sl, c)| self.a[r][sl] * x[c]).sum();
        }
    }

    fn diag(&self, r: usize) -> f64 {
        self.a[r][slot(r / (self.k * self.k), 0, 0)]
    }

    fn dense(&self) -> Vec<f64> {
        let n = self.unknowns();
        let mut m = vec![0.0; n * n];
        for r in 0..n {
            for (sl, c) in self.neighbours(r) {
                m[r * n + c] = self.a[r][sl];
            }
        }
        m
    }

    /// `½xᵀAx − bᵀx` rescaled to the original objective `xᵀAx − 2bᵀx + const`.
    fn objective(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.matvec(x, &mut ax);
        let quad: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
        let lin: f64 = x.iter().zip(&self.rhs).map(|(a, b)| a * b).sum();
        quad - 2.0 * lin + self.data_const
    }

    fn rel_grad(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; x.len()];
        self.matvec(x, &mut ax);
        let g: f64 = ax.iter().zip(&self.rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = self.rhs.iter().map(|b| b * b).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        g / scale
    }
}

fn cholesky_solve(mut m: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for j in 0..n {
        let mut d = m[j * n + j];
        for p in 0..j {
            d -= m[j * n + p] * m[j * n + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NonFinite("normal matrix is not positive definite; use ridge > 0".into()));
        }
        let d = d.sqrt();
        m[j * n + j] = d;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for p in 0..j {
                s -= m[i * n + p] * m[j * n + p];
            }
            m[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= m[i * n + p] * b[p];
        }
        b[i] = s / m[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for p in i + 1..n {
            s -= m[p * n + i] * b[p];
        }
        b[i] = s / m[i * n + i];
    }
    Ok(b)
}

/// Jacobi-preconditioned conjugate gradients.
fn pcg(sys: &Normal, mut x: Vec<f64>) -> (Vec<f64>, usize) {
    let n = sys.unknowns();
    let scale = sys.rhs.iter().map(|b| b * b).sum::<f64>().sqrt();
    let inv_d: Vec<f64> = (0..n).map(|r| 1.0 / sys.diag(r).max(f64::MIN_POSITIVE)).collect();
    let mut ax = vec![0.0; n];
    sys.matvec(&x, &mut ax);
    let mut r: Vec<f64> = sys.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let max_iter = 50 * n;
    for it in 0..max_iter {
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= REL_TOL * scale {
            return (x, it);
        }
        sys.matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            return (x, it);
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        // periodic true-residual refresh keeps round-off from stalling convergence
        if it % 200 == 199 {
            sys.matvec(&x, &mut ax);
            for i in 0..n {
                r[i] = sys.rhs[i] - ax[i];
            }
        }
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    (x, max_iter)
}

/// Least-squares fit of `studio ≈ Rsz(G)·phone + Rsz(B)` with the ridge
/// `ridge·(‖G − 1‖² + ‖B‖²)`.
pub fn fit_gain_bias<T: Real>(studio: &Tensor<T>, phone: &Tensor<T>, k: usize, ridge: f64) -> Result<(ColorTransform, FitReport)> {
    fit_gain_bias_with(studio, phone, None, k, ridge, None)
}

/// As [`fit_gain_bias`], skipping pixels where `mask` is false and starting
/// the iterative solver from `init` when given.
pub fn fit_gain_bias_with<T: Real>(
    studio: &Tensor<T>,
    phone: &Tensor<T>,
    mask: Option<&[bool]>,
    k: usize,
    ridge: f64,
    init: Option<&ColorTransform>,
) -> Result<(ColorTransform, FitReport)> {
    studio.same_shape(phone)?;
    if studio.shape().len() != 3 || studio.dim(0) != 3 || studio.dim(1) != studio.dim(2) {
        return Err(Error::Shape(format!("expected a square [3, R, R] texture, got {:?}", studio.shape())));
    }
    let res = studio.dim(1);
    if k == 0 || k > res {
        return Err(Error::Invalid(format!("k = {k} must lie in 1..={res}")));
    }
    if !(ridge >= 0.0) {
        return Err(Error::Invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    if !studio.is_finite() || !phone.is_finite() {
        return Err(Error::NonFinite("color fit inputs".into()));
    }
    if let Some(m) = mask {
        if m.len() != res * res {
            return Err(Error::Shape(format!("mask has {} entries for {res}x{res}", m.len())));
        }
    }
    let weight: Option<Vec<f64>> = mask.map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    let plane = res * res;
    let s64: Vec<f64> = studio.data().iter().map(|v| v.to_f64_lossy()).collect();
    let p64: Vec<f64> = phone.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut xf = ColorTransform::identity(k, res);
    let mut report = FitReport {
        objective: 0.0,
        residual: 0.0,
        rel_grad_norm: 0.0,
        iterations: 0,
        solver: if k <= DIRECT_MAX_K { "cholesky".into() } else { "pcg".into() },
    };
    let kk = k * k;
    for c in 0..3 {
        let sys = Normal::build(&s64[c * plane..(c + 1) * plane], &p64[c * plane..(c + 1) * plane], weight.as_deref(), res, k, ridge);
        let x = if k <= DIRECT_MAX_K {
            cholesky_solve(sys.dense(), sys.rhs.clone())?
        } else {
            let start: Vec<f64> = match init {
                Some(i) => i.gain.data()[c * kk..(c + 1) * kk].iter().chain(&i.bias.data()[c * kk..(c + 1) * kk]).copied().collect(),
                None => (0..2 * kk).map(|r| if r < kk { 1.0 } else { 0.0 }).collect(),
            };
            let (x, it) = pcg(&sys, start);
            report.iterations = report.iterations.max(it);
            x
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("color transform solution".into()));
        }
        let obj = sys.objective(&x);
        let ridge_term = ridge * (x[..kk].iter().map(|g| (g - 1.0).powi(2)).sum::<f64>() + x[kk..].iter().map(|b| b * b).sum::<f64>());
        report.objective += obj;
        report.residual += obj - ridge_term;
        report.rel_grad_norm = report.rel_grad_norm.max(sys.rel_grad(&x));
        xf.gain.data_mut()[c * kk..(c + 1) * kk].copy_from_slice(&x[..kk]);
        xf.bias.data_mut()[c * kk..(c + 1) * kk].copy_from_slice(&x[kk..]);
    }
    Ok((xf, report))
}

/// `Rsz(G)·img + Rsz(B)` without clipping.
pub fn apply_raw<T: Real>(xf: &ColorTransform, img: &Tensor<T>) -> Result<Tensor<T>> {
    xf.validate()?;
    if img.shape() != [3, xf.source_res, xf.source_res] {
        return Err(Error::Shape(format!("transform expects [3, {r}, {r}], got {:?}", img.shape(), r = xf.source_res)));
    }
    let g = bilinear_resize(&xf.gain, xf.source_res);
    let b = bilinear_resize(&xf.bias, xf.source_res);
    let data = img.data().iter().zip(g.data()).zip(b.data()).map(|((&v, &g), &b)| T::lit(g * v.to_f64_lossy() + b)).collect();
    Tensor::from_vec(img.shape(), data)
}

/// Applies the transform and clips to `[0, 1]`, logging how many values were clipped.
pub fn apply_transform<T: Real>(xf: &ColorTransform, img: &Tensor<T>) -> Result<Tensor<T>> {
    let raw = apply_raw(xf, img)?;
    let clipped = raw.data().iter().filter(|v| **v < T::zero() || **v > T::one()).count();
    if clipped > 0 {
        log::info!("color transform clipped {clipped} of {} values", raw.len());
    }
    Ok(raw.map(|v| v.max(T::zero()).min(T::one())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stencil_matches_dense_assembly() {
        let res = 9;
        let k = 3;
        let s: Vec<f64> = (0..res * res).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let p: Vec<f64> = (0..res * res).map(|i| (i as f64 * 0.11).cos().abs()).collect();
        let sys = Normal::build(&s, &p, None, res, k, 0.5);
        let rows = Taps::bilinear_aligned(k, res);
        let n = 2 * k * k;
        let mut dense = vec![0.0; n * n];
        for y in 0..res {
            for x in 0..res {
                let mut a = vec![0.0; n];
                for &(ci, wi) in &rows.taps[y] {
                    for &(cj, wj) in &rows.taps[x] {
                        a[ci * k + cj] += wi * wj * p[y * res + x];
                        a[k * k + ci * k + cj] += wi * wj;
                    }
                }
                for r in 0..n {
                    for c in 0..n {
                        dense[r * n + c] += a[r] * a[c];
                    }
                }
            }
        }
        for r in 0..n {
            dense[r * n + r] += 0.5;
        }
        let got = sys.dense();
        for (a, b) in got.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
