//! Image-quality metrics and the paired/unpaired evaluation drivers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{embedding_distance, FeatureExtractor, IdentityEmbedder};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Column label used for the fixed-feature perceptual distance.
pub const PERCP_LABEL: &str = "percp (LPIPS-proxy)";
pub const KID_FOOTNOTE: &str = "KID is computed on the fixed seeded feature bank, not Inception features; \
only comparisons between rows of this report are meaningful.";

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for data range 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2)).sum::<f64>() / n;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 8×8 windows (stride 1) of every channel plane.
///
/// Images smaller than the window use a single window covering the plane.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(Error::Shape(format!("ssim needs at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>();
    let (av, bv) = (to64(a), to64(b));
    let planes = a.len() / (h * w);
    let (mut total, mut count) = (0.0, 0usize);
    let area = (wh * ww) as f64;
    for p in 0..planes {
        let pa = &av[p * h * w..(p + 1) * h * w];
        let pb = &bv[p * h * w..(p + 1) * h * w];
        // integral images of x, y, x², y², xy
        let stride = w + 1;
        let mut ii = vec![[0.0f64; 5]; (h + 1) * stride];
        for r in 0..h {
            let mut row = [0.0f64; 5];
            for c in 0..w {
                let (x, y) = (pa[r * w + c], pb[r * w + c]);
                let vals = [x, y, x * x, y * y, x * y];
                for k in 0..5 {
                    row[k] += vals[k];
                    ii[(r + 1) * stride + c + 1][k] = ii[r * stride + c + 1][k] + row[k];
                }
            }
        }
        for r in 0..=h - wh {
            for c in 0..=w - ww {
                let mut s = [0.0f64; 5];
                for k in 0..5 {
                    s[k] = ii[(r + wh) * stride + c + ww][k] - ii[r * stride + c + ww][k] - ii[(r + wh) * stride + c][k]
                        + ii[r * stride + c][k];
                }
                let (mx, my) = (s[0] / area, s[1] / area);
                // unbiased window (co)variances
                let norm = (area - 1.0).max(1.0);
                let vx = ((s[2] - area * mx * mx) / norm).max(0.0);
                let vy = ((s[3] - area * my * my) / norm).max(0.0);
                let cov = (s[4] - area * mx * my) / norm;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Squared distance between the unit identity embeddings of `a` and `b`,
/// averaged over the batch when given batches.
pub fn faceid_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>, emb: &IdentityEmbedder<T>) -> Result<f64> {
    if a.shape().len() != b.shape().len() || a.shape().first() != b.shape().first() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ea, eb) = (emb.embed(a)?, emb.embed(b)?);
    let n = ea.len() as f64;
    Ok(ea.iter().zip(&eb).map(|(x, y)| embedding_distance(x, y).to_f64_lossy()).sum::<f64>() / n)
}

fn descriptors_of<T: Real>(set: &[Tensor<T>], fx: &FeatureExtractor<T>) -> Result<Vec<Vec<f64>>> {
    let per: Vec<Result<Vec<Vec<f64>>>> = set.par_iter().map(|x| fx.descriptors(x)).collect();
    let mut out = Vec::with_capacity(set.len());
    for d in per {
        out.extend(d?);
    }
    Ok(out)
}

fn poly_kernel(a: &[f64], b: &[f64]) -> f64 {
    let d = a.len() as f64;
    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel on precomputed features.
///
/// Equal-sized sets use the paired U-statistic
/// `1/(m(m-1)) Σ_{i≠j} [k(aᵢ,aⱼ) + k(bᵢ,bⱼ) − k(aᵢ,bⱼ) − k(aⱼ,bᵢ)]`, which is
/// exactly zero for identical sets. Otherwise the within-set terms exclude
/// the diagonal and the cross term averages all pairs.
pub fn kid_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::Invalid(format!("KID needs at least 2 samples per side, got {m} and {n}")));
    }
    if a.iter().chain(b).any(|v| v.len() != a[0].len()) {
        return Err(Error::Shape("KID feature lengths differ".into()));
    }
    if m == n {
        let mut s = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    s += poly_kernel(&a[i], &a[j]) + poly_kernel(&b[i], &b[j]) - poly_kernel(&a[i], &b[j]) - poly_kernel(&a[j], &b[i]);
                }
            }
        }
        return Ok(s / (m * (m - 1)) as f64);
    }
    let within = |s: &[Vec<f64>]| {
        let k = s.len();
        let mut t = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    t += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        t / (k * (k - 1)) as f64
    };
    let cross = a.iter().flat_map(|x| b.iter().map(move |y| poly_kernel(x, y))).sum::<f64>() / (m * n) as f64;
    Ok(within(a) + within(b) - 2.0 * cross)
}

/// Kernel distance between two image sets on the fixed feature bank.
pub fn kid<T: Real>(set_a: &[Tensor<T>], set_b: &[Tensor<T>], fx: &FeatureExtractor<T>) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::Invalid(format!("KID needs at least 2 samples per side, got {} and {}", set_a.len(), set_b.len())));
    }
    kid_features(&descriptors_of(set_a, fx)?, &descriptors_of(set_b, fx)?)
}

/// Fails if any evaluated id was visible to a training stage.
pub fn check_holdout<'a>(ids: impl IntoIterator<Item = &'a u64>, training_ids: &BTreeSet<u64>) -> Result<()> {
    let bad: Vec<u64> = ids.into_iter().filter(|id| training_ids.contains(id)).copied().collect();
    if !bad.is_empty() {
        return Err(Error::Contamination(format!("evaluated ids {bad:?} appear in a training split")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub id: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub percp: f64,
    pub dists_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedEvalReport {
    pub method: String,
    pub rows: Vec<PairedRow>,
    pub mean: PairedRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnpairedRow {
    pub id: u64,
    pub faceid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnpairedEvalReport {
    pub method: String,
    pub rows: Vec<UnpairedRow>,
    pub mean_faceid: f64,
    pub kid: f64,
}

fn lookup<'a, T>(map: &'a BTreeMap<u64, Tensor<T>>, id: u64, what: &str) -> Result<&'a Tensor<T>> {
    map.get(&id).ok_or_else(|| Error::Invalid(format!("{what} missing for id {id}")))
}

/// Per-id paired metrics of `outputs` against ground-truth studio textures.
pub fn evaluate_paired<T: Real>(
    method: &str,
    outputs: &BTreeMap<u64, Tensor<T>>,
    gt_studio: &BTreeMap<u64, Tensor<T>>,
    fx: &FeatureExtractor<T>,
    training_ids: &BTreeSet<u64>,
) -> Result<PairedEvalReport> {
    check_holdout(outputs.keys(), training_ids)?;
    if outputs.is_empty() {
        return Err(Error::Invalid("no outputs to evaluate".into()));
    }
    let ids: Vec<u64> = outputs.keys().copied().collect();
    let rows: Vec<Result<PairedRow>> = ids
        .par_iter()
        .map(|&id| {
            let (o, g) = (lookup(outputs, id, "output")?, lookup(gt_studio, id, "ground truth")?);
            Ok(PairedRow {
                id,
                psnr: psnr(o, g)?,
                ssim: ssim(o, g)?,
                percp: fx.distance(o, g)?.to_f64_lossy(),
                dists_proxy: fx.dists_proxy(o, g)?,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let mean = PairedRow {
        id: 0,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        percp: rows.iter().map(|r| r.percp).sum::<f64>() / n,
        dists_proxy: rows.iter().map(|r| r.dists_proxy).sum::<f64>() / n,
    };
    Ok(PairedEvalReport { method: method.into(), rows, mean })
}

/// Identity preservation against the phone inputs and KID against the studio set.
pub fn evaluate_unpaired<T: Real>(
    method: &str,
    outputs: &BTreeMap<u64, Tensor<T>>,
    phone_inputs: &BTreeMap<u64, Tensor<T>>,
    studio_set: &[Tensor<T>],
    emb: &IdentityEmbedder<T>,
    fx: &FeatureExtractor<T>,
    training_ids: &BTreeSet<u64>,
) -> Result<UnpairedEvalReport> {
    check_holdout(outputs.keys(), training_ids)?;
    if outputs.is_empty() {
        return Err(Error::Invalid("no outputs to evaluate".into()));
    }
    let ids: Vec<u64> = outputs.keys().copied().collect();
    let rows: Vec<Result<UnpairedRow>> = ids
        .par_iter()
        .map(|&id| {
            let (o, p) = (lookup(outputs, id, "output")?, lookup(phone_inputs, id, "phone input")?);
            Ok(UnpairedRow { id, faceid: faceid_distance(o, p, emb)? })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mean_faceid = rows.iter().map(|r| r.faceid).sum::<f64>() / rows.len() as f64;
    let outs: Vec<Tensor<T>> = outputs.values().cloned().collect();
    let kid = kid(&outs, studio_set, fx)?;
    Ok(UnpairedEvalReport { method: method.into(), rows, mean_faceid, kid })
}

impl PairedEvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim,percp,dists_proxy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.id, r.psnr, r.ssim, r.percp, r.dists_proxy);
        }
        s
    }
}

impl UnpairedEvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,faceid\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6}", r.id, r.faceid);
        }
        s
    }
}

/// Markdown tables with one row per method, paired and unpaired side by side.
pub fn markdown_summary(paired: &[PairedEvalReport], unpaired: &[UnpairedEvalReport]) -> String {
    let mut s = String::new();
    if !paired.is_empty() {
        let _ = writeln!(s, "## Paired holdout\n\n| method | PSNR ↑ | SSIM ↑ | {PERCP_LABEL} ↓ | dists_proxy ↓ |\n|---|---|---|---|---|");
        for r in paired {
            let m = &r.mean;
            let _ = writeln!(s, "| {} | {:.3} | {:.4} | {:.4} | {:.4} |", r.method, m.psnr, m.ssim, m.percp, m.dists_proxy);
        }
        s.push('\n');
    }
    if !unpaired.is_empty() {
        let _ = writeln!(s, "## Unpaired holdout\n\n| method | FaceID ↓ | KID ↓ |\n|---|---|---|");
        for r in unpaired {
            let _ = writeln!(s, "| {} | {:.4} | {:.5} |", r.method, r.mean_faceid, r.kid);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "_{KID_FOOTNOTE}_");
    s
}

/// Writes per-method CSVs, an aggregate JSON and the Markdown summary into `dir`.
pub fn write_reports(dir: &Path, paired: &[PairedEvalReport], unpaired: &[UnpairedEvalReport]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for r in paired {
        let p = dir.join(format!("paired_{}.csv", r.method));
        fs::write(&p, r.to_csv())?;
        written.push(p);
    }
    for r in unpaired {
        let p = dir.join(format!("unpaired_{}.csv", r.method));
        fs::write(&p, r.to_csv())?;
        written.push(p);
    }
    #[derive(Serialize)]
    struct Aggregate<'a> {
        paired: BTreeMap<&'a str, &'a PairedRow>,
        unpaired: BTreeMap<&'a str, (f64, f64)>,
        percp_label: &'static str,
        note: &'static str,
    }
    let agg = Aggregate {
        paired: paired.iter().map(|r| (r.method.as_str(), &r.mean)).collect(),
        unpaired: unpaired.iter().map(|r| (r.method.as_str(), (r.mean_faceid, r.kid))).collect(),
        percp_label: PERCP_LABEL,
        note: KID_FOOTNOTE,
    };
    let p = dir.join("summary.json");
    fs::write(&p, serde_json::to_string_pretty(&agg)?)?;
    written.push(p);
    let p = dir.join("summary.md");
    fs::write(&p, markdown_summary(paired, unpaired))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cap_and_shape_error() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Tensor::full(&[3, 4, 5], 0.3)).is_err());
    }

    #[test]
    fn paired_u_statistic_vanishes_on_identical_sets() {
        let a = vec![vec![0.1, 0.2], vec![0.5, -0.3], vec![0.0, 1.0]];
        assert_eq!(kid_features(&a, &a).unwrap(), 0.0);
        assert!(kid_features(&a[..1], &a).is_err());
    }
}
