use rand::Rng;
use serde::{Deserialize, Serialize};

use super::identity::IdentityParams;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LightingKind {
    Studio,
    Wild,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightingCondition {
    pub kind: LightingKind,
    pub direction: [f64; 3],
    pub intensity: f64,
    pub color_cast: [f64; 3],
    pub shadow_strength: f64,
}

impl LightingCondition {
    pub fn studio() -> Self {
        Self { kind: LightingKind::Studio, direction: [0.0, 0.0, 1.0], intensity: 1.0, color_cast: [1.0; 3], shadow_strength: 0.0 }
    }

    /// Wild lighting with a normalized direction.
    pub fn wild(direction: [f64; 3], intensity: f64, color_cast: [f64; 3], shadow_strength: f64) -> Self {
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            kind: LightingKind::Wild,
            direction: direction.map(|v| v / n),
            intensity,
            color_cast,
            shadow_strength,
        }
    }

    /// Draw from the phone-capture lighting distribution.
    pub fn random_wild<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let dir = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(0.35..1.0)];
        let cast = [rng.gen_range(0.8..1.15), rng.gen_range(0.8..1.1), rng.gen_range(0.75..1.1)];
        Self::wild(dir, rng.gen_range(0.7..1.2), cast, rng.gen_range(0.3..0.8))
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.direction.iter().chain(&self.color_cast).all(|v| v.is_finite());
        if !finite || self.intensity <= 0.0 || !(0.0..=1.0).contains(&self.shadow_strength) {
            return Err(Error::Invalid(format!("lighting condition out of range: {self:?}")));
        }
        if self.kind == LightingKind::Studio && *self != Self::studio() {
            return Err(Error::Invalid("studio lighting must be neutral".into()));
        }
        Ok(())
    }
}

/// Elliptical missing region; only allowed inside the left/right border band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub center: [f64; 2],
    pub radii: [f64; 2],
}

/// Width of the border band (fraction of the texture) that may contain holes.
pub const HOLE_BAND: f64 = 0.12;

impl Hole {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let ru = rng.gen_range(0.025..HOLE_BAND / 2.0);
        let cu = if rng.gen_bool(0.5) { HOLE_BAND / 2.0 } else { 1.0 - HOLE_BAND / 2.0 };
        Self { center: [cu, rng.gen_range(0.2..0.8)], radii: [ru, rng.gen_range(0.05..0.16)] }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        ((u - self.center[0]) / self.radii[0]).powi(2) + ((v - self.center[1]) / self.radii[1]).powi(2) <= 1.0
    }

    fn in_band(&self) -> bool {
        let (lo, hi) = (self.center[0] - self.radii[0], self.center[0] + self.radii[0]);
        hi <= HOLE_BAND + 1e-12 || lo >= 1.0 - HOLE_BAND - 1e-12
    }
}

/// Expression deformation of the texture content: a smooth vertical
/// displacement around the mouth and brow regions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub mouth: f64,
    pub brow: f64,
}

impl Expression {
    pub const NEUTRAL: Expression = Expression { mouth: 0.0, brow: 0.0 };

    fn warp(&self, u: f64, v: f64) -> (f64, f64) {
        let bump = |cu: f64, cv: f64, s: f64| (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * s * s)).exp();
        let dv = 0.06 * self.mouth * bump(0.5, 0.72, 0.12) - 0.04 * self.brow * bump(0.5, 0.3, 0.15);
        let du = 0.03 * self.mouth * (u - 0.5) * bump(0.5, 0.72, 0.12) * 4.0;
        (u - du, v - dv)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSample<T = f32> {
    pub identity_id: u64,
    pub condition: LightingCondition,
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor<T>,
    /// Row-major visibility, `true` where the pixel was observed.
    pub mask: Vec<bool>,
    pub resolution: usize,
}

impl<T: Real> TextureSample<T> {
    pub fn mask_tensor(&self) -> Tensor<T> {
        let r = self.resolution;
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[1, r, r], data).expect("mask shape")
    }

    pub fn cast<U: Real>(&self) -> TextureSample<U> {
        TextureSample {
            identity_id: self.identity_id,
            condition: self.condition.clone(),
            image: self.image.cast(),
            mask: self.mask.clone(),
            resolution: self.resolution,
        }
    }
}

/// Lambertian shading of the bump-shaped face surface:
/// `1 − s·(1 − max(0, n·l))` with `n ∝ (0.8x, 0.8y, 1)`, `x = 2u − 1`, `y = 2v − 1`.
pub fn shading_field(cond: &LightingCondition, u: f64, v: f64) -> f64 {
    if cond.kind == LightingKind::Studio {
        return 1.0;
    }
    let (x, y) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    let n = [0.8 * x, 0.8 * y, 1.0];
    let norm = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
    let ndotl = (n[0] * cond.direction[0] + n[1] * cond.direction[1] + n[2] * cond.direction[2]) / norm;
    1.0 - cond.shadow_strength * (1.0 - ndotl.max(0.0))
}

/// Render resolutions of the synthetic world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub lr: usize,
    pub hr: usize,
}

impl Default for World {
    fn default() -> Self {
        Self { lr: 64, hr: 128 }
    }
}

/// Mole gain of the low-resolution render.
pub const LR_DETAIL_GAIN: f64 = 0.15;

impl World {
    pub fn detail_gain(&self, res: usize) -> Result<f64> {
        if res == self.hr {
            Ok(1.0)
        } else if res == self.lr {
            Ok(LR_DETAIL_GAIN)
        } else {
            Err(Error::Resolution(res))
        }
    }

    /// Full render: lighting, optional holes, and expression warp.
    pub fn render<T: Real>(
        &self,
        id: &IdentityParams,
        cond: &LightingCondition,
        holes: &[Hole],
        expr: Expression,
        res: usize,
    ) -> Result<TextureSample<T>> {
        let gain = self.detail_gain(res)?;
        cond.validate()?;
        if cond.kind == LightingKind::Studio && !holes.is_empty() {
            return Err(Error::Invalid("studio renders have no holes".into()));
        }
        if let Some(h) = holes.iter().find(|h| !h.in_band()) {
            return Err(Error::Invalid(format!("hole outside the border band: {h:?}")));
        }
        let mut img = vec![T::zero(); 3 * res * res];
        let mut mask = vec![true; res * res];
        let plane = res * res;
        for i in 0..res {
            let v = (i as f64 + 0.5) / res as f64;
            for j in 0..res {
                let u = (j as f64 + 0.5) / res as f64;
                let p = i * res + j;
                if holes.iter().any(|h| h.contains(u, v)) {
                    mask[p] = false;
                    continue;
                }
                let (wu, wv) = expr.warp(u, v);
                let a = id.albedo(wu, wv);
                let m = id.mole_factor(wu, wv, gain);
                let light = match cond.kind {
                    LightingKind::Studio => [1.0; 3],
                    LightingKind::Wild => {
                        let s = cond.intensity * shading_field(cond, u, v);
                        [s * cond.color_cast[0], s * cond.color_cast[1], s * cond.color_cast[2]]
                    }
                };
                for c in 0..3 {
                    img[c * plane + p] = T::lit((a[c] * m * light[c]).clamp(0.0, 1.0));
                }
            }
        }
        Ok(TextureSample {
            identity_id: id.identity_id,
            condition: cond.clone(),
            image: Tensor::from_vec(&[3, res, res], img)?,
            mask,
            resolution: res,
        })
    }
}

/// Hole-free neutral-expression render in the default world.
pub fn render_texture<T: Real>(id: &IdentityParams, cond: &LightingCondition, resolution: usize) -> Result<TextureSample<T>> {
    World::default().render(id, cond, &[], Expression::NEUTRAL, resolution)
}
