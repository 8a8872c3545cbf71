use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Radial colour feature in UV space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [f64; 3],
}

/// Small dark disc; radius is measured in high-resolution pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mole {
    pub center: [f64; 2],
    pub radius: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub identity_id: u64,
    pub seed: u64,
    pub base_color: [f64; 3],
    pub feature_blobs: Vec<Blob>,
    pub moles: Vec<Mole>,
    /// Resolution whose pixel grid the mole centres are snapped to.
    pub hr: usize,
}

/// Region where moles may appear.
pub(crate) const MOLE_REGION: (f64, f64) = (0.2, 0.8);

impl IdentityParams {
    /// Deterministic identity for `seed`, with moles snapped to the pixel
    /// centres of an `hr × hr` grid.
    pub fn generate(identity_id: u64, seed: u64, hr: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(0.45..0.85);
        let g = r * rng.gen_range(0.62..0.86);
        let b = g * rng.gen_range(0.72..0.95);
        let base_color = [r, g, b];
        let n_blobs = rng.gen_range(4..=7);
        let feature_blobs = (0..n_blobs)
            .map(|_| Blob {
                center: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
                radius: rng.gen_range(0.06..0.3),
                color: [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)],
            })
            .collect();
        let n_moles = rng.gen_range(1..=6);
        let mut moles: Vec<Mole> = Vec::with_capacity(n_moles);
        let (lo, hi) = MOLE_REGION;
        let lo_px = (lo * hr as f64).ceil() as usize;
        let hi_px = (hi * hr as f64).floor() as usize - 1;
        let mut attempts = 0;
        while moles.len() < n_moles && attempts < 1000 {
            attempts += 1;
            let px = rng.gen_range(lo_px..=hi_px);
            let py = rng.gen_range(lo_px..=hi_px);
            let radius = rng.gen_range(1.0..3.0);
            let contrast = rng.gen_range(0.25..0.6);
            let center = [(px as f64 + 0.5) / hr as f64, (py as f64 + 0.5) / hr as f64];
            let clear = moles.iter().all(|m| {
                let dx = (m.center[0] - center[0]) * hr as f64;
                let dy = (m.center[1] - center[1]) * hr as f64;
                (dx * dx + dy * dy).sqrt() > m.radius + radius + 8.0
            });
            if clear {
                moles.push(Mole { center, radius, contrast });
            }
        }
        Self { identity_id, seed, base_color, feature_blobs, moles, hr }
    }

    /// Albedo without moles at texture coordinate `(u, v)`.
    pub fn albedo(&self, u: f64, v: f64) -> [f64; 3] {
        let mut a = self.base_color;
        for b in &self.feature_blobs {
            let d2 = (u - b.center[0]).powi(2) + (v - b.center[1]).powi(2);
            let w = 0.8 * (-d2 / (2.0 * b.radius * b.radius)).exp();
            for c in 0..3 {
                a[c] += w * (b.color[c] - a[c]);
            }
        }
        a
    }

    /// Multiplicative mole attenuation at `(u, v)` for detail gain `gain`.
    pub fn mole_factor(&self, u: f64, v: f64, gain: f64) -> f64 {
        let hr = self.hr as f64;
        self.moles.iter().fold(1.0, |f, m| {
            let d = (((u - m.center[0]) * hr).powi(2) + ((v - m.center[1]) * hr).powi(2)).sqrt();
            let cover = (m.radius + 0.5 - d).clamp(0.0, 1.0);
            f * (1.0 - gain * m.contrast * cover)
        })
    }
}

/// Identity for `seed` on the default 128-pixel detail grid.
pub fn make_identity(seed: u64) -> IdentityParams {
    IdentityParams::generate(seed, seed, 128)
}
