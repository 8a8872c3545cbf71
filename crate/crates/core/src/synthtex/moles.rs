use super::identity::{IdentityParams, Mole};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Minimum relative darkening for a mole to count as detected.
pub const MOLE_THRESHOLD: f64 = 0.1;

fn luminance<T: Real>(img: &Tensor<T>, y: usize, x: usize) -> f64 {
    (0..3).map(|c| img.at3(c, y, x).to_f64_lossy()).sum::<f64>() / 3.0
}

/// Relative darkening `1 − centre / ring` of a mole in a `[3, R, R]` image.
/// The ring spans radii `r + 2 .. r + 4` high-resolution pixels around the
/// mole centre, rescaled to the image grid.
pub fn mole_contrast<T: Real>(img: &Tensor<T>, mole: &Mole, hr: usize) -> f64 {
    let res = img.dim(1);
    let scale = res as f64 / hr as f64;
    let (cx, cy) = (mole.center[0] * res as f64, mole.center[1] * res as f64);
    let px = (cx.floor() as usize).min(res - 1);
    let py = (cy.floor() as usize).min(res - 1);
    let centre = luminance(img, py, px);
    let (r_in, r_out) = ((mole.radius + 2.0) * scale, (mole.radius + 4.0) * scale);
    let reach = r_out.ceil() as isize + 1;
    let (mut sum, mut count) = (0.0, 0usize);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let (x, y) = (px as isize + dx, py as isize + dy);
            if x < 0 || y < 0 || x >= res as isize || y >= res as isize {
                continue;
            }
            let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
            if d >= r_in && d <= r_out {
                sum += luminance(img, y as usize, x as usize);
                count += 1;
            }
        }
    }
    if count == 0 || sum <= 0.0 {
        return 0.0;
    }
    1.0 - centre / (sum / count as f64)
}

/// Fraction of the identity's moles whose measured contrast reaches
/// [`MOLE_THRESHOLD`].
pub fn mole_recall<T: Real>(img: &Tensor<T>, id: &IdentityParams) -> f64 {
    if id.moles.is_empty() {
        return 1.0;
    }
    let hit = id.moles.iter().filter(|m| mole_contrast(img, m, id.hr) >= MOLE_THRESHOLD).count();
    hit as f64 / id.moles.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtex::{make_identity, render_texture, LightingCondition};

    #[test]
    fn every_mole_is_visible_in_the_studio_hr_render() {
        for seed in 0..40 {
            let id = make_identity(seed);
            let img = render_texture::<f64>(&id, &LightingCondition::studio(), 128).unwrap().image;
            for m in &id.moles {
                let c = mole_contrast(&img, m, id.hr);
                assert!(c >= 0.2, "seed {seed}: contrast {c}");
            }
            assert_eq!(mole_recall(&img, &id), 1.0);
        }
    }

    #[test]
    fn moles_are_faint_at_low_resolution() {
        let mut total = 0.0;
        for seed in 0..20 {
            let id = make_identity(seed);
            let img = render_texture::<f64>(&id, &LightingCondition::studio(), 64).unwrap().image;
            total += mole_recall(&img, &id);
        }
        assert!(total / 20.0 < 0.2);
    }
}
