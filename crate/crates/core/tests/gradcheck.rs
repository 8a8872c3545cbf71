//! Finite-difference checks of every training loss, plus exact R1 cases.

use texbridge_core::gradcheck::{self, images, rel_err, ProbeReport, STEP, TOLERANCE};
use texbridge_core::netcore::{DiscConfig, Discriminator};
use texbridge_core::studio_finetune::{loss_r1, r1_of};
use texbridge_core::tensor::Tensor;

fn assert_probe(r: ProbeReport) {
    eprintln!("{}: worst relative error {:e}, {} redrawn", r.loss, r.worst_rel, r.redrawn);
    assert!(r.passed(), "{}: {:?}", r.loss, r.failures);
}

#[test]
fn adversarial_discriminator_loss() {
    assert_probe(gradcheck::adversarial_discriminator());
}

#[test]
fn adversarial_generator_loss() {
    assert_probe(gradcheck::adversarial_generator());
}

#[test]
fn r1_penalty() {
    assert_probe(gradcheck::r1_penalty());
}

#[test]
fn perceptual_loss() {
    assert_probe(gradcheck::perceptual());
}

#[test]
fn identity_loss() {
    assert_probe(gradcheck::identity());
}

#[test]
fn paired_reconstruction_loss() {
    assert_probe(gradcheck::paired_reconstruction());
}

#[test]
fn diffusion_denoising_loss() {
    assert_probe(gradcheck::diffusion_mse());
}

#[test]
fn r1_of_linear_critic() {
    let c = images(1, 30).map(|v| v - 0.5);
    let x = images(1, 31);
    let r1 = r1_of(&x, 10.0, |g, xv| {
        let cv = g.constant(c.clone());
        let prod = g.mul(cv, xv);
        Ok(g.sum(prod))
    })
    .unwrap();
    let norm2: f64 = c.data().iter().map(|v| v * v).sum();
    assert!((r1 - 5.0 * norm2).abs() < 1e-12 * norm2);
    assert_eq!(r1_of(&x, 0.0, |g, xv| Ok(g.sum(xv))).unwrap(), 0.0);
}

#[test]
fn r1_matches_numerical_input_gradient() {
    let d = Discriminator::<f64>::new(DiscConfig { input_res: 8, channels: vec![6, 4] }, 4).unwrap();
    let real = images(1, 32);
    let r1 = loss_r1(&d, &real, 10.0).unwrap();
    let score = |x: &Tensor<f64>| d.logits(x).unwrap()[0];
    let mut norm2 = 0.0;
    for i in 0..real.len() {
        let mut xp = real.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = real.clone();
        xm.data_mut()[i] -= STEP;
        norm2 += ((score(&xp) - score(&xm)) / (2.0 * STEP)).powi(2);
    }
    let fd = 5.0 * norm2;
    assert!(rel_err(r1, fd) < TOLERANCE, "{r1} vs {fd}");
}
