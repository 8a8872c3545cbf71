//! Reverse-mode gradients of every training loss against central finite
//! differences, in f64, on tiny networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::netcore::{split_layers, DiscConfig, Discriminator, EmbedderConfig, FeatureExtractor, GenConfig, Generator, IdentityEmbedder, WPlus};
use crate::params::{Bound, GradMap, ParamSet};
use crate::phone_gan::hinge_d_graph;
use crate::resshift_sr::{Denoiser, DenoiserConfig, DiffusionSchedule};
use crate::studio_finetune::{faceid_graph, hinge_losses, loss_faceid, loss_percp, loss_percp_recons, loss_r1, r1_with_grads};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const PROBES: usize = 10;
/// Gradients below this magnitude are compared absolutely.
const ATOL: f64 = 1e-9;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ATOL / TOLERANCE)
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub loss: String,
    pub probes: usize,
    /// Probes discarded because their interval crossed a ReLU kink.
    pub redrawn: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.probes == PROBES
    }
}

/// Compares `analytic` with Richardson-extrapolated central differences on
/// random coordinates. A probe whose interval straddles a leaky-ReLU kink
/// (central differences at h and h/2 disagree) is not a valid oracle and is
/// redrawn, at most `PROBES / 5` times.
pub fn probe(name: &str, params: &ParamSet<f64>, analytic: &GradMap<f64>, seed: u64, loss: impl Fn(&ParamSet<f64>) -> f64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<&String> = analytic.keys().collect();
    let mut r = ProbeReport { loss: name.into(), probes: 0, redrawn: 0, worst_rel: 0.0, failures: Vec::new() };
    if names.is_empty() {
        r.failures.push("no trainable parameters".into());
        return r;
    }
    while r.probes < PROBES {
        let pname = names[rng.gen_range(0..names.len())];
        let idx = rng.gen_range(0..analytic[pname].len());
        let mut p = params.clone();
        let base = p.get(pname).expect("probed parameter").data()[idx];
        let mut central = |h: f64| {
            p.get_mut(pname).expect("probed parameter").data_mut()[idx] = base + h;
            let up = loss(&p);
            p.get_mut(pname).expect("probed parameter").data_mut()[idx] = base - h;
            let down = loss(&p);
            (up - down) / (2.0 * h)
        };
        let (c1, c2) = (central(STEP), central(STEP / 2.0));
        if rel_err(c1, c2) > TOLERANCE {
            r.redrawn += 1;
            log::debug!("{pname}[{idx}]: non-smooth interval ({c1:e} vs {c2:e}), redrawn");
            if r.redrawn > PROBES / 5 {
                r.failures.push("too many non-smooth probes".into());
                return r;
            }
            continue;
        }
        let num = (4.0 * c2 - c1) / 3.0;
        let ana = analytic[pname].data()[idx];
        let err = rel_err(num, ana);
        r.worst_rel = r.worst_rel.max(err);
        if !(err < TOLERANCE) {
            r.failures.push(format!("{pname}[{idx}]: analytic {ana:e} numeric {num:e} rel {err:e}"));
        }
        r.probes += 1;
    }
    r
}

fn tiny_gen() -> Generator<f64> {
    Generator::new(GenConfig { output_res: 8, z_dim: 8, w_dim: 8, mapping_layers: 1, channels: vec![8, 6] }, 3).expect("tiny generator")
}

fn tiny_disc() -> Discriminator<f64> {
    Discriminator::new(DiscConfig { input_res: 8, channels: vec![6, 4] }, 4).expect("tiny discriminator")
}

fn latents(gen: &Generator<f64>, n: usize, seed: u64) -> Vec<WPlus<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| WPlus(Tensor::randn(&[gen.n_layers(), gen.cfg.w_dim], 1.0, &mut rng))).collect()
}

pub fn images(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = (0..n * 3 * 64).map(|_| rng.gen_range(0.05..0.95)).collect();
    Tensor::from_vec(&[n, 3, 8, 8], d).expect("image batch")
}

fn synth_params(gen: &Generator<f64>, p: &ParamSet<f64>, w: &[WPlus<f64>]) -> Tensor<f64> {
    let mut g2 = gen.clone();
    g2.params = p.clone();
    g2.synthesize(&w.iter().collect::<Vec<_>>()).expect("synthesis")
}

/// Gradient of `f(G(w))` with respect to synthesis parameters.
fn gen_grads(gen: &Generator<f64>, w: &[WPlus<f64>], f: impl Fn(&mut Graph<f64>, Var) -> Var) -> GradMap<f64> {
    let mut g = Graph::new();
    let p = gen.params.bind(&mut g, |n| n.starts_with("syn."));
    let styles: Vec<_> = split_layers(&w.iter().collect::<Vec<_>>()).into_iter().map(|t| g.constant(t)).collect();
    let out = gen.synthesize_graph(&mut g, &p, &styles).expect("synthesis graph");
    let l = f(&mut g, out);
    p.collect(&g.backward(l))
}

pub fn adversarial_discriminator() -> ProbeReport {
    let d = tiny_disc();
    let (real, fake) = (images(3, 1), images(3, 2));
    let loss = |p: &ParamSet<f64>| {
        let dd = Discriminator { cfg: d.cfg.clone(), params: p.clone() };
        hinge_losses(&dd.logits(&real).expect("logits"), &dd.logits(&fake).expect("logits")).0
    };
    let mut g = Graph::new();
    let p = d.params.bind(&mut g, |_| true);
    let both = Tensor::stack(&[real.clone(), fake.clone()]).and_then(|t| t.reshape(&[6, 3, 8, 8])).expect("batch");
    let x = g.constant(both);
    let logits = d.forward_graph(&mut g, &p, x).expect("forward");
    let a = g.slice_batch(logits, 0, 3);
    let b = g.slice_batch(logits, 3, 3);
    let l = hinge_d_graph(&mut g, a, b);
    let mut r = probe("adv hinge (D)", &d.params, &p.collect(&g.backward(l)), 10, loss);
    if (g.item(l) - loss(&d.params)).abs() >= 1e-12 {
        r.failures.push("graph and logit hinge losses disagree".into());
    }
    r
}

pub fn adversarial_generator() -> ProbeReport {
    let (gen, d) = (tiny_gen(), tiny_disc());
    let w = latents(&gen, 2, 5);
    let grads = gen_grads(&gen, &w, |g, out| {
        let dp = d.params.bind(g, |_| false);
        let l = d.forward_graph(g, &dp, out).expect("forward");
        let m = g.mean(l);
        g.scale(m, -1.0)
    });
    probe("adv hinge (G)", &gen.params, &grads, 11, |p| {
        let l = d.logits(&synth_params(&gen, p, &w)).expect("logits");
        -l.iter().sum::<f64>() / l.len() as f64
    })
}

pub fn r1_penalty() -> ProbeReport {
    let d = tiny_disc();
    let real = images(3, 3);
    let (_, grads) = r1_with_grads(&d, &real, 10.0).expect("r1");
    probe("R1 (gamma=10)", &d.params, &grads, 12, |p| loss_r1(&Discriminator { cfg: d.cfg.clone(), params: p.clone() }, &real, 10.0).expect("r1"))
}

pub fn perceptual() -> ProbeReport {
    let gen = tiny_gen();
    let fx = FeatureExtractor::<f64>::with_shape(9, 2, 4);
    let w = latents(&gen, 2, 6);
    let target = images(2, 4);
    let grads = gen_grads(&gen, &w, |g, out| {
        let t = g.constant(target.clone());
        fx.distance_graph(g, out, t)
    });
    probe("percp", &gen.params, &grads, 13, |p| loss_percp(&synth_params(&gen, p, &w), &target, &fx).expect("percp"))
}

pub fn identity() -> ProbeReport {
    let gen = tiny_gen();
    let emb = IdentityEmbedder::<f64>::new(EmbedderConfig { input_res: 8, dim: 6, channels: [4, 4, 4], ..Default::default() }, 5);
    let w = latents(&gen, 2, 7);
    let phone = images(2, 5);
    let grads = gen_grads(&gen, &w, |g, out| {
        let ep = emb.params.bind(g, |_| false);
        let t = g.constant(phone.clone());
        faceid_graph(g, &emb, &ep, out, t)
    });
    probe("faceid", &gen.params, &grads, 14, |p| loss_faceid(&synth_params(&gen, p, &w), &phone, &emb).expect("faceid"))
}

pub fn paired_reconstruction() -> ProbeReport {
    let gen = tiny_gen();
    let fx = FeatureExtractor::<f64>::with_shape(10, 2, 4);
    let w = latents(&gen, 3, 8);
    let gt = images(3, 6);
    let gts: Vec<Tensor<f64>> = (0..3).map(|i| gt.index0(i)).collect();
    let grads = gen_grads(&gen, &w, |g, out| {
        let t = g.constant(gt.clone());
        fx.distance_graph(g, out, t)
    });
    probe("percp-recons", &gen.params, &grads, 15, |p| {
        let mut g2 = gen.clone();
        g2.params = p.clone();
        loss_percp_recons(&w.iter().collect::<Vec<_>>(), &g2, &gts.iter().collect::<Vec<_>>(), &fx).expect("recons")
    })
}

pub fn diffusion_mse() -> ProbeReport {
    let mut model = Denoiser::<f64>::new(DenoiserConfig { channels: 4 }, DiffusionSchedule::default(), true, 2);
    // move the zero-initialized input weights off zero so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for v in model.params.get_mut("in.weight").expect("input conv").data_mut() {
        *v += rng.gen_range(-0.1..0.1);
    }
    let (x0, y) = (images(2, 7), images(2, 8));
    let xt = images(2, 9).map(|v| 3.0 * v - 1.0);
    let ts = [2, 11];
    let loss_of = |m: &Denoiser<f64>, g: &mut Graph<f64>, p: &Bound| {
        let yv = g.constant(y.clone());
        let pred = m.predict_graph(g, p, &xt, yv, &ts).expect("prediction");
        let t = g.constant(x0.clone());
        let d = g.sub(pred, t);
        let d = g.square(d);
        g.mean(d)
    };
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, |_| true);
    let l = loss_of(&model, &mut g, &p);
    let grads = p.collect(&g.backward(l));
    probe("diffusion MSE", &model.params, &grads, 16, |ps| {
        let mut m = model.clone();
        m.params = ps.clone();
        let mut g = Graph::new();
        let p = m.params.bind(&mut g, |_| false);
        let l = loss_of(&m, &mut g, &p);
        g.item(l)
    })
}

/// Every training loss of the method.
pub fn loss_suite() -> Vec<ProbeReport> {
    vec![
        adversarial_discriminator(),
        adversarial_generator(),
        r1_penalty(),
        perceptual(),
        identity(),
        paired_reconstruction(),
        diffusion_mse(),
    ]
}
