//! Residual-shifting diffusion super-resolution with an optional phone-detail
//! condition added to the low-resolution input.
//!
//! The chain moves from the HR image `x0` toward the conditioned LR image `y`
//! by adding the residual `e0 = y − x0` on an `η` schedule plus Gaussian noise:
//! `q(x_t | x0) = N(x0 + η_t e0, κ² η_t I)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::netcore::{conv_bias, dense, lrelu};
use crate::checkpoint::Checkpoint;
use crate::params::{Adam, Bound, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub kappa: f64,
    /// `eta[0] = 0 < eta[1] < ... < eta[T]`.
    pub eta: Vec<f64>,
    /// `alpha[t] = eta[t] − eta[t−1]`; `alpha[0]` is unused and zero.
    pub alpha: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(15, 2.0, 0.0016, 0.999).expect("default schedule")
    }
}

/// `sqrt(η)` geometric between `sqrt(eta1)` and `sqrt(eta_t)` over `t = 1..T`.
pub fn make_schedule(steps: usize, kappa: f64, eta1: f64, eta_t: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Invalid(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(eta1 > 0.0 && eta1 < eta_t && eta_t <= 1.0) {
        return Err(Error::Invalid(format!("need 0 < eta1 < etaT <= 1, got {eta1}, {eta_t}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Invalid(format!("kappa must be positive, got {kappa}")));
    }
    let (a, b) = (eta1.sqrt(), eta_t.sqrt());
    let mut eta = vec![0.0];
    for t in 1..=steps {
        let frac = (t - 1) as f64 / (steps - 1) as f64;
        eta.push((a * (b / a).powf(frac)).powi(2));
    }
    eta[1] = eta1;
    eta[steps] = eta_t;
    let alpha = (0..=steps).map(|t| if t == 0 { 0.0 } else { eta[t] - eta[t - 1] }).collect();
    Ok(DiffusionSchedule { steps, kappa, eta, alpha })
}

impl DiffusionSchedule {
    /// Posterior mean coefficients `(η_{t−1}/η_t, α_t/η_t)` and variance `κ² η_{t−1} α_t / η_t`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (e, ep, a) = (self.eta[t], self.eta[t - 1], self.alpha[t]);
        (ep / e, a / e, self.kappa * self.kappa * ep * a / e)
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps {
            return Err(Error::Invalid(format!("timestep {t} outside {lo}..={}", self.steps)));
        }
        Ok(())
    }
}

/// HR target, LR on the HR grid and their residual `e0 = lr − hr`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPair<T> {
    pub hr: Tensor<T>,
    pub lr_on_hr_grid: Tensor<T>,
    pub e0: Tensor<T>,
}

impl<T: Real> ResidualPair<T> {
    pub fn new(hr: Tensor<T>, lr_on_hr_grid: Tensor<T>) -> Result<Self> {
        let e0 = lr_on_hr_grid.zip_map(&hr, |l, h| l - h)?;
        Ok(Self { hr, lr_on_hr_grid, e0 })
    }
}

fn gaussian_like<T: Real, R: Rng + ?Sized>(mean: &Tensor<T>, shift: &Tensor<T>, shift_w: f64, std: f64, rng: &mut R) -> Tensor<T> {
    let noise = Tensor::<T>::randn(mean.shape(), 1.0, rng);
    let (sw, sd) = (T::lit(shift_w), T::lit(std));
    let mut out = mean.clone();
    for ((o, &s), &z) in out.data_mut().iter_mut().zip(shift.data()).zip(noise.data()) {
        *o = *o + sw * s + sd * z;
    }
    out
}

/// One forward transition: `N(x_prev + α_t e0, κ² α_t I)`.
pub fn forward_step<T: Real, R: Rng + ?Sized>(x_prev: &Tensor<T>, pair: &ResidualPair<T>, t: usize, s: &DiffusionSchedule, rng: &mut R) -> Result<Tensor<T>> {
    s.check_t(t, 1)?;
    x_prev.same_shape(&pair.e0)?;
    Ok(gaussian_like(x_prev, &pair.e0, s.alpha[t], s.kappa * s.alpha[t].sqrt(), rng))
}

/// Closed-form marginal: `N(x0 + η_t e0, κ² η_t I)`; `t = 0` returns `x0`.
pub fn forward_marginal<T: Real, R: Rng + ?Sized>(x0: &Tensor<T>, pair: &ResidualPair<T>, t: usize, s: &DiffusionSchedule, rng: &mut R) -> Result<Tensor<T>> {
    s.check_t(t, 0)?;
    x0.same_shape(&pair.e0)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    Ok(gaussian_like(x0, &pair.e0, s.eta[t], s.kappa * s.eta[t].sqrt(), rng))
}

/// Posterior sample `N((η_{t−1}/η_t) x_t + (α_t/η_t) x̂0, κ² (η_{t−1}/η_t) α_t I)`.
pub fn reverse_step<T: Real, R: Rng + ?Sized>(x_t: &Tensor<T>, x0_hat: &Tensor<T>, t: usize, s: &DiffusionSchedule, rng: &mut R) -> Result<Tensor<T>> {
    s.check_t(t, 1)?;
    x_t.same_shape(x0_hat)?;
    let (cx, c0, var) = s.posterior(t);
    let (cx, c0) = (T::lit(cx), T::lit(c0));
    let mean = x_t.zip_map(x0_hat, |a, b| cx * a + c0 * b)?;
    if t == 1 {
        return Ok(mean);
    }
    let zero = Tensor::zeros(mean.shape());
    Ok(gaussian_like(&mean, &zero, 0.0, var.sqrt(), rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradOperator {
    /// 3×3 Sobel, normalized by 1/8 so a unit ramp has unit response.
    SobelMag,
    /// `(f(x+1) − f(x−1)) / 2` along each axis.
    CentralDiffMag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailCondition {
    pub op: GradOperator,
    pub scale: f64,
    /// Signed variant: the horizontal plus vertical response instead of the magnitude.
    pub signed: bool,
}

impl Default for DetailCondition {
    fn default() -> Self {
        Self { op: GradOperator::SobelMag, scale: 0.5, signed: false }
    }
}

/// Per-channel gradient map of `[3, H, W]` with replicated borders.
pub fn gradmag<T: Real>(img: &Tensor<T>, op: GradOperator, signed: bool) -> Result<Tensor<T>> {
    if img.shape().len() != 3 {
        return Err(Error::Shape(format!("gradient map expects [C, H, W], got {:?}", img.shape())));
    }
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let d = img.data();
    let at = |ch: usize, y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[(ch * h + y) * w + x].to_f64_lossy()
    };
    let mut out = Tensor::zeros(img.shape());
    let o = out.data_mut();
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (gx, gy) = match op {
                    GradOperator::CentralDiffMag => ((at(ch, y, x + 1) - at(ch, y, x - 1)) / 2.0, (at(ch, y + 1, x) - at(ch, y - 1, x)) / 2.0),
                    GradOperator::SobelMag => {
                        let gx = (at(ch, y - 1, x + 1) + 2.0 * at(ch, y, x + 1) + at(ch, y + 1, x + 1))
                            - (at(ch, y - 1, x - 1) + 2.0 * at(ch, y, x - 1) + at(ch, y + 1, x - 1));
                        let gy = (at(ch, y + 1, x - 1) + 2.0 * at(ch, y + 1, x) + at(ch, y + 1, x + 1))
                            - (at(ch, y - 1, x - 1) + 2.0 * at(ch, y - 1, x) + at(ch, y - 1, x + 1));
                        (gx / 8.0, gy / 8.0)
                    }
                };
                let v = if signed { gx + gy } else { gx.hypot(gy) };
                o[(ch as usize * h + y as usize) * w + x as usize] = T::lit(v);
            }
        }
    }
    Ok(out)
}

/// `lr_on_hr_grid + scale · 𝔾(phone_hr)`.
pub fn grad_condition<T: Real>(lr_on_hr_grid: &Tensor<T>, phone_hr: &Tensor<T>, cond: &DetailCondition) -> Result<Tensor<T>> {
    lr_on_hr_grid.same_shape(phone_hr)?;
    if cond.scale == 0.0 {
        return Ok(lr_on_hr_grid.clone());
    }
    let g = gradmag(phone_hr, cond.op, cond.signed)?;
    let s = T::lit(cond.scale);
    lr_on_hr_grid.zip_map(&g, |l, v| l + s * v)
}

pub const TEMB_DIM: usize = 32;
const HIGH_PASS_GAIN: f64 = 10.0;

/// Sinusoidal embedding `[sin(t ω_k), cos(t ω_k)]`, `ω_k = 10000^(−k/16)`.
pub fn timestep_embedding(t: usize) -> [f64; TEMB_DIM] {
    let half = TEMB_DIM / 2;
    let mut e = [0.0; TEMB_DIM];
    for k in 0..half {
        let w = (10000f64).powf(-(k as f64) / half as f64);
        e[k] = (t as f64 * w).sin();
        e[k + half] = (t as f64 * w).cos();
    }
    e
}

/// Anything that predicts `x0` from `(x_t, conditioned lr, t)`.
pub trait X0Predictor<T> {
    fn predict_x0(&self, x_t: &Tensor<T>, cond_lr: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
    /// Schedule length the predictor was trained for, if any.
    fn trained_steps(&self) -> Option<usize> {
        None
    }
    /// Whether it was trained with the detail condition, if known.
    fn trained_with_condition(&self) -> Option<bool> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { channels: 16 }
    }
}

/// Two-level U-shaped conv net predicting the HR residual on top of the
/// conditioned LR input.
#[derive(Clone, Debug)]
pub struct Denoiser<T> {
    pub cfg: DenoiserConfig,
    pub params: ParamSet<T>,
    pub schedule: DiffusionSchedule,
    pub conditioned: bool,
}

impl<T: Real> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, schedule: DiffusionSchedule, conditioned: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let mut p = ParamSet::<f64>::new();
        let mut conv = |p: &mut ParamSet<f64>, name: &str, o: usize, i: usize, gain: f64| {
            p.insert(format!("{name}.weight"), Tensor::randn(&[o, i, 3, 3], gain * (2.0 / (9 * i) as f64).sqrt(), &mut rng));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
        };
        conv(&mut p, "in", c, 9, 1.0);
        conv(&mut p, "d1", c, c, 1.0);
        conv(&mut p, "mid0", 2 * c, c, 1.0);
        conv(&mut p, "mid1", 2 * c, 2 * c, 1.0);
        conv(&mut p, "up", c, 3 * c, 1.0);
        conv(&mut p, "out", 3, c, 0.1);
        for (name, o, i, gain) in [("t.fc0", c, TEMB_DIM, 1.0), ("t.fc1", c, c, 0.1), ("t.fc2", 2 * c, c, 0.1)] {
            p.insert(format!("{name}.weight"), Tensor::randn(&[o, i], gain * (1.0 / i as f64).sqrt(), &mut rng));
            p.insert(format!("{name}.bias"), Tensor::zeros(&[o]));
        }
        // the noisy x_t channels start with zero weight
        let w = p.get_mut("in.weight").expect("input conv");
        for o in 0..c {
            w.data_mut()[o * 81..o * 81 + 27].iter_mut().for_each(|v| *v = 0.0);
        }
        Self { cfg, params: p.cast(), schedule, conditioned }
    }

    /// Brings `x_t − y` to roughly unit scale at every step.
    fn input_scale(&self, t: usize) -> f64 {
        1.0 / (self.schedule.kappa * self.schedule.eta[t].sqrt() + 0.05)
    }

    /// `x̂0[N, 3, H, W]` for per-sample timesteps; `H` and `W` must be multiples of 4.
    ///
    /// The net sees `(x_t − y)` scaled to unit noise level, a high-pass of
    /// `y` and the centred `y`; the output is added to `y`.
    pub fn predict_graph(&self, g: &mut Graph<T>, p: &Bound, x_t: &Tensor<T>, cond: Var, ts: &[usize]) -> Result<Var> {
        let n = ts.len();
        let s = x_t.shape();
        if s.len() != 4 || s[0] != n || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Shape(format!("denoiser input {:?} for {n} timesteps", s)));
        }
        let plane = 3 * s[2] * s[3];
        let yv = g.value(cond).clone();
        let mut xs = x_t.zip_map(&yv, |a, b| a - b)?;
        for (i, &t) in ts.iter().enumerate() {
            self.schedule.check_t(t, 1)?;
            let k = T::lit(self.input_scale(t));
            xs.data_mut()[i * plane..(i + 1) * plane].iter_mut().for_each(|v| *v *= k);
        }
        let temb: Vec<T> = ts.iter().flat_map(|&t| timestep_embedding(t).map(T::lit)).collect();
        let temb = g.constant(Tensor::from_vec(&[n, TEMB_DIM], temb)?);
        let h = dense(g, temb, p.var("t.fc0.weight"), p.var("t.fc0.bias"));
        let h = lrelu(g, h);
        let t1 = dense(g, h, p.var("t.fc1.weight"), p.var("t.fc1.bias"));
        let t2 = dense(g, h, p.var("t.fc2.weight"), p.var("t.fc2.bias"));

        let xv = g.constant(xs);
        let low = g.avgpool2(cond);
        let low = g.avgpool2(low);
        let low = g.upsample2x(low);
        let low = g.upsample2x(low);
        let high = g.sub(cond, low);
        let high = g.scale(high, T::lit(HIGH_PASS_GAIN));
        let centred = g.offset(cond, T::lit(-0.5));
        let inp = g.concat_channels(&[xv, high, centred]);
        let c = |g: &mut Graph<T>, x: Var, name: &str| conv_bias(g, x, p.var(&format!("{name}.weight")), p.var(&format!("{name}.bias")), 1);
        let h = c(g, inp, "in");
        let h = lrelu(g, h);
        let h = g.channel_shift(h, t1);
        let h = c(g, h, "d1");
        let s1 = lrelu(g, h);
        let m = g.avgpool2(s1);
        let m = c(g, m, "mid0");
        let m = lrelu(g, m);
        let m = g.channel_shift(m, t2);
        let m = c(g, m, "mid1");
        let m = lrelu(g, m);
        let u = g.upsample2x(m);
        let u = g.concat_channels(&[u, s1]);
        let u = c(g, u, "up");
        let u = lrelu(g, u);
        let out = c(g, u, "out");
        Ok(g.add(cond, out))
    }
}

impl<T: Real> X0Predictor<T> for Denoiser<T> {
    fn predict_x0(&self, x_t: &Tensor<T>, cond_lr: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x_t.shape());
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let cond = g.constant(cond_lr.clone().reshape(&shape)?);
        let out = self.predict_graph(&mut g, &p, &x_t.clone().reshape(&shape)?, cond, &[t])?;
        g.value(out).clone().reshape(x_t.shape())
    }

    fn trained_steps(&self) -> Option<usize> {
        Some(self.schedule.steps)
    }

    fn trained_with_condition(&self) -> Option<bool> {
        Some(self.conditioned)
    }
}

/// One paired training example at HR: studio HR target, studio LR upsampled
/// to the HR grid, and the phone HR capture of the same identity.
#[derive(Clone, Debug)]
pub struct SrExample<T> {
    pub hr: Tensor<T>,
    pub lr_on_hr_grid: Tensor<T>,
    pub phone_hr: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SrTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub conditioning: bool,
    pub detail: DetailCondition,
    pub denoiser: DenoiserConfig,
}

impl Default for SrTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 8,
            crop: 32,
            lr: 1e-3,
            seed: 0,
            conditioning: true,
            detail: DetailCondition::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

fn crop<T: Real>(img: &Tensor<T>, y0: usize, x0: usize, size: usize) -> Tensor<T> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    debug_assert!(y0 + size <= h && x0 + size <= w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            out.extend_from_slice(&d[(ch * h + y) * w + x0..(ch * h + y) * w + x0 + size]);
        }
    }
    Tensor::from_vec(&[c, size, size], out).expect("crop shape")
}

/// Minimizes `‖f(x_t, y, t) − x0‖²` over random crops and timesteps; returns
/// the model and the per-step loss.
pub fn train_denoiser<T: Real>(examples: &[SrExample<T>], schedule: &DiffusionSchedule, cfg: &SrTrainConfig) -> Result<(Denoiser<T>, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::Invalid("no paired examples for the super-resolver".into()));
    }
    let res = examples[0].hr.dim(1);
    if cfg.crop > res || cfg.crop % 2 != 0 || cfg.batch == 0 {
        return Err(Error::Invalid(format!("crop {} incompatible with resolution {res}", cfg.crop)));
    }
    let conds: Vec<Tensor<T>> = examples
        .iter()
        .map(|e| if cfg.conditioning { grad_condition(&e.lr_on_hr_grid, &e.phone_hr, &cfg.detail) } else { Ok(e.lr_on_hr_grid.clone()) })
        .collect::<Result<_>>()?;
    let mut model = Denoiser::<T>::new(cfg.denoiser.clone(), schedule.clone(), cfg.conditioning, cfg.seed);
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x0s = Vec::with_capacity(cfg.batch);
        let mut xts = Vec::with_capacity(cfg.batch);
        let mut ys = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng.gen_range(0..examples.len());
            let (y0, x0) = (rng.gen_range(0..=res - cfg.crop), rng.gen_range(0..=res - cfg.crop));
            let hr = crop(&examples[i].hr, y0, x0, cfg.crop);
            let y = crop(&conds[i], y0, x0, cfg.crop);
            let t = rng.gen_range(1..=schedule.steps);
            let pair = ResidualPair::new(hr.clone(), y.clone())?;
            xts.push(forward_marginal(&hr, &pair, t, schedule, &mut rng)?);
            x0s.push(hr);
            ys.push(y);
            ts.push(t);
        }
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, |_| true);
        let y = g.constant(Tensor::stack(&ys)?);
        let pred = model.predict_graph(&mut g, &p, &Tensor::stack(&xts)?, y, &ts)?;
        let target = g.constant(Tensor::stack(&x0s)?);
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let lv = g.item(loss).to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("denoiser loss at step {step}")));
        }
        losses.push(lv);
        let grads = p.collect(&g.backward(loss));
        opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos()).max(0.1);
        opt.step(&mut model.params, &grads);
    }
    Ok((model, losses))
}

impl<T: Real> Denoiser<T> {
    pub fn store(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.insert_params(&format!("{prefix}param."), &self.params);
        ck.set_meta(&format!("{prefix}config"), &self.cfg)?;
        ck.set_meta(&format!("{prefix}schedule"), &self.schedule)?;
        ck.set_meta(&format!("{prefix}conditioned"), &self.conditioned)
    }

    pub fn restore(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg: DenoiserConfig = ck.meta_field(&format!("{prefix}config"))?;
        let schedule: DiffusionSchedule = ck.meta_field(&format!("{prefix}schedule"))?;
        let conditioned = ck.meta_field(&format!("{prefix}conditioned"))?;
        let params = ck.params(&format!("{prefix}param."));
        let fresh = Denoiser::<T>::new(cfg.clone(), schedule.clone(), conditioned, 0);
        for (name, t) in fresh.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Format(format!("denoiser array {name} has the wrong shape")));
            }
        }
        Ok(Self { cfg, params, schedule, conditioned })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    Vanilla,
    InferOnlyCond,
    TrainAndInferCond,
}

impl SampleMode {
    pub fn conditions_inference(self) -> bool {
        !matches!(self, SampleMode::Vanilla)
    }

    pub fn conditions_training(self) -> bool {
        matches!(self, SampleMode::TrainAndInferCond)
    }
}

/// Reverse process from `x_T ~ N(y, κ² η_T I)` down to `x_0`, clipped to `[0, 1]`.
pub fn sample<T: Real, P: X0Predictor<T>>(
    lr_on_hr_grid: &Tensor<T>,
    phone_hr: &Tensor<T>,
    f: &P,
    s: &DiffusionSchedule,
    mode: SampleMode,
    detail: &DetailCondition,
    seed: u64,
) -> Result<Tensor<T>> {
    if let Some(n) = f.trained_steps() {
        if n != s.steps {
            return Err(Error::Invalid(format!("denoiser trained for {n} steps, schedule has {}", s.steps)));
        }
    }
    if let Some(c) = f.trained_with_condition() {
        if c != mode.conditions_training() {
            return Err(Error::Invalid(format!("{mode:?} sampling needs a denoiser trained with conditioning = {}", !c)));
        }
    }
    let y = if mode.conditions_inference() { grad_condition(lr_on_hr_grid, phone_hr, detail)? } else { lr_on_hr_grid.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = Tensor::zeros(y.shape());
    let mut x = gaussian_like(&y, &zero, 0.0, s.kappa * s.eta[s.steps].sqrt(), &mut rng);
    for t in (1..=s.steps).rev() {
        let x0 = f.predict_x0(&x, &y, t)?;
        x = reverse_step(&x, &x0, t, s, &mut rng)?;
    }
    Ok(x.map(|v| v.max(T::zero()).min(T::one())))
}
