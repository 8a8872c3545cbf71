//! The eight pipeline stages. Each reads its upstream artifacts through the
//! run manifest, writes its own, and is skipped when its fingerprint is
//! unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde_json::{json, Value};
use texbridge_core::checkpoint::{sha256_hex, Checkpoint};
use texbridge_core::colorxform::{apply_transform, fit_gain_bias_with};
use texbridge_core::inversion::build_inverted_set;
use texbridge_core::metrics::{evaluate_paired, evaluate_unpaired, write_reports};
use texbridge_core::phone_gan::PhoneGan;
use texbridge_core::resshift_sr::{sample, train_denoiser, SrExample};
use texbridge_core::studio_finetune::{run_finetune, write_loss_csv, FinetuneConfig, FinetuneContext, LossBreakdown};
use texbridge_core::synthtex::{derive_seed, embedder_corpus, mole_recall, write_rgb16, Dataset, Expression, LightingCondition};
use texbridge_core::tensor::resize_bilinear;
use texbridge_core::{Critic, Embedder, Features, Image, Latents, SrModel, StyleGenerator};

use crate::config::{stream, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{canonical_hash, Run, StageRecord};

pub const STAGES: [&str; 8] =
    ["gen_data", "pretrain_phone", "invert", "finetune_studio", "train_diffusion", "infer", "fit_colorxform", "evaluate"];

pub fn upstream(stage: &str) -> &'static [&'static str] {
    match stage {
        "pretrain_phone" => &["gen_data"],
        "invert" => &["gen_data", "pretrain_phone"],
        "finetune_studio" => &["gen_data", "pretrain_phone", "invert"],
        "train_diffusion" => &["gen_data"],
        "infer" => &["gen_data", "invert", "finetune_studio", "train_diffusion"],
        "fit_colorxform" => &["gen_data", "infer"],
        "evaluate" => &["gen_data", "pretrain_phone", "infer"],
        _ => &[],
    }
}

/// The part of the config a stage depends on.
fn section(cfg: &RunConfig, stage: &str) -> Value {
    match stage {
        "gen_data" => json!(cfg.dataset),
        "pretrain_phone" => json!({"phone_gan": cfg.phone_gan, "embedder": cfg.embedder, "features": cfg.feature_seed}),
        "invert" => json!({"inversion": cfg.inversion, "features": cfg.feature_seed}),
        "finetune_studio" => json!({"finetune": cfg.finetune, "features": cfg.feature_seed}),
        "train_diffusion" => json!({"schedule": [cfg.diffusion.steps, cfg.diffusion.kappa, cfg.diffusion.eta1, cfg.diffusion.eta_t], "train": cfg.diffusion.train}),
        "infer" => json!(cfg.diffusion),
        "fit_colorxform" => json!(cfg.colorxform),
        "evaluate" => json!({"features": cfg.feature_seed}),
        _ => Value::Null,
    }
}

pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub summary: Value,
}

fn fingerprint(run: &Run, stage: &str) -> CliResult<(String, BTreeMap<String, String>)> {
    let mut inputs = BTreeMap::new();
    for up in upstream(stage) {
        let recorded = run.require(up)?.fingerprint.clone();
        // an upstream record made under a different config is as good as missing
        if fingerprint(run, up)?.0 != recorded {
            return Err(CliError::MissingStage { stage: up.to_string(), what: "a checkpoint matching the current config".into() });
        }
        inputs.insert(up.to_string(), recorded);
    }
    let fp = canonical_hash(&json!({"stage": stage, "config": section(&run.cfg, stage), "inputs": inputs}));
    Ok((fp, inputs))
}

/// Runs `stage` unless an up-to-date record exists. Returns whether it ran.
pub fn run_stage(run: &mut Run, stage: &str, force: bool) -> CliResult<bool> {
    if !STAGES.contains(&stage) {
        return Err(CliError::Config(format!("unknown stage `{stage}`")));
    }
    let (fp, inputs) = fingerprint(run, stage)?;
    if !force && run.manifest.stages.get(stage).is_some_and(|r| r.fingerprint == fp) && run.require(stage).is_ok() {
        log::info!("{stage}: up to date");
        return Ok(false);
    }
    log::info!("{stage}: running");
    let t = Instant::now();
    let out = match stage {
        "gen_data" => gen_data(run)?,
        "pretrain_phone" => pretrain_phone(run, &fp)?,
        "invert" => invert(run, &fp)?,
        "finetune_studio" => finetune_studio(run, &fp)?,
        "train_diffusion" => train_diffusion(run, &fp)?,
        "infer" => infer(run, &fp)?,
        "fit_colorxform" => fit_colorxform(run, &fp)?,
        _ => evaluate(run)?,
    };
    let artifacts = out.files.iter().map(|f| run.artifact(f)).collect::<CliResult<Vec<_>>>()?;
    if stage == "evaluate" {
        run.manifest.reports = artifacts.clone();
    }
    let wall = t.elapsed().as_secs_f64();
    log::info!("{stage}: done in {wall:.1}s");
    run.record(stage, StageRecord { fingerprint: fp, inputs, artifacts, wall_clock_s: wall, summary: out.summary })?;
    Ok(true)
}

pub fn run_all(run: &mut Run, force: bool) -> CliResult<()> {
    for s in STAGES {
        run_stage(run, s, force)?;
    }
    Ok(())
}

pub fn dataset_dir(run: &Run) -> CliResult<PathBuf> {
    let m = run.artifact_path("gen_data", "manifest.json")?;
    Ok(m.parent().expect("manifest has a parent").to_path_buf())
}

pub fn load_dataset(run: &Run) -> CliResult<(Dataset, String)> {
    let dir = dataset_dir(run)?;
    let hash = sha256_hex(&fs::read(dir.join("manifest.json"))?);
    Ok((Dataset::load(&dir)?, hash))
}

pub fn load_checkpoint(run: &Run, stage: &str, name: &str) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(&run.artifact_path(stage, name)?)?)
}

fn save_checkpoint(run: &Run, ck: &Checkpoint, name: &str) -> CliResult<PathBuf> {
    let path = run.dir("checkpoints")?.join(name);
    ck.save(&path)?;
    Ok(path)
}

fn gen_data(run: &Run) -> CliResult<StageOutput> {
    let ds = Dataset::generate(&run.cfg.dataset)?;
    let files = ds.save(&run.data_dir)?;
    let m = &ds.manifest;
    Ok(StageOutput {
        files,
        summary: json!({
            "phone_ids": m.phone_ids.len(),
            "studio_ids": m.studio_ids.len(),
            "paired_ids": m.paired_ids,
            "holdout_paired_ids": m.holdout_paired_ids,
            "holdout_unpaired_ids": m.holdout_unpaired_ids,
        }),
    })
}

fn pretrain_phone(run: &Run, fp: &str) -> CliResult<StageOutput> {
    let cfg = &run.cfg;
    let (ds, _) = load_dataset(run)?;
    let fx = Features::new(cfg.feature_seed);
    let pg = PhoneGan::train(&cfg.phone_gan, &ds.phone_lr, &ds.manifest.phone_ids, &fx)?;
    let mut ck = Checkpoint::new(cfg.phone_gan.steps as u64, fp, json!({}));
    pg.gen.store(&mut ck, "g.")?;
    pg.disc.store(&mut ck, "d.")?;
    ck.set_meta("mmd", &pg.mmd)?;
    let phone = save_checkpoint(run, &ck, "phone.ckpt")?;

    let es = &cfg.embedder;
    let corpus = embedder_corpus(derive_seed(cfg.seed, stream::EMBEDDER, 1), es.classes, es.train_per_class, es.heldout_per_class, es.render_res)?;
    let (emb, report) = Embedder::pretrain(
        es.model.clone(),
        (&corpus.train_images, &corpus.train_labels),
        (&corpus.heldout_images, &corpus.heldout_labels),
    )?;
    let mut ck = Checkpoint::new(es.model.epochs as u64, fp, json!({}));
    emb.store(&mut ck, "emb.")?;
    ck.set_meta("report", &report)?;
    let embedder = save_checkpoint(run, &ck, "embedder.ckpt")?;

    let log_path = run.dir("logs")?.join("phone_gan.csv");
    let mut csv = String::from("step,recon,adv_d\n");
    for l in &pg.log {
        csv.push_str(&format!("{},{:.9},{:.9}\n", l.step, l.recon, l.adv_d));
    }
    fs::write(&log_path, csv)?;
    Ok(StageOutput {
        files: vec![phone, embedder, log_path],
        summary: json!({"mmd": pg.mmd, "embedder": report}),
    })
}

fn invert(run: &Run, fp: &str) -> CliResult<StageOutput> {
    let cfg = &run.cfg;
    let (ds, src) = load_dataset(run)?;
    let gen = StyleGenerator::restore(&load_checkpoint(run, "pretrain_phone", "phone.ckpt")?, "g.")?;
    let fx = Features::new(cfg.feature_seed);
    let m = &ds.manifest;
    let train = build_inverted_set(&ds.phone_lr, &m.phone_ids, &gen, &fx, &cfg.inversion, &src)?;
    let hold = build_inverted_set(&ds.phone_lr, &m.holdout_ids(), &gen, &fx, &cfg.inversion, &src)?;
    let (pt, ph) = (train.median_psnr(), hold.median_psnr());
    let summary = json!({
        "train_median_psnr": pt,
        "holdout_median_psnr": ph,
        "psnr_gate": cfg.inversion.psnr_gate,
        "failures": train.failures.len() + hold.failures.len(),
    });
    let gate_file = run.dir("logs")?.join("inversion_gate.json");
    fs::write(&gate_file, serde_json::to_vec_pretty(&summary)?)?;
    // the gate covers the set that finetuning samples from
    if !(pt >= cfg.inversion.psnr_gate) {
        return Err(CliError::Gate(format!(
            "median masked PSNR of the inverted training set is {pt:.2} dB, below {} dB; downstream stages are blocked",
            cfg.inversion.psnr_gate
        )));
    }
    if ph < cfg.inversion.psnr_gate {
        log::warn!("holdout inversions reach a median masked PSNR of {ph:.2} dB");
    }
    let mut files = vec![gate_file];
    for (set, name) in [(&train, "inverted_train.ckpt"), (&hold, "inverted_holdout.ckpt")] {
        let mut ck = Checkpoint::new(cfg.inversion.iterations as u64, fp, json!({}));
        set.store(&mut ck)?;
        files.push(save_checkpoint(run, &ck, name)?);
    }
    Ok(StageOutput { files, summary })
}

/// Networks and latents shared by finetuning, inference and the ablations.
pub struct Upstream {
    pub ds: Dataset,
    pub fx: Features,
    pub g_phone: StyleGenerator,
    pub d_phone: Critic,
    pub emb: Embedder,
    pub inv_train: Latents,
    pub inv_hold: Latents,
}

impl Upstream {
    pub fn load(run: &Run) -> CliResult<Self> {
        let (ds, _) = load_dataset(run)?;
        let phone = load_checkpoint(run, "pretrain_phone", "phone.ckpt")?;
        Ok(Self {
            ds,
            fx: Features::new(run.cfg.feature_seed),
            g_phone: StyleGenerator::restore(&phone, "g.")?,
            d_phone: Critic::restore(&phone, "d.")?,
            emb: Embedder::restore(&load_checkpoint(run, "pretrain_phone", "embedder.ckpt")?, "emb.")?,
            inv_train: Latents::restore(&load_checkpoint(run, "invert", "inverted_train.ckpt")?)?,
            inv_hold: Latents::restore(&load_checkpoint(run, "invert", "inverted_holdout.ckpt")?)?,
        })
    }

    /// Finetunes a studio generator; the paired ids come from the dataset
    /// unless the paired term is switched off.
    pub fn finetune(&self, cfg: &FinetuneConfig) -> CliResult<(StyleGenerator, Critic, Vec<LossBreakdown>)> {
        let m = &self.ds.manifest;
        let mut cfg = cfg.clone();
        let studio_reals: Vec<Image> = m.studio_ids.iter().map(|id| self.ds.studio_lr[id].image.clone()).collect();
        let paired_gt: BTreeMap<u64, Image> = if cfg.paired_batch > 0 {
            cfg.paired_ids = m.paired_ids.clone();
            m.paired_ids.iter().map(|id| (*id, self.ds.studio_lr[id].image.clone())).collect()
        } else {
            cfg.paired_ids.clear();
            BTreeMap::new()
        };
        let ctx = FinetuneContext::new(&self.g_phone, &self.emb, &self.fx, &self.inv_train, studio_reals, paired_gt)?;
        let (state, log) = run_finetune(&self.g_phone, &self.d_phone, &ctx, &cfg)?;
        Ok((state.g, state.d, log))
    }

    /// `G(w)` at LR for every holdout latent.
    pub fn holdout_outputs(&self, g: &StyleGenerator) -> CliResult<BTreeMap<u64, Image>> {
        let mut out = BTreeMap::new();
        for (id, w) in &self.inv_hold.entries {
            out.insert(*id, g.synthesize(&[w])?.index0(0));
        }
        Ok(out)
    }

    pub fn sr_examples(&self) -> Vec<SrExample<f32>> {
        let hr = self.ds.manifest.resolution_hr;
        sr_examples(&self.ds, hr)
    }
}

fn sr_examples(ds: &Dataset, hr: usize) -> Vec<SrExample<f32>> {
    ds.manifest
        .paired_ids
        .iter()
        .map(|id| SrExample {
            hr: ds.studio_hr[id].image.clone(),
            lr_on_hr_grid: resize_bilinear(&ds.studio_lr[id].image, hr, hr),
            phone_hr: ds.phone_hr[id].image.clone(),
        })
        .collect()
}

fn finetune_studio(run: &Run, fp: &str) -> CliResult<StageOutput> {
    let up = Upstream::load(run)?;
    let (g, d, log) = up.finetune(&run.cfg.finetune)?;
    let mut ck = Checkpoint::new(log.len() as u64, fp, json!({}));
    g.store(&mut ck, "g.")?;
    d.store(&mut ck, "d.")?;
    let studio = save_checkpoint(run, &ck, "studio.ckpt")?;
    let csv = run.dir("logs")?.join("finetune_loss.csv");
    write_loss_csv(&csv, &log)?;
    Ok(StageOutput { files: vec![studio, csv], summary: json!({"steps": log.len(), "final": log.last()}) })
}

fn train_diffusion(run: &Run, fp: &str) -> CliResult<StageOutput> {
    let cfg = &run.cfg.diffusion;
    let (ds, _) = load_dataset(run)?;
    let sched = cfg.schedule()?;
    let (den, losses) = train_denoiser(&sr_examples(&ds, ds.manifest.resolution_hr), &sched, &cfg.train)?;
    let mut ck = Checkpoint::new(losses.len() as u64, fp, json!({}));
    den.store(&mut ck, "sr.")?;
    let path = save_checkpoint(run, &ck, "diffusion.ckpt")?;
    let csv = run.dir("logs")?.join("sr_loss.csv");
    let body: String = losses.iter().enumerate().map(|(i, l)| format!("{i},{l:.9}\n")).collect();
    fs::write(&csv, format!("step,loss\n{body}"))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    Ok(StageOutput {
        files: vec![path, csv],
        summary: json!({"steps": losses.len(), "final_mean_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64}),
    })
}

/// Side-by-side strip of equally sized `[3, R, R]` panels; `None` is black.
pub fn grid(panels: &[Option<&Image>], res: usize) -> Image {
    let n = panels.len();
    let mut out = Image::zeros(&[3, res, n * res]);
    for (k, p) in panels.iter().enumerate() {
        let Some(p) = p else { continue };
        for c in 0..3 {
            for y in 0..res {
                for x in 0..res {
                    out.set3(c, y, k * res + x, p.at3(c, y, x));
                }
            }
        }
    }
    out
}

fn infer(run: &Run, fp: &str) -> CliResult<StageOutput> {
    let cfg = &run.cfg.diffusion;
    let (ds, _) = load_dataset(run)?;
    let g_studio = StyleGenerator::restore(&load_checkpoint(run, "finetune_studio", "studio.ckpt")?, "g.")?;
    let den = SrModel::restore(&load_checkpoint(run, "train_diffusion", "diffusion.ckpt")?, "sr.")?;
    let hold = Latents::restore(&load_checkpoint(run, "invert", "inverted_holdout.ckpt")?)?;
    let sched = cfg.schedule()?;
    let hr = ds.manifest.resolution_hr;
    let (outputs, grids) = (run.dir("outputs")?, run.dir("grids")?);
    let mut ck = Checkpoint::new(0, fp, json!({}));
    let mut files = Vec::new();
    for id in ds.manifest.holdout_ids() {
        let w = hold.entries.get(&id).ok_or_else(|| CliError::MissingStage { stage: "invert".into(), what: format!("a latent for holdout {id}") })?;
        let g_lr = g_studio.synthesize(&[w])?.index0(0);
        let g_up = resize_bilinear(&g_lr, hr, hr);
        let phone = &ds.phone_hr[&id].image;
        let fin = sample(&g_up, phone, &den, &sched, cfg.mode, &cfg.train.detail, derive_seed(cfg.sample_seed, stream::SAMPLING, id))?;
        let gt = ds.studio_hr.get(&id).map(|s| &s.image);
        for (name, img) in [(format!("{id:06}_g_studio.png"), &g_up), (format!("{id:06}_final.png"), &fin)] {
            write_rgb16(&outputs.join(&name), img)?;
            files.push(outputs.join(name));
        }
        let g = grids.join(format!("{id:06}.png"));
        write_rgb16(&g, &grid(&[Some(phone), Some(&g_up), Some(&fin), gt], hr))?;
        files.push(g);
        ck.insert(format!("g_lr.{id}"), &g_lr);
        ck.insert(format!("g_up.{id}"), &g_up);
        ck.insert(format!("final.{id}"), &fin);
    }
    files.push(save_checkpoint(run, &ck, "infer.ckpt")?);
    Ok(StageOutput { files, summary: json!({"holdouts": ds.manifest.holdout_ids().len(), "mode": cfg.mode}) })
}

fn masked_mae(a: &Image, b: &Image, mask: &[bool]) -> f64 {
    let plane = mask.len();
    let (mut s, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask[i % plane] {
            s += (*x as f64 - *y as f64).abs();
            n += 1;
        }
    }
    s / n.max(1) as f64
}

fn fit_colorxform(run: &Run, fp: &str) -> CliResult<StageOutput> {
    let cfg = &run.cfg.colorxform;
    let (ds, _) = load_dataset(run)?;
    let m = &ds.manifest;
    let inferred = load_checkpoint(run, "infer", "infer.ckpt")?;
    let world = m.world();
    let expr = cfg.expression();
    let outputs = run.dir("outputs")?;
    let mut ck = Checkpoint::new(0, fp, json!({}));
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for id in m.holdout_ids() {
        let target: Image = inferred.get(&format!("final.{id}"))?;
        let phone = &ds.phone_hr[&id];
        let (xf, report) = fit_gain_bias_with(&target, &phone.image, Some(&phone.mask), cfg.k, cfg.ridge, None)?;
        xf.store(&mut ck, &format!("{id}."))?;
        let identity = m.identity(id)?;
        let cap = &m.captures[&id];
        let expr_phone = world.render::<f32>(&identity, &cap.lighting, &cap.holes, expr, world.hr)?;
        let relit = apply_transform(&xf, &expr_phone.image)?;
        let path = outputs.join(format!("{id:06}_expression_relit.png"));
        write_rgb16(&path, &relit)?;
        files.push(path);
        let mut row = json!({"id": id, "residual": report.residual, "rel_grad_norm": report.rel_grad_norm, "solver": report.solver});
        if m.holdout_paired_ids.contains(&id) {
            let gt = world.render::<f32>(&identity, &LightingCondition::studio(), &[], expr, world.hr)?.image;
            row["mae_phone_vs_studio"] = json!(masked_mae(&expr_phone.image, &gt, &expr_phone.mask));
            row["mae_relit_vs_studio"] = json!(masked_mae(&relit, &gt, &expr_phone.mask));
        }
        rows.push(row);
    }
    files.push(save_checkpoint(run, &ck, "colorxform.ckpt")?);
    let report = json!({"k": cfg.k, "ridge": cfg.ridge, "expression": expr_json(expr), "rows": rows});
    let path = run.dir("reports")?.join("colorxform.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    files.push(path);
    Ok(StageOutput { files, summary: json!({"fitted": m.holdout_ids().len()}) })
}

fn expr_json(e: Expression) -> Value {
    json!({"mouth": e.mouth, "brow": e.brow})
}

fn evaluate(run: &Run) -> CliResult<StageOutput> {
    let (ds, _) = load_dataset(run)?;
    let m = &ds.manifest;
    let fx = Features::new(run.cfg.feature_seed);
    let emb = Embedder::restore(&load_checkpoint(run, "pretrain_phone", "embedder.ckpt")?, "emb.")?;
    let inferred = load_checkpoint(run, "infer", "infer.ckpt")?;
    let training = m.training_ids();
    let pick = |prefix: &str, ids: &[u64]| -> CliResult<BTreeMap<u64, Image>> {
        ids.iter().map(|id| Ok((*id, inferred.get(&format!("{prefix}.{id}"))?))).collect()
    };
    let images = |set: &BTreeMap<u64, texbridge_core::Sample>, ids: &[u64]| -> BTreeMap<u64, Image> {
        ids.iter().map(|id| (*id, set[id].image.clone())).collect()
    };
    let (hp, hu) = (&m.holdout_paired_ids, &m.holdout_unpaired_ids);
    let gt = images(&ds.studio_hr, hp);
    let paired = vec![
        evaluate_paired("phone_input", &images(&ds.phone_hr, hp), &gt, &fx, &training)?,
        evaluate_paired("g_studio", &pick("g_up", hp)?, &gt, &fx, &training)?,
        evaluate_paired("ours", &pick("final", hp)?, &gt, &fx, &training)?,
    ];
    let phone_inputs = images(&ds.phone_hr, hu);
    let studio_set: Vec<Image> = m.studio_ids.iter().map(|id| ds.studio_hr[id].image.clone()).collect();
    let unpaired = vec![
        evaluate_unpaired("g_studio", &pick("g_up", hu)?, &phone_inputs, &studio_set, &emb, &fx, &training)?,
        evaluate_unpaired("ours", &pick("final", hu)?, &phone_inputs, &studio_set, &emb, &fx, &training)?,
    ];
    let dir = run.dir("reports")?;
    let mut files = write_reports(&dir, &paired, &unpaired)?;

    let mut moles = serde_json::Map::new();
    let sets = [("phone_input", images(&ds.phone_hr, hp)), ("g_studio", pick("g_up", hp)?), ("ours", pick("final", hp)?), ("ground_truth", gt)];
    for (name, set) in &sets {
        let per: BTreeMap<String, f64> = set.iter().map(|(id, img)| Ok((id.to_string(), mole_recall(img, &m.identity(*id)?)))).collect::<CliResult<_>>()?;
        let mean = per.values().sum::<f64>() / per.len().max(1) as f64;
        moles.insert(name.to_string(), json!({"mean": mean, "per_id": per}));
    }
    let path = dir.join("mole_recall.json");
    fs::write(&path, serde_json::to_vec_pretty(&Value::Object(moles))?)?;
    files.push(path);
    let summary = json!({
        "paired_psnr": paired.iter().map(|r| (r.method.clone(), r.mean.psnr)).collect::<BTreeMap<_, _>>(),
        "unpaired_faceid": unpaired.iter().map(|r| (r.method.clone(), r.mean_faceid)).collect::<BTreeMap<_, _>>(),
    });
    Ok(StageOutput { files, summary })
}

/// Report files of the evaluation and colour stages with their hashes.
pub fn report_hashes(run: &Run) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = run.manifest.reports.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect();
    if let Some(rec) = run.manifest.stages.get("fit_colorxform") {
        for a in rec.artifacts.iter().filter(|a| a.path.starts_with("reports")) {
            out.insert(a.path.clone(), a.sha256.clone());
        }
    }
    out
}
