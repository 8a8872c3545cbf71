//! Run configuration: embedded defaults, TOML files, `--override` patches
//! and the per-stage seeds derived from the master seed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use texbridge_core::inversion::InversionOptions;
use texbridge_core::netcore::EmbedderConfig;
use texbridge_core::phone_gan::PhoneGanConfig;
use texbridge_core::resshift_sr::{make_schedule, DiffusionSchedule, SampleMode, SrTrainConfig};
use texbridge_core::studio_finetune::FinetuneConfig;
use texbridge_core::synthtex::{derive_seed, DatasetConfig, Expression};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed streams of the stages; `derive_seed(master, stream, 0)`.
pub mod stream {
    pub const EMBEDDER: u64 = 101;
    pub const FEATURES: u64 = 102;
    pub const PHONE_GAN: u64 = 103;
    pub const INVERSION: u64 = 104;
    pub const FINETUNE: u64 = 105;
    pub const DIFFUSION: u64 = 106;
    pub const SAMPLING: u64 = 107;
    pub const ABLATION: u64 = 108;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderStage {
    pub classes: usize,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub render_res: usize,
    pub model: EmbedderConfig,
}

impl Default for EmbedderStage {
    fn default() -> Self {
        Self { classes: 40, train_per_class: 8, heldout_per_class: 2, render_res: 64, model: EmbedderConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionStage {
    pub steps: usize,
    pub kappa: f64,
    pub eta1: f64,
    pub eta_t: f64,
    pub mode: SampleMode,
    pub sample_seed: u64,
    pub train: SrTrainConfig,
}

impl Default for DiffusionStage {
    fn default() -> Self {
        let s = DiffusionSchedule::default();
        Self {
            steps: s.steps,
            kappa: s.kappa,
            eta1: s.eta[1],
            eta_t: s.eta[s.steps],
            mode: SampleMode::TrainAndInferCond,
            sample_seed: 0,
            train: SrTrainConfig::default(),
        }
    }
}

impl DiffusionStage {
    pub fn schedule(&self) -> CliResult<DiffusionSchedule> {
        make_schedule(self.steps, self.kappa, self.eta1, self.eta_t).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorStage {
    pub k: usize,
    pub ridge: f64,
    /// Expression applied to the phone capture that gets relit.
    pub mouth: f64,
    pub brow: f64,
}

impl Default for ColorStage {
    fn default() -> Self {
        Self { k: 8, ridge: 1e-3, mouth: 0.8, brow: 0.5 }
    }
}

impl ColorStage {
    pub fn expression(&self) -> Expression {
        Expression { mouth: self.mouth, brow: self.brow }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationBudget {
    pub seeds: Vec<u64>,
    pub finetune_steps: usize,
    pub sr_steps: usize,
}

impl Default for AblationBudget {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], finetune_steps: 100, sr_steps: 600 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub feature_seed: u64,
    pub dataset: DatasetConfig,
    pub embedder: EmbedderStage,
    pub phone_gan: PhoneGanConfig,
    pub inversion: InversionOptions,
    pub finetune: FinetuneConfig,
    pub diffusion: DiffusionStage,
    pub colorxform: ColorStage,
    pub ablation: AblationBudget,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 2024,
            feature_seed: 0,
            dataset: DatasetConfig { phone_ids: 64, ..Default::default() },
            embedder: EmbedderStage::default(),
            phone_gan: PhoneGanConfig::default(),
            inversion: InversionOptions { iterations: 100, ..Default::default() },
            finetune: FinetuneConfig::default(),
            diffusion: DiffusionStage::default(),
            colorxform: ColorStage::default(),
            ablation: AblationBudget::default(),
        }
    }
}

/// Seed fields that are always derived from `seed` and may not be set by hand.
const DERIVED_KEYS: &[&str] = &[
    "feature_seed",
    "dataset.master_seed",
    "embedder.model.seed",
    "phone_gan.seed",
    "inversion.init_seed",
    "finetune.seed",
    "finetune.paired_ids",
    "diffusion.sample_seed",
    "diffusion.train.seed",
    "diffusion.train.conditioning",
];

fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("defaults serialize to TOML")
}

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (first, rest) = path.split_first()?;
    let v = t.get(*first)?;
    if rest.is_empty() {
        Some(v)
    } else {
        lookup(v.as_table()?, rest)
    }
}

/// Every leaf of `user` must exist in `schema` with a compatible kind.
fn check_keys(user: &Table, schema: &Table, prefix: &str) -> CliResult<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(s) = schema.get(k) else {
            return Err(CliError::Config(format!("unknown key `{path}`")));
        };
        if DERIVED_KEYS.contains(&path.as_str()) {
            return Err(CliError::Config(format!("`{path}` is derived from the master seed or the dataset and cannot be set")));
        }
        match (v, s) {
            (Value::Table(u), Value::Table(s)) => check_keys(u, s, &path)?,
            (Value::Table(_), _) | (_, Value::Table(_)) => {
                return Err(CliError::Config(format!("`{path}` has the wrong kind (table vs value)")));
            }
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Table, patch: &Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses `a.b.c=value`; the value is a TOML literal, or a bare string.
pub fn parse_override(s: &str) -> CliResult<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    Ok((key.to_string(), value))
}

fn nest(key: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

impl RunConfig {
    /// Defaults, then the file, then `--seed`, then the overrides in order.
    pub fn resolve(file: Option<&Path>, seed: Option<u64>, overrides: &[String]) -> CliResult<Self> {
        let schema = defaults_table();
        let mut merged = schema.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let user: Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            match user.get("schema_version") {
                Some(Value::Integer(v)) if *v == SCHEMA_VERSION as i64 => {}
                Some(v) => return Err(CliError::Config(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"))),
                None => return Err(CliError::Config("config file must declare schema_version".into())),
            }
            check_keys(&user, &schema, "")?;
            merge(&mut merged, &user);
        }
        if let Some(s) = seed {
            merged.insert("seed".into(), Value::Integer(s as i64));
        }
        for o in overrides {
            let (key, value) = parse_override(o)?;
            if lookup(&schema, &key.split('.').collect::<Vec<_>>()).is_none() {
                return Err(CliError::Config(format!("unknown key `{key}`")));
            }
            let patch = nest(&key, value);
            check_keys(&patch, &schema, "")?;
            merge(&mut merged, &patch);
        }
        let cfg: RunConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg.with_derived_seeds())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: texbridge_core::Error| CliError::Config(e.to_string());
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!("unsupported schema_version {}", self.schema_version)));
        }
        self.dataset.validate().map_err(bad)?;
        self.finetune.validate().map_err(bad)?;
        self.phone_gan.gen.validate().map_err(bad)?;
        self.diffusion.schedule()?;
        if self.phone_gan.gen.output_res != self.dataset.resolution_lr {
            return Err(CliError::Config(format!(
                "generator output {} must match the dataset LR resolution {}",
                self.phone_gan.gen.output_res, self.dataset.resolution_lr
            )));
        }
        if self.colorxform.k == 0 || self.colorxform.k > self.dataset.resolution_hr {
            return Err(CliError::Config(format!("colorxform.k = {} out of range", self.colorxform.k)));
        }
        if self.ablation.seeds.is_empty() {
            return Err(CliError::Config("ablation needs at least one seed".into()));
        }
        Ok(())
    }

    /// Fills every stage seed from the master seed and ties the denoiser's
    /// training-time conditioning to the sampling mode.
    pub fn with_derived_seeds(mut self) -> Self {
        let m = self.seed;
        let d = |s: u64| derive_seed(m, s, 0);
        self.dataset.master_seed = m;
        self.feature_seed = d(stream::FEATURES);
        self.embedder.model.seed = d(stream::EMBEDDER);
        self.phone_gan.seed = d(stream::PHONE_GAN);
        self.inversion.init_seed = d(stream::INVERSION);
        self.finetune.seed = d(stream::FINETUNE);
        self.diffusion.train.seed = d(stream::DIFFUSION);
        self.diffusion.sample_seed = d(stream::SAMPLING);
        self.diffusion.train.conditioning = self.diffusion.mode.conditions_training();
        self
    }

    /// Seeds of one ablation replicate; every arm of the replicate shares them.
    pub fn with_replicate(mut self, replicate: u64) -> Self {
        let r = derive_seed(self.seed, stream::ABLATION, replicate);
        self.finetune.seed = derive_seed(r, stream::FINETUNE, 0);
        self.diffusion.train.seed = derive_seed(r, stream::DIFFUSION, 0);
        self.diffusion.sample_seed = derive_seed(r, stream::SAMPLING, 0);
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Default configuration as a commented TOML document.
    pub fn defaults_toml() -> String {
        let mut t = defaults_table();
        for key in DERIVED_KEYS {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, head) = parts.split_last().expect("key");
            let mut cur = &mut t;
            for p in head {
                cur = cur.get_mut(*p).and_then(Value::as_table_mut).expect("derived key path");
            }
            cur.remove(*last);
        }
        format!("# texbridge run configuration\n# seeds of individual stages are derived from `seed`\n{}", toml::to_string(&t).expect("toml"))
    }
}

/// Dotted paths of every leaf where `a` and `b` differ.
pub fn diff_paths(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_as_toml_literals() {
        assert_eq!(parse_override("finetune.steps=7").unwrap().1, Value::Integer(7));
        assert_eq!(parse_override("diffusion.mode=Vanilla").unwrap().1, Value::String("Vanilla".into()));
        assert_eq!(parse_override("ablation.seeds=[1, 2]").unwrap().1, Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn unknown_and_derived_keys_are_config_errors() {
        let o = |s: &str| RunConfig::resolve(None, None, &[s.to_string()]);
        assert!(matches!(o("finetune.stepz=3"), Err(CliError::Config(_))));
        assert!(matches!(o("finetune.seed=3"), Err(CliError::Config(_))));
        assert!(matches!(o("finetune.steps=\"many\""), Err(CliError::Config(_))));
        assert_eq!(o("finetune.freeze_upto=0").unwrap().finetune.freeze_upto, None);
    }

    #[test]
    fn derived_seeds_follow_the_master_seed() {
        let a = RunConfig::resolve(None, Some(1), &[]).unwrap();
        let b = RunConfig::resolve(None, Some(2), &[]).unwrap();
        assert_eq!(a.dataset.master_seed, 1);
        assert_ne!(a.finetune.seed, b.finetune.seed);
        assert_eq!(a, RunConfig::resolve(None, Some(1), &[]).unwrap());
        assert!(a.diffusion.train.conditioning);
    }

    #[test]
    fn diff_paths_names_changed_leaves() {
        let a = RunConfig::default().to_json();
        let mut c = RunConfig::default();
        c.finetune.lambda2 = 0.0;
        assert_eq!(diff_paths(&a, &c.to_json()), vec!["finetune.lambda2".to_string()]);
    }
}
