//! Run directory bookkeeping: which stage produced which file, with hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use texbridge_core::checkpoint::sha256_hex;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory when inside it, absolute otherwise.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's config section and its inputs' fingerprints.
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_s: f64,
    pub summary: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub master_seed: u64,
    pub source_revision: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub data_dir: String,
    pub stages: BTreeMap<String, StageRecord>,
    /// Metric reports of the evaluation stage.
    pub reports: Vec<Artifact>,
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    match fs::read(path) {
        Ok(b) => Ok(sha256_hex(&b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingFile(path.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

pub fn canonical_hash(v: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("serializable"))
}

fn source_revision() -> String {
    let rev = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    format!("{} {}", env!("CARGO_PKG_VERSION"), rev.unwrap_or_else(|| "unknown".into()))
}

/// An open run directory. Single writer.
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    pub data_dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Opens (or starts) the run in `root`; every recorded artifact is verified.
    pub fn open(cfg: RunConfig, root: &Path, data_root: Option<&Path>) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        let root = root.canonicalize()?;
        let data_dir = match data_root {
            Some(d) => d.join(format!("synthtex-{}", &canonical_hash(&cfg.dataset)[..12])),
            None => root.join("data"),
        };
        let path = root.join(MANIFEST_FILE);
        let config = cfg.to_json();
        let fresh = RunManifest {
            schema_version: crate::config::SCHEMA_VERSION,
            master_seed: cfg.seed,
            source_revision: source_revision(),
            config_hash: canonical_hash(&config),
            config,
            data_dir: data_dir.display().to_string(),
            stages: BTreeMap::new(),
            reports: Vec::new(),
        };
        let manifest = if path.exists() {
            let old: RunManifest = serde_json::from_slice(&fs::read(&path)?)?;
            let run = Run { cfg: cfg.clone(), root: root.clone(), data_dir: data_dir.clone(), manifest: old };
            run.verify_all()?;
            // stages stay; their fingerprints decide reuse under the new config
            RunManifest { stages: run.manifest.stages, reports: run.manifest.reports, ..fresh }
        } else {
            fresh
        };
        Ok(Self { cfg, root, data_dir, manifest })
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn artifact(&self, path: &Path) -> CliResult<Artifact> {
        let sha256 = hash_file(path)?;
        let shown = path.strip_prefix(&self.root).unwrap_or(path);
        Ok(Artifact { path: shown.display().to_string(), sha256 })
    }

    fn verify(&self, a: &Artifact) -> CliResult<()> {
        let p = self.resolve(&a.path);
        let found = hash_file(&p)?;
        if found != a.sha256 {
            return Err(CliError::HashMismatch { path: p, expected: a.sha256.clone(), found });
        }
        Ok(())
    }

    pub fn verify_all(&self) -> CliResult<()> {
        for rec in self.manifest.stages.values() {
            rec.artifacts.iter().try_for_each(|a| self.verify(a))?;
        }
        self.manifest.reports.iter().try_for_each(|a| self.verify(a))
    }

    /// Record of an upstream stage whose artifacts still match their hashes.
    pub fn require(&self, stage: &str) -> CliResult<&StageRecord> {
        let rec = self
            .manifest
            .stages
            .get(stage)
            .ok_or_else(|| CliError::MissingStage { stage: stage.into(), what: "a checkpoint in this run directory".into() })?;
        rec.artifacts.iter().try_for_each(|a| self.verify(a))?;
        Ok(rec)
    }

    /// Path of the artifact of `stage` whose file name is `name`.
    pub fn artifact_path(&self, stage: &str, name: &str) -> CliResult<PathBuf> {
        let rec = self.require(stage)?;
        rec.artifacts
            .iter()
            .find(|a| Path::new(&a.path).file_name().is_some_and(|f| f == name))
            .map(|a| self.resolve(&a.path))
            .ok_or_else(|| CliError::MissingStage { stage: stage.into(), what: format!("`{name}`") })
    }

    pub fn record(&mut self, stage: &str, rec: StageRecord) -> CliResult<()> {
        self.manifest.stages.insert(stage.to_string(), rec);
        self.save()
    }

    pub fn save(&self) -> CliResult<()> {
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.root.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn dir(&self, name: &str) -> CliResult<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d)?;
        Ok(d)
    }
}
