use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::identity::IdentityParams;
use super::pngio::{read_mask, read_rgb16, write_mask, write_rgb16};
use super::render::{Expression, Hole, LightingCondition, TextureSample, World};
use super::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STREAM_IDENTITY: u64 = 1;
const STREAM_CAPTURE: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_EMBED: u64 = 4;

/// First identity id of the embedder's disjoint identity pool.
pub const EMBEDDER_ID_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub master_seed: u64,
    /// Phone-captured training identities (includes the paired ones).
    pub phone_ids: usize,
    /// Studio training identities (includes the paired ones).
    pub studio_ids: usize,
    pub paired: usize,
    pub holdout_paired: usize,
    pub holdout_unpaired: usize,
    pub resolution_lr: usize,
    pub resolution_hr: usize,
    pub max_holes: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            master_seed: 2024,
            phone_ids: 600,
            studio_ids: 40,
            paired: 12,
            holdout_paired: 4,
            holdout_unpaired: 20,
            resolution_lr: 64,
            resolution_hr: 128,
            max_holes: 2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lr, hr) = (self.resolution_lr, self.resolution_hr);
        if !lr.is_power_of_two() || !hr.is_power_of_two() || lr < 8 || hr <= lr {
            return Err(Error::Invalid(format!("resolutions lr={lr}, hr={hr} must be powers of two with hr > lr >= 8")));
        }
        if self.phone_ids == 0 {
            return Err(Error::Invalid("at least one phone identity is required".into()));
        }
        if self.paired > self.studio_ids {
            return Err(Error::Invalid(format!("paired ids ({}) must be a subset of studio ids ({})", self.paired, self.studio_ids)));
        }
        if self.paired > self.phone_ids {
            return Err(Error::Invalid(format!("paired ids ({}) must be a subset of phone ids ({})", self.paired, self.phone_ids)));
        }
        Ok(())
    }

    pub fn world(&self) -> World {
        World { lr: self.resolution_lr, hr: self.resolution_hr }
    }
}

/// Lighting and holes of one phone capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureRecord {
    pub lighting: LightingCondition,
    pub holes: Vec<Hole>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub phone_ids: Vec<u64>,
    pub studio_ids: Vec<u64>,
    pub paired_ids: Vec<u64>,
    pub holdout_paired_ids: Vec<u64>,
    pub holdout_unpaired_ids: Vec<u64>,
    pub resolution_lr: usize,
    pub resolution_hr: usize,
    pub identity_seeds: BTreeMap<u64, u64>,
    pub captures: BTreeMap<u64, CaptureRecord>,
    /// Human-readable statement of the assumed phone lighting distribution.
    pub wild_distribution: String,
}

fn set(ids: &[u64]) -> BTreeSet<u64> {
    ids.iter().copied().collect()
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let (phone, studio, paired) = (set(&self.phone_ids), set(&self.studio_ids), set(&self.paired_ids));
        if !paired.is_subset(&studio) || !paired.is_subset(&phone) {
            return Err(Error::Invalid("paired ids must be a subset of both phone and studio ids".into()));
        }
        let train: BTreeSet<u64> = phone.union(&studio).copied().collect();
        let (hp, hu) = (set(&self.holdout_paired_ids), set(&self.holdout_unpaired_ids));
        if !hp.is_disjoint(&train) || !hu.is_disjoint(&train) || !hp.is_disjoint(&hu) {
            return Err(Error::Contamination("holdout ids overlap a training split".into()));
        }
        Ok(())
    }

    /// Every id visible to any training stage.
    pub fn training_ids(&self) -> BTreeSet<u64> {
        set(&self.phone_ids).union(&set(&self.studio_ids)).copied().collect()
    }

    pub fn holdout_ids(&self) -> Vec<u64> {
        self.holdout_paired_ids.iter().chain(&self.holdout_unpaired_ids).copied().collect()
    }

    /// Ids with a phone capture.
    pub fn phone_capture_ids(&self) -> Vec<u64> {
        self.phone_ids.iter().chain(&self.holdout_ids()).copied().collect()
    }

    /// Ids with a studio capture.
    pub fn studio_capture_ids(&self) -> Vec<u64> {
        self.studio_ids.iter().chain(&self.holdout_paired_ids).copied().collect()
    }

    /// Ids whose phone capture is also stored at high resolution.
    pub fn phone_hr_ids(&self) -> Vec<u64> {
        self.paired_ids.iter().chain(&self.holdout_ids()).copied().collect()
    }

    pub fn world(&self) -> World {
        World { lr: self.resolution_lr, hr: self.resolution_hr }
    }

    pub fn identity(&self, id: u64) -> Result<IdentityParams> {
        let seed = self.identity_seeds.get(&id).ok_or_else(|| Error::Invalid(format!("unknown identity {id}")))?;
        Ok(IdentityParams::generate(id, *seed, self.resolution_hr))
    }

    pub fn plan(cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.phone_ids as u64;
        let studio_only = (cfg.studio_ids - cfg.paired) as u64;
        let phone_ids: Vec<u64> = (0..p).collect();
        let mut shuffled = phone_ids.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, STREAM_SPLIT, 0)));
        let mut paired_ids: Vec<u64> = shuffled[..cfg.paired].to_vec();
        paired_ids.sort_unstable();
        let mut studio_ids: Vec<u64> = paired_ids.iter().copied().chain(p..p + studio_only).collect();
        studio_ids.sort_unstable();
        let mut next = p + studio_only;
        let holdout_paired_ids: Vec<u64> = (next..next + cfg.holdout_paired as u64).collect();
        next += cfg.holdout_paired as u64;
        let holdout_unpaired_ids: Vec<u64> = (next..next + cfg.holdout_unpaired as u64).collect();
        next += cfg.holdout_unpaired as u64;
        let identity_seeds = (0..next).map(|id| (id, derive_seed(cfg.master_seed, STREAM_IDENTITY, id))).collect();
        let mut m = Self {
            master_seed: cfg.master_seed,
            phone_ids,
            studio_ids,
            paired_ids,
            holdout_paired_ids,
            holdout_unpaired_ids,
            resolution_lr: cfg.resolution_lr,
            resolution_hr: cfg.resolution_hr,
            identity_seeds,
            captures: BTreeMap::new(),
            wild_distribution: "direction ~ normalize(U(-0.8,0.8), U(-0.8,0.8), U(0.35,1)); intensity ~ U(0.7,1.2); \
                 color_cast ~ (U(0.8,1.15), U(0.8,1.1), U(0.75,1.1)); shadow_strength ~ U(0.3,0.8); \
                 holes: 0..=max_holes ellipses in the 12% left/right border band"
                .into(),
        };
        for id in m.phone_capture_ids() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.master_seed, STREAM_CAPTURE, id));
            let lighting = LightingCondition::random_wild(&mut rng);
            let n_holes = rng.gen_range(0..=cfg.max_holes);
            let holes = (0..n_holes).map(|_| Hole::random(&mut rng)).collect();
            m.captures.insert(id, CaptureRecord { lighting, holes });
        }
        m.validate()?;
        Ok(m)
    }
}

/// Samples held in memory, keyed by identity id.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub phone_lr: BTreeMap<u64, TextureSample>,
    pub phone_hr: BTreeMap<u64, TextureSample>,
    pub studio_lr: BTreeMap<u64, TextureSample>,
    pub studio_hr: BTreeMap<u64, TextureSample>,
}

/// Rounds to the 16-bit grid so that in-memory and persisted samples agree.
fn quantize(mut s: TextureSample) -> TextureSample {
    s.image = s.image.map(|v| ((v as f64 * 65535.0).round() / 65535.0) as f32);
    s
}

impl Dataset {
    /// Renders every sample of `manifest`. Identities render in parallel; the
    /// result does not depend on scheduling.
    pub fn render(manifest: &DatasetManifest) -> Result<Self> {
        let world = manifest.world();
        let studio = LightingCondition::studio();
        let phone = |res: usize, ids: Vec<u64>| -> Result<BTreeMap<u64, TextureSample>> {
            ids.par_iter()
                .map(|&id| {
                    let cap = &manifest.captures[&id];
                    let s = world.render(&manifest.identity(id)?, &cap.lighting, &cap.holes, Expression::NEUTRAL, res)?;
                    Ok((id, quantize(s)))
                })
                .collect()
        };
        let studio_set = |res: usize| -> Result<BTreeMap<u64, TextureSample>> {
            manifest
                .studio_capture_ids()
                .par_iter()
                .map(|&id| Ok((id, quantize(world.render(&manifest.identity(id)?, &studio, &[], Expression::NEUTRAL, res)?))))
                .collect()
        };
        Ok(Self {
            phone_lr: phone(world.lr, manifest.phone_capture_ids())?,
            phone_hr: phone(world.hr, manifest.phone_hr_ids())?,
            studio_lr: studio_set(world.lr)?,
            studio_hr: studio_set(world.hr)?,
            manifest: manifest.clone(),
        })
    }

    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        Self::render(&DatasetManifest::plan(cfg)?)
    }

    fn groups(&self) -> [(&'static str, &BTreeMap<u64, TextureSample>); 4] {
        [("phone_lr", &self.phone_lr), ("phone_hr", &self.phone_hr), ("studio_lr", &self.studio_lr), ("studio_hr", &self.studio_hr)]
    }

    /// Writes `manifest.json` plus one 16-bit PNG (and 1-bit mask PNG) per sample.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (name, samples) in self.groups() {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            for (id, s) in samples {
                let img = sub.join(format!("{id:06}.png"));
                write_rgb16(&img, &s.image)?;
                let mask = sub.join(format!("{id:06}_mask.png"));
                write_mask(&mask, &s.mask, s.resolution, s.resolution)?;
                written.push(img);
                written.push(mask);
            }
        }
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_vec_pretty(&self.manifest)?)?;
        written.push(mpath);
        Ok(written)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        manifest.validate()?;
        let studio = LightingCondition::studio();
        let read = |name: &str, ids: Vec<u64>| -> Result<BTreeMap<u64, TextureSample>> {
            ids.into_iter()
                .map(|id| {
                    let sub = dir.join(name);
                    let image = read_rgb16(&sub.join(format!("{id:06}.png")))?;
                    let (mask, h, _) = read_mask(&sub.join(format!("{id:06}_mask.png")))?;
                    let condition = if name.starts_with("phone") { manifest.captures[&id].lighting.clone() } else { studio.clone() };
                    Ok((id, TextureSample { identity_id: id, condition, image, mask, resolution: h }))
                })
                .collect()
        };
        Ok(Self {
            phone_lr: read("phone_lr", manifest.phone_capture_ids())?,
            phone_hr: read("phone_hr", manifest.phone_hr_ids())?,
            studio_lr: read("studio_lr", manifest.studio_capture_ids())?,
            studio_hr: read("studio_hr", manifest.studio_capture_ids())?,
            manifest,
        })
    }
}

/// Renders the dataset described by `cfg` into `dir`.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    let ds = Dataset::generate(cfg)?;
    let files = ds.save(dir)?;
    Ok((ds.manifest, files))
}

/// Labelled renders of identities outside every dataset split.
#[derive(Clone, Debug)]
pub struct EmbedderCorpus {
    pub train_images: Vec<Tensor<f32>>,
    pub train_labels: Vec<usize>,
    pub heldout_images: Vec<Tensor<f32>>,
    pub heldout_labels: Vec<usize>,
}

/// Each class gets one studio render plus wild renders with random lighting
/// and holes; the held-out renders use fresh lighting draws.
pub fn embedder_corpus(master_seed: u64, classes: usize, train_per_class: usize, heldout_per_class: usize, res: usize) -> Result<EmbedderCorpus> {
    let world = World { lr: res, hr: 2 * res };
    let per_class: Vec<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)> = (0..classes)
        .into_par_iter()
        .map(|k| {
            let seed = derive_seed(master_seed, STREAM_EMBED, k as u64);
            let id = IdentityParams::generate(EMBEDDER_ID_BASE + k as u64, seed, world.hr);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE3BE);
            let mut render = |i: usize| -> Result<Tensor<f32>> {
                if i == 0 {
                    return Ok(world.render(&id, &LightingCondition::studio(), &[], Expression::NEUTRAL, res)?.image);
                }
                let cond = LightingCondition::random_wild(&mut rng);
                let holes: Vec<Hole> = (0..rng.gen_range(0..=2)).map(|_| Hole::random(&mut rng)).collect();
                Ok(world.render(&id, &cond, &holes, Expression::NEUTRAL, res)?.image)
            };
            let train = (0..train_per_class).map(&mut render).collect::<Result<Vec<_>>>()?;
            let held = (0..heldout_per_class).map(|i| render(i + 1)).collect::<Result<Vec<_>>>()?;
            Ok((train, held))
        })
        .collect::<Result<_>>()?;
    let mut c = EmbedderCorpus { train_images: vec![], train_labels: vec![], heldout_images: vec![], heldout_labels: vec![] };
    for (k, (train, held)) in per_class.into_iter().enumerate() {
        c.train_labels.extend(std::iter::repeat(k).take(train.len()));
        c.train_images.extend(train);
        c.heldout_labels.extend(std::iter::repeat(k).take(held.len()));
        c.heldout_images.extend(held);
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { phone_ids: 10, studio_ids: 5, paired: 3, holdout_paired: 2, holdout_unpaired: 2, ..Default::default() }
    }

    #[test]
    fn default_split_sizes() {
        let m = DatasetManifest::plan(&DatasetConfig::default()).unwrap();
        assert_eq!(m.paired_ids.len(), 12);
        assert_eq!(m.phone_ids.len(), 600);
        assert_eq!(m.studio_ids.len(), 40);
        assert_eq!(m.holdout_paired_ids.len(), 4);
        assert_eq!(m.holdout_unpaired_ids.len(), 20);
    }

    #[test]
    fn paired_outside_studio_is_rejected() {
        let bad = DatasetConfig { studio_ids: 2, paired: 3, ..small() };
        assert!(DatasetManifest::plan(&bad).is_err());
        let mut m = DatasetManifest::plan(&small()).unwrap();
        m.paired_ids.push(m.holdout_unpaired_ids[0]);
        assert!(m.validate().is_err());
    }

    #[test]
    fn save_load_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let (m1, _) = build_dataset(&small(), &dir.path().join("a")).unwrap();
        let (m2, _) = build_dataset(&small(), &dir.path().join("b")).unwrap();
        assert_eq!(m1, m2);
        let bytes = |d: &str| fs::read(dir.path().join(d).join("manifest.json")).unwrap();
        assert_eq!(bytes("a"), bytes("b"));
        let mem = Dataset::generate(&small()).unwrap();
        let disk = Dataset::load(&dir.path().join("a")).unwrap();
        for (id, s) in &mem.phone_lr {
            assert_eq!(s.image, disk.phone_lr[id].image);
            assert_eq!(s.mask, disk.phone_lr[id].mask);
        }
        assert_eq!(disk.studio_hr.len(), 5 + 2);
        assert_eq!(disk.phone_hr.len(), 3 + 4);
    }

    #[test]
    fn corpus_labels() {
        let c = embedder_corpus(1, 3, 4, 2, 32).unwrap();
        assert_eq!(c.train_images.len(), 12);
        assert_eq!(c.heldout_labels, vec![0, 0, 1, 1, 2, 2]);
    }
}
