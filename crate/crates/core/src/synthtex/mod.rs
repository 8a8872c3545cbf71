//! Procedural texture world: identities, studio and in-the-wild renders,
//! border holes, and a reproducible dataset with known ground truth.

mod dataset;
mod identity;
mod moles;
mod pngio;
mod render;

pub use dataset::{build_dataset, embedder_corpus, CaptureRecord, Dataset, DatasetConfig, DatasetManifest, EmbedderCorpus};
pub use identity::{make_identity, Blob, IdentityParams, Mole};
pub use moles::{mole_contrast, mole_recall, MOLE_THRESHOLD};
pub use pngio::{read_mask, read_rgb16, write_mask, write_rgb16};
pub use render::{
    render_texture, shading_field, Expression, Hole, LightingCondition, LightingKind, TextureSample, World,
};

/// Derives an independent 64-bit seed for `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
