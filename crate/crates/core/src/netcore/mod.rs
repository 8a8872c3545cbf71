//! Style-based generator, discriminator, fixed perceptual features and the
//! identity embedder, all generic over the scalar type.

mod discriminator;
mod embedder;
mod features;
mod generator;
mod persist;

pub use discriminator::{DiscConfig, Discriminator};
pub use embedder::{embedding_distance, EmbedderConfig, EmbedderReport, IdentityEmbedder};
pub use features::FeatureExtractor;
pub use generator::{param_resolution, partition_trainables, split_layers, GenConfig, Generator, LatentZ, Partition, WPlus};

use crate::autodiff::{Graph, Var};
use crate::scalar::Real;

pub(crate) const LRELU_SLOPE: f64 = 0.2;

pub(crate) fn lrelu<T: Real>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::lit(LRELU_SLOPE))
}

/// Plain `x[N, C, H, W] → [N, O, H, W]` conv with bias.
pub(crate) fn conv_bias<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var, pad: usize) -> Var {
    let y = g.conv2d(x, w, pad);
    g.add_bias(y, b)
}

pub(crate) fn dense<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Var {
    let y = g.linear(x, w);
    g.add_bias(y, b)
}
