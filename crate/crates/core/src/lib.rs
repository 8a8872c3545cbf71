pub mod autodiff;
pub mod checkpoint;
pub mod colorxform;
pub mod error;
pub mod gradcheck;
pub mod inversion;
pub mod metrics;
pub mod netcore;
pub mod params;
pub mod phone_gan;
pub mod resshift_sr;
pub mod scalar;
pub mod studio_finetune;
pub mod synthtex;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::{Dual, Real};
pub use tensor::Tensor;

/// Scalar of the desk-scale pipeline.
pub type Scalar = f32;
pub type Image = Tensor<Scalar>;
pub type StyleGenerator = netcore::Generator<Scalar>;
pub type Critic = netcore::Discriminator<Scalar>;
pub type Embedder = netcore::IdentityEmbedder<Scalar>;
pub type Features = netcore::FeatureExtractor<Scalar>;
pub type Latent = netcore::WPlus<Scalar>;
pub type Latents = inversion::InvertedSet<Scalar>;
pub type SrModel = resshift_sr::Denoiser<Scalar>;
pub type Sample = synthtex::TextureSample<Scalar>;
