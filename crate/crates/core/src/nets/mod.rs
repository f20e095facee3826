//! Network definitions: translators, patch discriminators, the shape VAE and
//! its latent discriminator.

pub mod generator;
pub mod layers;
pub mod patch_disc;
pub mod vae;

pub use generator::{calibrate, global_average_pool, Generator, GeneratorSpec, OutputActivation};
pub use patch_disc::{PatchDiscSpec, PatchDiscriminator};
pub use vae::{reparameterize, LatentCode, LatentDiscSpec, LatentDiscriminator, ShapeVae, VaeSpec};
