//! Text-conditioned latent diffusion for small molecules.

pub mod applications;
pub mod codec;
pub mod diffusion;
pub mod encoder;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod smiles;
pub mod tokenizer;
