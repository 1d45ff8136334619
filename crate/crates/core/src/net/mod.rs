//! The generator (pyramid contraction, residual stage, attended expansion)
//! and the residual discriminator.

mod config;
mod discriminator;
mod generator;

pub use config::{AblationVariant, Branch, DiscriminatorConfig, FinalActivation, GeneratorConfig, PyramidSpec};
pub use discriminator::{DiscLayer, Discriminator};
pub use generator::{ExpansionStage, Generator, PccaBlock, ResidualBlock};

use sha2::{Digest, Sha256};

use crate::tensor::Shape;

/// Stable hash of an architecture description and its parameter manifest.
pub fn fingerprint(description: &str, manifest: &[(String, Shape)]) -> String {
    let mut h = Sha256::new();
    h.update(description.as_bytes());
    for (name, shape) in manifest {
        h.update(b"\n");
        h.update(name.as_bytes());
        for d in shape.dims() {
            h.update((d as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
