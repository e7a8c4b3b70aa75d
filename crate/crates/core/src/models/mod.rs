//! Per-party model pieces: linear blocks for the regression protocols and
//! the two halves of a split one-hidden-layer network.

mod linear;
mod mlp;

use rand::Rng;
use thiserror::Error;

use crate::comms::PartyId;
use crate::rng::{self, Purpose};
use crate::tensor::{Tensor, TensorError};

pub use linear::LinearBlock;
pub use mlp::{HeadGradients, MlpBottom, MlpHead};

pub const DEFAULT_HIDDEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward called without a cached forward pass")]
    MissingCache,
    #[error("block expects {expected} features, batch has {got}")]
    FeatureCount { expected: usize, got: usize },
}

/// How fresh parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]` from the party's seeded stream.
    #[default]
    Uniform,
    Zeros,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Draws a `rows × cols` weight matrix. Consumes `rng` in row-major order.
pub(crate) fn draw_weights(rows: usize, cols: usize, fan_in: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(rows, cols),
        Init::Uniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(rows, cols, data).expect("sized")
        }
    }
}

pub fn init_stream(seed: u64, party: PartyId) -> rand_chacha::ChaCha20Rng {
    rng::stream(seed, Purpose::Init, party)
}
