//! Building blocks for prototyping vertical federated learning: parties
//! holding different feature columns of the same records train a joint
//! model by exchanging partial predictions, residuals, encrypted gradients
//! or split-network activations.

pub mod comms;
pub mod config;
pub mod data;
pub mod matching;
pub mod metrics;
pub mod models;
pub mod paillier;
pub mod protocols;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use comms::{Communicator, Message, PartyId, Role};
pub use tensor::Tensor;
