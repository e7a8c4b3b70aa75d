use super::{draw_weights, init_stream, Init, ModelError};
use crate::comms::PartyId;
use crate::tensor::Tensor;

/// One party's slice `w_k` of a linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlock {
    pub weights: Tensor,
}

impl LinearBlock {
    pub fn new(weights: Tensor) -> Self {
        LinearBlock { weights }
    }

    pub fn init(features: usize, init: Init, seed: u64, party: PartyId) -> Self {
        let mut rng = init_stream(seed, party);
        LinearBlock {
            weights: draw_weights(features, 1, features, init, &mut rng),
        }
    }

    pub fn features(&self) -> usize {
        self.weights.rows()
    }

    fn check(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.cols() != self.features() {
            return Err(ModelError::FeatureCount {
                expected: self.features(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// `u = X · w`.
    pub fn forward_partial(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.check(x)?;
        Ok(x.matmul(&self.weights)?)
    }

    /// `Xᵀ · d`, the unscaled gradient for residual `d`.
    pub fn gradient(&self, x: &Tensor, d: &Tensor) -> Result<Tensor, ModelError> {
        self.check(x)?;
        Ok(x.t_matmul(d)?)
    }

    /// `w ← w − (lr/batch) · g`.
    pub fn apply_gradient(&mut self, g: &Tensor, lr: f64, batch: usize) -> Result<(), ModelError> {
        self.weights = Tensor::axpy(-(lr / batch as f64), g, &self.weights)?;
        Ok(())
    }

    /// `w ← w − (lr/batch) · Xᵀ · d`.
    pub fn backward_partial(&mut self, x: &Tensor, d: &Tensor, lr: f64, batch: usize) -> Result<(), ModelError> {
        let g = self.gradient(x, d)?;
        self.apply_gradient(&g, lr, batch)
    }
}
