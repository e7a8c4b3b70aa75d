use rand::Rng;

use super::{draw_weights, relu, sigmoid, Init, ModelError};
use crate::tensor::Tensor;

/// A party's lower half of the split network: `A = ReLU(X·W1 + b1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBottom {
    pub w1: Tensor,
    pub b1: Tensor,
    cache: Option<(Tensor, Tensor)>,
}

impl MlpBottom {
    pub fn new(w1: Tensor, b1: Tensor) -> Self {
        MlpBottom { w1, b1, cache: None }
    }

    pub fn init(features: usize, hidden: usize, init: Init, rng: &mut impl Rng) -> Self {
        MlpBottom::new(
            draw_weights(features, hidden, features, init, rng),
            Tensor::zeros(1, hidden),
        )
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn pre_activation(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if x.cols() != self.w1.rows() {
            return Err(ModelError::FeatureCount {
                expected: self.w1.rows(),
                got: x.cols(),
            });
        }
        Ok(x.matmul(&self.w1)?.add_row_broadcast(&self.b1)?)
    }

    /// Activations without touching the training cache.
    pub fn activations(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.pre_activation(x)?.map(relu))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, ModelError> {
        let pre = self.pre_activation(x)?;
        let act = pre.map(relu);
        self.cache = Some((x.clone(), pre));
        Ok(act)
    }

    /// `(∂L/∂W1, ∂L/∂b1)` given `∂L/∂A` for the cached batch.
    pub fn gradients(&self, d_act: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let (x, pre) = self.cache.as_ref().ok_or(ModelError::MissingCache)?;
        let d_pre = d_act.zip_with("relu_mask", pre, |g, p| if p > 0.0 { g } else { 0.0 })?;
        Ok((x.t_matmul(&d_pre)?, d_pre.col_sums()))
    }

    pub fn backward(&mut self, d_act: &Tensor, lr: f64) -> Result<(), ModelError> {
        let (gw, gb) = self.gradients(d_act)?;
        self.w1 = Tensor::axpy(-lr, &gw, &self.w1)?;
        self.b1 = Tensor::axpy(-lr, &gb, &self.b1)?;
        self.cache = None;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub w2: Tensor,
    pub b2: f64,
    /// `∂L/∂A_k` per input block, in input order.
    pub d_acts: Vec<Tensor>,
}

/// The master's head: `z = concat(A_k)·W2 + b2`, trained on mean log-loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub w2: Tensor,
    pub b2: f64,
    cache: Option<(Vec<usize>, Tensor, Tensor)>,
}

impl MlpHead {
    pub fn new(w2: Tensor, b2: f64) -> Self {
        MlpHead { w2, b2, cache: None }
    }

    pub fn init(total_hidden: usize, init: Init, rng: &mut impl Rng) -> Self {
        MlpHead::new(draw_weights(total_hidden, 1, total_hidden, init, rng), 0.0)
    }

    pub fn logits(&self, acts: &[&Tensor]) -> Result<Tensor, ModelError> {
        let joined = Tensor::hcat(acts)?;
        Ok(self.logits_joined(&joined)?)
    }

    fn logits_joined(&self, joined: &Tensor) -> Result<Tensor, ModelError> {
        if joined.cols() != self.w2.rows() {
            return Err(ModelError::FeatureCount {
                expected: self.w2.rows(),
                got: joined.cols(),
            });
        }
        let b2 = self.b2;
        Ok(joined.matmul(&self.w2)?.map(|v| v + b2))
    }

    pub fn forward(&mut self, acts: &[&Tensor]) -> Result<Tensor, ModelError> {
        let widths = acts.iter().map(|a| a.cols()).collect();
        let joined = Tensor::hcat(acts)?;
        let z = self.logits_joined(&joined)?;
        self.cache = Some((widths, joined, z.clone()));
        Ok(z)
    }

    /// Gradients of mean log-loss for labels `y`: `∂L/∂z = (σ(z) − y)/B`.
    pub fn gradients(&self, y: &Tensor) -> Result<HeadGradients, ModelError> {
        let (widths, joined, z) = self.cache.as_ref().ok_or(ModelError::MissingCache)?;
        let batch = z.rows() as f64;
        let dz = z.zip_with("log_loss_grad", y, |z, y| (sigmoid(z) - y) / batch)?;
        let w2 = joined.t_matmul(&dz)?;
        let b2 = dz.data().iter().sum();
        let d_joined = dz.matmul(&self.w2.transpose())?;
        let mut d_acts = Vec::with_capacity(widths.len());
        let mut start = 0;
        for w in widths {
            d_acts.push(d_joined.select_cols(start, start + w)?);
            start += w;
        }
        Ok(HeadGradients { w2, b2, d_acts })
    }

    /// Updates the head and returns `∂L/∂A_k` computed with the weights
    /// from before the update.
    pub fn backward(&mut self, y: &Tensor, lr: f64) -> Result<Vec<Tensor>, ModelError> {
        let g = self.gradients(y)?;
        self.w2 = Tensor::axpy(-lr, &g.w2, &self.w2)?;
        self.b2 -= lr * g.b2;
        self.cache = None;
        Ok(g.d_acts)
    }
}
