//! Evaluation metrics computed by the master over the full matched set.

use crate::comms::Communicator;
use crate::metrics::{now_micros, MetricName, MetricRecord};
use crate::tensor::Tensor;

use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
}

impl EvalMetrics {
    pub(crate) fn log(&self, comm: &Communicator, epoch: u64) -> Result<(), ProtocolError> {
        let entries = [
            (MetricName::Loss, Some(self.loss)),
            (MetricName::Accuracy, self.accuracy),
            (MetricName::Auc, self.auc),
        ];
        for (name, value) in entries {
            if let Some(value) = value {
                comm.sink().log_metric(MetricRecord {
                    ts_unix_micros: now_micros(),
                    party: comm.me(),
                    epoch,
                    name,
                    value,
                })?;
            }
        }
        Ok(())
    }

    pub(crate) fn classification(loss: f64, z: &Tensor, y: &Tensor) -> Self {
        EvalMetrics {
            loss,
            accuracy: Some(accuracy(z.data(), y.data())),
            auc: auc(z.data(), y.data()),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// `½ · mean(d²)`.
pub(crate) fn squared_loss(d: &Tensor) -> f64 {
    0.5 * mean(d.data().iter().map(|v| v * v), d.rows())
}

/// Mean binary cross-entropy on logits, computed without overflow.
pub fn log_loss(z: &[f64], y: &[f64]) -> f64 {
    let terms = z.iter().zip(y).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p());
    mean(terms, z.len())
}

/// Second-order Taylor expansion of log-loss around zero.
pub(crate) fn taylor_loss(z: &[f64], y: &[f64]) -> f64 {
    let terms = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| std::f64::consts::LN_2 - (y - 0.5) * z + z * z / 8.0);
    mean(terms, z.len())
}

/// Fraction of rows where `z ≥ 0` agrees with the label.
pub fn accuracy(z: &[f64], y: &[f64]) -> f64 {
    let hits = z
        .iter()
        .zip(y)
        .filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5))
        .count();
    mean(std::iter::repeat(1.0).take(hits), z.len())
}

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// sharing their average rank. `None` when only one class is present.
pub fn auc(scores: &[f64], y: &[f64]) -> Option<f64> {
    let positives = y.iter().filter(|&&v| v >= 0.5).count();
    let negatives = y.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares the mean rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if y[k] >= 0.5 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}
