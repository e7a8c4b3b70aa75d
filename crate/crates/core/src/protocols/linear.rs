//! Plaintext vertical linear and logistic regression.
//!
//! Each step the master sends batch indices, members reply with their
//! partial predictions `u_k = X_k·w_k`, the master forms `z = Σ u_k`, the
//! residual `d = link(z) − y`, and broadcasts `d`. Every party then takes
//! a gradient step on its own block with `X_kᵀ·d`.

use crate::comms::{Communicator, Message, PartyId, Phase, Role};
use crate::models::{sigmoid, LinearBlock};
use crate::tensor::Tensor;

use super::eval::{log_loss, squared_loss, EvalMetrics};
use super::{
    aggregate, batch_schedule, batches_per_epoch, encode_indices, expect_shape, gather_tensors, recv_batch, with_bias, AlignedData, PartyOutcome,
    ProtocolError, TrainConfig, TrainedModel,
};

#[derive(Clone, Copy)]
enum Link {
    Identity,
    Logistic,
}

impl Link {
    fn residual(self, z: &Tensor, y: &Tensor) -> Result<Tensor, ProtocolError> {
        Ok(match self {
            Link::Identity => z.sub(y)?,
            Link::Logistic => z.zip_with("residual", y, |z, y| sigmoid(z) - y)?,
        })
    }

    fn evaluate(self, z: &Tensor, y: &Tensor) -> Result<EvalMetrics, ProtocolError> {
        Ok(match self {
            Link::Identity => EvalMetrics {
                loss: squared_loss(&self.residual(z, y)?),
                accuracy: None,
                auc: None,
            },
            Link::Logistic => EvalMetrics::classification(log_loss(z.data(), y.data()), z, y),
        })
    }
}

pub fn run_linreg(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    run(comm, data, cfg, Link::Identity)
}

pub fn run_logreg(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    run(comm, data, cfg, Link::Logistic)
}

fn run(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig, link: Link) -> Result<PartyOutcome, ProtocolError> {
    let me = comm.me();
    let rows = data.rows();
    let is_master = me.role == Role::Master;
    let x = if is_master { with_bias(&data.features) } else { data.features.clone() };
    let mut block = LinearBlock::init(x.cols(), cfg.init, cfg.seed, me);
    let members = comm.members();
    let mut final_loss = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        if is_master {
            let y = data.labels()?;
            for idx in batch_schedule(cfg.seed, epoch, rows, cfg.batch_size) {
                comm.set_position(Phase::Train, step);
                comm.broadcast(&Message::to(me, "batch").with_blob("idx", encode_indices(&idx)), &members)?;
                let xb = x.select_rows(&idx)?;
                let own = block.forward_partial(&xb)?;
                let partials = gather_tensors(comm, &members, "partial_pred", "u", idx.len(), Some(1))?;
                let refs: Vec<&Tensor> = partials.iter().collect();
                let z = aggregate(&refs, &own)?;
                let d = link.residual(&z, &y.select_rows(&idx)?)?;
                comm.broadcast(&Message::to(me, "residual").with_tensor("d", d.clone()), &members)?;
                block.backward_partial(&xb, &d, cfg.learning_rate, idx.len())?;
                step += 1;
            }
        } else {
            for _ in 0..batches_per_epoch(rows, cfg.batch_size) {
                comm.set_position(Phase::Train, step);
                let idx = recv_batch(comm, rows)?;
                let xb = x.select_rows(&idx)?;
                let u = block.forward_partial(&xb)?;
                comm.send(Message::to(PartyId::master(), "partial_pred").with_tensor("u", u))?;
                let d = comm.recv(PartyId::master(), "residual")?.tensor("d")?.clone();
                expect_shape("residual", &d, (idx.len(), 1))?;
                block.backward_partial(&xb, &d, cfg.learning_rate, idx.len())?;
                step += 1;
            }
        }

        if cfg.is_eval_epoch(epoch) {
            comm.set_position(Phase::Eval, epoch);
            let own = block.forward_partial(&x)?;
            if is_master {
                let partials = gather_tensors(comm, &members, "eval_partial", "u", rows, Some(1))?;
                let refs: Vec<&Tensor> = partials.iter().collect();
                let z = aggregate(&refs, &own)?;
                let metrics = link.evaluate(&z, data.labels()?)?;
                metrics.log(comm, epoch)?;
                final_loss = Some(metrics.loss);
            } else {
                comm.send(Message::to(PartyId::master(), "eval_partial").with_tensor("u", own))?;
            }
        }
    }

    Ok(PartyOutcome {
        party: me,
        model: TrainedModel::Linear(block),
        final_loss,
        matched_rows: rows,
    })
}
