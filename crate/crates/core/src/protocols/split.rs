//! Split neural network: each member runs a bottom layer on its own
//! columns, the master concatenates the activations (members first, then
//! its own if it has features), runs the head, and sends each member the
//! gradient for its slice of the activations.

use crate::comms::{Communicator, Message, PartyId, Phase, Role};
use crate::models::{init_stream, MlpBottom, MlpHead};
use crate::tensor::Tensor;

use super::eval::{log_loss, EvalMetrics};
use super::{
    batch_schedule, batches_per_epoch, encode_indices, expect_shape, gather_tensors, recv_batch, AlignedData,
    PartyOutcome, ProtocolError, TrainConfig, TrainedModel,
};

pub fn run_split_mlp(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    let me = comm.me();
    if me.role == Role::Master {
        run_master(comm, data, cfg)
    } else {
        run_member(comm, data, cfg)
    }
}

fn run_master(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    let me = comm.me();
    let rows = data.rows();
    let x = &data.features;
    let y = data.labels()?;
    let members = comm.members();
    let mut rng = init_stream(cfg.seed, me);
    let mut bottom = (x.cols() > 0).then(|| MlpBottom::init(x.cols(), cfg.hidden, cfg.init, &mut rng));
    let blocks = members.len() + usize::from(bottom.is_some());
    let mut head = MlpHead::init(blocks * cfg.hidden, cfg.init, &mut rng);
    let mut final_loss = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        for idx in batch_schedule(cfg.seed, epoch, rows, cfg.batch_size) {
            comm.set_position(Phase::Train, step);
            comm.broadcast(&Message::to(me, "batch").with_blob("idx", encode_indices(&idx)), &members)?;
            let own = bottom.as_mut().map(|b| b.forward(&x.select_rows(&idx)?)).transpose()?;
            let mut acts = gather_tensors(comm, &members, "activations", "a", idx.len(), Some(cfg.hidden))?;
            acts.extend(own);
            let refs: Vec<&Tensor> = acts.iter().collect();
            head.forward(&refs)?;
            let mut d_acts = head.backward(&y.select_rows(&idx)?, cfg.learning_rate)?;
            if let Some(b) = bottom.as_mut() {
                let d_own = d_acts.pop().expect("one gradient per block");
                b.backward(&d_own, cfg.learning_rate)?;
            }
            for (member, g) in members.iter().zip(d_acts) {
                comm.send(Message::to(*member, "act_grad").with_tensor("g", g))?;
            }
            step += 1;
        }

        if cfg.is_eval_epoch(epoch) {
            comm.set_position(Phase::Eval, epoch);
            let mut acts = gather_tensors(comm, &members, "eval_partial", "a", rows, Some(cfg.hidden))?;
            if let Some(b) = &bottom {
                acts.push(b.activations(x)?);
            }
            let refs: Vec<&Tensor> = acts.iter().collect();
            let z = head.logits(&refs)?;
            let metrics = EvalMetrics::classification(log_loss(z.data(), y.data()), &z, y);
            metrics.log(comm, epoch)?;
            final_loss = Some(metrics.loss);
        }
    }

    Ok(PartyOutcome {
        party: me,
        model: TrainedModel::Split {
            bottom,
            head: Some(head),
        },
        final_loss,
        matched_rows: rows,
    })
}

fn run_member(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    let me = comm.me();
    let rows = data.rows();
    let x = &data.features;
    let mut bottom = MlpBottom::init(x.cols(), cfg.hidden, cfg.init, &mut init_stream(cfg.seed, me));
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        for _ in 0..batches_per_epoch(rows, cfg.batch_size) {
            comm.set_position(Phase::Train, step);
            let idx = recv_batch(comm, rows)?;
            let a = bottom.forward(&x.select_rows(&idx)?)?;
            comm.send(Message::to(PartyId::master(), "activations").with_tensor("a", a))?;
            let g = comm.recv(PartyId::master(), "act_grad")?.tensor("g")?.clone();
            expect_shape("act_grad", &g, (idx.len(), cfg.hidden))?;
            bottom.backward(&g, cfg.learning_rate)?;
            step += 1;
        }
        if cfg.is_eval_epoch(epoch) {
            comm.set_position(Phase::Eval, epoch);
            comm.send(Message::to(PartyId::master(), "eval_partial").with_tensor("a", bottom.activations(x)?))?;
        }
    }

    Ok(PartyOutcome {
        party: me,
        model: TrainedModel::Split {
            bottom: Some(bottom),
            head: None,
        },
        final_loss: None,
        matched_rows: rows,
    })
}
