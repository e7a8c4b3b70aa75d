//! Logistic regression with Paillier-encrypted residuals.
//!
//! The arbiter generates the keypair and is the only party able to decrypt.
//! The sigmoid is replaced by its first-order expansion `σ(z) ≈ ¼z + ½`, so
//! the residual `d = ¼z + ½ − y` is affine in the encrypted partial
//! predictions and can be formed entirely under encryption by the master.
//! Every party computes its gradient `X_kᵀ·[[d]]` homomorphically, adds a
//! random mask in Z_n, and lets the arbiter decrypt the masked values.
//!
//! Exponents: partial predictions are encoded at 2^-40, the residual ends
//! at 2^-80 and gradients at 2^-120.

use num_bigint::{BigUint, RandBigInt};
use rand::Rng;

use crate::comms::{Communicator, Message, PartyId, Phase, Role};
use crate::models::LinearBlock;
use crate::paillier::{
    add_cipher, decode_ciphertexts, decode_numbers, decrypt, encode_ciphertexts, encode_numbers, encrypt, keygen,
    mul_scalar, Ciphertext, EncodedNumber, KeySize, PublicKey, DEFAULT_EXPONENT,
};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

use super::eval::{taylor_loss, EvalMetrics};
use super::{
    aggregate, batch_schedule, batches_per_epoch, encode_indices, gather_tensors, recv_batch, with_bias, AlignedData,
    PartyOutcome, ProtocolError, TrainConfig, TrainedModel,
};

pub const TAYLOR_SLOPE: f64 = 0.25;
pub const TAYLOR_INTERCEPT: f64 = 0.5;

const RESIDUAL_EXPONENT: i32 = 2 * DEFAULT_EXPONENT;
const GRADIENT_EXPONENT: i32 = 3 * DEFAULT_EXPONENT;

/// Plaintext residual under the sigmoid approximation.
pub fn taylor_residual(z: f64, y: f64) -> f64 {
    TAYLOR_SLOPE * z + TAYLOR_INTERCEPT - y
}

fn payload_err(method: &str, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Payload {
        method: method.into(),
        reason: reason.into(),
    }
}

fn ciphertexts(msg: &Message, method: &str, len: usize, exponent: i32) -> Result<Vec<Ciphertext>, ProtocolError> {
    let cts = decode_ciphertexts(msg.blob("c")?)?;
    if cts.len() != len {
        return Err(payload_err(method, format!("expected {len} ciphertexts, got {}", cts.len())));
    }
    if let Some(bad) = cts.iter().find(|c| c.exponent != exponent) {
        return Err(payload_err(method, format!("exponent {} instead of {exponent}", bad.exponent)));
    }
    Ok(cts)
}

fn encrypt_column(u: &Tensor, pk: &PublicKey, rng: &mut impl Rng) -> Result<Vec<Ciphertext>, ProtocolError> {
    u.data()
        .iter()
        .map(|&v| Ok(encrypt(&EncodedNumber::encode(v, pk)?, pk, rng)))
        .collect()
}

fn sum_ciphers(mut terms: impl Iterator<Item = Ciphertext>, pk: &PublicKey) -> Result<Ciphertext, ProtocolError> {
    let first = terms.next().ok_or_else(|| payload_err("enc_residual", "empty batch"))?;
    terms.try_fold(first, |acc, t| Ok(add_cipher(&acc, &t, pk)?))
}

/// Encrypted masked gradient `Xᵀ·[[d]] + R`, one ciphertext per feature,
/// together with the masks `R`.
fn masked_gradient(
    xb: &Tensor,
    enc_d: &[Ciphertext],
    pk: &PublicKey,
    mask_rng: &mut impl Rng,
    enc_rng: &mut impl Rng,
) -> Result<(Vec<Ciphertext>, Vec<BigUint>), ProtocolError> {
    let mut cts = Vec::with_capacity(xb.cols());
    let mut masks = Vec::with_capacity(xb.cols());
    for j in 0..xb.cols() {
        let terms = (0..xb.rows())
            .map(|i| Ok(mul_scalar(&enc_d[i], &EncodedNumber::encode(xb.get(i, j), pk)?, pk)?))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        let g = sum_ciphers(terms.into_iter(), pk)?;
        let r = mask_rng.gen_biguint_below(&pk.n);
        let enc_r = encrypt(&EncodedNumber::raw(r.clone(), GRADIENT_EXPONENT), pk, enc_rng);
        cts.push(add_cipher(&g, &enc_r, pk)?);
        masks.push(r);
    }
    Ok((cts, masks))
}

fn unmask(msg: &Message, masks: &[BigUint], pk: &PublicKey) -> Result<Tensor, ProtocolError> {
    let values = decode_numbers(msg.blob("g")?)?;
    if values.len() != masks.len() {
        return Err(payload_err(
            "masked_grad",
            format!("expected {} values, got {}", masks.len(), values.len()),
        ));
    }
    let mut out = Vec::with_capacity(values.len());
    for (v, r) in values.iter().zip(masks) {
        if v.exponent != GRADIENT_EXPONENT || v.mantissa >= pk.n {
            return Err(payload_err("masked_grad", "value outside Z_n or at the wrong exponent"));
        }
        let m = (&v.mantissa + &pk.n - r) % &pk.n;
        out.push(EncodedNumber::raw(m, GRADIENT_EXPONENT).decode(pk));
    }
    Ok(Tensor::column(&out))
}

/// One gradient round trip through the arbiter, then the local update.
fn gradient_step(
    comm: &Communicator,
    block: &mut LinearBlock,
    xb: &Tensor,
    enc_d: &[Ciphertext],
    pk: &PublicKey,
    rngs: &mut (impl Rng, impl Rng),
    lr: f64,
) -> Result<(), ProtocolError> {
    let (cts, masks) = masked_gradient(xb, enc_d, pk, &mut rngs.0, &mut rngs.1)?;
    comm.send(Message::to(PartyId::arbiter(), "masked_enc_grad").with_blob("c", encode_ciphertexts(&cts)))?;
    let reply = comm.recv(PartyId::arbiter(), "masked_grad")?;
    let g = unmask(&reply, &masks, pk)?;
    block.apply_gradient(&g, lr, xb.rows())?;
    Ok(())
}

pub fn run_he_logreg(comm: &Communicator, data: &AlignedData, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    let me = comm.me();
    let rows = data.rows();
    let is_master = me.role == Role::Master;

    comm.set_position(Phase::Setup, 0);
    let pk = PublicKey::from_bytes(comm.recv(PartyId::arbiter(), "pubkey")?.blob("n")?)?;

    let x = if is_master { with_bias(&data.features) } else { data.features.clone() };
    let mut block = LinearBlock::init(x.cols(), cfg.init, cfg.seed, me);
    let mut rngs = (
        rng::stream(cfg.seed, Purpose::Mask, me),
        rng::stream(cfg.seed, Purpose::Encrypt, me),
    );
    let members = comm.members();
    let mut final_loss = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        if is_master {
            let y = data.labels()?;
            let quarter = EncodedNumber::encode(TAYLOR_SLOPE, &pk)?;
            for idx in batch_schedule(cfg.seed, epoch, rows, cfg.batch_size) {
                comm.set_position(Phase::Train, step);
                comm.broadcast(&Message::to(me, "batch").with_blob("idx", encode_indices(&idx)), &members)?;
                let xb = x.select_rows(&idx)?;
                let own = encrypt_column(&block.forward_partial(&xb)?, &pk, &mut rngs.1)?;
                let partials = comm
                    .gather(&members, "enc_partial")?
                    .iter()
                    .map(|m| ciphertexts(m, "enc_partial", idx.len(), DEFAULT_EXPONENT))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut enc_d = Vec::with_capacity(idx.len());
                for (i, &row) in idx.iter().enumerate() {
                    let terms = partials.iter().map(|p| p[i].clone()).chain(std::iter::once(own[i].clone()));
                    let z = sum_ciphers(terms, &pk)?;
                    let offset = EncodedNumber::encode_at(TAYLOR_INTERCEPT - y.get(row, 0), RESIDUAL_EXPONENT, &pk)?;
                    let scaled = mul_scalar(&z, &quarter, &pk)?;
                    enc_d.push(add_cipher(&scaled, &encrypt(&offset, &pk, &mut rngs.1), &pk)?);
                }
                comm.broadcast(
                    &Message::to(me, "enc_residual").with_blob("c", encode_ciphertexts(&enc_d)),
                    &members,
                )?;
                gradient_step(comm, &mut block, &xb, &enc_d, &pk, &mut rngs, cfg.learning_rate)?;
                step += 1;
            }
        } else {
            for _ in 0..batches_per_epoch(rows, cfg.batch_size) {
                comm.set_position(Phase::Train, step);
                let idx = recv_batch(comm, rows)?;
                let xb = x.select_rows(&idx)?;
                let enc_u = encrypt_column(&block.forward_partial(&xb)?, &pk, &mut rngs.1)?;
                comm.send(Message::to(PartyId::master(), "enc_partial").with_blob("c", encode_ciphertexts(&enc_u)))?;
                let reply = comm.recv(PartyId::master(), "enc_residual")?;
                let enc_d = ciphertexts(&reply, "enc_residual", idx.len(), RESIDUAL_EXPONENT)?;
                gradient_step(comm, &mut block, &xb, &enc_d, &pk, &mut rngs, cfg.learning_rate)?;
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
                let y = data.labels()?;
                let metrics = EvalMetrics::classification(taylor_loss(z.data(), y.data()), &z, y);
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

/// The key holder: publishes the public key, then decrypts masked
/// gradients for every party on every step.
pub(crate) fn run_arbiter(comm: &Communicator, rows: usize, cfg: &TrainConfig) -> Result<PartyOutcome, ProtocolError> {
    let he = cfg
        .he
        .ok_or_else(|| ProtocolError::Config("he_logreg needs an [he] section".into()))?;
    let (pk, sk) = keygen(KeySize::from_bits(he.key_bits, he.insecure_ok)?, cfg.seed);

    comm.set_position(Phase::Setup, 0);
    let holders: Vec<PartyId> = comm.parties().filter(|p| p.role != Role::Arbiter).collect();
    comm.broadcast(&Message::to(comm.me(), "pubkey").with_blob("n", pk.to_bytes()), &holders)?;

    let steps = cfg.epochs * batches_per_epoch(rows, cfg.batch_size) as u64;
    for step in 0..steps {
        comm.set_position(Phase::Train, step);
        for msg in comm.gather(&holders, "masked_enc_grad")? {
            let plain = decode_ciphertexts(msg.blob("c")?)?
                .iter()
                .map(|c| decrypt(c, &sk, &pk))
                .collect::<Result<Vec<_>, _>>()?;
            comm.send(Message::to(msg.sender, "masked_grad").with_blob("g", encode_numbers(&plain)))?;
        }
    }

    Ok(PartyOutcome {
        party: comm.me(),
        model: TrainedModel::Keyholder,
        final_loss: None,
        matched_rows: rows,
    })
}
