//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary (`harness = false`) so the lines print in
//! order with their timings.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_traits::FromPrimitive;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::{centralized_linear, free_ports, metric_values, model_param, run_agents, table, write_table, Residual, RunSpec};
use vflkit::comms::{decode_frame, encode_frame, LocalHub, Phase, Role, TranscriptEntry};
use vflkit::config::load_config;
use vflkit::data::load_party_csv;
use vflkit::matching::{run_matching, MatchError, RecordIdList};
use vflkit::metrics::{events_path, Direction, EventRecord, MetricsSink};
use vflkit::models::{sigmoid, MlpBottom, MlpHead};
use vflkit::paillier::{
    add_cipher, decrypt, encrypt, encrypt_with_nonce, keygen, keypair_from_primes, mul_scalar, EncodedNumber, KeySize,
};
use vflkit::protocols::{batch_schedule, batches_per_epoch, ProtocolKind};
use vflkit::runner::{run_local, transcript_path, PartyRun};
use vflkit::{Message, PartyId, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, budget: Duration, detail: String) -> Outcome {
    let took = started.elapsed();
    if took < budget {
        Ok(detail)
    } else {
        Err(format!("{detail}; took {took:.2?}, budget {budget:?}"))
    }
}

fn local_run(dir: &Path, spec: &RunSpec) -> Vec<PartyRun> {
    let cfg = load_config(&spec.write(dir, &format!("{}.ini", spec.run_id))).unwrap();
    run_local(&cfg).unwrap_or_else(|e| panic!("{} run failed: {e}", spec.protocol))
}

fn linear_spec(protocol: &'static str, run_id: &str) -> RunSpec {
    let mut spec = RunSpec::new(protocol, 2);
    spec.epochs = 10;
    spec.batch_size = 32;
    spec.learning_rate = if protocol == "linreg" { 0.05 } else { 0.1 };
    spec.run_id = run_id.into();
    spec
}

/// 200 rows, 8 features: master 2, members 3 and 3.
fn linear_table(protocol: &str) -> common::Table {
    table(200, &[2, 3, 3], 2024, protocol == "logreg")
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut checked = 0;
    for (protocol, residual) in [("linreg", Residual::Identity), ("logreg", Residual::Logistic)] {
        let dir = tempfile::tempdir().unwrap();
        let t = linear_table(protocol);
        write_table(dir.path(), &t, 17, &[]);
        let spec = linear_spec(protocol, protocol);
        let runs = local_run(dir.path(), &spec);
        let got: Vec<Vec<f64>> = runs
            .iter()
            .filter(|r| r.outcome.party.role != Role::Arbiter)
            .map(|r| r.outcome.model.parameters()[0].1.data().to_vec())
            .collect();
        let want = centralized_linear(&t, &spec, residual);
        let bits = |w: &Vec<Vec<f64>>| -> Vec<Vec<u64>> { w.iter().map(|b| b.iter().map(|v| v.to_bits()).collect()).collect() };
        ensure(bits(&got) == bits(&want), || format!("{protocol}: federated {got:?} != centralized {want:?}"))?;
        checked += want.iter().map(Vec::len).sum::<usize>();
    }
    within(started, Duration::from_secs(5), format!("{checked} weights bit-identical across linreg and logreg"))
}

/// Runs linreg and logreg locally and as three agent processes; the
/// directory is kept for the wire-format checks.
fn criterion_2() -> (Outcome, Option<TempDir>) {
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let result = (|| -> Outcome {
        let mut compared = 0;
        for protocol in ["linreg", "logreg"] {
            let dir = root.path().join(protocol);
            std::fs::create_dir_all(&dir).unwrap();
            write_table(&dir, &linear_table(protocol), 17, &[3, 1, 2]);
            let mut spec = linear_spec(protocol, protocol);
            spec.log_dir = "local".into();
            local_run(&dir, &spec);
            spec.log_dir = "agents".into();
            spec.ports = Some(free_ports(3));
            let ini = spec.write(&dir, "agents.ini");
            for (party, code, err) in run_agents(&ini, &spec.parties(), Duration::from_secs(25)) {
                ensure(code == 0, || format!("{protocol} agent {party} exited {code}: {err}"))?;
            }
            let (local, agents) = (dir.join("local"), dir.join("agents"));
            for party in spec.parties() {
                for kind in ["model.json", "transcript.jsonl"] {
                    let name = format!("{protocol}.{party}.{kind}");
                    let a = std::fs::read(local.join(&name)).unwrap();
                    let b = std::fs::read(agents.join(&name)).unwrap();
                    ensure(a == b, || format!("{name} differs between local and agent runs"))?;
                    compared += 1;
                }
                let (a, b) = (metric_values(&local, protocol, party), metric_values(&agents, protocol, party));
                ensure(a == b, || format!("{protocol} {party}: metric values differ"))?;
                compared += 1;
            }
        }
        within(started, Duration::from_secs(30), format!("{compared} model/transcript/metric files identical"))
    })();
    (result, Some(root))
}

/// A deterministic property runner that keeps no regression files.
fn runner(cases: u32, rng: TestRng) -> TestRunner {
    let config = Config {
        failure_persistence: None,
        ..Config::with_cases(cases)
    };
    TestRunner::new_with_rng(config, rng)
}

fn mantissa_of(x: f64, exponent: i32) -> BigInt {
    BigInt::from_f64((x * 2f64.powi(-exponent)).round()).unwrap()
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let (pk, sk) = keygen(KeySize::Insecure128, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bound = f64::from(1u32 << 20);
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(-bound..bound) * if rng.gen_bool(0.3) { 1e-6 } else { 1.0 };
        let ct = encrypt(&EncodedNumber::encode(x, &pk).unwrap(), &pk, &mut rng);
        let back = decrypt(&ct, &sk, &pk).unwrap();
        let want = mantissa_of(x, -40);
        ensure(back.signed(&pk) == want && back.exponent == -40, || format!("round trip of {x} gave {:?}", back.signed(&pk)))?;
    }

    let keys = (pk, sk);
    let value = || (-bound + 1.0)..(bound - 1.0);
    let mut runner = runner(256, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let enc_rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(4));
    let prop = runner.run(&(value(), value(), value()), |(a, b, k)| {
        let (pk, sk) = &keys;
        let enc = |x: f64| encrypt(&EncodedNumber::encode(x, pk).unwrap(), pk, &mut *enc_rng.borrow_mut());
        let (ca, cb) = (enc(a), enc(b));
        let sum = decrypt(&add_cipher(&ca, &cb, pk).unwrap(), sk, pk).unwrap();
        prop_assert_eq!(sum.signed(pk), mantissa_of(a, -40) + mantissa_of(b, -40));
        let scaled = decrypt(&mul_scalar(&ca, &EncodedNumber::encode(k, pk).unwrap(), pk).unwrap(), sk, pk).unwrap();
        prop_assert_eq!(scaled.exponent, -80);
        prop_assert_eq!(scaled.signed(pk), mantissa_of(a, -40) * mantissa_of(k, -40));
        Ok(())
    });
    prop.map_err(|e| format!("homomorphic property: {e}"))?;

    let (tpk, tsk) = keypair_from_primes(&5u32.into(), &7u32.into()).unwrap();
    ensure(tsk.lambda == 12u32.into() && tsk.mu == 3u32.into(), || "toy key lambda/mu".into())?;
    let ct = encrypt_with_nonce(&EncodedNumber::raw(3u32.into(), 0), &tpk, &2u32.into());
    ensure(ct.c == 683u32.into(), || format!("toy ciphertext {} != 683", ct.c))?;
    ensure(decrypt(&ct, &tsk, &tpk).unwrap().mantissa == 3u32.into(), || "toy decryption".into())?;
    within(
        started,
        Duration::from_secs(10),
        "1000 round trips exact, 256 add/mul cases exact, p=5 q=7 fixture matches".into(),
    )
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let t = table(64, &[2, 3, 3], 64, true);
    write_table(dir.path(), &t, 6, &[]);
    let mut spec = RunSpec::new("he_logreg", 2);
    spec.epochs = 5;
    spec.batch_size = 16;
    spec.key_bits = Some(1024);
    spec.ports = Some(free_ports(4));
    let ini = spec.write(dir.path(), "he.ini");
    for (party, code, err) in run_agents(&ini, &spec.parties(), Duration::from_secs(55)) {
        ensure(code == 0, || format!("agent {party} exited {code}: {err}"))?;
    }
    let oracle = centralized_linear(&t, &spec, Residual::Taylor);
    let logs = dir.path().join("logs");
    let mut worst = 0f64;
    for (k, want) in oracle.iter().enumerate() {
        let got = model_param(&logs, "run", common::party_of_block(k), "w");
        ensure(got.len() == want.len(), || format!("block {k}: {} weights, want {}", got.len(), want.len()))?;
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 2f64.powi(-20), || format!("max deviation {worst:e} exceeds 2^-20"))?;
    within(started, Duration::from_secs(60), format!("max deviation {worst:.3e} from the Taylor oracle"))
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Plain-loop forward pass and mean log-loss of the whole split network.
fn split_loss(xs: &[Tensor], bottoms: &[(Tensor, Tensor)], w2: &Tensor, b2: f64, y: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &label) in y.iter().enumerate() {
        let mut z = b2;
        let mut unit = 0;
        for (x, (w1, b1)) in xs.iter().zip(bottoms) {
            for h in 0..w1.cols() {
                let mut pre = b1.get(0, h);
                for f in 0..x.cols() {
                    pre += x.get(i, f) * w1.get(f, h);
                }
                z += pre.max(0.0) * w2.get(unit, 0);
                unit += 1;
            }
        }
        let p = sigmoid(z);
        total -= label * p.ln() + (1.0 - label) * (1.0 - p).ln();
    }
    total / y.len() as f64
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let widths = [3, 3, 2];
    let hidden = 3;
    let xs: Vec<Tensor> = widths.iter().map(|&w| uniform(4, w, &mut rng)).collect();
    let y = [1.0, 0.0, 0.0, 1.0];
    let params: Vec<(Tensor, Tensor)> = widths
        .iter()
        .map(|&w| (uniform(w, hidden, &mut rng), uniform(1, hidden, &mut rng).map(|v| v + 0.5)))
        .collect();
    let w2 = uniform(hidden * widths.len(), 1, &mut rng);
    let b2 = 0.2;

    let mut bottoms: Vec<MlpBottom> = params.iter().map(|(w, b)| MlpBottom::new(w.clone(), b.clone())).collect();
    let acts: Vec<Tensor> = bottoms.iter_mut().zip(&xs).map(|(b, x)| b.forward(x).unwrap()).collect();
    let mut head = MlpHead::new(w2.clone(), b2);
    head.forward(&acts.iter().collect::<Vec<_>>()).unwrap();
    let hg = head.gradients(&Tensor::column(&y)).unwrap();
    let bg: Vec<(Tensor, Tensor)> = bottoms.iter().zip(&hg.d_acts).map(|(b, d)| b.gradients(d).unwrap()).collect();

    let eps = 1e-6;
    let mut worst = 0f64;
    let mut count = 0;
    let mut check = |analytic: f64, perturb: &dyn Fn(f64) -> f64| {
        let numeric = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
        count += 1;
    };
    for j in 0..w2.rows() {
        check(hg.w2.get(j, 0), &|e| {
            let mut w = w2.clone();
            w.set(j, 0, w2.get(j, 0) + e);
            split_loss(&xs, &params, &w, b2, &y)
        });
    }
    check(hg.b2, &|e| split_loss(&xs, &params, &w2, b2 + e, &y));
    for (k, (gw, gb)) in bg.iter().enumerate() {
        for r in 0..gw.rows() {
            for c in 0..gw.cols() {
                check(gw.get(r, c), &|e| {
                    let mut p = params.clone();
                    p[k].0.set(r, c, params[k].0.get(r, c) + e);
                    split_loss(&xs, &p, &w2, b2, &y)
                });
            }
        }
        for c in 0..gb.cols() {
            check(gb.get(0, c), &|e| {
                let mut p = params.clone();
                p[k].1.set(0, c, params[k].1.get(0, c) + e);
                split_loss(&xs, &p, &w2, b2, &y)
            });
        }
    }
    ensure(worst <= 1e-5, || format!("max relative error {worst:e} over {count} parameters"))?;
    Ok(format!("{count} parameters, max relative error {worst:.2e}"))
}

fn arb_party() -> impl Strategy<Value = PartyId> {
    prop_oneof![Just(PartyId::master()), Just(PartyId::arbiter()), (0u32..16).prop_map(PartyId::member)]
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    (0usize..5, 0usize..5).prop_flat_map(|(r, c)| {
        prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, r * c)
            .prop_map(move |d| Tensor::new(r, c, d).unwrap())
    })
}

fn arb_message() -> impl Strategy<Value = Message> {
    (
        "[a-z_]{1,32}",
        arb_party(),
        arb_party(),
        any::<u64>(),
        prop::collection::btree_map("[a-z0-9]{1,8}", arb_tensor(), 0..4),
        prop::collection::btree_map("[a-z0-9]{1,8}", prop::collection::vec(any::<u8>(), 0..64), 0..3),
        prop::collection::btree_map("[a-z_]{1,6}", "\\PC{0,12}", 0..3),
    )
        .prop_map(|(method, sender, receiver, seq, tensors, blobs, meta)| Message {
            method,
            sender,
            receiver,
            seq,
            tensors,
            blobs,
            meta,
        })
}

fn golden_message() -> Message {
    let mut meta = BTreeMap::new();
    meta.insert("epoch".to_string(), "3".to_string());
    let mut tensors = BTreeMap::new();
    tensors.insert("d".to_string(), Tensor::column(&[1.5, -0.25]));
    let mut blobs = BTreeMap::new();
    blobs.insert("idx".to_string(), [1u32, 2].iter().flat_map(|i| i.to_le_bytes()).collect());
    Message {
        method: "residual".into(),
        sender: PartyId::master(),
        receiver: PartyId::member(1),
        seq: 7,
        tensors,
        blobs,
        meta,
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Rebuilds the message behind a transcript entry of a linreg/logreg run.
/// Frame sizes depend only on names, shapes, blob bytes and header fields,
/// so zero-filled tensors of the right shape suffice.
fn rebuild(e: &TranscriptEntry, dir: &Path, spec: &RunSpec, shared: &[String]) -> Message {
    let mut msg = Message::to(e.receiver, e.method.clone());
    msg.sender = e.sender;
    msg.seq = e.seq;
    let rows = shared.len();
    let batch = |step: u64| {
        let per_epoch = batches_per_epoch(rows, spec.batch_size) as u64;
        batch_schedule(spec.seed, step / per_epoch, rows, spec.batch_size)[(step % per_epoch) as usize].clone()
    };
    match e.method.as_str() {
        "ids" => {
            let ds = load_party_csv(&dir.join(format!("{}.csv", e.sender)), "id", None).unwrap();
            msg.with_blob("ids", ds.ids.to_blob())
        }
        "shared_ids" => msg.with_blob("ids", RecordIdList::new(shared.to_vec()).to_blob()),
        "batch" => msg.with_blob("idx", batch(e.step).iter().flat_map(|&i| (i as u32).to_le_bytes()).collect()),
        "partial_pred" => msg.with_tensor("u", Tensor::zeros(batch(e.step).len(), 1)),
        "residual" => msg.with_tensor("d", Tensor::zeros(batch(e.step).len(), 1)),
        "eval_partial" => msg.with_tensor("u", Tensor::zeros(rows, 1)),
        other => panic!("unexpected method {other}"),
    }
}

fn criterion_6(mode_dir: Option<&Path>) -> Outcome {
    let mut runner = runner(512, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner
        .run(&arb_message(), |m| {
            let back = decode_frame(&encode_frame(&m).unwrap()).unwrap();
            for (name, t) in &m.tensors {
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(t), bits(&back.tensors[name]));
            }
            prop_assert_eq!(back, m);
            Ok(())
        })
        .map_err(|e| format!("frame round trip: {e}"))?;

    let golden = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_frame.bin")).unwrap();
    let decoded = decode_frame(&golden).map_err(|e| format!("golden frame: {e}"))?;
    ensure(decoded == golden_message(), || format!("golden frame decoded to {decoded:?}"))?;
    ensure(encode_frame(&golden_message()).unwrap() == golden, || "golden message re-encodes differently".into())?;

    let root = mode_dir.ok_or("criterion 2 left no agent logs")?;
    let mut events_checked = 0;
    for protocol in ["linreg", "logreg"] {
        let dir = root.join(protocol);
        let logs = dir.join("agents");
        let spec = linear_spec(protocol, protocol);
        let shared = {
            let mut ids = linear_table(protocol).ids;
            ids.sort();
            ids
        };
        let mut streams: BTreeMap<(PartyId, PartyId, String, bool), Vec<u64>> = BTreeMap::new();
        for party in spec.parties() {
            let events: Vec<EventRecord> = read_jsonl(&events_path(&logs, protocol, party));
            let transcript: Vec<TranscriptEntry> = read_jsonl(&transcript_path(&logs, protocol, party));
            ensure(events.len() == transcript.len(), || format!("{protocol} {party}: event and transcript counts differ"))?;
            for (ev, entry) in events.iter().zip(&transcript) {
                let frame_len = encode_frame(&rebuild(entry, &dir, &spec, &shared)).unwrap().len() as u64;
                ensure(ev.payload_bytes == frame_len && entry.payload_bytes == frame_len, || {
                    format!("{protocol} {party} {}: logged {} bytes, frame is {frame_len}", ev.method, ev.payload_bytes)
                })?;
                let (from, to) = match ev.direction {
                    Direction::Send => (party, ev.peer),
                    Direction::Recv => (ev.peer, party),
                };
                streams.entry((from, to, ev.method.clone(), ev.direction == Direction::Send)).or_default().push(ev.payload_bytes);
                events_checked += 1;
            }
        }
        for ((from, to, method, is_send), sizes) in &streams {
            if *is_send {
                let recv = streams.get(&(*from, *to, method.clone(), false));
                ensure(recv == Some(sizes), || format!("{protocol} {from}->{to} {method}: send and recv sizes differ"))?;
            }
        }
    }
    Ok(format!("512 random frames round-trip, golden frame matches, {events_checked} logged sizes equal frame lengths"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let parties = [PartyId::master(), PartyId::member(0), PartyId::member(1)];
    let mut empty_cases = 0;
    for case in 0..100 {
        let pool = rng.gen_range(1..40);
        let keep = rng.gen_range(0.3..1.0);
        let mut lists: Vec<Vec<String>> = (0..3)
            .map(|_| (0..pool).filter(|_| rng.gen_bool(keep)).map(|i| format!("u{i}")).collect())
            .collect();
        if case % 5 == 0 {
            // Forced abort: the last member's ids share nothing with anyone.
            lists[2] = (0..rng.gen_range(0..6)).map(|i| format!("v{i}")).collect();
        }
        for l in &mut lists {
            l.shuffle(&mut rng);
        }
        let sets: Vec<HashSet<&String>> = lists.iter().map(|l| l.iter().collect()).collect();
        let mut oracle: Vec<String> = sets[0]
            .iter()
            .filter(|id| sets[1].contains(*id) && sets[2].contains(*id))
            .map(|id| (*id).clone())
            .collect();
        oracle.sort();

        let hub = LocalHub::new(parties);
        let results: Vec<Result<Vec<usize>, MatchError>> = std::thread::scope(|s| {
            let handles: Vec<_> = parties
                .iter()
                .zip(&lists)
                .map(|(&p, ids)| {
                    let (hub, oracle) = (&hub, &oracle);
                    s.spawn(move || {
                        let comm = hub.communicator(p, Arc::new(MetricsSink::memory()), Duration::from_secs(5)).unwrap();
                        let index = run_matching(&comm, &RecordIdList::new(ids.clone()))?;
                        ensure(&index.shared_order == oracle, || format!("case {case}: {p} order differs")).unwrap();
                        Ok(index.local_rows())
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        if oracle.is_empty() {
            empty_cases += 1;
            for (p, r) in parties.iter().zip(&results) {
                ensure(matches!(r, Err(MatchError::EmptyIntersection)), || {
                    format!("case {case}: {p} should abort on an empty intersection, got {r:?}")
                })?;
            }
        } else {
            for ((p, r), ids) in parties.iter().zip(&results).zip(&lists) {
                let rows = r.as_ref().map_err(|e| format!("case {case}: {p} failed: {e}"))?;
                let mapped: Vec<&String> = rows.iter().map(|&i| &ids[i]).collect();
                ensure(mapped.iter().copied().eq(oracle.iter()), || format!("case {case}: {p} row map is wrong"))?;
            }
        }
    }
    ensure(empty_cases >= 20, || format!("only {empty_cases} empty cases"))?;
    Ok(format!("100 configurations agree with the hash-set oracle, {empty_cases} aborted on empty intersections"))
}

fn criterion_8() -> Outcome {
    let mut summary = Vec::new();
    for protocol in ["linreg", "logreg", "split_mlp", "he_logreg"] {
        let kind: ProtocolKind = protocol.parse().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (rows, epochs, batch) = if kind == ProtocolKind::HeLogreg { (24, 2, 10) } else { (60, 3, 16) };
        write_table(dir.path(), &table(rows, &[2, 2, 2], 8, kind != ProtocolKind::Linreg), 8, &[2, 0, 1]);
        let mut spec = RunSpec::new(protocol, 2);
        spec.epochs = epochs;
        spec.batch_size = batch;
        spec.extra_common = "hidden = 3".into();
        if kind == ProtocolKind::HeLogreg {
            spec.key_bits = Some(1024);
        }
        let runs = local_run(dir.path(), &spec);
        let mut per_step: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
        for e in runs.iter().flat_map(|r| &r.transcript).filter(|e| e.phase == Phase::Train) {
            per_step.entry(e.step).or_default().insert(e.method.clone());
        }
        let steps = epochs * batches_per_epoch(rows, batch) as u64;
        let want: BTreeSet<String> = kind.iteration_methods().iter().map(|m| m.to_string()).collect();
        ensure(per_step.keys().copied().eq(0..steps), || {
            format!("{protocol}: train steps {:?}, want 0..{steps}", per_step.keys().collect::<Vec<_>>())
        })?;
        for (step, methods) in &per_step {
            ensure(methods == &want, || format!("{protocol} step {step}: methods {methods:?}, want {want:?}"))?;
        }
        summary.push(format!("{protocol} {}x{steps}", want.len()));
    }
    Ok(summary.join(", "))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, started: Instant, outcome: Outcome| {
        let took = started.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{took:.2?}] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{took:.2?}] {detail}");
            }
        }
    };

    let t = Instant::now();
    report(1, "centralized equivalence", t, guarded(criterion_1));

    let t = Instant::now();
    let (outcome, mode_dir) = catch_unwind(criterion_2).unwrap_or_else(|_| (Err("panicked".into()), None));
    report(2, "local/agent equivalence", t, outcome);

    let t = Instant::now();
    report(3, "paillier correctness", t, guarded(criterion_3));
    let t = Instant::now();
    report(4, "he_logreg vs taylor oracle", t, guarded(criterion_4));
    let t = Instant::now();
    report(5, "split-mlp gradient check", t, guarded(criterion_5));
    let t = Instant::now();
    report(6, "wire format", t, guarded(|| criterion_6(mode_dir.as_ref().map(TempDir::path))));
    let t = Instant::now();
    report(7, "record matching", t, guarded(criterion_7));
    let t = Instant::now();
    report(8, "exchange counts", t, guarded(criterion_8));

    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 8 acceptance criteria passed");
}
