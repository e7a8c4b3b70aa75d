//! Helpers shared by the integration and acceptance tests: synthetic party
//! files, config text, centralized reference trainers and agent processes.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vflkit::metrics::MetricRecord;
use vflkit::models::{sigmoid, Init, LinearBlock};
use vflkit::protocols::batch_schedule;
use vflkit::PartyId;

pub type Matrix = Vec<Vec<f64>>;

/// A vertically partitioned table; rows are in sorted-id order, which is
/// the shared order matching produces.
#[derive(Debug, Clone)]
pub struct Table {
    pub ids: Vec<String>,
    /// `blocks[0]` is the master's columns, `blocks[k]` member `k-1`'s.
    pub blocks: Vec<Matrix>,
    pub y: Vec<f64>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn members(&self) -> usize {
        self.blocks.len() - 1
    }
}

/// Features uniform in [-1, 1]; labels from a random linear teacher,
/// either thresholded (`binary`) or with small noise.
pub fn table(rows: usize, widths: &[usize], seed: u64, binary: bool) -> Table {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = widths.iter().sum();
    let teacher: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let full: Matrix = (0..rows)
        .map(|_| (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let y = full
        .iter()
        .map(|r| {
            let s: f64 = r.iter().zip(&teacher).map(|(a, b)| a * b).sum();
            if binary {
                f64::from(u8::from(s >= 0.0))
            } else {
                s + 0.1 * rng.gen_range(-1.0..1.0)
            }
        })
        .collect();
    let mut blocks = Vec::new();
    let mut start = 0;
    for &w in widths {
        blocks.push(full.iter().map(|r| r[start..start + w].to_vec()).collect());
        start += w;
    }
    Table {
        ids: (0..rows).map(|i| format!("id{i:05}")).collect(),
        blocks,
        y,
    }
}

fn fmt_f64(v: f64) -> String {
    // Debug formatting round-trips exactly.
    format!("{v:?}")
}

/// Writes `master.csv` and `member<i>.csv`, each in its own shuffled row
/// order, plus `extra[k]` additional unshared rows for party `k`.
pub fn write_table(dir: &Path, t: &Table, shuffle_seed: u64, extra: &[usize]) {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    for (k, block) in t.blocks.iter().enumerate() {
        let party = party_of_block(k);
        let width = block.first().map_or(0, Vec::len);
        let mut out = String::from("id");
        for c in 0..width {
            let _ = write!(out, ",f{k}_{c}");
        }
        if k == 0 {
            out.push_str(",label");
        }
        out.push('\n');
        let mut lines: Vec<String> = (0..t.rows())
            .map(|i| {
                let mut line = t.ids[i].clone();
                for v in &block[i] {
                    let _ = write!(line, ",{}", fmt_f64(*v));
                }
                if k == 0 {
                    let _ = write!(line, ",{}", fmt_f64(t.y[i]));
                }
                line
            })
            .collect();
        for e in 0..extra.get(k).copied().unwrap_or(0) {
            let mut line = format!("only{k}_{e}");
            for _ in 0..width {
                line.push_str(",0.5");
            }
            if k == 0 {
                line.push_str(",1");
            }
            lines.push(line);
        }
        lines.shuffle(&mut rng);
        for l in lines {
            out.push_str(&l);
            out.push('\n');
        }
        std::fs::write(dir.join(format!("{party}.csv")), out).unwrap();
    }
}

pub fn party_of_block(k: usize) -> PartyId {
    if k == 0 {
        PartyId::master()
    } else {
        PartyId::member(k as u32 - 1)
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub protocol: &'static str,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub members: usize,
    pub run_id: String,
    pub log_dir: String,
    pub extra_common: String,
    /// Key size for he_logreg.
    pub key_bits: Option<u64>,
    /// Ports for agent mode, in party order (master, members, arbiter).
    pub ports: Option<Vec<u16>>,
}

impl RunSpec {
    pub fn new(protocol: &'static str, members: usize) -> Self {
        RunSpec {
            protocol,
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 42,
            members,
            run_id: "run".into(),
            log_dir: "logs".into(),
            extra_common: String::new(),
            key_bits: None,
            ports: None,
        }
    }

    pub fn parties(&self) -> Vec<PartyId> {
        let mut p = vec![PartyId::master()];
        p.extend((0..self.members as u32).map(PartyId::member));
        if self.key_bits.is_some() {
            p.push(PartyId::arbiter());
        }
        p
    }

    pub fn ini(&self) -> String {
        let mut s = format!(
            "[common]\nprotocol = {}\nepochs = {}\nbatch_size = {}\nlearning_rate = {}\nseed = {}\nrun_id = {}\nlog_dir = {}\n{}\n",
            self.protocol,
            self.epochs,
            self.batch_size,
            fmt_f64(self.learning_rate),
            self.seed,
            self.run_id,
            self.log_dir,
            self.extra_common
        );
        let port = |i: usize| self.ports.as_ref().map(|p| format!("port = {}\n", p[i])).unwrap_or_default();
        let _ = write!(s, "[master]\n{}data_path = master.csv\nid_column = id\nlabel_column = label\n\n", port(0));
        for m in 0..self.members {
            let _ = write!(s, "[member{m}]\n{}data_path = member{m}.csv\nid_column = id\n\n", port(m + 1));
        }
        if let Some(bits) = self.key_bits {
            let insecure = if bits < 1024 { "insecure_ok = true\n" } else { "" };
            let _ = write!(s, "[arbiter]\n{}\n[he]\nkey_bits = {bits}\n{insecure}", port(self.members + 1));
        }
        s
    }

    pub fn write(&self, dir: &Path, name: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, self.ini()).unwrap();
        path
    }
}

pub fn free_ports(n: usize) -> Vec<u16> {
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    listeners.iter().map(|l| l.local_addr().unwrap().port()).collect()
}

/// How the centralized reference forms the residual.
#[derive(Debug, Clone, Copy)]
pub enum Residual {
    Identity,
    Logistic,
    Taylor,
}

/// Plain-loop SGD over the concatenated blocks, reproducing the
/// federated summation order: each partial score accumulates features in
/// ascending order from 0.0, the global score adds member partials in
/// index order and the master's last, and each gradient coordinate sums
/// over the batch in ascending position. Returns weights per block, master
/// first (with its trailing bias weight).
pub fn centralized_linear(t: &Table, spec: &RunSpec, residual: Residual) -> Vec<Vec<f64>> {
    let mut xs: Vec<Matrix> = t.blocks.clone();
    for row in xs[0].iter_mut() {
        row.push(1.0);
    }
    let mut ws: Vec<Vec<f64>> = xs
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let cols = x.first().map_or(0, Vec::len);
            LinearBlock::init(cols, Init::Uniform, spec.seed, party_of_block(k))
                .weights
                .data()
                .to_vec()
        })
        .collect();
    let partial = |x: &[f64], w: &[f64]| {
        let mut acc = 0.0;
        for (a, b) in x.iter().zip(w) {
            acc += a * b;
        }
        acc
    };
    // Members first, then the master.
    let order: Vec<usize> = (1..xs.len()).chain(std::iter::once(0)).collect();
    for epoch in 0..spec.epochs {
        for idx in batch_schedule(spec.seed, epoch, t.rows(), spec.batch_size) {
            let d: Vec<f64> = idx
                .iter()
                .map(|&i| {
                    let mut z = partial(&xs[order[0]][i], &ws[order[0]]);
                    for &k in &order[1..] {
                        z += partial(&xs[k][i], &ws[k]);
                    }
                    match residual {
                        Residual::Identity => z - t.y[i],
                        Residual::Logistic => sigmoid(z) - t.y[i],
                        Residual::Taylor => 0.25 * z + 0.5 - t.y[i],
                    }
                })
                .collect();
            let scale = -(spec.learning_rate / idx.len() as f64);
            for k in 0..xs.len() {
                for j in 0..ws[k].len() {
                    let mut g = 0.0;
                    for (pos, &i) in idx.iter().enumerate() {
                        g += xs[k][i][j] * d[pos];
                    }
                    ws[k][j] = scale * g + ws[k][j];
                }
            }
        }
    }
    ws
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// A named parameter from a model dump.
pub fn model_param(dir: &Path, run_id: &str, party: PartyId, name: &str) -> Vec<f64> {
    let v = read_json(&vflkit::runner::model_path(dir, run_id, party));
    v["params"][name]["data"]
        .as_array()
        .unwrap_or_else(|| panic!("no param {name} for {party}"))
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

/// Metric records without timestamps.
pub fn metric_values(dir: &Path, run_id: &str, party: PartyId) -> Vec<(u64, String, u64)> {
    let text = std::fs::read_to_string(vflkit::metrics::metrics_path(dir, run_id, party)).unwrap();
    text.lines()
        .map(|l| {
            let r: MetricRecord = serde_json::from_str(l).unwrap();
            (r.epoch, r.name.as_str().to_string(), r.value.to_bits())
        })
        .collect()
}

pub fn spawn_agent(config: &Path, party: PartyId) -> Child {
    Command::new(env!("CARGO_BIN_EXE_vflkit"))
        .args(["agent", "--config"])
        .arg(config)
        .args(["--party", &party.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn agent")
}

/// Waits for every agent, returning `(party, exit code, stderr)`; kills
/// stragglers after `limit`.
pub fn wait_agents(children: Vec<(PartyId, Child)>, limit: Duration) -> Vec<(PartyId, i32, String)> {
    let deadline = Instant::now() + limit;
    children
        .into_iter()
        .map(|(party, mut child)| {
            loop {
                if child.try_wait().unwrap().is_some() || Instant::now() > deadline {
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let _ = child.kill();
            let out = child.wait_with_output().unwrap();
            let code = out.status.code().unwrap_or(-1);
            (party, code, String::from_utf8_lossy(&out.stderr).into_owned())
        })
        .collect()
}

/// Starts one agent per party and waits for all of them.
pub fn run_agents(config: &Path, parties: &[PartyId], limit: Duration) -> Vec<(PartyId, i32, String)> {
    let children = parties.iter().map(|&p| (p, spawn_agent(config, p))).collect();
    wait_agents(children, limit)
}
