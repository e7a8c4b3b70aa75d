//! Run configuration files (INI).
//!
//! ```ini
//! [common]
//! protocol = logreg
//! epochs = 10
//! batch_size = 32
//! learning_rate = 0.1
//! seed = 7
//! run_id = demo
//! log_dir = logs
//!
//! [master]
//! port = 7000
//! data_path = master.csv
//! id_column = id
//! label_column = y
//!
//! [member0]
//! port = 7001
//! data_path = member0.csv
//! id_column = id
//! ```
//!
//! Parsing is strict: unknown sections or keys, repeated keys and gaps in
//! member numbering are errors. Relative paths resolve against the
//! directory holding the config file.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use ini::{Ini, ParseOption, Properties};
use thiserror::Error;

use crate::comms::wire::Endpoint;
use crate::comms::PartyId;
use crate::models::Init;
use crate::protocols::{HeSettings, ProtocolKind, TrainConfig};

pub const DEFAULT_HOST: &str = "127.0.0.1";
pub const DEFAULT_RECV_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("section [{0}] appears more than once")]
    DuplicateSection(String),
    #[error("key '{0}' must be inside a section")]
    Sectionless(String),
    #[error("[{section}] unknown key '{key}'")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] key '{key}' given more than once")]
    DuplicateKey { section: String, key: String },
    #[error("[{section}] missing required key '{key}'")]
    Missing { section: String, key: String },
    #[error("[{section}] {key} = {value:?}: {reason}")]
    Value {
        section: String,
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub path: PathBuf,
    pub id_column: String,
    /// Present for the master only.
    pub label_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartySpec {
    pub party: PartyId,
    pub host: String,
    /// Needed only when running as separate agents.
    pub port: Option<u16>,
    /// `None` for the arbiter.
    pub data: Option<DataSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub run_id: String,
    pub log_dir: PathBuf,
    pub recv_timeout: Duration,
    /// Master first, then members in index order, then the arbiter.
    pub parties: Vec<PartySpec>,
}

impl RunConfig {
    pub fn party_ids(&self) -> Vec<PartyId> {
        self.parties.iter().map(|p| p.party).collect()
    }

    pub fn spec(&self, party: PartyId) -> Option<&PartySpec> {
        self.parties.iter().find(|p| p.party == party)
    }

    /// Addresses of every party; fails if any lacks a port.
    pub fn topology(&self) -> Result<BTreeMap<PartyId, Endpoint>, ConfigError> {
        self.parties
            .iter()
            .map(|p| {
                let port = p
                    .port
                    .ok_or_else(|| ConfigError::Invalid(format!("agent mode needs a port for {}", p.party)))?;
                Ok((p.party, Endpoint::new(p.host.clone(), port)))
            })
            .collect()
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Keys permitted per section kind; `*` marks required ones.
const COMMON_KEYS: &[&str] = &[
    "*protocol",
    "*epochs",
    "*batch_size",
    "*learning_rate",
    "*seed",
    "*run_id",
    "*log_dir",
    "eval_every",
    "hidden",
    "init",
    "recv_timeout_ms",
];
const MASTER_KEYS: &[&str] = &["host", "port", "*data_path", "*id_column", "*label_column"];
const MEMBER_KEYS: &[&str] = &["host", "port", "*data_path", "*id_column"];
const ARBITER_KEYS: &[&str] = &["host", "port"];
const HE_KEYS: &[&str] = &["*key_bits", "insecure_ok"];

struct Section<'a> {
    name: String,
    props: &'a Properties,
}

impl<'a> Section<'a> {
    fn check(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        let known: HashSet<&str> = allowed.iter().map(|k| k.trim_start_matches('*')).collect();
        let mut seen = HashSet::new();
        for (key, _) in self.props.iter() {
            if !known.contains(key) {
                return Err(ConfigError::UnknownKey {
                    section: self.name.clone(),
                    key: key.into(),
                });
            }
            if !seen.insert(key) {
                return Err(ConfigError::DuplicateKey {
                    section: self.name.clone(),
                    key: key.into(),
                });
            }
        }
        for key in allowed.iter().filter_map(|k| k.strip_prefix('*')) {
            self.required(key)?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.props.get(key).map(str::trim)
    }

    fn required(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.get(key).filter(|v| !v.is_empty()).ok_or_else(|| ConfigError::Missing {
            section: self.name.clone(),
            key: key.into(),
        })
    }

    fn bad(&self, key: &str, value: &str, reason: impl Display) -> ConfigError {
        ConfigError::Value {
            section: self.name.clone(),
            key: key.into(),
            value: value.into(),
            reason: reason.to_string(),
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| self.bad(key, v, e)))
            .transpose()
    }

    fn parse_required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        let v = self.required(key)?;
        v.parse::<T>().map_err(|e| self.bad(key, v, e))
    }

    fn path(&self, key: &str, base: &Path) -> Result<PathBuf, ConfigError> {
        let p = PathBuf::from(self.required(key)?);
        Ok(if p.is_absolute() { p } else { base.join(p) })
    }

    fn party(&self, party: PartyId, data: Option<DataSpec>) -> Result<PartySpec, ConfigError> {
        Ok(PartySpec {
            party,
            host: self.get("host").unwrap_or(DEFAULT_HOST).to_string(),
            port: self.parse("port")?,
            data,
        })
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_init(s: &str) -> Result<Init, String> {
    match s {
        "uniform" => Ok(Init::Uniform),
        "zeros" => Ok(Init::Zeros),
        _ => Err("expected uniform or zeros".into()),
    }
}

fn member_index(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("member")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || (digits.len() > 1 && digits.starts_with('0')) {
        return None;
    }
    digits.parse().ok()
}

/// Parses config text; `base` is the directory relative paths resolve
/// against.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    let opts = ParseOption {
        enabled_quote: false,
        enabled_escape: false,
        ..ParseOption::default()
    };
    let ini = Ini::load_from_str_opt(text, opts).map_err(|e| ConfigError::Syntax {
        line: e.line,
        col: e.col,
        msg: e.msg.to_string(),
    })?;

    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    for (name, props) in ini.iter() {
        let Some(name) = name else {
            if let Some((key, _)) = props.iter().next() {
                return Err(ConfigError::Sectionless(key.into()));
            }
            continue;
        };
        let known = matches!(name, "common" | "master" | "arbiter" | "he") || member_index(name).is_some();
        if !known {
            return Err(ConfigError::UnknownSection(name.into()));
        }
        let section = Section {
            name: name.into(),
            props,
        };
        if sections.insert(name.into(), section).is_some() {
            return Err(ConfigError::DuplicateSection(name.into()));
        }
    }
    let take = |name: &str| {
        sections
            .get(name)
            .ok_or_else(|| ConfigError::Invalid(format!("missing section [{name}]")))
    };

    let common = take("common")?;
    common.check(COMMON_KEYS)?;
    let protocol: ProtocolKind = common.parse_required("protocol")?;
    let mut train = TrainConfig::new(
        protocol,
        common.parse_required("epochs")?,
        common.parse_required("batch_size")?,
        common.parse_required("learning_rate")?,
        common.parse_required("seed")?,
    );
    if let Some(v) = common.parse("eval_every")? {
        train.eval_every = v;
    }
    if let Some(v) = common.parse("hidden")? {
        train.hidden = v;
    }
    if let Some(v) = common.get("init") {
        train.init = parse_init(v).map_err(|e| common.bad("init", v, e))?;
    }
    let run_id = common.required("run_id")?.to_string();
    if !run_id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b)) {
        return Err(common.bad("run_id", &run_id, "use only letters, digits, '-', '_' and '.'"));
    }
    let log_dir = common.path("log_dir", base)?;
    let recv_timeout_ms: u64 = common.parse("recv_timeout_ms")?.unwrap_or(DEFAULT_RECV_TIMEOUT_MS);
    if recv_timeout_ms == 0 {
        return Err(common.bad("recv_timeout_ms", "0", "must be positive"));
    }

    match (protocol, sections.get("he")) {
        (ProtocolKind::HeLogreg, Some(he)) => {
            he.check(HE_KEYS)?;
            let insecure_ok = match he.get("insecure_ok") {
                Some(v) => parse_bool(v).map_err(|e| he.bad("insecure_ok", v, e))?,
                None => false,
            };
            train.he = Some(HeSettings {
                key_bits: he.parse_required("key_bits")?,
                insecure_ok,
            });
        }
        (ProtocolKind::HeLogreg, None) => return Err(ConfigError::Invalid("he_logreg needs an [he] section".into())),
        (p, Some(_)) => return Err(ConfigError::Invalid(format!("[he] is only valid with he_logreg, not {p}"))),
        (_, None) => {}
    }
    train.validate().map_err(ConfigError::Invalid)?;

    let mut parties = Vec::new();
    let master = take("master")?;
    master.check(MASTER_KEYS)?;
    parties.push(master.party(
        PartyId::master(),
        Some(DataSpec {
            path: master.path("data_path", base)?,
            id_column: master.required("id_column")?.into(),
            label_column: Some(master.required("label_column")?.into()),
        }),
    )?);

    let mut indices: Vec<u32> = sections.keys().filter_map(|n| member_index(n)).collect();
    indices.sort_unstable();
    if indices.is_empty() {
        return Err(ConfigError::Invalid("at least one [member<i>] section is required".into()));
    }
    for (expected, &i) in indices.iter().enumerate() {
        if i != expected as u32 {
            return Err(ConfigError::Invalid(format!(
                "member sections must be numbered from 0 without gaps; found member{i} but no member{expected}"
            )));
        }
        let s = &sections[&format!("member{i}")];
        s.check(MEMBER_KEYS)?;
        parties.push(s.party(
            PartyId::member(i),
            Some(DataSpec {
                path: s.path("data_path", base)?,
                id_column: s.required("id_column")?.into(),
                label_column: None,
            }),
        )?);
    }

    match (protocol, sections.get("arbiter")) {
        (ProtocolKind::HeLogreg, Some(a)) => {
            a.check(ARBITER_KEYS)?;
            parties.push(a.party(PartyId::arbiter(), None)?);
        }
        (ProtocolKind::HeLogreg, None) => return Err(ConfigError::Invalid("he_logreg needs an [arbiter] section".into())),
        (p, Some(_)) => return Err(ConfigError::Invalid(format!("protocol {p} does not use an arbiter"))),
        (_, None) => {}
    }

    Ok(RunConfig {
        train,
        run_id,
        log_dir,
        recv_timeout: Duration::from_millis(recv_timeout_ms),
        parties,
    })
}
