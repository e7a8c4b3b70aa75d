use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vflkit::config::load_config;
use vflkit::data::{gen_synthetic, party_file_name};
use vflkit::metrics::{run_log_files, summarize};
use vflkit::protocols::ProtocolKind;
use vflkit::runner::{run_agent, run_local, PartyRun, EXIT_CONFIG};
use vflkit::PartyId;

#[derive(Parser)]
#[command(name = "vflkit", version, about = "Vertical federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every party in this process.
    Local {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one party over TCP.
    Agent {
        #[arg(long)]
        config: PathBuf,
        /// master, member<i> or arbiter.
        #[arg(long)]
        party: PartyId,
    },
    /// Write a synthetic vertically partitioned dataset and a matching run.ini.
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Data-holding parties: the master plus members.
        #[arg(long, default_value_t = 2)]
        parties: usize,
        #[arg(long, default_value_t = 200)]
        rows: usize,
        /// Columns per party, either one count for all or a comma list
        /// starting with the master.
        #[arg(long, default_value = "3")]
        features: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "logreg")]
        protocol: ProtocolKind,
    },
    /// Summarize a run's event and metric logs.
    Report {
        #[arg(long)]
        log_dir: PathBuf,
        #[arg(long)]
        run_id: String,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}

type CliResult = Result<(), (i32, String)>;

fn config_err(e: impl std::fmt::Display) -> (i32, String) {
    (EXIT_CONFIG, e.to_string())
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Local { config } => {
            let cfg = load_config(&config).map_err(config_err)?;
            let runs = run_local(&cfg).map_err(|e| (e.exit_code(), e.to_string()))?;
            print_summary(&runs);
            Ok(())
        }
        Command::Agent { config, party } => {
            let cfg = load_config(&config).map_err(config_err)?;
            let run = run_agent(&cfg, party).map_err(|e| (e.exit_code(), e.to_string()))?;
            print_summary(std::slice::from_ref(&run));
            Ok(())
        }
        Command::Gen {
            out,
            parties,
            rows,
            features,
            seed,
            protocol,
        } => generate(&out, parties, rows, &features, seed, protocol),
        Command::Report { log_dir, run_id } => {
            let files = run_log_files(&log_dir, &run_id).map_err(config_err)?;
            if files.is_empty() {
                return Err(config_err(format!("no logs for run '{run_id}' in {}", log_dir.display())));
            }
            let report = summarize(&files).map_err(config_err)?;
            print!("{}", report.to_table());
            let path = log_dir.join(format!("{run_id}.report.json"));
            std::fs::write(&path, report.to_json()).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn print_summary(runs: &[PartyRun]) {
    for run in runs {
        let o = &run.outcome;
        match o.final_loss {
            Some(loss) => println!("{}: {} matched rows, final loss {loss:.6}", o.party, o.matched_rows),
            None => println!("{}: {} matched rows", o.party, o.matched_rows),
        }
    }
}

fn parse_features(spec: &str, parties: usize) -> Result<Vec<usize>, String> {
    let counts = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("--features {spec:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match counts.len() {
        1 => Ok(vec![counts[0]; parties]),
        n if n == parties => Ok(counts),
        n => Err(format!("--features lists {n} counts for {parties} parties")),
    }
}

fn generate(out: &Path, parties: usize, rows: usize, features: &str, seed: u64, protocol: ProtocolKind) -> CliResult {
    if parties < 2 {
        return Err(config_err("--parties must be at least 2 (a master and one member)"));
    }
    let counts = parse_features(features, parties).map_err(config_err)?;
    let files = gen_synthetic(out, &counts, rows, seed).map_err(config_err)?;

    let mut ini = String::new();
    let lr = if protocol == ProtocolKind::Linreg { 0.05 } else { 0.1 };
    let _ = write!(
        ini,
        "[common]\nprotocol = {protocol}\nepochs = 10\nbatch_size = 32\nlearning_rate = {lr}\nseed = {seed}\n\
         run_id = demo\nlog_dir = logs\n\n"
    );
    let mut port = 7000;
    for p in 0..parties {
        let party = if p == 0 { PartyId::master() } else { PartyId::member(p as u32 - 1) };
        let _ = write!(
            ini,
            "[{party}]\nhost = 127.0.0.1\nport = {port}\ndata_path = {}\nid_column = id\n",
            party_file_name(party)
        );
        if p == 0 {
            ini.push_str("label_column = y\n");
        }
        ini.push('\n');
        port += 1;
    }
    if protocol == ProtocolKind::HeLogreg {
        let _ = write!(ini, "[arbiter]\nhost = 127.0.0.1\nport = {port}\n\n[he]\nkey_bits = 1024\n");
    }
    let ini_path = out.join("run.ini");
    std::fs::write(&ini_path, ini).map_err(|e| config_err(format!("{}: {e}", ini_path.display())))?;
    for f in files.iter().chain(std::iter::once(&ini_path)) {
        println!("wrote {}", f.display());
    }
    Ok(())
}
