use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use telos_core::certify::{certify, CandidateKind, SuiteConfig};
use telos_core::domain::Payload;
use telos_core::ledger;
use telos_core::scenario::{parse_params, run_scenario, ScenarioConfig, ScenarioError};

const OK: u8 = 0;
const INVALID: u8 = 1;
const RUNTIME: u8 = 2;
const VERIFY: u8 = 3;

/// Sovereign multi-operator analytics: scenario runs, ledger verification and agent certification.
#[derive(Debug, Parser)]
#[command(name = "telos", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write report.json, rounds.csv, ledger.txt and trace.txt.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a scenario without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Ledger operations.
    Ledger {
        #[command(subcommand)]
        command: LedgerCommand,
    },
    /// Run the certification suite on a reference or adversarial agent.
    Certify {
        /// Agent kind, e.g. anomaly-detector or always-flag-detector.
        #[arg(long)]
        kind: String,
        /// TOML table of agent parameters (fields of the kind's input schema).
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = SuiteConfig::default().seed)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum LedgerCommand {
    /// Verify an exported ledger; prints the first bad entry index on failure.
    Verify { path: PathBuf },
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), String> {
    fs::write(dir.join(name), contents).map_err(|e| format!("cannot write {}: {e}", dir.join(name).display()))
}

fn load(path: &Path) -> Result<ScenarioConfig, u8> {
    ScenarioConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        match e {
            ScenarioError::Io { .. } => RUNTIME,
            _ => INVALID,
        }
    })
}

fn cmd_run(scenario: &Path, seed: Option<u64>, out: &Path) -> u8 {
    let cfg = match load(scenario) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let run = match run_scenario(&cfg, seed) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return RUNTIME;
        }
    };
    let report = serde_json::to_string_pretty(&run.report).expect("report serializes");
    let written = fs::create_dir_all(out)
        .map_err(|e| format!("cannot create {}: {e}", out.display()))
        .and_then(|()| write(out, "report.json", &(report + "\n")))
        .and_then(|()| write(out, "rounds.csv", &run.rounds_csv))
        .and_then(|()| write(out, "ledger.txt", &run.ledger))
        .and_then(|()| write(out, "trace.txt", &run.trace));
    if let Err(e) = written {
        eprintln!("error: {e}");
        return RUNTIME;
    }
    let r = &run.report;
    println!("scenario {} seed {}", r.scenario, r.seed);
    if let (Some(a), Some(b)) = (r.initial_loss, r.final_loss) {
        println!("loss {a:.6} -> {b:.6} over {} rounds ({} aborted)", r.rounds.len(), r.aborted_rounds);
    }
    println!("sovereignty violations {} (audited {})", r.sovereignty_violations, r.audited_violations);
    println!("ledger entries {}, events {}", r.ledger_length, r.event_count);
    if let Some(d) = r.report_digest {
        println!("report digest {d}");
    }
    r.exit_code() as u8
}

fn cmd_validate(scenario: &Path) -> u8 {
    match load(scenario) {
        Ok(cfg) => {
            println!("{}: ok ({} operators, {} agents)", cfg.name, cfg.operators.len(), cfg.agents.len());
            OK
        }
        Err(code) => code,
    }
}

fn cmd_ledger_verify(path: &Path) -> u8 {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return RUNTIME;
        }
    };
    match ledger::import_verified(&bytes) {
        Ok(entries) => {
            println!("ok: {} entries verified", entries.len());
            OK
        }
        Err(e) => {
            println!("first bad entry: {}", e.index());
            eprintln!("error: {e}");
            VERIFY
        }
    }
}

fn cmd_certify(kind: &str, params: Option<&Path>, seed: u64, out: &Path) -> u8 {
    let kind: CandidateKind = match kind.parse() {
        Ok(k) => k,
        Err(e) => {
            let known: Vec<&str> = CandidateKind::all().iter().map(|k| k.token()).collect();
            eprintln!("error: {e}; expected one of {}", known.join(", "));
            return INVALID;
        }
    };
    let params = match params {
        None => Payload::new(),
        Some(p) => match fs::read_to_string(p) {
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", p.display());
                return RUNTIME;
            }
            Ok(text) => match parse_params(kind.agent_kind(), &text) {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {}: {e}", p.display());
                    return INVALID;
                }
            },
        },
    };
    let suite = SuiteConfig { seed, ..SuiteConfig::default() };
    let report = match certify(kind, &params, &suite) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return RUNTIME;
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Err(e) = fs::create_dir_all(out)
        .map_err(|e| format!("cannot create {}: {e}", out.display()))
        .and_then(|()| write(out, "certification.json", &(json + "\n")))
    {
        eprintln!("error: {e}");
        return RUNTIME;
    }
    println!("certifying {} ({kind})", report.agent);
    for v in &report.verdicts {
        let test = serde_json::to_value(v.test).expect("token");
        println!("  {:<5} {:<22} {}", if v.passed { "pass" } else { "FAIL" }, test.as_str().unwrap_or(""), v.detail);
    }
    println!("{}", if report.passed { "certified" } else { "not certified" });
    report.exit_code() as u8
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { INVALID } else { OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match &cli.command {
        Command::Run { scenario, seed, out } => cmd_run(scenario, *seed, out),
        Command::Validate { scenario } => cmd_validate(scenario),
        Command::Ledger { command: LedgerCommand::Verify { path } } => cmd_ledger_verify(path),
        Command::Certify { kind, params, seed, out } => cmd_certify(kind, params.as_deref(), *seed, out),
    };
    ExitCode::from(code)
}
