//! Scenario runner and ledger tools.
//!
//! Exit codes: 0 success, 1 expectation/verification failure, 2 parse or
//! I/O error.

use clap::{Parser, Subcommand, ValueEnum};
use fedid::hdkeys::{DerivationMode, ExtendedPublicKey};
use fedid::ledger::{Ledger, TxPayload, DEFAULT_GAP_LIMIT};
use fedid::scenario::{self, Overrides, RunExit};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedid", about = "Federated identity management simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Additive,
    Multiplicative,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write transcript, ledger, report, and state
    /// dumps to the output directory.
    Run {
        scenario: PathBuf,
        /// Output directory; defaults to $FEDID_OUT_DIR or ./fedid-out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the key-derivation mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Use the paper-literal key-equality login check instead of the
        /// challenge-response default.
        #[arg(long)]
        paper_literal_login: bool,
    },
    /// Check a persisted ledger's hash links, roots, and endorsements.
    Verify { ledger_file: PathBuf },
    /// List ledger transactions whose keys derive from an extended public key.
    Trace {
        ledger_file: PathBuf,
        /// Base58 extended public key registered with a data owner.
        #[arg(long)]
        key: String,
        /// Consecutive unused indices tolerated before the scan stops.
        #[arg(long, default_value_t = DEFAULT_GAP_LIMIT)]
        gap: u32,
    },
    /// Rebuild the audit report from a run directory.
    Report { run_dir: PathBuf },
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("FEDID_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fedid-out"))
}

fn load_ledger(path: &PathBuf) -> Result<Ledger, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ledger::load(&mut text.as_bytes()).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, out, seed, mode, paper_literal_login } => {
            let out_dir = out.unwrap_or_else(default_out_dir);
            let overrides = Overrides {
                seed,
                mode: mode.map(|m| match m {
                    ModeArg::Additive => DerivationMode::Additive,
                    ModeArg::Multiplicative => DerivationMode::Multiplicative,
                }),
                paper_literal_login,
            };
            match scenario::run_scenario_file(&scenario, &out_dir, &overrides) {
                Ok(output) => {
                    println!("seed: {}", output.seed);
                    println!("artifacts: {}", out_dir.display());
                    match output.exit {
                        RunExit::Success => {
                            println!("result: all steps passed");
                            ExitCode::SUCCESS
                        }
                        RunExit::StepFailure { index, kind, message } => {
                            eprintln!("result: step {index} ({kind}) failed: {message}");
                            ExitCode::from(1)
                        }
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }

        Command::Verify { ledger_file } => match load_ledger(&ledger_file) {
            Ok(ledger) => {
                if ledger.verify_chain() {
                    println!(
                        "chain OK: {} blocks, {} records, channel {}",
                        ledger.blocks().len(),
                        ledger.records().count(),
                        ledger.config().channel_id
                    );
                    ExitCode::SUCCESS
                } else {
                    eprintln!("chain verification FAILED");
                    ExitCode::from(1)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },

        Command::Trace { ledger_file, key, gap } => {
            let ledger = match load_ledger(&ledger_file) {
                Ok(ledger) => ledger,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let parent = match ExtendedPublicKey::from_base58(&key) {
                Ok(parent) => parent,
                Err(e) => {
                    eprintln!("error: invalid key: {e}");
                    return ExitCode::from(2);
                }
            };
            let records = ledger.trace_by_parent_key(&parent, gap);
            println!("{} transaction(s)", records.len());
            for record in records {
                match &record.payload {
                    TxPayload::DataAccess { idp_id, sp_id, requested_attributes, outcome } => {
                        println!(
                            "t={} owner={} data-access idp={} sp={} attributes=[{}] outcome={:?}",
                            record.timestamp,
                            record.data_owner_id,
                            idp_id,
                            sp_id,
                            requested_attributes.join(","),
                            outcome
                        );
                    }
                    TxPayload::Recertification { attribute_name } => {
                        println!(
                            "t={} owner={} re-certification attribute={}",
                            record.timestamp, record.data_owner_id, attribute_name
                        );
                    }
                }
            }
            ExitCode::SUCCESS
        }

        Command::Report { run_dir } => match scenario::report_from_run_dir(&run_dir) {
            Ok(report) => {
                print!("{report}");
                if report.contains("VIOLATION") || report.contains("FAILED") {
                    ExitCode::from(1)
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
