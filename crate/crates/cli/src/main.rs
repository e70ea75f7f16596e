use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gridchain::contract::BidWeighting;
use gridchain::harness::{audit_chain, bundled, emit_reports, load_scenario, parse_scenario, run_simulation, RunError};
use gridchain::ledger::{parse_chain_log, verify_chain, Ed25519};

const EXIT_CONFIG: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "gridchain", version, about = "Ledger-backed voltage-regulation market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weighting {
    Divide,
    Multiply,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write reports to the output directory.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        bid_weighting: Option<Weighting>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Check hashes, links and ordering of a chain log.
    Verify {
        #[arg(long)]
        chain: PathBuf,
    },
}

fn run(scenario: &str, out: &Path, seed: Option<u64>, weighting: Option<Weighting>, steps: Option<u64>) -> ExitCode {
    let loaded = match bundled(scenario) {
        Some(text) => parse_scenario(text),
        None => load_scenario(scenario.as_ref()),
    };
    let mut config = match loaded {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(seed) = seed {
        config.params.seed = seed;
    }
    if let Some(w) = weighting {
        config.params.bid_weighting = match w {
            Weighting::Divide => BidWeighting::Divide,
            Weighting::Multiply => BidWeighting::Multiply,
        };
    }
    if let Some(steps) = steps {
        config.params.steps = steps;
    }
    let params = config.params.contract_params();
    let report = match run_simulation(config) {
        Ok(r) => r,
        Err(e @ RunError::ReplicaDivergence { .. }) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VERIFY);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = emit_reports(&report, out) {
        eprintln!("error: cannot write reports: {e}");
        return ExitCode::from(EXIT_CONFIG);
    }
    match audit_chain(&report.chain, &params) {
        Ok((g, b)) if g == report.reputation_csv() && b == report.wallets_csv() => {}
        Ok(_) => {
            eprintln!("error: replaying chain.log does not reproduce wallets.csv and reputation.csv");
            return ExitCode::from(EXIT_VERIFY);
        }
        Err(e) => {
            eprintln!("error: replay failed: {e}");
            return ExitCode::from(EXIT_VERIFY);
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} blocks, {} contracts, reports in {}", report.chain.len(), report.contracts.len(), out.display());
    ExitCode::SUCCESS
}

fn verify(path: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let chain = match parse_chain_log(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot parse chain log at line {}: {}", e.line, e.reason);
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(index) = verify_chain(&chain) {
        eprintln!("chain broken at block {index}");
        return ExitCode::from(EXIT_VERIFY);
    }
    if let Err(e) = gridchain::ledger::replay_chain(&chain, &Ed25519, &Default::default(), |_, _| {}) {
        eprintln!("chain does not replay: {e}");
        return ExitCode::from(EXIT_VERIFY);
    }
    println!("ok: {} blocks", chain.len());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { scenario, out, seed, bid_weighting, steps } => run(scenario, out, *seed, *bid_weighting, *steps),
        Command::Verify { chain } => verify(chain),
    }
}
