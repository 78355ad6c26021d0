use std::io::{self, Write};
use std::process;

use clap::{Parser, Subcommand};

use tea_cli::cmd::{audit, flops, infer, oracle, selftest, train};
use tea_cli::{exit_code, CliError, CliResult};

/// Translation-equivariant attention toolkit.
#[derive(Debug, Parser)]
#[command(name = "tea", version)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Shift-equivariance audit of one operator or the toy model
    Audit(audit::AuditArgs),
    /// Randomized comparison against brute-force references
    Oracle(oracle::OracleArgs),
    /// Analytic against instrumented MAC counts
    Flops(flops::FlopsArgs),
    /// Train the toy restoration model on synthetic data
    #[command(name = "train-toy")]
    TrainToy(train::TrainArgs),
    /// Run a checkpoint on one PGM/PPM image
    Infer(infer::InferArgs),
    /// Every invariant battery
    Selftest(selftest::SelftestArgs),
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Audit(a) => audit::run(a, out),
        Command::Oracle(a) => oracle::run(a, out),
        Command::Flops(a) => flops::run(a, out),
        Command::TrainToy(a) => train::run(a, out),
        Command::Infer(a) => infer::run(a, out),
        Command::Selftest(a) => selftest::run(a, out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            process::exit(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let result = dispatch(&cli, &mut out);
    let _ = out.flush();
    if let Err(e) = &result {
        eprintln!("tea: {e}");
    }
    process::exit(exit_code(&result));
}
