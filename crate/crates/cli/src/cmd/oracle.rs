use std::io::Write;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tea_core::crosscheck::{random_case, run_case, OracleOp, ORACLE_TOL};
use tea_core::Result as CoreResult;

use crate::{header, CliError, CliResult, Outcome};

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// sa, skvsa, askvsa, dsa, tea or all
    #[arg(long, default_value = "all")]
    pub op: String,
    /// Random cases per operator
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Largest error over `cases` random cases and the index where it occurred.
/// Cases are drawn sequentially from one stream, then evaluated in parallel.
pub fn check(op: OracleOp, cases: usize, seed: u64) -> CoreResult<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn: Vec<_> = (0..cases).map(|_| random_case(&mut rng)).collect();
    let errs = drawn.par_iter().map(|c| run_case(op, c)).collect::<CoreResult<Vec<f64>>>()?;
    Ok(errs
        .iter()
        .enumerate()
        .fold((0.0, 0), |(m, at), (i, &e)| if e > m || e.is_nan() { (e, i) } else { (m, at) }))
}

pub fn run(args: &OracleArgs, out: &mut dyn Write) -> CliResult {
    if args.cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let ops: Vec<OracleOp> = if args.op == "all" {
        OracleOp::ALL.to_vec()
    } else {
        vec![OracleOp::parse(&args.op)
            .ok_or_else(|| CliError::Usage(format!("unknown op {:?} (expected sa, skvsa, askvsa, dsa, tea or all)", args.op)))?]
    };
    header(out, "oracle", Some(args.seed), &format!(" cases={} tol={ORACLE_TOL:e}", args.cases))?;
    let mut outcome = Outcome::Pass;
    for op in ops {
        let (err, worst) = check(op, args.cases, args.seed)?;
        let ok = err <= ORACLE_TOL;
        writeln!(
            out,
            "{:<7} cases={} max_rel_err={err:.3e} worst_case={worst} {}",
            op.name(),
            args.cases,
            if ok { "PASS" } else { "FAIL" }
        )?;
        outcome = outcome.and(Outcome::from_bool(ok));
    }
    Ok(outcome)
}
