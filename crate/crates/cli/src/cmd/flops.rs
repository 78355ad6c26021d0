use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use tea_core::attention::SlideSpec;
use tea_core::cost::{checks_to_csv, checks_to_text, per_token_vs_window, scaling_report, square_side, CostCheck, CostOp};

use crate::{header, parse_list, CliError, CliResult, Outcome};

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    /// sa, skvsa or tea
    #[arg(long, default_value = "tea")]
    pub op: String,
    /// Token counts N (perfect squares), comma separated
    #[arg(long, default_value = "256,1024,4096")]
    pub sizes: String,
    /// Channel width D
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Slide bundle w,s,k,nd
    #[arg(long, default_value = "7,2,3,16")]
    pub spec: SlideSpec,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the term-by-term comparison as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run(args: &FlopsArgs, out: &mut dyn Write) -> CliResult {
    let op = CostOp::parse(&args.op)
        .ok_or_else(|| CliError::Usage(format!("unknown op {:?} (expected sa, skvsa or tea)", args.op)))?;
    let sizes = parse_list(&args.sizes)?;
    for &n in &sizes {
        let side = square_side(n)?;
        if op != CostOp::Sa {
            args.spec.validate_for(side, side)?;
        }
    }
    header(
        out,
        "flops",
        Some(args.seed),
        &format!(" op={} D={} spec={} unit=MAC (1 MAC = 2 FLOPs)", op.name(), args.dim, args.spec),
    )?;
    let checks = sizes
        .iter()
        .map(|&n| CostCheck::run(op, n, args.dim, &args.spec, args.seed))
        .collect::<tea_core::Result<Vec<_>>>()?;
    out.write_all(checks_to_text(&checks).as_bytes())?;
    if let Some(path) = &args.csv {
        fs::write(path, checks_to_csv(&checks))?;
    }
    if sizes.len() > 1 {
        let report = scaling_report(op, &sizes, args.dim, &args.spec, args.seed)?;
        out.write_all(report.to_text().as_bytes())?;
    }
    if op == CostOp::Tea {
        let (ours, window16) = per_token_vs_window(&args.spec, 16);
        writeln!(
            out,
            "per-token non-projection MACs: {ours}D vs {window16}D for 16x16 window attention ({})",
            if ours < window16 { "lower" } else { "not lower" }
        )?;
    }
    Ok(Outcome::from_bool(checks.iter().all(CostCheck::matches)))
}
