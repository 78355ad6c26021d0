use std::io::Write;
use std::time::Instant;

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tea_core::attention::{self, AttnParams, SlideSpec};
use tea_core::cost::{analytic_cost, per_token_vs_window, scaling_report, CostCheck, CostOp};
use tea_core::crosscheck::{OracleOp, ORACLE_TOL};
use tea_core::degenerate::degeneration_chain;
use tea_core::equivariance::{audit_composition, Certified, Composition, EquivReport, Margin, ShiftOp, Verdict};
use tea_core::fault::{self, Fault};
use tea_core::gradcheck::{primitive_suite, tea_block_check, BLOCK_TOL, PRIMITIVE_TOL};
use tea_core::io::{decode_checkpoint, decode_pnm, decode_tensor, encode_checkpoint, encode_pnm, encode_tensor};
use tea_core::model::{train_toy, Model, ModelConfig, TrainSettings, Variant};
use tea_core::ops::{conv2d_depthwise, gelu, linear_project, PadMode};
use tea_core::{Result as CoreResult, Tensor};

use super::audit::{judge, Target};
use super::oracle;
use crate::{header, CliError, CliResult, Outcome, Size};

#[derive(Debug, Clone, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Plant a known bug first: softmax-scale, window-shift or mac-count
    #[arg(long)]
    pub inject_fault: Option<String>,
    /// Run a single battery
    #[arg(long)]
    pub only: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        ok,
        detail: detail.into(),
    }
}

type Battery = fn(u64) -> Result<Vec<Check>, CliError>;

pub const BATTERIES: [(&str, Battery); 9] = [
    ("oracle", oracle_battery),
    ("degeneration", degeneration_battery),
    ("audits", audit_battery),
    ("negative-control", negative_control_battery),
    ("composition", composition_battery),
    ("cost", cost_battery),
    ("gradients", gradient_battery),
    ("determinism", determinism_battery),
    ("io", io_battery),
];

fn oracle_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    OracleOp::ALL
        .iter()
        .map(|&op| {
            let (err, worst) = oracle::check(op, 100, seed)?;
            Ok(check(
                format!("{} vs reference, 100 cases", op.name()),
                err <= ORACLE_TOL,
                format!("max_rel_err={err:.3e} worst_case={worst}"),
            ))
        })
        .collect()
}

fn degeneration_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    Ok(degeneration_chain(seed)?
        .into_iter()
        .map(|d| check(d.name, d.passed(), format!("max_abs_diff={:.3e}", d.max_abs_diff)))
        .collect())
}

/// Shifts up to a quarter of the side, corners included.
pub fn audit_shifts(side: usize) -> Vec<ShiftOp> {
    let q = (side / 4) as i64;
    let mut s: Vec<ShiftOp> = tea_core::equivariance::sweep(2);
    s.extend([(q, q), (-q, q), (q, -3), (-5, -q), (1, -q)].map(|(dy, dx)| ShiftOp::cyclic(dy, dx)));
    s
}

/// Bundle and offset multiplier for the operator audits, small enough that
/// a quarter-side shift still leaves an interior on 32×32.
pub const AUDIT_SPEC: &str = "5,2,3,16";
pub const AUDIT_OFFSET_SCALE: f64 = 0.5;

fn audit_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    let spec: SlideSpec = AUDIT_SPEC.parse()?;
    let mut out = Vec::new();
    for side in [32, 48] {
        let shifts = audit_shifts(side);
        for op in ["conv", "skvsa", "askvsa"] {
            let size = Size { h: side, w: side, d: 4 };
            let target = Target::build(op, size, &spec, seed, AUDIT_OFFSET_SCALE, None)?;
            let rep = target.audit(&shifts, 1e-10, None)?;
            out.push(check(
                format!("{op} {size} interior-exact, {} shifts", shifts.len()),
                judge(&rep, true) == Outcome::Pass,
                format!("verdict={} max_dev={:.3e} margin={}", rep.verdict, rep.max_abs_dev(), rep.margin.describe()),
            ));
        }
    }
    let rep = local_model_audit(seed)?;
    out.push(check(
        "48x48 model with muted global branch interior-exact",
        rep.verdict.is_equivariant(),
        format!("verdict={} max_dev={:.3e} margin={}", rep.verdict, rep.max_abs_dev(), rep.margin.describe()),
    ));
    Ok(out)
}

/// End-to-end audit of a small model whose blocks keep only the sliding
/// branch, the configuration the margin calculus can certify.
pub fn local_model_audit(seed: u64) -> Result<EquivReport, CliError> {
    let cfg = ModelConfig {
        embed_dim: 8,
        n_groups: 1,
        n_blocks: 2,
        spec: "3,1,3,4".parse()?,
        scale: 2,
        ..ModelConfig::toy()
    };
    let mut model = Model::<f64>::init(cfg, seed)?;
    model.mute_global_branch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 48;
    let x = Tensor::<f64>::uniform(&[side, side, 3], 0.0, 1.0, &mut rng);
    let shifts = audit_shifts(side);
    let mut reach = model.forward_with_reach(&x)?.1;
    for s in &shifts {
        reach = reach.max(model.forward_with_reach(&s.apply(&x)?)?.1);
    }
    let margin = model.margin(side, side, reach);
    Ok(tea_core::equivariance::audit("model", &|t| model.forward(t), &x, &shifts, 1e-8, margin)?)
}

fn negative_control_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    let target = Target::build("sa+abs-pos", Size { h: 16, w: 16, d: 4 }, &"3,1,3,4".parse()?, seed, 1.0, None)?;
    let mut out = Vec::new();
    for (dy, dx) in [(1, 0), (0, 1)] {
        let rep = target.audit(&[ShiftOp::cyclic(dy, dx)], 1e-10, None)?;
        out.push(check(
            format!("absolute positions break equivariance at ({dy}, {dx})"),
            rep.verdict == Verdict::Fail,
            format!("verdict={} max_dev={:.3e}", rep.verdict, rep.max_abs_dev()),
        ));
    }
    let plain = Target::build("sa", Size { h: 16, w: 16, d: 4 }, &"3,1,3,4".parse()?, seed, 1.0, None)?;
    let rep = plain.audit(&[ShiftOp::cyclic(1, 0)], 1e-10, None)?;
    out.push(check(
        "without positions the same attention is exact",
        rep.verdict == Verdict::Exact,
        format!("verdict={} max_dev={:.3e}", rep.verdict, rep.max_abs_dev()),
    ));
    Ok(out)
}

type PieceFn = Box<dyn Fn(&Tensor<f64>) -> CoreResult<Tensor<f64>> + Send + Sync>;

/// A randomly drawn certified operator on `D`-channel images.
struct Piece {
    name: String,
    op: PieceFn,
    /// `Some` for operators whose margin depends on offset reach.
    adaptive: Option<(AttnParams<f64>, SlideSpec)>,
    margin: Margin,
}

impl Piece {
    fn draw(rng: &mut ChaCha8Rng, d: usize) -> CoreResult<Piece> {
        let specs = ["3,1,3,4", "3,2,3,4", "5,1,3,4"];
        let spec: SlideSpec = specs[rng.gen_range(0..specs.len())].parse()?;
        Ok(match rng.gen_range(0..4) {
            0 => {
                let k = [3, 5][rng.gen_range(0..2)];
                let kernel = Tensor::uniform(&[k, k, d], -0.5, 0.5, rng);
                Piece {
                    name: format!("conv{k}"),
                    op: Box::new(move |x| conv2d_depthwise(x, &kernel, PadMode::Zero)),
                    adaptive: None,
                    margin: Margin::conv(k),
                }
            }
            1 => {
                let w = Tensor::uniform(&[d, d], -1.0, 1.0, rng);
                Piece {
                    name: "pointwise".into(),
                    op: Box::new(move |x| {
                        let (h, wd, c) = x.dims3("pointwise")?;
                        gelu(&linear_project(&x.reshape(&[h * wd, c])?, &w)?).reshape(&[h, wd, c])
                    }),
                    adaptive: None,
                    margin: Margin::pointwise(),
                }
            }
            2 => {
                let p = AttnParams::random(d, spec.offset_kernel, rng);
                Piece {
                    name: format!("skvsa({spec})"),
                    op: Box::new(move |x| attention::skv_sa(x, &p, &spec)),
                    adaptive: None,
                    margin: Margin::sliding(&spec),
                }
            }
            _ => {
                let p = AttnParams::random(d, spec.offset_kernel, rng);
                let q = p.clone();
                Piece {
                    name: format!("askvsa({spec})"),
                    op: Box::new(move |x| attention::askv_sa(x, &q, &spec).map(|a| a.out)),
                    adaptive: Some((p, spec)),
                    margin: Margin::pointwise(),
                }
            }
        })
    }

    /// Fixes the margin of an adaptive piece from the inputs it will see.
    fn settle(&mut self, feeds: &[Tensor<f64>]) -> CoreResult<()> {
        if let Some((p, spec)) = &self.adaptive {
            let mut reach = 0;
            for f in feeds {
                reach = reach.max(attention::offset_reach(f, p, spec)?);
            }
            self.margin = Margin::adaptive(spec, reach);
        }
        Ok(())
    }
}

/// `count` random two-operator compositions, alternating serial and
/// parallel, each audited under its composed margin.
pub fn composition_trials(seed: u64, count: usize) -> Result<Vec<EquivReport>, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let shifts = [ShiftOp::cyclic(1, 2), ShiftOp::cyclic(-3, 1), ShiftOp::cyclic(4, -4)];
    let mut plans = Vec::with_capacity(count);
    for i in 0..count {
        let mode = if i % 2 == 0 { Composition::Serial } else { Composition::Parallel };
        let pieces = vec![Piece::draw(&mut rng, d)?, Piece::draw(&mut rng, d)?];
        let x = Tensor::<f64>::uniform(&[32, 32, d], -1.0, 1.0, &mut rng);
        plans.push((mode, pieces, x));
    }
    plans
        .into_par_iter()
        .map(|(mode, mut pieces, x)| -> CoreResult<EquivReport> {
            let mut feeds = vec![x.clone()];
            for s in &shifts {
                feeds.push(s.apply(&x)?);
            }
            for piece in pieces.iter_mut() {
                piece.settle(&feeds)?;
                if mode == Composition::Serial {
                    feeds = feeds.iter().map(|f| (piece.op)(f)).collect::<CoreResult<_>>()?;
                }
            }
            let certs: Vec<Certified<'_, f64>> = pieces
                .iter()
                .map(|p| Certified::new(p.name.clone(), p.margin, |t: &Tensor<f64>| (p.op)(t)))
                .collect();
            audit_composition(&certs, mode, &x, &shifts, 1e-10)
        })
        .collect::<CoreResult<Vec<_>>>()
        .map_err(CliError::from)
}

fn composition_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    Ok(composition_trials(seed, 12)?
        .into_iter()
        .map(|rep| {
            check(
                rep.op.clone(),
                rep.verdict.is_equivariant(),
                format!("verdict={} margin={} max_dev={:.3e}", rep.verdict, rep.margin.describe(), rep.max_abs_dev()),
            )
        })
        .collect())
}

fn cost_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    let mut out = Vec::new();
    let unit = analytic_cost(1, 1, &SlideSpec::new(1, 1, 1, 1)?)?;
    let terms: Vec<u128> = unit.terms().iter().map(|t| t.1).collect();
    out.push(check("unit evaluation", terms == [3, 2, 1, 1, 2] && unit.total() == 9, format!("{terms:?}")));
    let full = analytic_cost(4096, 32, &SlideSpec::default())?.total();
    out.push(check("N=4096 D=32 default bundle", full == 78_118_912, format!("total={full}")));

    let small: SlideSpec = "7,2,3,16".parse()?;
    for (op, n) in [(CostOp::Tea, 256), (CostOp::Tea, 1024), (CostOp::SkvSa, 256), (CostOp::Sa, 256)] {
        let c = CostCheck::run(op, n, 8, &small, seed)?;
        out.push(check(
            format!("{} N={n} D=8 measured = analytic", op.name()),
            c.matches(),
            format!("analytic={} measured={}", c.analytic.total(), c.measured.terms.total()),
        ));
    }
    for (op, sizes, want) in [(CostOp::Tea, [256, 1024, 4096], 4.0), (CostOp::Sa, [64, 256, 1024], 16.0)] {
        let rep = scaling_report(op, &sizes, 4, &small, seed)?;
        let ratios: Vec<f64> = rep.rows.iter().filter_map(|r| r.ratio).collect();
        out.push(check(
            format!("{} growth per 4x tokens", op.name()),
            ratios.iter().all(|&r| r == want),
            format!("ratios={ratios:?} expected={want}"),
        ));
    }
    let (ours, win) = per_token_vs_window(&SlideSpec::default(), 16);
    out.push(check(
        "per token below 16x16 window attention",
        ours == 500 && win == 512,
        format!("{ours}D vs {win}D"),
    ));
    Ok(out)
}

fn gradient_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    let mut out: Vec<Check> = primitive_suite(seed)?
        .into_iter()
        .map(|(name, err)| check(name, err <= PRIMITIVE_TOL, format!("max_rel_err={err:.3e}")))
        .collect();
    let block = tea_block_check(seed)?;
    let worst = block.iter().map(|b| b.1).fold(0.0, f64::max);
    out.push(check(
        "combined block, input and all weights",
        worst <= BLOCK_TOL,
        format!("max_rel_err={worst:.3e}"),
    ));
    Ok(out)
}

fn determinism_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    let mut out = Vec::new();
    let a = oracle::check(OracleOp::Tea, 20, seed)?;
    let b = oracle::check(OracleOp::Tea, 20, seed)?;
    out.push(check(
        "oracle sweep repeats bit for bit",
        a.0.to_bits() == b.0.to_bits() && a.1 == b.1,
        format!("{:e}", a.0),
    ));

    let cfg = ModelConfig::convergence(Variant::Tea);
    let settings = TrainSettings::default();
    let r1 = train_toy::<f64>(&cfg, &settings, 3, seed)?;
    let r2 = train_toy::<f64>(&cfg, &settings, 3, seed)?;
    let same_curve = r1.losses.iter().map(|l| l.to_bits()).eq(r2.losses.iter().map(|l| l.to_bits()));
    out.push(check("training curve repeats bit for bit", same_curve, format!("{} steps", r1.losses.len())));
    let (c1, c2) = (encode_checkpoint(&r1.model)?, encode_checkpoint(&r2.model)?);
    out.push(check("checkpoints repeat byte for byte", c1 == c2, format!("{} bytes", c1.len())));

    let model = Model::<f64>::init(ModelConfig::toy(), seed)?;
    let x = Tensor::<f64>::uniform(&[16, 16, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    out.push(check("model forward repeats", model.forward(&x)? == model.forward(&x)?, ""));
    Ok(out)
}

fn io_battery(seed: u64) -> Result<Vec<Check>, CliError> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::<f64>::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
    let mut buf = Vec::new();
    encode_tensor(&t, &mut buf)?;
    out.push(check("f64 tensor round trip", decode_tensor::<f64>(&buf)? == t, format!("{} bytes", buf.len())));
    let t32 = t.cast::<f32>();
    let mut buf = Vec::new();
    encode_tensor(&t32, &mut buf)?;
    out.push(check("f32 tensor round trip", decode_tensor::<f32>(&buf)? == t32, ""));

    let model = Model::<f64>::init(ModelConfig::toy(), seed)?;
    let bytes = encode_checkpoint(&model)?;
    let back = decode_checkpoint::<f64>(&bytes)?;
    out.push(check(
        "checkpoint round trip",
        back.params.iter().eq(model.params.iter()) && back.cfg == model.cfg && encode_checkpoint(&back)? == bytes,
        format!("{} bytes", bytes.len()),
    ));
    out.push(check(
        "truncated checkpoint rejected",
        decode_checkpoint::<f64>(&bytes[..bytes.len() / 2]).is_err(),
        "",
    ));

    let img = Tensor::<f64>::from_fn(&[5, 7, 3], |i| ((i[0] * 31 + i[1] * 7 + i[2] * 101) % 256) as f64 / 255.0);
    let decoded = decode_pnm(&encode_pnm(&img)?)?;
    out.push(check("ppm round trip", decoded.max_abs_diff(&img)? < 1e-12, ""));
    out.push(check("malformed header rejected", decode_pnm(b"P6\n5 x\n255\n").is_err(), ""));
    Ok(out)
}

pub fn run(args: &SelftestArgs, out: &mut dyn Write) -> CliResult {
    let fault = match &args.inject_fault {
        Some(name) => Fault::parse(name).ok_or_else(|| {
            let names: Vec<_> = Fault::ALL.iter().map(|f| f.name()).collect();
            CliError::Usage(format!("unknown fault {name:?} (expected {})", names.join(", ")))
        })?,
        None => Fault::None,
    };
    let batteries: Vec<_> = match &args.only {
        Some(name) => {
            let b = BATTERIES.iter().find(|b| b.0 == name).ok_or_else(|| {
                let names: Vec<_> = BATTERIES.iter().map(|b| b.0).collect();
                CliError::Usage(format!("unknown battery {name:?} (expected {})", names.join(", ")))
            })?;
            vec![*b]
        }
        None => BATTERIES.to_vec(),
    };
    header(out, "selftest", Some(args.seed), &format!(" fault={}", fault.name()))?;
    fault::inject(fault);
    let start = Instant::now();
    let (mut total, mut passed) = (0, 0);
    for (name, battery) in batteries {
        let t0 = Instant::now();
        let checks = match battery(args.seed) {
            Ok(c) => c,
            Err(e) => vec![check("battery aborted", false, e.to_string())],
        };
        for c in &checks {
            writeln!(
                out,
                "{} {name}: {}{}{}",
                if c.ok { "PASS" } else { "FAIL" },
                c.name,
                if c.detail.is_empty() { "" } else { "  " },
                c.detail
            )?;
        }
        total += checks.len();
        passed += checks.iter().filter(|c| c.ok).count();
        eprintln!("{name}: {:.2}s", t0.elapsed().as_secs_f64());
    }
    fault::inject(Fault::None);
    eprintln!("selftest: {:.2}s", start.elapsed().as_secs_f64());
    writeln!(out, "{passed}/{total} checks passed")?;
    Ok(Outcome::from_bool(passed == total))
}
