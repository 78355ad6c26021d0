use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tea_core::attention::{self, AttnParams, SlideSpec};
use tea_core::equivariance::{audit_shift, check_shift_bounds, parse_shifts, EquivReport, Margin, ShiftMode, ShiftOp};
use tea_core::model::{Model, ModelConfig};
use tea_core::ops::{conv2d_depthwise, PadMode};
use tea_core::{Result as CoreResult, Tensor};

use crate::{header, CliError, CliResult, Outcome, Size};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Cyclic,
    Crop,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    /// conv, sa, sa+abs-pos, skvsa, askvsa, dsa, tea or model
    #[arg(long)]
    pub op: String,
    /// Input size HxWxD (D must be 3 for model)
    #[arg(long, default_value = "32x32x4")]
    pub size: Size,
    /// "dy,dx", "dy,dx;dy,dx;..." or "sweep:M"
    #[arg(long, default_value = "sweep:2")]
    pub shifts: String,
    /// Per-pixel tolerance [default: 1e-10, 1e-8 for model]
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Slide bundle w,s,k,nd
    #[arg(long, default_value = "7,2,3,16")]
    pub spec: SlideSpec,
    #[arg(long, value_enum, default_value = "cyclic")]
    pub mode: Mode,
    /// Multiplier on the random offset generator
    #[arg(long, default_value_t = 1.0)]
    pub offset_scale: f64,
    /// Replace the certified margin by a plain local band of this width
    #[arg(long)]
    pub margin: Option<usize>,
    /// Model config file (key=value), toy default otherwise
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the text report here as well
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write the key=value report here
    #[arg(long)]
    pub kv: Option<PathBuf>,
}

type OpFn = Box<dyn Fn(&Tensor<f64>) -> CoreResult<Tensor<f64>> + Send + Sync>;
type ReachFn = Box<dyn Fn(&Tensor<f64>) -> CoreResult<usize> + Send + Sync>;
type MarginFn = Box<dyn Fn(usize) -> Margin + Send + Sync>;

/// An operator on a fixed random input together with its declared margin.
pub struct Target {
    pub name: String,
    pub input: Tensor<f64>,
    pub op: OpFn,
    /// Largest offset displacement on an input; `None` for offset-free ops.
    reach: Option<ReachFn>,
    margin: MarginFn,
    /// Whether the op is claimed equivariant up to its margin.
    pub guaranteed: bool,
}

pub const OPS: [&str; 8] = ["conv", "sa", "sa+abs-pos", "skvsa", "askvsa", "dsa", "tea", "model"];

impl Target {
    pub fn build(
        name: &str,
        size: Size,
        spec: &SlideSpec,
        seed: u64,
        offset_scale: f64,
        model_cfg: Option<ModelConfig>,
    ) -> Result<Self, CliError> {
        let Size { h, w, d } = size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = *spec;
        if name == "model" {
            if d != 3 {
                return Err(CliError::Usage(format!("model audits take RGB input, got D={d}")));
            }
            let cfg = model_cfg.unwrap_or_default();
            cfg.validate_input(h, w)?;
            let input = Tensor::uniform(&[h, w, 3], 0.0, 1.0, &mut rng);
            let model = Model::<f64>::init(cfg, seed)?;
            let m2 = model.clone();
            let m3 = model.clone();
            return Ok(Target {
                name: name.into(),
                input,
                op: Box::new(move |x| model.forward(x)),
                reach: Some(Box::new(move |x| m2.forward_with_reach(x).map(|(_, r)| r))),
                margin: Box::new(move |reach| m3.margin(h, w, reach)),
                guaranteed: true,
            });
        }
        let input = Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut rng);
        let p = AttnParams::<f64>::random(d, spec.offset_kernel, &mut rng).with_offset_scale(offset_scale);
        let needs_spec = matches!(name, "skvsa" | "askvsa" | "tea" | "dsa");
        if needs_spec {
            spec.validate_for(h, w)?;
        }
        let reach_of = |p: &AttnParams<f64>| -> ReachFn {
            let p = p.clone();
            Box::new(move |x| attention::offset_reach(x, &p, &spec))
        };
        let (op, reach, margin, guaranteed): (OpFn, Option<ReachFn>, MarginFn, bool) = match name {
            "conv" => {
                let kernel = Tensor::uniform(&[3, 3, d], -1.0, 1.0, &mut rng);
                (
                    Box::new(move |x| conv2d_depthwise(x, &kernel, PadMode::Zero)),
                    None,
                    Box::new(|_| Margin::conv(3)),
                    true,
                )
            }
            "sa" => (
                Box::new(move |x| attention::self_attention(&x.reshape(&[h * w, d])?, &p)?.reshape(&[h, w, d])),
                None,
                Box::new(|_| Margin::global_attention()),
                true,
            ),
            "sa+abs-pos" => {
                let pos = Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut rng);
                (
                    Box::new(move |x| attention::self_attention_with_position(x, &p, &pos)),
                    None,
                    Box::new(|_| Margin::global_attention()),
                    false,
                )
            }
            "skvsa" => (
                Box::new(move |x| attention::skv_sa(x, &p, &spec)),
                None,
                Box::new(move |_| Margin::sliding(&spec)),
                true,
            ),
            "askvsa" => (
                Box::new({
                    let p = p.clone();
                    move |x| attention::askv_sa(x, &p, &spec).map(|a| a.out)
                }),
                Some(reach_of(&p)),
                Box::new(move |r| Margin::adaptive(&spec, r)),
                true,
            ),
            "dsa" => (
                Box::new(move |x| attention::dsa(x, x, x, &p, &spec)),
                None,
                Box::new(move |_| Margin::downsampled(&spec, h, w)),
                false,
            ),
            "tea" => (
                Box::new({
                    let p = p.clone();
                    move |x| attention::tea(x, &p, &spec)
                }),
                Some(reach_of(&p)),
                Box::new(move |r| Margin::combined(&spec, r, h, w, false)),
                false,
            ),
            _ => {
                return Err(CliError::Usage(format!("unknown op {name:?} (expected one of {})", OPS.join(", "))));
            }
        };
        Ok(Target {
            name: name.into(),
            input,
            op,
            reach,
            margin,
            guaranteed,
        })
    }

    /// Audits every shift, in parallel when the pool has more than one
    /// thread; records come back in input order either way.
    pub fn audit(&self, shifts: &[ShiftOp], tol: f64, margin_override: Option<usize>) -> Result<EquivReport, CliError> {
        let (h, w, _) = self.input.dims3("audit")?;
        check_shift_bounds(h, w, shifts)?;
        let margin = match margin_override {
            Some(m) => Margin::local(m),
            None => {
                let reach = match &self.reach {
                    Some(f) => {
                        let mut inputs = vec![self.input.clone()];
                        for s in shifts {
                            inputs.push(s.apply(&self.input)?);
                        }
                        let reaches = inputs.par_iter().map(f).collect::<CoreResult<Vec<_>>>()?;
                        reaches.into_iter().max().unwrap_or(0)
                    }
                    None => 0,
                };
                (self.margin)(reach)
            }
        };
        let reference = (self.op)(&self.input)?;
        let op: &(dyn Fn(&Tensor<f64>) -> CoreResult<Tensor<f64>> + Sync) = &*self.op;
        let records = shifts
            .par_iter()
            .map(|&s| audit_shift(op, &self.input, &reference, s, tol, margin))
            .collect::<CoreResult<Vec<_>>>()?;
        Ok(EquivReport::new(self.name.clone(), margin, tol, records))
    }
}

/// Exit status for a finished report: claimed-equivariant ops must be
/// exact or interior-exact at every shift; the rest may be approximate but
/// must not fail outright.
pub fn judge(report: &EquivReport, guaranteed: bool) -> Outcome {
    Outcome::from_bool(report.records.iter().all(|r| {
        if guaranteed {
            r.verdict.is_equivariant()
        } else {
            r.verdict != tea_core::equivariance::Verdict::Fail
        }
    }))
}

pub fn run(args: &AuditArgs, out: &mut dyn Write) -> CliResult {
    let mode = match args.mode {
        Mode::Cyclic => ShiftMode::Cyclic,
        Mode::Crop => ShiftMode::Crop,
    };
    let shifts = parse_shifts(&args.shifts, mode)?;
    let cfg = match &args.config {
        Some(path) => Some(ModelConfig::from_kv(&fs::read_to_string(path)?)?),
        None => None,
    };
    let target = Target::build(&args.op, args.size, &args.spec, args.seed, args.offset_scale, cfg)?;
    let tol = args.tol.unwrap_or(if args.op == "model" { 1e-8 } else { 1e-10 });
    header(
        out,
        "audit",
        Some(args.seed),
        &format!(" op={} size={} spec={} tol={tol:e}", args.op, args.size, args.spec),
    )?;
    let report = target.audit(&shifts, tol, args.margin)?;
    let text = report.to_text();
    out.write_all(text.as_bytes())?;
    if let Some(path) = &args.report {
        fs::write(path, &text)?;
    }
    if let Some(path) = &args.kv {
        fs::write(path, report.to_kv())?;
    }
    Ok(judge(&report, target.guaranteed))
}
