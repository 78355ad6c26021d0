use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use tea_core::equivariance::{audit_shift, parse_shifts, ShiftMode};
use tea_core::io::{encode_pnm, load_checkpoint, read_pnm};
use tea_core::Tensor;

use crate::{header, CliError, CliResult, Outcome};

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// PGM or PPM input
    #[arg(long = "in")]
    pub input: PathBuf,
    /// PGM or PPM output (same kind as the input)
    #[arg(long)]
    pub out: PathBuf,
    /// Expected upscale factor; must match the checkpoint
    #[arg(long)]
    pub scale: Option<usize>,
    /// Also audit a cyclic input shift "dy,dx" on the interior
    #[arg(long)]
    pub audit_shift: Option<String>,
    /// Per-pixel tolerance for --audit-shift
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

fn to_rgb(img: &Tensor<f64>) -> Tensor<f64> {
    if img.shape()[2] == 3 {
        return img.clone();
    }
    Tensor::from_fn(&[img.shape()[0], img.shape()[1], 3], |i| img.at3(i[0], i[1], 0))
}

fn to_gray(img: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(&[img.shape()[0], img.shape()[1], 1], |i| {
        (0..3).map(|c| img.at3(i[0], i[1], c)).sum::<f64>() / 3.0
    })
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`, after the output is
/// quantized the way it is written.
pub fn psnr(reference: &Tensor<f64>, output: &Tensor<f64>) -> Result<f64, CliError> {
    let q = output.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    let d = q.sub(reference)?;
    let mse = d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn run(args: &InferArgs, out: &mut dyn Write) -> CliResult {
    let model = load_checkpoint::<f64>(&args.ckpt)?;
    if let Some(r) = args.scale {
        if r != model.cfg.scale {
            return Err(CliError::Usage(format!("--scale {r} but the checkpoint upsamples by {}", model.cfg.scale)));
        }
    }
    let img = read_pnm(&args.input)?;
    let (h, w, c) = img.dims3("infer")?;
    if let Err(e) = model.cfg.validate_input(h, w) {
        let need = model.cfg.min_side();
        return Err(CliError::Usage(format!("input {h}x{w} not accepted: need at least {need}x{need} ({e})")));
    }
    header(
        out,
        "infer",
        None,
        &format!(" variant={} scale={} in={h}x{w}x{c}", model.cfg.variant, model.cfg.scale),
    )?;
    let rgb = to_rgb(&img);
    let (restored, reach) = model.forward_with_reach(&rgb)?;
    let result = if c == 1 { to_gray(&restored) } else { restored.clone() };
    std::fs::write(&args.out, encode_pnm(&result)?)?;
    let (oh, ow, _) = result.dims3("infer")?;
    writeln!(out, "wrote {}x{} image to {}", oh, ow, args.out.display())?;
    if model.cfg.scale == 1 {
        writeln!(out, "psnr_vs_input {:.3} dB", psnr(&img, &result)?)?;
    }

    let Some(spec) = &args.audit_shift else {
        return Ok(Outcome::Pass);
    };
    let shifts = parse_shifts(spec, ShiftMode::Cyclic)?;
    let mut outcome = Outcome::Pass;
    for s in shifts {
        let (_, reach_shifted) = model.forward_with_reach(&s.apply(&rgb)?)?;
        let margin = model.margin(h, w, reach.max(reach_shifted));
        let rec = audit_shift(&|x| model.forward(x), &rgb, &restored, s, args.tol, margin)?;
        writeln!(
            out,
            "audit shift {}: margin {} compared {} max_dev {:.3e} verdict {}",
            s,
            margin.describe(),
            rec.compared,
            rec.max_abs_dev,
            rec.verdict
        )?;
        outcome = outcome.and(Outcome::from_bool(rec.verdict.is_equivariant()));
    }
    Ok(outcome)
}
