//! Attention operators recorded on a [`Tape`]. The plain-tensor functions in
//! the parent module evaluate these on a tape of constants.

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::mac::{self, Phase};
use crate::ops::{AttendPhases, KeySet, PadMode, Pool};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::AttnVars;
use super::spec::{window_keys, SlideSpec};

/// Image dimensions of an `[H, W, D]` var.
pub(crate) fn image_dims<T: Scalar>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match tape.shape(x)[..] {
        [h, w, d] => Ok((h, w, d)),
        ref s => shape_err(op, format!("expected [H, W, D], got {s:?}")),
    }
}

/// `x·W` for `x` of any rank whose last axis matches, charged to `phase`.
pub fn project<T: Scalar>(tape: &Tape<T>, x: Var, w: Var, phase: Phase) -> Result<Var> {
    let shape = tape.shape(x);
    let d = *shape.last().expect("non-empty shape");
    let n = shape.iter().product::<usize>() / d;
    let rows = tape.reshape(x, &[n, d])?;
    let out = mac::in_phase(phase, || tape.matmul(rows, w))?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty shape") = tape.shape(out)[1];
    tape.reshape(out, &out_shape)
}

/// Q, K, V token matrices `[N, D]` of an `[N, D]` or `[H, W, D]` input.
pub fn qkv<T: Scalar>(tape: &Tape<T>, x: Var, p: &AttnVars) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(x);
    let d = *shape.last().expect("non-empty shape");
    let rows = tape.reshape(x, &[shape.iter().product::<usize>() / d, d])?;
    Ok((
        project(tape, rows, p.w_q, Phase::QkvProj)?,
        project(tape, rows, p.w_k, Phase::QkvProj)?,
        project(tape, rows, p.w_v, Phase::QkvProj)?,
    ))
}

/// Global attention over all tokens of `x` (`[N, D]` or `[H, W, D]`); returns `[N, D]`.
pub fn self_attention<T: Scalar>(tape: &Tape<T>, x: Var, p: &AttnVars) -> Result<Var> {
    let (q, k, v) = qkv(tape, x, p)?;
    tape.attend(q, k, v, &KeySet::All, None, AttendPhases::WINDOW)
}

/// Sliding-window attention of precomputed `q` (`[N, D]`) over `k`, `v` (`[H, W, D]`).
pub fn window_attend<T: Scalar>(tape: &Tape<T>, q: Var, k: Var, v: Var, spec: &SlideSpec) -> Result<Var> {
    let (h, w, d) = image_dims(tape, k, "window_attend")?;
    let keys = window_keys(h, w, spec)?;
    let k = tape.reshape(k, &[h * w, d])?;
    let v = tape.reshape(v, &[h * w, d])?;
    let out = tape.attend(q, k, v, &keys, None, AttendPhases::WINDOW)?;
    tape.reshape(out, &[h, w, d])
}

pub fn skv_sa<T: Scalar>(tape: &Tape<T>, x: Var, p: &AttnVars, spec: &SlideSpec) -> Result<Var> {
    let (h, w, d) = image_dims(tape, x, "skv_sa")?;
    spec.validate_for(h, w)?;
    let (q, k, v) = qkv(tape, x, p)?;
    let k = tape.reshape(k, &[h, w, d])?;
    let v = tape.reshape(v, &[h, w, d])?;
    window_attend(tape, q, k, v, spec)
}

fn base_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn(&[h, w, 2], |i| T::of_usize(if i[2] == 0 { i[0] } else { i[1] }))
}

/// Sampling coordinates `base + reduce(depthwise_conv(kv))`, `[H, W, 2]`.
pub fn adaptive_offsets<T: Scalar>(
    tape: &Tape<T>,
    kv: Var,
    kernel: Var,
    reduce: Var,
    spec: &SlideSpec,
) -> Result<Var> {
    let (h, w, _) = image_dims(tape, kv, "adaptive_offsets")?;
    let k = tape.shape(kernel)[0];
    if k != spec.offset_kernel {
        return shape_err(
            "adaptive_offsets",
            format!("kernel side {k}, spec asks for {}", spec.offset_kernel),
        );
    }
    let feat = mac::in_phase(Phase::OffsetConv, || tape.conv2d_depthwise(kv, kernel, PadMode::Replicate))?;
    let delta = project(tape, feat, reduce, Phase::OffsetReduce)?;
    let base = tape.constant(base_grid(h, w));
    tape.add(base, delta)
}

/// Outputs of the adaptive sliding branch.
#[derive(Debug, Clone, Copy)]
pub struct AskvVars {
    /// `[H, W, D]`
    pub out: Var,
    /// Queries `[N, D]`, shared with the downsampled branch.
    pub q: Var,
    /// Shuffled keys and values, `[H, W, D]`.
    pub k_shuf: Var,
    pub v_shuf: Var,
}

pub fn askv_sa<T: Scalar>(tape: &Tape<T>, x: Var, p: &AttnVars, spec: &SlideSpec) -> Result<AskvVars> {
    let (h, w, d) = image_dims(tape, x, "askv_sa")?;
    spec.validate_for(h, w)?;
    let (q, k, v) = qkv(tape, x, p)?;
    let k = tape.reshape(k, &[h, w, d])?;
    let v = tape.reshape(v, &[h, w, d])?;
    let coords_k = adaptive_offsets(tape, k, p.offset_k_kernel, p.offset_k_reduce, spec)?;
    let coords_v = adaptive_offsets(tape, v, p.offset_v_kernel, p.offset_v_reduce, spec)?;
    let k_shuf = tape.gather_hw(k, coords_k)?;
    let v_shuf = tape.gather_hw(v, coords_v)?;
    let out = window_attend(tape, q, k_shuf, v_shuf, spec)?;
    Ok(AskvVars { out, q, k_shuf, v_shuf })
}

/// Every query of `q` (`[N, D]`) attends to the `g×g` pooled grid of the
/// key/value fields; returns `[N, D]`.
pub fn dsa_attend<T: Scalar>(tape: &Tape<T>, q: Var, k_shuf: Var, v_shuf: Var, spec: &SlideSpec) -> Result<Var> {
    let (h, w, d) = image_dims(tape, k_shuf, "dsa")?;
    let g = spec.pool_side();
    if g > h.min(w) {
        return Err(crate::error::TeaError::Spec(format!("pooled grid {g}x{g} larger than {h}x{w}")));
    }
    let pool = |t| match spec.pool {
        Pool::Avg => tape.avg_pool(t, g, g),
        Pool::Max => tape.max_pool(t, g, g),
    };
    let kp = tape.reshape(pool(k_shuf)?, &[g * g, d])?;
    let vp = tape.reshape(pool(v_shuf)?, &[g * g, d])?;
    tape.attend(q, kp, vp, &KeySet::All, None, AttendPhases::DSA)
}

/// Downsampled attention with queries projected from `q_src`; `[H, W, D]`.
pub fn dsa<T: Scalar>(tape: &Tape<T>, q_src: Var, k_shuf: Var, v_shuf: Var, p: &AttnVars, spec: &SlideSpec) -> Result<Var> {
    let (h, w, d) = image_dims(tape, q_src, "dsa")?;
    if tape.shape(k_shuf) != [h, w, d] || tape.shape(v_shuf) != [h, w, d] {
        return shape_err("dsa", "key/value fields must match the query image");
    }
    let rows = tape.reshape(q_src, &[h * w, d])?;
    let q = project(tape, rows, p.w_q, Phase::QkvProj)?;
    let out = dsa_attend(tape, q, k_shuf, v_shuf, spec)?;
    tape.reshape(out, &[h, w, d])
}

/// `alpha_s · adaptive sliding + alpha_d · downsampled`, `[H, W, D]`.
pub fn tea<T: Scalar>(tape: &Tape<T>, x: Var, p: &AttnVars, spec: &SlideSpec) -> Result<Var> {
    let (h, w, d) = image_dims(tape, x, "tea")?;
    let a = askv_sa(tape, x, p, spec)?;
    let global = dsa_attend(tape, a.q, a.k_shuf, a.v_shuf, spec)?;
    let global = tape.reshape(global, &[h, w, d])?;
    let local = tape.scale_by(a.out, p.alpha_s)?;
    let global = tape.scale_by(global, p.alpha_d)?;
    tape.add(local, global)
}
