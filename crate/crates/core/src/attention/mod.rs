//! Sliding, adaptive, downsampled and combined attention.
//!
//! Each operator exists twice: as a tape builder in [`graph`] (used for
//! training and gradient checks) and as a plain function here that records
//! onto a throwaway tape of constants.

pub mod graph;
mod params;
mod spec;
pub mod windowed;

pub use params::{AttnParams, AttnVars, OffsetGen, OFFSET_SCALE};
pub use spec::{build_window_index, window_keys, Boundary, SlideSpec, WindowIndex};

use crate::autodiff::{Tape, Var, WeightProbe};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Evaluates `f` on a tape holding `x` and `p` as constants, optionally
/// forwarding every attention weight row to `probe`.
pub fn evaluate<T: Scalar>(
    x: &Tensor<T>,
    p: &AttnParams<T>,
    probe: Option<WeightProbe<T>>,
    f: impl FnOnce(&Tape<T>, Var, &AttnVars) -> Result<Var>,
) -> Result<Tensor<T>> {
    p.check()?;
    let tape = Tape::new();
    if let Some(probe) = probe {
        tape.set_probe(probe);
    }
    let xv = tape.constant(x.clone());
    let vars = p.bind(&tape, false);
    let out = f(&tape, xv, &vars)?;
    let value = (*tape.value(out)).clone();
    value.ensure_finite("attention output")?;
    Ok(value)
}

fn check_dim<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>, op: &'static str) -> Result<()> {
    let d = *x.shape().last().expect("non-empty shape");
    if d != p.dim() {
        return shape_err(op, format!("input has {d} channels, params expect {}", p.dim()));
    }
    Ok(())
}

/// Global attention over the rows of `x` (`[N, D]`).
pub fn self_attention<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>) -> Result<Tensor<T>> {
    x.dims2("self_attention")?;
    check_dim(x, p, "self_attention")?;
    evaluate(x, p, None, graph::self_attention)
}

/// Global attention on an image with an absolute position embedding `pos`
/// added to the input first. Not translation equivariant by construction.
pub fn self_attention_with_position<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>, pos: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, d) = x.dims3("self_attention_with_position")?;
    check_dim(x, p, "self_attention_with_position")?;
    let y = x.add(pos)?;
    evaluate(&y, p, None, |t, x, v| {
        let out = graph::self_attention(t, x, v)?;
        t.reshape(out, &[h, w, d])
    })
}

pub fn skv_sa<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>, spec: &SlideSpec) -> Result<Tensor<T>> {
    x.dims3("skv_sa")?;
    check_dim(x, p, "skv_sa")?;
    evaluate(x, p, None, |t, x, v| graph::skv_sa(t, x, v, spec))
}

/// Sampling coordinates for an already projected key or value field.
pub fn adaptive_offsets<T: Scalar>(kv: &Tensor<T>, gen: &OffsetGen<T>, spec: &SlideSpec) -> Result<Tensor<T>> {
    kv.dims3("adaptive_offsets")?;
    let tape = Tape::new();
    let x = tape.constant(kv.clone());
    let kernel = tape.constant(gen.kernel.clone());
    let reduce = tape.constant(gen.reduce.clone());
    let out = graph::adaptive_offsets(&tape, x, kernel, reduce, spec)?;
    let value = (*tape.value(out)).clone();
    value.ensure_finite("adaptive offsets")?;
    Ok(value)
}

/// Result of the adaptive sliding branch.
#[derive(Debug, Clone, PartialEq)]
pub struct AskvOutput<T> {
    pub out: Tensor<T>,
    pub k_shuf: Tensor<T>,
    pub v_shuf: Tensor<T>,
}

pub fn askv_sa<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>, spec: &SlideSpec) -> Result<AskvOutput<T>> {
    x.dims3("askv_sa")?;
    check_dim(x, p, "askv_sa")?;
    p.check()?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.bind(&tape, false);
    let a = graph::askv_sa(&tape, xv, &vars, spec)?;
    let get = |v: Var| (*tape.value(v)).clone();
    let out = get(a.out);
    out.ensure_finite("askv_sa output")?;
    Ok(AskvOutput {
        out,
        k_shuf: get(a.k_shuf),
        v_shuf: get(a.v_shuf),
    })
}

pub fn dsa<T: Scalar>(
    q_src: &Tensor<T>,
    k_shuf: &Tensor<T>,
    v_shuf: &Tensor<T>,
    p: &AttnParams<T>,
    spec: &SlideSpec,
) -> Result<Tensor<T>> {
    q_src.dims3("dsa")?;
    check_dim(q_src, p, "dsa")?;
    p.check()?;
    let tape = Tape::new();
    let q = tape.constant(q_src.clone());
    let k = tape.constant(k_shuf.clone());
    let v = tape.constant(v_shuf.clone());
    let vars = p.bind(&tape, false);
    let out = graph::dsa(&tape, q, k, v, &vars, spec)?;
    let value = (*tape.value(out)).clone();
    value.ensure_finite("dsa output")?;
    Ok(value)
}

pub fn tea<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>, spec: &SlideSpec) -> Result<Tensor<T>> {
    x.dims3("tea")?;
    check_dim(x, p, "tea")?;
    evaluate(x, p, None, |t, x, v| graph::tea(t, x, v, spec))
}

/// Largest displacement, in whole pixels, that the rounded key or value
/// offsets apply anywhere on `x`.
pub fn offset_reach<T: Scalar>(x: &Tensor<T>, p: &AttnParams<T>, spec: &SlideSpec) -> Result<usize> {
    let (h, w, d) = x.dims3("offset_reach")?;
    check_dim(x, p, "offset_reach")?;
    let rows = x.reshape(&[h * w, d])?;
    let mut reach = 0usize;
    for (proj, gen) in [(&p.w_k, &p.offset_k), (&p.w_v, &p.offset_v)] {
        let field = crate::mac::in_phase(crate::mac::Phase::Other, || crate::ops::linear_project(&rows, proj))?;
        let coords = adaptive_offsets(&field.reshape(&[h, w, d])?, gen, spec)?;
        for r in 0..h {
            for c in 0..w {
                let at = coords.pixel(r, c);
                let dr = (at[0].as_f64().round() - r as f64).abs();
                let dc = (at[1].as_f64().round() - c as f64).abs();
                reach = reach.max(dr.max(dc) as usize);
            }
        }
    }
    Ok(reach)
}

#[cfg(test)]
mod tests;
