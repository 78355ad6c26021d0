//! Finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttnParams, AttnVars, SlideSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result, TeaError};
use crate::ops::{AttendPhases, BiasIndex, KeySet, PadMode};
use crate::tensor::Tensor;

/// Components whose gradient is tiny relative to the largest one are
/// compared against this fraction of the largest magnitude instead of their
/// own size, so cancellation noise in near-zero entries does not dominate.
pub const REL_FLOOR: f64 = 1e-3;

/// How many times the step is divided by ten when a difference straddles a
/// rounding or max-pool switch.
const MAX_SHRINK: usize = 4;

/// Outcome of a check against one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Index of the worst component.
    pub worst: usize,
    /// Components that needed a smaller step to stay on one smooth piece.
    pub shrunk: usize,
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    let reports = grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)?;
    Ok(reports[0].max_rel_err)
}

/// Checks every input of a multi-input scalar function; one report per input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<GradReport>>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return invalid("grad_check", format!("eps must be positive, got {eps}"));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let base = scalar_value(&tape, out)?;
    let signature = tape.discrete_signature();
    let grads = tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (which, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.wrt(v);
        let scale = analytic.max_abs() * REL_FLOOR;
        let mut report = GradReport {
            max_rel_err: 0.0,
            worst: 0,
            shrunk: 0,
        };
        for comp in 0..x.len() {
            let (numeric, shrunk) = central_difference(&f, inputs, which, comp, eps, signature, base)?;
            report.shrunk += usize::from(shrunk);
            let err = rel_err(analytic.data()[comp], numeric, scale);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = comp;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Checks only the listed `(input, component)` pairs and folds them into one
/// report whose `worst` indexes `picks`. The relative floor is taken from the
/// largest analytic gradient over all inputs.
pub fn grad_check_picks<F>(f: F, inputs: &[Tensor<f64>], picks: &[(usize, usize)], eps: f64) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return invalid("grad_check", format!("eps must be positive, got {eps}"));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let base = scalar_value(&tape, out)?;
    let signature = tape.discrete_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let scale = analytic.iter().map(|g| g.max_abs()).fold(0.0, f64::max) * REL_FLOOR;

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: 0,
        shrunk: 0,
    };
    for (i, &(which, comp)) in picks.iter().enumerate() {
        if which >= inputs.len() || comp >= inputs[which].len() {
            return invalid("grad_check", format!("pick ({which}, {comp}) out of range"));
        }
        let (numeric, shrunk) = central_difference(&f, inputs, which, comp, eps, signature, base)?;
        report.shrunk += usize::from(shrunk);
        let err = rel_err(analytic[which].data()[comp], numeric, scale);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = i;
        }
    }
    Ok(report)
}

fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor).max(1e-300);
    (analytic - numeric).abs() / denom
}

/// Central difference along one component, shrinking the step until both
/// probes make the same discrete choices as the base point.
fn central_difference<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    which: usize,
    comp: usize,
    eps: f64,
    signature: u64,
    base: f64,
) -> Result<(f64, bool)>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |delta: f64| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, x)| {
                if k == which {
                    let mut d = x.clone().into_data();
                    d[comp] += delta;
                    tape.param(Tensor::new(x.shape().to_vec(), d).expect("same shape"))
                } else {
                    tape.param(x.clone())
                }
            })
            .collect();
        let out = f(&tape, &vars)?;
        Ok((scalar_value(&tape, out)?, tape.discrete_signature()))
    };
    let mut step = eps;
    for attempt in 0..=MAX_SHRINK {
        let (plus, sp) = eval(step)?;
        let (minus, sm) = eval(-step)?;
        if sp == signature && sm == signature {
            return Ok(((plus - minus) / (2.0 * step), attempt > 0));
        }
        step /= 10.0;
    }
    invalid(
        "grad_check",
        format!("input {which} component {comp} sits on a discontinuity (base value {base})"),
    )
}

fn scalar_value(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.len() != 1 {
        return invalid("grad_check", format!("f must be scalar, got shape {:?}", value.shape()));
    }
    let s = value.item();
    if !s.is_finite() {
        return Err(TeaError::NonFinite("grad_check objective"));
    }
    Ok(s)
}

/// Largest error any primitive showed; primitives are held to this.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Largest error accepted for a whole attention block.
pub const BLOCK_TOL: f64 = 1e-3;

fn worst(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

/// Checks every differentiable tape primitive against central differences,
/// each reduced to a scalar through a random linear readout.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
    let eps = 1e-5;
    let mut out = Vec::new();

    let (a, b, ra) = (u(&[4, 3]), u(&[3, 5]), u(&[4, 5]));
    let r = grad_check_many(|t, v| t.dot_const(t.matmul(v[0], v[1])?, &ra), &[a.clone(), b], eps)?;
    out.push(("matmul", worst(&r)));

    let (bias, rb) = (u(&[3]), u(&[4, 3]));
    let r = grad_check_many(|t, v| t.dot_const(t.add_bias(v[0], v[1])?, &rb), &[a.clone(), bias], eps)?;
    out.push(("add_bias", worst(&r)));

    let r = grad_check_many(|t, v| t.dot_const(t.softmax_rows(v[0])?, &rb), &[a.scale(2.0)], eps)?;
    out.push(("softmax_rows", worst(&r)));

    let r = grad_check_many(|t, v| t.dot_const(t.gelu(v[0])?, &rb), &[a.scale(2.0)], eps)?;
    out.push(("gelu", worst(&r)));

    let (img, kd, ri) = (u(&[6, 5, 3]), u(&[3, 3, 3]), u(&[6, 5, 3]));
    for (name, pad) in [("conv2d_depthwise zero", PadMode::Zero), ("conv2d_depthwise replicate", PadMode::Replicate)] {
        let r = grad_check_many(
            |t, v| t.dot_const(t.conv2d_depthwise(v[0], v[1], pad)?, &ri),
            &[img.clone(), kd.clone()],
            eps,
        )?;
        out.push((name, worst(&r)));
    }

    let (kf, rf) = (u(&[3, 3, 3, 2]), u(&[6, 5, 2]));
    let r = grad_check_many(|t, v| t.dot_const(t.conv2d(v[0], v[1], PadMode::Zero)?, &rf), &[img.clone(), kf], eps)?;
    out.push(("conv2d", worst(&r)));

    let rp = u(&[2, 2, 3]);
    let r = grad_check_many(|t, v| t.dot_const(t.avg_pool(v[0], 2, 2)?, &rp), std::slice::from_ref(&img), eps)?;
    out.push(("avg_pool", worst(&r)));
    let r = grad_check_many(|t, v| t.dot_const(t.max_pool(v[0], 2, 2)?, &rp), std::slice::from_ref(&img), eps)?;
    out.push(("max_pool", worst(&r)));

    let (sh, rs) = (u(&[3, 2, 8]), u(&[6, 4, 2]));
    let r = grad_check_many(|t, v| t.dot_const(t.pixel_shuffle(v[0], 2)?, &rs), &[sh], eps)?;
    out.push(("pixel_shuffle", worst(&r)));

    let coords = Tensor::from_fn(&[6, 5, 2], |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 5) as f64 + 0.25);
    let r = grad_check_many(
        |t, v| {
            let c = t.constant(coords.clone());
            t.dot_const(t.gather_hw(v[0], c)?, &ri)
        },
        std::slice::from_ref(&img),
        eps,
    )?;
    out.push(("gather_hw", worst(&r)));

    let (q, k, vv) = (u(&[6, 3]), u(&[6, 3]), u(&[6, 3]));
    let (table, rq) = (u(&[5]), u(&[6, 3]));
    let keys = KeySet::table(3, (0..6u32).flat_map(|i| [i, (i + 1) % 6, (i + 4) % 6]).collect());
    let bias = BiasIndex {
        index: (0..18u32).map(|j| j % 5).collect::<Vec<_>>().into(),
        table_len: 5,
    };
    let r = grad_check_many(
        |t, v| {
            let o = t.attend(v[0], v[1], v[2], &keys, Some((v[3], &bias)), AttendPhases::WINDOW)?;
            t.dot_const(o, &rq)
        },
        &[q.clone(), k.clone(), vv.clone(), table],
        eps,
    )?;
    out.push(("attend", worst(&r)));

    let target = u(&[6, 3]);
    let r = grad_check_many(|t, v| t.l1_loss(v[0], &target), &[q.scale(1.5)], eps)?;
    out.push(("l1_loss", worst(&r)));
    Ok(out)
}

/// Checks a full combined attention block on an `8×8×4` input with respect
/// to the input and every weight, one error per tensor.
pub fn tea_block_check(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SlideSpec::new(3, 2, 3, 4)?;
    let x = Tensor::<f64>::uniform(&[8, 8, 4], -1.0, 1.0, &mut rng);
    let p = AttnParams::<f64>::random(4, 3, &mut rng).with_offset_scale(4.0).with_alphas(0.8, 1.2);
    let readout = Tensor::<f64>::uniform(&[8, 8, 4], -1.0, 1.0, &mut rng);
    let mut names = vec!["input"];
    let mut inputs = vec![x];
    let mut q = p.clone();
    q.visit_mut(|name, t| {
        names.push(name);
        inputs.push(t.clone());
    });
    let reports = grad_check_many(
        |t, v| {
            let vars = AttnVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                offset_k_kernel: v[4],
                offset_k_reduce: v[5],
                offset_v_kernel: v[6],
                offset_v_reduce: v[7],
                alpha_s: v[8],
                alpha_d: v[9],
            };
            let out = attention::graph::tea(t, v[0], &vars, &spec)?;
            t.dot_const(out, &readout)
        },
        &inputs,
        1e-5,
    )?;
    Ok(names.into_iter().zip(reports.iter().map(|r| r.max_rel_err)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matrix_square_sum() {
        let x = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng(1));
        let err = grad_check(
            |t, v| {
                let sq = t.matmul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn weighted_softmax() {
        let mut r = rng(2);
        let x = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut r);
        let w = Tensor::uniform(&[3, 5], -1.0, 1.0, &mut r);
        let err = grad_check(
            |t, v| {
                let p = t.softmax_rows(v)?;
                t.dot_const(p, &w)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn rejects_nonpositive_eps_and_nonscalar() {
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
        assert!(grad_check(|_, v| Ok(v), &x, 1e-5).is_err());
    }

    #[test]
    fn depthwise_conv_both_inputs() {
        let mut r = rng(3);
        let x = Tensor::uniform(&[4, 5, 2], -1.0, 1.0, &mut r);
        let k = Tensor::uniform(&[3, 3, 2], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 5, 2], -1.0, 1.0, &mut r);
        for pad in [PadMode::Zero, PadMode::Replicate] {
            let reps = grad_check_many(
                |t, v| {
                    let y = t.conv2d_depthwise(v[0], v[1], pad)?;
                    t.dot_const(y, &w)
                },
                &[x.clone(), k.clone()],
                1e-5,
            )
            .unwrap();
            assert!(reps.iter().all(|r| r.max_rel_err <= 1e-6), "{reps:?}");
        }
    }
}
