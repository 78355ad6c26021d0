use crate::error::{shape_err, Result, TeaError};
use crate::mac;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `x · w` for `x: [N, D_in]`, `w: [D_in, D_out]`. Registers `N·D_in·D_out` MACs.
pub fn linear_project<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let out = matmul(x, w)?;
    let (n, d_in) = x.dims2("linear_project")?;
    let d_out = w.shape()[1];
    mac::record((n * d_in * d_out) as u128);
    Ok(out)
}

/// Uncounted matrix product, also used by backward passes.
pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = a.dims2("matmul")?;
    let (k2, m) = b.dims2("matmul")?;
    if k != k2 {
        return shape_err(
            "linear_project",
            format!("inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()),
        );
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

pub(crate) fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = a.dims2("transpose")?;
    let d = a.data();
    let mut out = Vec::with_capacity(n * m);
    for j in 0..m {
        for i in 0..n {
            out.push(d[i * m + j]);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradients of `x · w` given the output adjoint.
pub(crate) fn matmul_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    needs: &[bool],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let dx = if needs[0] { Some(matmul(grad, &transpose(w)?)?) } else { None };
    let dw = if needs[1] { Some(matmul(&transpose(x)?, grad)?) } else { None };
    Ok((dx, dw))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = x.dims2("softmax_rows")?;
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(TeaError::NonFinite("softmax_rows"));
    }
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        if !max.is_finite() {
            return Err(TeaError::NonFinite("softmax_rows"));
        }
        let start = out.len();
        let mut z = T::zero();
        for &v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= z;
        }
    }
    mac::record_exps((n * m) as u128);
    Tensor::new(vec![n, m], out)
}

/// `dx = p ∘ (g − Σ_row g∘p)` where `p` is the softmax output.
pub(crate) fn softmax_rows_backward<T: Scalar>(p: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m) = p.dims2("softmax_rows_backward")?;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let (pr, gr) = (p.row(i), grad.row(i));
        let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(vec![n, m], out)
}

/// Adds a `[D]` bias to every row of `[.., D]`.
pub(crate) fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap_or(&0);
    if bias.len() != d {
        return shape_err("add_bias", format!("bias of {} for width {d}", bias.len()));
    }
    let b = bias.data();
    let data = x
        .data()
        .chunks(d)
        .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn bias_backward<T: Scalar>(grad: &Tensor<T>, d: usize) -> Tensor<T> {
    let mut acc = vec![T::zero(); d];
    for row in grad.data().chunks(d) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a += g;
        }
    }
    Tensor::from_fn(&[d], |i| acc[i[0]])
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_scalar<T: Scalar>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub(crate) fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    x.zip_map(grad, "gelu_backward", |v, g| {
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let du = c * (T::one() + three * a * v * v);
        g * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::MacCounter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * m + j];
                }
                out[i * m + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_and_dot_examples() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(linear_project(&x, &id).unwrap().data(), &[1.0, 2.0]);
        let w = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(linear_project(&x, &w).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matches_triple_loop_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f64>::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3, 5], -1.0, 1.0, &mut rng);
        assert_eq!(linear_project(&a, &b).unwrap().data(), &naive_matmul(&a, &b)[..]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(linear_project(&a, &b).is_err());
    }

    #[test]
    fn counts_n_din_dout() {
        let a = Tensor::<f64>::zeros(&[7, 3]);
        let b = Tensor::<f64>::zeros(&[3, 5]);
        let (_, c) = MacCounter::run(|| linear_project(&a, &b).unwrap());
        assert_eq!(c.total_macs(), 105);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::from_rows(&[&[1000.0, 1000.0]]).unwrap();
        assert_eq!(softmax_rows(&x).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::from_rows(&[&[f64::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&x).is_err());
    }

    #[test]
    fn softmax_matches_direct_exp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let got = softmax_rows(&x).unwrap();
        for i in 0..3 {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let want = x.row(i)[j].exp() / z;
                assert!((got.row(i)[j] - want).abs() <= 1e-12 * want);
            }
        }
    }
}
