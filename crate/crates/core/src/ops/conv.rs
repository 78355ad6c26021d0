use crate::error::{invalid, shape_err, Result};
use crate::mac;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Border handling for same-size convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

/// Source index for tap `i + off` on an axis of length `len`, or `None` for a zero pad.
#[inline]
fn source(i: usize, off: isize, len: usize, pad: PadMode) -> Option<usize> {
    let p = i as isize + off;
    if (0..len as isize).contains(&p) {
        Some(p as usize)
    } else {
        match pad {
            PadMode::Zero => None,
            PadMode::Replicate => Some(p.clamp(0, len as isize - 1) as usize),
        }
    }
}

fn odd_kernel(op: &'static str, k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return invalid(op, format!("kernel size {k} is even"));
    }
    Ok(())
}

/// Per-channel correlation of `x: [H, W, C]` with `kernel: [k, k, C]`, same output size.
/// Registers `H·W·C·k²` MACs.
pub fn conv2d_depthwise<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, pad: PadMode) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("conv2d_depthwise")?;
    let (k, k2, kc) = kernel.dims3("conv2d_depthwise")?;
    if k != k2 || kc != c {
        return shape_err(
            "conv2d_depthwise",
            format!("kernel {:?} for input {:?}", kernel.shape(), x.shape()),
        );
    }
    odd_kernel("conv2d_depthwise", k)?;
    let r = (k / 2) as isize;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            for a in 0..k {
                let Some(sy) = source(y, a as isize - r, h, pad) else { continue };
                for b in 0..k {
                    let Some(sx) = source(xx, b as isize - r, w, pad) else { continue };
                    let src = &xd[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    let kr = &kd[(a * k + b) * c..(a * k + b + 1) * c];
                    for ((ov, &sv), &kv) in o.iter_mut().zip(src).zip(kr) {
                        *ov += sv * kv;
                    }
                }
            }
        }
    }
    mac::record((h * w * c * k * k) as u128);
    Tensor::new(vec![h, w, c], out)
}

pub(crate) fn conv2d_depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: PadMode,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, c) = x.dims3("conv2d_depthwise_backward")?;
    let k = kernel.shape()[0];
    let r = (k / 2) as isize;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad.data());
    let mut dx = vec![T::zero(); h * w * c];
    let mut dk = vec![T::zero(); k * k * c];
    for y in 0..h {
        for xx in 0..w {
            let g = &gd[(y * w + xx) * c..(y * w + xx + 1) * c];
            for a in 0..k {
                let Some(sy) = source(y, a as isize - r, h, pad) else { continue };
                for b in 0..k {
                    let Some(sx) = source(xx, b as isize - r, w, pad) else { continue };
                    let s = (sy * w + sx) * c;
                    let kk = (a * k + b) * c;
                    for ch in 0..c {
                        dx[s + ch] += g[ch] * kd[kk + ch];
                        dk[kk + ch] += g[ch] * xd[s + ch];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h, w, c], dx)?,
        Tensor::new(vec![k, k, c], dk)?,
    ))
}

/// Dense correlation of `x: [H, W, C_in]` with `weight: [k, k, C_in, C_out]`.
/// Registers `H·W·C_in·C_out·k²` MACs.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, pad: PadMode) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3("conv2d")?;
    let &[k, k2, wc, cout] = weight.shape() else {
        return shape_err("conv2d", format!("weight must be [k, k, C_in, C_out], got {:?}", weight.shape()));
    };
    if k != k2 || wc != cin {
        return shape_err("conv2d", format!("weight {:?} for input {:?}", weight.shape(), x.shape()));
    }
    odd_kernel("conv2d", k)?;
    let r = (k / 2) as isize;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for a in 0..k {
                let Some(sy) = source(y, a as isize - r, h, pad) else { continue };
                for b in 0..k {
                    let Some(sx) = source(xx, b as isize - r, w, pad) else { continue };
                    let src = &xd[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let tap = &wd[(a * k + b) * cin * cout..(a * k + b + 1) * cin * cout];
                    for (ci, &sv) in src.iter().enumerate() {
                        let wrow = &tap[ci * cout..(ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += sv * wv;
                        }
                    }
                }
            }
        }
    }
    mac::record((h * w * cin * cout * k * k) as u128);
    Tensor::new(vec![h, w, cout], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    pad: PadMode,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, cin) = x.dims3("conv2d_backward")?;
    let (k, cout) = (weight.shape()[0], weight.shape()[3]);
    let r = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    let mut dx = vec![T::zero(); h * w * cin];
    let mut dw = vec![T::zero(); k * k * cin * cout];
    for y in 0..h {
        for xx in 0..w {
            let g = &gd[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            for a in 0..k {
                let Some(sy) = source(y, a as isize - r, h, pad) else { continue };
                for b in 0..k {
                    let Some(sx) = source(xx, b as isize - r, w, pad) else { continue };
                    let s = (sy * w + sx) * cin;
                    let t = (a * k + b) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[s + ci];
                        let wrow = &wd[t + ci * cout..t + (ci + 1) * cout];
                        let dwrow = &mut dw[t + ci * cout..t + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for co in 0..cout {
                            acc += g[co] * wrow[co];
                            dwrow[co] += g[co] * xv;
                        }
                        dx[s + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![h, w, cin], dx)?,
        Tensor::new(vec![k, k, cin, cout], dw)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mac::MacCounter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_depthwise(x: &Tensor<f64>, kern: &Tensor<f64>, pad: PadMode) -> Tensor<f64> {
        let (h, w, c) = x.dims3("t").unwrap();
        let k = kern.shape()[0] as isize;
        let r = k / 2;
        Tensor::from_fn(&[h, w, c], |i| {
            let mut s = 0.0;
            for a in 0..k {
                for b in 0..k {
                    let (mut y, mut xx) = (i[0] as isize + a - r, i[1] as isize + b - r);
                    let inside = y >= 0 && y < h as isize && xx >= 0 && xx < w as isize;
                    if !inside {
                        if pad == PadMode::Zero {
                            continue;
                        }
                        y = y.clamp(0, h as isize - 1);
                        xx = xx.clamp(0, w as isize - 1);
                    }
                    s += x.at3(y as usize, xx as usize, i[2]) * kern.at3(a as usize, b as usize, i[2]);
                }
            }
            s
        })
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(&[5, 6, 2], -1.0, 1.0, &mut rng);
        let delta = Tensor::from_fn(&[3, 3, 2], |i| if i[0] == 1 && i[1] == 1 { 1.0 } else { 0.0 });
        assert_eq!(conv2d_depthwise(&x, &delta, PadMode::Zero).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_with_replicate() {
        let x = Tensor::<f64>::full(&[4, 4, 1], 0.5);
        let ones = Tensor::full(&[3, 3, 1], 1.0);
        let y = conv2d_depthwise(&x, &ones, PadMode::Replicate).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn matches_naive_loop_both_pads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[5, 5, 2], -1.0, 1.0, &mut rng);
        let kern = Tensor::uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
        for pad in [PadMode::Zero, PadMode::Replicate] {
            assert_eq!(conv2d_depthwise(&x, &kern, pad).unwrap(), naive_depthwise(&x, &kern, pad));
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        let kern = Tensor::zeros(&[2, 2, 1]);
        assert!(conv2d_depthwise(&x, &kern, PadMode::Zero).is_err());
    }

    #[test]
    fn depthwise_counts_hwck2() {
        let x = Tensor::<f64>::zeros(&[6, 5, 3]);
        let kern = Tensor::zeros(&[3, 3, 3]);
        let (_, c) = MacCounter::run(|| conv2d_depthwise(&x, &kern, PadMode::Replicate).unwrap());
        assert_eq!(c.total_macs(), 6 * 5 * 3 * 9);
    }

    #[test]
    fn dense_conv_with_diagonal_weight_equals_depthwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(&[5, 4, 3], -1.0, 1.0, &mut rng);
        let kern = Tensor::uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let dense = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            if i[2] == i[3] {
                kern.at3(i[0], i[1], i[2])
            } else {
                0.0
            }
        });
        let a = conv2d(&x, &dense, PadMode::Zero).unwrap();
        let b = conv2d_depthwise(&x, &kern, PadMode::Zero).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }
}
