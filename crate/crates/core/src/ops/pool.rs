use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Downsampling operator used by downsampled attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pool {
    #[default]
    Avg,
    Max,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::Avg => "avg",
            Pool::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "avg" => Some(Pool::Avg),
            "max" => Some(Pool::Max),
            _ => None,
        }
    }
}

/// Half-open input range `[floor(i·len/out), floor((i+1)·len/out))` of output cell `i`.
#[inline]
pub fn cell_range(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

fn check(op: &'static str, x: &Tensor<impl Scalar>, oh: usize, ow: usize) -> Result<(usize, usize, usize)> {
    let (h, w, c) = x.dims3(op)?;
    if oh == 0 || ow == 0 {
        return invalid(op, "zero-sized output");
    }
    if oh > h || ow > w {
        return invalid(op, format!("output {oh}x{ow} larger than input {h}x{w}"));
    }
    Ok((h, w, c))
}

pub fn avg_pool_adaptive<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = check("avg_pool_adaptive", x, out_h, out_w)?;
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (y0, y1) = cell_range(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1) = cell_range(j, w, out_w);
            let mut acc = vec![T::zero(); c];
            for y in y0..y1 {
                for xx in x0..x1 {
                    for (a, &v) in acc.iter_mut().zip(x.pixel(y, xx)) {
                        *a += v;
                    }
                }
            }
            let n = T::of_usize((y1 - y0) * (x1 - x0));
            out.extend(acc.into_iter().map(|a| a / n));
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub fn max_pool_adaptive<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (_, _, c) = check("max_pool_adaptive", x, out_h, out_w)?;
    let arg = max_pool_argmax(x, out_h, out_w)?;
    let data = arg.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(vec![out_h, out_w, c], data)
}

/// Flat input index selected by each output element of max pooling; ties keep the first.
pub(crate) fn max_pool_argmax<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Vec<usize>> {
    let (h, w, c) = check("max_pool_adaptive", x, out_h, out_w)?;
    let mut arg = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let (y0, y1) = cell_range(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1) = cell_range(j, w, out_w);
            for ch in 0..c {
                let mut best = (y0 * w + x0) * c + ch;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let idx = (y * w + xx) * c + ch;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                arg.push(best);
            }
        }
    }
    Ok(arg)
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    in_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow, _) = grad.dims3("avg_pool_backward")?;
    let mut dx = vec![T::zero(); h * w * c];
    for i in 0..oh {
        let (y0, y1) = cell_range(i, h, oh);
        for j in 0..ow {
            let (x0, x1) = cell_range(j, w, ow);
            let n = T::of_usize((y1 - y0) * (x1 - x0));
            let g = grad.pixel(i, j);
            for y in y0..y1 {
                for xx in x0..x1 {
                    let base = (y * w + xx) * c;
                    for ch in 0..c {
                        dx[base + ch] += g[ch] / n;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

pub(crate) fn max_pool_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        dx[idx] += g;
    }
    Tensor::new(in_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn averages_and_maxima_of_small_inputs() {
        let x = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avg_pool_adaptive(&x, 1, 1).unwrap().data(), &[2.5]);
        assert_eq!(max_pool_adaptive(&x, 1, 1).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[4, 4, 2], 7.0);
        assert!(avg_pool_adaptive(&c, 2, 2).unwrap().data().iter().all(|&v| v == 7.0));
        assert!(max_pool_adaptive(&c, 3, 2).unwrap().data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn rejects_bad_sizes() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        assert!(avg_pool_adaptive(&x, 0, 2).is_err());
        assert!(max_pool_adaptive(&x, 5, 2).is_err());
    }

    #[test]
    fn cells_partition_the_axis() {
        for len in 1..20 {
            for out in 1..=len {
                let mut covered = 0;
                for i in 0..out {
                    let (a, b) = cell_range(i, len, out);
                    assert_eq!(a, covered);
                    assert!(b > a);
                    covered = b;
                }
                assert_eq!(covered, len);
            }
        }
    }
}
