use crate::error::{invalid, shape_err, Result};
use crate::scalar::{round_half_away, Scalar};
use crate::tensor::Tensor;

/// Rounds a real coordinate to the nearest pixel (ties away from zero) and
/// clamps it into `[0, len)`.
#[inline]
pub fn round_clamp(v: f64, len: usize) -> usize {
    let r = round_half_away(v);
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= (len - 1) as f64 {
        len - 1
    } else {
        r as usize
    }
}

/// Flat pixel index (`h·W + w`) each output pixel of [`gather_hw`] reads from.
pub fn gather_sources<T: Scalar>(coords: &Tensor<T>, h: usize, w: usize) -> Result<Vec<usize>> {
    let (ch, cw, two) = coords.dims3("gather_hw")?;
    if (ch, cw, two) != (h, w, 2) {
        return shape_err(
            "gather_hw",
            format!("coords {:?} for a {h}x{w} image", coords.shape()),
        );
    }
    Ok(coords
        .data()
        .chunks(2)
        .map(|p| round_clamp(p[0].as_f64(), h) * w + round_clamp(p[1].as_f64(), w))
        .collect())
}

/// `out[h, w] = x[round_clamp(coords[h, w])]`.
pub fn gather_hw<T: Scalar>(x: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("gather_hw")?;
    let src = gather_sources(coords, h, w)?;
    Ok(gather_rows(x, &src, c))
}

pub(crate) fn gather_rows<T: Scalar>(x: &Tensor<T>, src: &[usize], c: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(src.len() * c);
    for &s in src {
        data.extend_from_slice(&x.data()[s * c..(s + 1) * c]);
    }
    Tensor::new(x.shape().to_vec(), data).expect("gather preserves shape")
}

pub(crate) fn scatter_rows<T: Scalar>(shape: &[usize], src: &[usize], grad: &Tensor<T>) -> Tensor<T> {
    let c = shape[shape.len() - 1];
    let mut dx = vec![T::zero(); shape.iter().product()];
    for (i, &s) in src.iter().enumerate() {
        for ch in 0..c {
            dx[s * c + ch] += grad.data()[i * c + ch];
        }
    }
    Tensor::new(shape.to_vec(), dx).expect("scatter preserves shape")
}

/// Sub-pixel rearrangement `[H, W, C·r²] → [H·r, W·r, C]`; input channel
/// `c·r² + i·r + j` lands at output offset `(i, j)` of its cell.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, cin) = x.dims3("pixel_shuffle")?;
    if r == 0 || cin % (r * r) != 0 {
        return invalid("pixel_shuffle", format!("{cin} channels not divisible by r²={}", r * r));
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::zero(); oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let p = x.pixel(y, xx);
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        out[((y * r + i) * ow + xx * r + j) * c + ch] = p[ch * r * r + i * r + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub(crate) fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (oh, ow, c) = y.dims3("pixel_unshuffle")?;
    let (h, w) = (oh / r, ow / r);
    let mut out = vec![T::zero(); h * w * c * r * r];
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        out[(yy * w + xx) * c * r * r + ch * r * r + i * r + j] =
                            y.at3(yy * r + i, xx * r + j, ch);
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c * r * r], out)
}
