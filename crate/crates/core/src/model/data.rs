//! Procedural RGB textures and patch sampling for the toy training tasks.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sum of a few random oriented sinusoids per channel plus some flat
/// rectangles for edges, normalized to `[0, 1]`. Shape `[side, side, 3]`.
pub fn synthetic_texture<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Tensor<f64> {
    let mut data = vec![0.0; side * side * 3];
    for ch in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..5)
            .map(|_| {
                let freq = rng.gen_range(0.03..0.25);
                let theta = rng.gen_range(0.0..TAU);
                (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..TAU), rng.gen_range(0.3..1.0))
            })
            .collect();
        for r in 0..side {
            for c in 0..side {
                let v: f64 = waves
                    .iter()
                    .map(|&(fy, fx, ph, amp)| amp * (TAU * (fy * r as f64 + fx * c as f64) + ph).sin())
                    .sum();
                data[(r * side + c) * 3 + ch] = v;
            }
        }
    }
    for _ in 0..4 {
        let (r0, c0) = (rng.gen_range(0..side), rng.gen_range(0..side));
        let (hh, ww) = (rng.gen_range(2..=side / 3 + 2), rng.gen_range(2..=side / 3 + 2));
        let lift: [f64; 3] = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        for r in r0..(r0 + hh).min(side) {
            for c in c0..(c0 + ww).min(side) {
                for (ch, l) in lift.iter().enumerate() {
                    data[(r * side + c) * 3 + ch] += l;
                }
            }
        }
    }
    let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    data.iter_mut().for_each(|v| *v = (*v - lo) / span);
    Tensor::new(vec![side, side, 3], data).expect("consistent shape")
}

/// Mean over non-overlapping `r×r` cells.
pub fn box_downsample<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3("box_downsample")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return invalid("box_downsample", format!("{h}x{w} not divisible by {r}"));
    }
    let inv = T::lit(1.0 / (r * r) as f64);
    Ok(Tensor::from_fn(&[h / r, w / r, c], |i| {
        let mut s = T::zero();
        for a in 0..r {
            for b in 0..r {
                s += x.at3(i[0] * r + a, i[1] * r + b, i[2]);
            }
        }
        s * inv
    }))
}

/// Fixed set of textures from which training crops are drawn.
#[derive(Debug, Clone)]
pub struct TexturePool {
    textures: Vec<Tensor<f64>>,
}

impl TexturePool {
    pub fn generate<R: Rng + ?Sized>(count: usize, side: usize, rng: &mut R) -> Self {
        Self {
            textures: (0..count).map(|_| synthetic_texture(side, rng)).collect(),
        }
    }

    pub fn textures(&self) -> &[Tensor<f64>] {
        &self.textures
    }

    /// A `patch×patch` crop at a uniformly random texture and position; the
    /// random position is the shift augmentation.
    pub fn crop<R: Rng + ?Sized>(&self, patch: usize, rng: &mut R) -> Result<Tensor<f64>> {
        if self.textures.is_empty() {
            return invalid("TexturePool::crop", "no textures");
        }
        let t = &self.textures[rng.gen_range(0..self.textures.len())];
        let side = t.shape()[0];
        if patch == 0 || patch > side {
            return invalid("TexturePool::crop", format!("patch {patch} does not fit texture side {side}"));
        }
        let (r0, c0) = (rng.gen_range(0..=side - patch), rng.gen_range(0..=side - patch));
        Ok(Tensor::from_fn(&[patch, patch, 3], |i| t.at3(r0 + i[0], c0 + i[1], i[2])))
    }
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma`.
pub fn add_noise<R: Rng + ?Sized>(x: &Tensor<f64>, sigma: f64, rng: &mut R) -> Result<Tensor<f64>> {
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::error::TeaError::Invalid {
        op: "add_noise",
        detail: e.to_string(),
    })?;
    let data = x.data().iter().map(|&v| v + normal.sample(rng)).collect();
    Tensor::new(x.shape().to_vec(), data)
}
