use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Depthwise `k×k` conv over the key (or value) channels followed by a
/// `D→2` reduction, producing a per-pixel (row, col) displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetGen<T> {
    /// `[k, k, D]`
    pub kernel: Tensor<T>,
    /// `[D, 2]`
    pub reduce: Tensor<T>,
}

impl<T: Scalar> OffsetGen<T> {
    pub fn zeros(dim: usize, k: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[k, k, dim]),
            reduce: Tensor::zeros(&[dim, 2]),
        }
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, k: usize, scale: f64, rng: &mut R) -> Self {
        let kb = 1.0 / k as f64;
        let rb = scale / (dim as f64).sqrt();
        Self {
            kernel: Tensor::uniform(&[k, k, dim], -kb, kb, rng),
            reduce: Tensor::uniform(&[dim, 2], -rb, rb, rng),
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }
}

/// Weights of one attention operator: Q/K/V projections, the key and value
/// offset generators and the two branch weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub offset_k: OffsetGen<T>,
    pub offset_v: OffsetGen<T>,
    pub alpha_s: T,
    pub alpha_d: T,
}

/// [`AttnParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub offset_k_kernel: Var,
    pub offset_k_reduce: Var,
    pub offset_v_kernel: Var,
    pub offset_v_reduce: Var,
    pub alpha_s: Var,
    pub alpha_d: Var,
}

/// Default magnitude of the offset reduction: most rounded displacements are
/// zero, a few reach one pixel.
pub const OFFSET_SCALE: f64 = 2.0;

impl<T: Scalar> AttnParams<T> {
    /// Uniform `±1/√D` projections, small random offsets, both branch weights 1.
    pub fn random<R: Rng + ?Sized>(dim: usize, offset_kernel: usize, rng: &mut R) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        Self {
            w_q: Tensor::uniform(&[dim, dim], -b, b, rng),
            w_k: Tensor::uniform(&[dim, dim], -b, b, rng),
            w_v: Tensor::uniform(&[dim, dim], -b, b, rng),
            offset_k: OffsetGen::random(dim, offset_kernel, OFFSET_SCALE, rng),
            offset_v: OffsetGen::random(dim, offset_kernel, OFFSET_SCALE, rng),
            alpha_s: T::one(),
            alpha_d: T::one(),
        }
    }

    /// Identity projections and zero offsets.
    pub fn identity(dim: usize, offset_kernel: usize) -> Self {
        let eye = Tensor::from_fn(&[dim, dim], |i| if i[0] == i[1] { T::one() } else { T::zero() });
        Self {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
            offset_k: OffsetGen::zeros(dim, offset_kernel),
            offset_v: OffsetGen::zeros(dim, offset_kernel),
            alpha_s: T::one(),
            alpha_d: T::one(),
        }
    }

    pub fn with_zero_offsets(mut self) -> Self {
        let (d, k) = (self.dim(), self.offset_k.kernel_size());
        self.offset_k = OffsetGen::zeros(d, k);
        self.offset_v = OffsetGen::zeros(d, k);
        self
    }

    /// Multiplies both offset reductions by `factor`.
    pub fn with_offset_scale(mut self, factor: f64) -> Self {
        let f = T::lit(factor);
        self.offset_k.reduce = self.offset_k.reduce.scale(f);
        self.offset_v.reduce = self.offset_v.reduce.scale(f);
        self
    }

    pub fn with_alphas(mut self, alpha_s: f64, alpha_d: f64) -> Self {
        self.alpha_s = T::lit(alpha_s);
        self.alpha_d = T::lit(alpha_d);
        self
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            if w.shape() != [d, d] {
                return shape_err("AttnParams", format!("projection {:?} for D={d}", w.shape()));
            }
        }
        for g in [&self.offset_k, &self.offset_v] {
            let k = g.kernel_size();
            if g.kernel.shape() != [k, k, d] || g.reduce.shape() != [d, 2] {
                return shape_err(
                    "AttnParams",
                    format!("offset generator {:?}/{:?} for D={d}", g.kernel.shape(), g.reduce.shape()),
                );
            }
        }
        Ok(())
    }

    /// Parameter count: three projections, two generators, two scalars.
    pub fn count(dim: usize, offset_kernel: usize) -> usize {
        3 * dim * dim + 2 * (offset_kernel * offset_kernel * dim + 2 * dim) + 2
    }

    /// Records every tensor on `tape`, as parameters when `trainable`.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> AttnVars {
        let leaf = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        AttnVars {
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
            offset_k_kernel: leaf(&self.offset_k.kernel),
            offset_k_reduce: leaf(&self.offset_k.reduce),
            offset_v_kernel: leaf(&self.offset_v.kernel),
            offset_v_reduce: leaf(&self.offset_v.reduce),
            alpha_s: leaf(&Tensor::scalar(self.alpha_s)),
            alpha_d: leaf(&Tensor::scalar(self.alpha_d)),
        }
    }

    /// Visits every tensor with a stable name; the branch weights are
    /// presented as one-element tensors and written back afterwards.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut Tensor<T>)) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("offset_k.kernel", &mut self.offset_k.kernel);
        f("offset_k.reduce", &mut self.offset_k.reduce);
        f("offset_v.kernel", &mut self.offset_v.kernel);
        f("offset_v.reduce", &mut self.offset_v.reduce);
        let mut a = Tensor::scalar(self.alpha_s);
        f("alpha_s", &mut a);
        self.alpha_s = a.item();
        let mut a = Tensor::scalar(self.alpha_d);
        f("alpha_d", &mut a);
        self.alpha_d = a.item();
    }
}

impl AttnVars {
    /// Vars in [`AttnParams::visit_mut`] order.
    pub fn all(&self) -> [Var; 9] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.offset_k_kernel,
            self.offset_k_reduce,
            self.offset_v_kernel,
            self.offset_v_reduce,
            self.alpha_s,
            self.alpha_d,
        ]
    }
}
