//! Dense row-major tensor.

use rand::Rng;

use crate::error::{invalid, shape_err, Result, TeaError};
use crate::scalar::Scalar;

/// Dense n-dimensional array stored flat in row-major order.
///
/// Images are `[H, W, C]`, token matrices `[N, D]`. Every operation returns a
/// new tensor; values are never mutated through a shared reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err("Tensor::new", format!("zero-sized dimension in {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from nested rows, convenient for small literals.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::lit(v))).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(op, format!("expected rank 2, got {:?}", self.shape)),
        }
    }

    /// `(H, W, C)` of a rank-3 image tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => shape_err(op, format!("expected [H, W, C], got {:?}", self.shape)),
        }
    }

    /// Value at `(h, w, c)` of an `[H, W, C]` tensor.
    #[inline]
    pub fn at3(&self, h: usize, w: usize, c: usize) -> T {
        let (wd, cd) = (self.shape[1], self.shape[2]);
        self.data[(h * wd + w) * cd + c]
    }

    /// Channel vector of pixel `(h, w)` in an `[H, W, C]` tensor.
    #[inline]
    pub fn pixel(&self, h: usize, w: usize) -> &[T] {
        let (wd, cd) = (self.shape[1], self.shape[2]);
        let base = (h * wd + w) * cd;
        &self.data[base..base + cd]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TeaError::NonFinite(op))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// Norm-wise relative error `max|self - reference| / max|reference|`.
    pub fn rel_err(&self, reference: &Self) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?.as_f64();
        let scale = reference.max_abs().as_f64().max(f64::MIN_POSITIVE);
        Ok(diff / scale)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Concatenates `[H, W, C_i]` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("concat_channels", "no inputs");
        };
        let (h, w, _) = first.dims3("concat_channels")?;
        let mut total = 0;
        for p in parts {
            let (ph, pw, pc) = p.dims3("concat_channels")?;
            if (ph, pw) != (h, w) {
                return shape_err("concat_channels", "spatial sizes differ");
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(h * w * total);
        for y in 0..h {
            for x in 0..w {
                for p in parts {
                    data.extend_from_slice(p.pixel(y, x));
                }
            }
        }
        Self::new(vec![h, w, total], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn from_fn_is_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        assert_eq!(t.at3(1, 2, 1), 121.0);
        assert_eq!(t.pixel(0, 1), &[10.0, 11.0]);
        assert_eq!(t.data()[7], 101.0);
    }

    #[test]
    fn rel_err_is_normwise() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[&[1.0, 2.5]]).unwrap();
        assert_eq!(a.rel_err(&b).unwrap(), 0.2);
    }
}
