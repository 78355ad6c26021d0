//! Indexed scaled-dot-product attention, the kernel behind every attention
//! operator in the crate.
//!
//! Query `i` attends to the key/value rows named by a [`KeySet`]:
//! `out_i = Σ_t p_t V[j_t]` with `p = softmax_t(Q_i·K[j_t]/√D + bias_t)`.
//! Within a query the keys are reduced in table order, so results do not
//! depend on how queries are scheduled.

use std::sync::Arc;

use crate::error::{shape_err, Result, TeaError};
use crate::fault::{self, Fault};
use crate::mac::{self, Phase};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which key rows each query sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySet {
    /// Every query attends to all rows of the key matrix.
    All,
    /// Query `i` attends to rows `keys[i·per_query..(i+1)·per_query]`.
    Table { per_query: usize, keys: Arc<[u32]> },
}

impl KeySet {
    pub fn table(per_query: usize, keys: Vec<u32>) -> Self {
        KeySet::Table {
            per_query,
            keys: keys.into(),
        }
    }

    fn per_query(&self, m: usize) -> usize {
        match self {
            KeySet::All => m,
            KeySet::Table { per_query, .. } => *per_query,
        }
    }

    #[inline]
    fn key(&self, i: usize, t: usize) -> usize {
        match self {
            KeySet::All => t,
            KeySet::Table { per_query, keys } => keys[i * per_query + t] as usize,
        }
    }
}

/// MAC attribution for the similarity and re-weighting halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttendPhases {
    pub score: Phase,
    pub reweight: Phase,
}

impl AttendPhases {
    pub const WINDOW: Self = Self {
        score: Phase::AttnMap,
        reweight: Phase::Reweight,
    };
    pub const DSA: Self = Self {
        score: Phase::Dsa,
        reweight: Phase::Dsa,
    };
}

/// Additive score bias looked up per (query, key slot) from a learned table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasIndex {
    /// Same layout as the key table: `index[i·per_query + t]` selects a table entry.
    pub index: Arc<[u32]>,
    pub table_len: usize,
}

/// Observer of normalized attention weights, called once per query in order.
pub type Probe<'a, T> = &'a mut dyn FnMut(usize, &[T]);

fn check<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    keys: &KeySet,
    bias: Option<(&Tensor<T>, &BiasIndex)>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, d) = q.dims2("attend")?;
    let (m, dk) = k.dims2("attend")?;
    let (mv, dv) = v.dims2("attend")?;
    if dk != d || mv != m {
        return shape_err(
            "attend",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        );
    }
    let per = keys.per_query(m);
    if let KeySet::Table { keys: table, .. } = keys {
        if table.len() != n * per {
            return shape_err("attend", format!("key table of {} for {n}x{per}", table.len()));
        }
        if table.iter().any(|&j| j as usize >= m) {
            return shape_err("attend", "key index out of range");
        }
    }
    if let Some((values, idx)) = bias {
        if idx.index.len() != n * per || values.len() != idx.table_len {
            return shape_err("attend", "bias index does not match key table");
        }
    }
    Ok((n, d, m, dv, per))
}

/// Normalized weights of query `i` written into `p`; returns false on a non-finite score.
#[inline]
#[allow(clippy::too_many_arguments)]
fn weights<T: Scalar>(
    i: usize,
    qi: &[T],
    k: &Tensor<T>,
    keys: &KeySet,
    bias: Option<(&Tensor<T>, &BiasIndex)>,
    per: usize,
    scale: T,
    p: &mut [T],
) -> bool {
    let mut max = T::neg_infinity();
    for (t, pt) in p.iter_mut().enumerate().take(per) {
        let kj = k.row(keys.key(i, t));
        let mut s: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
        s *= scale;
        if let Some((values, idx)) = bias {
            s += values.data()[idx.index[i * per + t] as usize];
        }
        if !s.is_finite() {
            return false;
        }
        max = max.max(s);
        *pt = s;
    }
    let mut z = T::zero();
    for pt in p.iter_mut() {
        *pt = (*pt - max).exp();
        z += *pt;
    }
    for pt in p.iter_mut() {
        *pt /= z;
    }
    true
}

/// Forward attention. Registers `N·keys·D` MACs to `phases.score` and
/// `N·keys·D_v` to `phases.reweight`.
pub fn attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    keys: &KeySet,
    bias: Option<(&Tensor<T>, &BiasIndex)>,
    phases: AttendPhases,
    mut probe: Option<Probe<'_, T>>,
) -> Result<Tensor<T>> {
    let (n, d, _, dv, per) = check(q, k, v, keys, bias)?;
    let scale = if fault::is(Fault::SoftmaxScale) {
        T::one()
    } else {
        T::one() / T::of_usize(d).sqrt()
    };
    let mut out = vec![T::zero(); n * dv];
    let mut p = vec![T::zero(); per];
    for i in 0..n {
        if !weights(i, q.row(i), k, keys, bias, per, scale, &mut p) {
            return Err(TeaError::NonFinite("attention scores"));
        }
        if let Some(probe) = probe.as_mut() {
            probe(i, &p);
        }
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (t, &pt) in p.iter().enumerate() {
            for (o, &vv) in oi.iter_mut().zip(v.row(keys.key(i, t))) {
                *o += pt * vv;
            }
        }
    }
    let pairs = (n * per) as u128;
    let score_width = if fault::is(Fault::MacCount) { d + 1 } else { d };
    mac::record_in(phases.score, pairs * score_width as u128);
    mac::record_in(phases.reweight, pairs * dv as u128);
    mac::record_exps(pairs);
    Tensor::new(vec![n, dv], out)
}

pub(crate) struct AttendGrads<T> {
    pub dq: Tensor<T>,
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dbias: Option<Tensor<T>>,
}

/// Reverse pass; weights are recomputed rather than stored.
pub(crate) fn attend_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    keys: &KeySet,
    bias: Option<(&Tensor<T>, &BiasIndex)>,
    grad: &Tensor<T>,
) -> Result<AttendGrads<T>> {
    let (n, d, m, dv, per) = check(q, k, v, keys, bias)?;
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); m * d];
    let mut dvv = vec![T::zero(); m * dv];
    let mut db = bias.map(|(t, _)| vec![T::zero(); t.len()]);
    let mut p = vec![T::zero(); per];
    let mut ds = vec![T::zero(); per];
    for i in 0..n {
        let qi = q.row(i);
        if !weights(i, qi, k, keys, bias, per, scale, &mut p) {
            return Err(TeaError::NonFinite("attention scores"));
        }
        let gi = grad.row(i);
        let mut dot = T::zero();
        for t in 0..per {
            let j = keys.key(i, t);
            let dp: T = gi.iter().zip(v.row(j)).map(|(&a, &b)| a * b).sum();
            ds[t] = dp;
            dot += p[t] * dp;
            for (acc, &g) in dvv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                *acc += p[t] * g;
            }
        }
        for t in 0..per {
            let j = keys.key(i, t);
            let s = p[t] * (ds[t] - dot);
            if let (Some(db), Some((_, idx))) = (db.as_mut(), bias) {
                db[idx.index[i * per + t] as usize] += s;
            }
            let s = s * scale;
            let kj = k.row(j);
            for c in 0..d {
                dq[i * d + c] += s * kj[c];
                dk[j * d + c] += s * qi[c];
            }
        }
    }
    Ok(AttendGrads {
        dq: Tensor::new(vec![n, d], dq)?,
        dk: Tensor::new(vec![m, d], dk)?,
        dv: Tensor::new(vec![m, dv], dvv)?,
        dbias: match (db, bias) {
            (Some(db), Some((t, _))) => Some(Tensor::new(t.shape().to_vec(), db)?),
            _ => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_returns_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::<f64>::uniform(&[3, 4], -5.0, 5.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[1, 4], -5.0, 5.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[1, 2], -5.0, 5.0, &mut rng);
        let out = attend(&q, &k, &v, &KeySet::All, None, AttendPhases::WINDOW, None).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn probe_sees_normalized_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Tensor::<f64>::uniform(&[5, 3], -2.0, 2.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[7, 3], -2.0, 2.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[7, 3], -2.0, 2.0, &mut rng);
        let keys = KeySet::table(3, (0..15).map(|i| (i * 3 % 7) as u32).collect());
        let mut seen = 0;
        let mut probe = |_: usize, p: &[f64]| {
            seen += 1;
            assert!(p.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        };
        attend(&q, &k, &v, &keys, None, AttendPhases::WINDOW, Some(&mut probe)).unwrap();
        assert_eq!(seen, 5);
    }

    #[test]
    fn out_of_range_key_is_rejected() {
        let q = Tensor::<f64>::zeros(&[1, 2]);
        let k = Tensor::<f64>::zeros(&[2, 2]);
        let keys = KeySet::table(1, vec![2]);
        assert!(attend(&q, &k, &k, &keys, None, AttendPhases::WINDOW, None).is_err());
    }
}
