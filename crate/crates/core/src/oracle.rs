//! Brute-force reference evaluations of the attention operators, written
//! directly as per-query loops in `f64` with no shared kernels.

use crate::attention::{AttnParams, OffsetGen, SlideSpec};
use crate::error::Result;
use crate::ops::Pool;
use crate::tensor::Tensor;

type Mat = Vec<Vec<f64>>;

fn rows(x: &Tensor<f64>) -> Mat {
    let d = *x.shape().last().expect("non-empty shape");
    x.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn mat(w: &Tensor<f64>) -> Mat {
    rows(w)
}

fn times(x: &Mat, w: &Mat) -> Mat {
    let dout = w[0].len();
    x.iter()
        .map(|r| {
            (0..dout)
                .map(|j| {
                    let mut s = 0.0;
                    for (i, &v) in r.iter().enumerate() {
                        s += v * w[i][j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `Σ_j exp(q·k_j/√D) v_j / Σ_j exp(q·k_j/√D)` over the listed key rows.
fn attend_one(q: &[f64], k: &Mat, v: &Mat, keys: &[usize]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let sims: Vec<f64> = keys.iter().map(|&j| dot(q, &k[j]) * scale).collect();
    // Shift by the largest score only to keep exp in range; the ratio is unchanged.
    let top = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0; v[0].len()];
    let mut den = 0.0;
    for (t, &j) in keys.iter().enumerate() {
        let e = (sims[t] - top).exp();
        den += e;
        for c in 0..num.len() {
            num[c] += e * v[j][c];
        }
    }
    num.iter().map(|n| n / den).collect()
}

fn to_tensor(shape: &[usize], m: Mat) -> Result<Tensor<f64>> {
    Tensor::new(shape.to_vec(), m.into_iter().flatten().collect())
}

pub fn self_attention(x: &Tensor<f64>, p: &AttnParams<f64>) -> Result<Tensor<f64>> {
    let x = rows(x);
    let (q, k, v) = (times(&x, &mat(&p.w_q)), times(&x, &mat(&p.w_k)), times(&x, &mat(&p.w_v)));
    let all: Vec<usize> = (0..x.len()).collect();
    let out: Mat = q.iter().map(|qi| attend_one(qi, &k, &v, &all)).collect();
    to_tensor(&[x.len(), p.dim()], out)
}

/// Tap positions along one axis: centered, or pushed inside at either edge.
pub fn window_taps(pos: usize, len: usize, window: usize, stride: usize) -> Vec<usize> {
    let half = ((window - 1) * stride / 2) as i64;
    let span = ((window - 1) * stride) as i64;
    let (pos, len) = (pos as i64, len as i64);
    let start = if pos - half < 0 {
        0
    } else if pos + half > len - 1 {
        len - 1 - span
    } else {
        pos - half
    };
    (0..window as i64).map(|a| (start + a * stride as i64) as usize).collect()
}

fn window_attention(q: &Mat, k: &Mat, v: &Mat, h: usize, w: usize, spec: &SlideSpec) -> Mat {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let rs = window_taps(r, h, spec.window, spec.stride);
        for c in 0..w {
            let cs = window_taps(c, w, spec.window, spec.stride);
            let mut keys = Vec::new();
            for &a in &rs {
                for &b in &cs {
                    keys.push(a * w + b);
                }
            }
            out.push(attend_one(&q[r * w + c], k, v, &keys));
        }
    }
    out
}

pub fn skv_sa(x: &Tensor<f64>, p: &AttnParams<f64>, spec: &SlideSpec) -> Result<Tensor<f64>> {
    let (h, w, d) = x.dims3("oracle::skv_sa")?;
    spec.validate_for(h, w)?;
    let x = rows(x);
    let (q, k, v) = (times(&x, &mat(&p.w_q)), times(&x, &mat(&p.w_k)), times(&x, &mat(&p.w_v)));
    to_tensor(&[h, w, d], window_attention(&q, &k, &v, h, w, spec))
}

/// Coordinates `(r, c) + Σ_ch reduce[ch] · Σ_taps kernel · kv[clamped tap]`.
fn offsets(kv: &Mat, h: usize, w: usize, gen: &OffsetGen<f64>) -> Mat {
    let k = gen.kernel.shape()[0] as i64;
    let d = gen.kernel.shape()[2];
    let half = k / 2;
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let mut feat = vec![0.0; d];
            for i in 0..k {
                for j in 0..k {
                    let sr = (r + i - half).clamp(0, h as i64 - 1) as usize;
                    let sc = (c + j - half).clamp(0, w as i64 - 1) as usize;
                    for (ch, f) in feat.iter_mut().enumerate() {
                        let kk = gen.kernel.data()[((i * k + j) as usize) * d + ch];
                        *f += kk * kv[sr * w + sc][ch];
                    }
                }
            }
            let mut dr = 0.0;
            let mut dc = 0.0;
            for (ch, &f) in feat.iter().enumerate() {
                dr += f * gen.reduce.data()[ch * 2];
                dc += f * gen.reduce.data()[ch * 2 + 1];
            }
            out.push(vec![r as f64 + dr, c as f64 + dc]);
        }
    }
    out
}

fn nearest(v: f64, len: usize) -> usize {
    let r = if v >= 0.0 { (v + 0.5).floor() } else { -((-v + 0.5).floor()) };
    r.clamp(0.0, (len - 1) as f64) as usize
}

fn shuffle(field: &Mat, coords: &Mat, h: usize, w: usize) -> Mat {
    coords
        .iter()
        .map(|rc| field[nearest(rc[0], h) * w + nearest(rc[1], w)].clone())
        .collect()
}

pub fn adaptive_offsets(kv: &Tensor<f64>, gen: &OffsetGen<f64>) -> Result<Tensor<f64>> {
    let (h, w, _) = kv.dims3("oracle::adaptive_offsets")?;
    to_tensor(&[h, w, 2], offsets(&rows(kv), h, w, gen))
}

/// `(out, k_shuf, v_shuf)` of the adaptive sliding branch.
pub fn askv_sa(
    x: &Tensor<f64>,
    p: &AttnParams<f64>,
    spec: &SlideSpec,
) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let (h, w, d) = x.dims3("oracle::askv_sa")?;
    spec.validate_for(h, w)?;
    let x = rows(x);
    let (q, k, v) = (times(&x, &mat(&p.w_q)), times(&x, &mat(&p.w_k)), times(&x, &mat(&p.w_v)));
    let ks = shuffle(&k, &offsets(&k, h, w, &p.offset_k), h, w);
    let vs = shuffle(&v, &offsets(&v, h, w, &p.offset_v), h, w);
    let out = window_attention(&q, &ks, &vs, h, w, spec);
    Ok((to_tensor(&[h, w, d], out)?, to_tensor(&[h, w, d], ks)?, to_tensor(&[h, w, d], vs)?))
}

fn pooled(field: &Mat, h: usize, w: usize, g: usize, pool: Pool) -> Mat {
    let d = field[0].len();
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g {
        let (r0, r1) = (i * h / g, (i + 1) * h / g);
        for j in 0..g {
            let (c0, c1) = (j * w / g, (j + 1) * w / g);
            let mut cell = vec![if pool == Pool::Max { f64::NEG_INFINITY } else { 0.0 }; d];
            for r in r0..r1 {
                for c in c0..c1 {
                    for ch in 0..d {
                        let v = field[r * w + c][ch];
                        cell[ch] = if pool == Pool::Max { cell[ch].max(v) } else { cell[ch] + v };
                    }
                }
            }
            if pool == Pool::Avg {
                let n = ((r1 - r0) * (c1 - c0)) as f64;
                cell.iter_mut().for_each(|v| *v /= n);
            }
            out.push(cell);
        }
    }
    out
}

fn dsa_rows(q: &Mat, ks: &Mat, vs: &Mat, h: usize, w: usize, spec: &SlideSpec) -> Mat {
    let g = spec.pool_side();
    let kp = pooled(ks, h, w, g, spec.pool);
    let vp = pooled(vs, h, w, g, spec.pool);
    let all: Vec<usize> = (0..g * g).collect();
    q.iter().map(|qi| attend_one(qi, &kp, &vp, &all)).collect()
}

pub fn dsa(
    q_src: &Tensor<f64>,
    k_shuf: &Tensor<f64>,
    v_shuf: &Tensor<f64>,
    p: &AttnParams<f64>,
    spec: &SlideSpec,
) -> Result<Tensor<f64>> {
    let (h, w, d) = q_src.dims3("oracle::dsa")?;
    let q = times(&rows(q_src), &mat(&p.w_q));
    to_tensor(&[h, w, d], dsa_rows(&q, &rows(k_shuf), &rows(v_shuf), h, w, spec))
}

pub fn tea(x: &Tensor<f64>, p: &AttnParams<f64>, spec: &SlideSpec) -> Result<Tensor<f64>> {
    let (h, w, d) = x.dims3("oracle::tea")?;
    let (local, ks, vs) = askv_sa(x, p, spec)?;
    let q = times(&rows(x), &mat(&p.w_q));
    let global = dsa_rows(&q, &rows(&ks), &rows(&vs), h, w, spec);
    let data = local
        .data()
        .iter()
        .zip(global.iter().flatten())
        .map(|(&a, &b)| p.alpha_s * a + p.alpha_d * b)
        .collect();
    Tensor::new(vec![h, w, d], data)
}
