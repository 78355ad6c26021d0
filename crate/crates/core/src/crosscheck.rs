//! Randomized agreement between the fast operators and the brute-force
//! references in [`crate::oracle`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttnParams, SlideSpec};
use crate::error::{invalid, Result, TeaError};
use crate::ops::Pool;
use crate::oracle;
use crate::tensor::Tensor;

/// Largest accepted norm-wise relative error.
pub const ORACLE_TOL: f64 = 1e-12;

/// Largest side and channel count a random case uses.
pub const MAX_SIDE: usize = 16;
pub const MAX_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOp {
    Sa,
    SkvSa,
    AskvSa,
    Dsa,
    Tea,
}

impl OracleOp {
    pub const ALL: [OracleOp; 5] = [OracleOp::Sa, OracleOp::SkvSa, OracleOp::AskvSa, OracleOp::Dsa, OracleOp::Tea];

    pub fn name(self) -> &'static str {
        match self {
            OracleOp::Sa => "sa",
            OracleOp::SkvSa => "skvsa",
            OracleOp::AskvSa => "askvsa",
            OracleOp::Dsa => "dsa",
            OracleOp::Tea => "tea",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

/// One random input: image, weights and slide bundle.
#[derive(Debug, Clone)]
pub struct Case {
    pub x: Tensor<f64>,
    pub params: AttnParams<f64>,
    pub spec: SlideSpec,
}

/// Draws a bundle, then an image of at most `MAX_SIDE×MAX_SIDE×MAX_DIM`
/// large enough for it, then weights with offsets strong enough to move
/// pixels and arbitrary branch weights.
pub fn random_case<R: Rng + ?Sized>(rng: &mut R) -> Case {
    let (spec, lo) = loop {
        let w = 2 * rng.gen_range(0..4) + 1;
        let s = rng.gen_range(1..=3);
        let k = 2 * rng.gen_range(0..3) + 1;
        let g: usize = rng.gen_range(1..=4);
        let pool = if rng.gen_bool(0.5) { Pool::Avg } else { Pool::Max };
        let lo = (w * s).max(g).max(2);
        if lo <= MAX_SIDE {
            break (SlideSpec::new(w, s, k, g * g).expect("valid bundle").with_pool(pool), lo);
        }
    };
    let h = rng.gen_range(lo..=MAX_SIDE);
    let w = rng.gen_range(lo..=MAX_SIDE);
    let d = rng.gen_range(1..=MAX_DIM);
    let x = Tensor::uniform(&[h, w, d], -1.0, 1.0, rng);
    let params = AttnParams::random(d, spec.offset_kernel, rng)
        .with_offset_scale(rng.gen_range(0.0..4.0))
        .with_alphas(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Case { x, params, spec }
}

/// Norm-wise relative error of the fast operator against the reference.
pub fn run_case(op: OracleOp, c: &Case) -> Result<f64> {
    let (x, p, spec) = (&c.x, &c.params, &c.spec);
    match op {
        OracleOp::Sa => {
            let (h, w, d) = x.dims3("crosscheck")?;
            let rows = x.reshape(&[h * w, d])?;
            attention::self_attention(&rows, p)?.rel_err(&oracle::self_attention(&rows, p)?)
        }
        OracleOp::SkvSa => attention::skv_sa(x, p, spec)?.rel_err(&oracle::skv_sa(x, p, spec)?),
        OracleOp::AskvSa => {
            let got = attention::askv_sa(x, p, spec)?;
            let (out, ks, vs) = oracle::askv_sa(x, p, spec)?;
            Ok(got.out.rel_err(&out)?.max(got.k_shuf.rel_err(&ks)?).max(got.v_shuf.rel_err(&vs)?))
        }
        OracleOp::Dsa => {
            let (h, w, d) = x.dims3("crosscheck")?;
            let mut rng = ChaCha8Rng::seed_from_u64(x.data().len() as u64);
            let k = Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut rng);
            let v = Tensor::uniform(&[h, w, d], -1.0, 1.0, &mut rng);
            attention::dsa(x, &k, &v, p, spec)?.rel_err(&oracle::dsa(x, &k, &v, p, spec)?)
        }
        OracleOp::Tea => attention::tea(x, p, spec)?.rel_err(&oracle::tea(x, p, spec)?),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCheck {
    pub op: OracleOp,
    pub seed: u64,
    pub cases: usize,
    pub max_rel_err: f64,
    /// Index of the case with the largest error.
    pub worst: usize,
}

impl CrossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= ORACLE_TOL
    }
}

/// Runs `cases` random cases drawn from a ChaCha8 stream seeded with `seed`.
pub fn crosscheck(op: OracleOp, cases: usize, seed: u64) -> Result<CrossCheck> {
    if cases == 0 {
        return invalid("crosscheck", "need at least one case");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CrossCheck {
        op,
        seed,
        cases,
        max_rel_err: 0.0,
        worst: 0,
    };
    for i in 0..cases {
        let err = run_case(op, &random_case(&mut rng))?;
        if !err.is_finite() {
            return Err(TeaError::NonFinite("crosscheck error"));
        }
        if err > out.max_rel_err {
            out.max_rel_err = err;
            out.worst = i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = random_case(&mut rng);
            let (h, w, d) = c.x.dims3("t").unwrap();
            assert!(h <= MAX_SIDE && w <= MAX_SIDE && d <= MAX_DIM);
            c.spec.validate_for(h, w).unwrap();
            assert!(c.spec.pool_side() <= h.min(w));
        }
    }

    #[test]
    fn every_operator_agrees() {
        for op in OracleOp::ALL {
            let r = crosscheck(op, 10, 3).unwrap();
            assert!(r.passed(), "{r:?}");
        }
        assert!(crosscheck(OracleOp::Sa, 0, 1).is_err());
        assert_eq!(OracleOp::parse("askvsa"), Some(OracleOp::AskvSa));
    }
}
