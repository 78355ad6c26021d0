//! Limits in which one operator collapses onto a simpler one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttnParams, SlideSpec};
use crate::error::Result;
use crate::ops::linear_project;
use crate::tensor::Tensor;

pub const DEGENERATE_TOL: f64 = 1e-10;

/// Largest absolute difference between an operator and its limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Degeneration {
    pub name: &'static str,
    pub max_abs_diff: f64,
}

impl Degeneration {
    pub fn passed(&self) -> bool {
        self.max_abs_diff <= DEGENERATE_TOL
    }
}

fn flat(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w, d) = x.dims3("flat")?;
    x.reshape(&[h * w, d])
}

/// Zero offsets, a window covering the image, an identity pool and a muted
/// global branch, each on random data drawn from `seed`.
pub fn degeneration_chain(seed: u64) -> Result<Vec<Degeneration>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (side, d) = (11, 4);
    let x = Tensor::<f64>::uniform(&[side, side, d], -1.0, 1.0, &mut rng);
    let p = AttnParams::<f64>::random(d, 3, &mut rng).with_alphas(0.7, 1.3);
    let spec = SlideSpec::new(5, 2, 3, 16)?;
    let mut out = Vec::new();

    let still = p.clone().with_zero_offsets();
    let a = attention::askv_sa(&x, &still, &spec)?.out;
    out.push(Degeneration {
        name: "zero offsets: askvsa = skvsa",
        max_abs_diff: a.max_abs_diff(&attention::skv_sa(&x, &still, &spec)?)?,
    });

    let full = SlideSpec::new(side, 1, 3, 16)?;
    let s = attention::skv_sa(&x, &p, &full)?;
    let sa = attention::self_attention(&flat(&x)?, &p)?;
    out.push(Degeneration {
        name: "full window: skvsa = sa",
        max_abs_diff: flat(&s)?.max_abs_diff(&sa)?,
    });

    let ident = SlideSpec::new(3, 1, 3, side * side)?;
    let rows = flat(&x)?;
    let k = linear_project(&rows, &p.w_k)?.reshape(&[side, side, d])?;
    let v = linear_project(&rows, &p.w_v)?.reshape(&[side, side, d])?;
    let g = attention::dsa(&x, &k, &v, &p, &ident)?;
    out.push(Degeneration {
        name: "identity pool: dsa = sa",
        max_abs_diff: flat(&g)?.max_abs_diff(&sa)?,
    });

    let muted = p.clone().with_alphas(1.0, 0.0);
    let t = attention::tea(&x, &muted, &spec)?;
    out.push(Degeneration {
        name: "alpha_d = 0: tea = askvsa",
        max_abs_diff: t.max_abs_diff(&attention::askv_sa(&x, &muted, &spec)?.out)?,
    });
    Ok(out)
}
