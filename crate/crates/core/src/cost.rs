//! Closed-form MAC count of the combined attention and its check against
//! the instrumented counter.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttnParams, SlideSpec};
use crate::error::{invalid, Result, TeaError};
use crate::mac::{MacCounter, Phase};
use crate::tensor::Tensor;

/// Per-term multiply-accumulate counts. One MAC is reported as two FLOPs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub qkv_proj: u128,
    pub offset_convs: u128,
    pub attn_map: u128,
    pub reweight: u128,
    pub dsa: u128,
}

impl CostBreakdown {
    pub fn total(&self) -> u128 {
        self.qkv_proj + self.offset_convs + self.attn_map + self.reweight + self.dsa
    }

    /// Everything except the projections.
    pub fn non_projection(&self) -> u128 {
        self.total() - self.qkv_proj
    }

    pub fn flops(&self) -> u128 {
        2 * self.total()
    }

    pub fn terms(&self) -> [(&'static str, u128); 5] {
        [
            ("qkv_proj", self.qkv_proj),
            ("offset_convs", self.offset_convs),
            ("attn_map", self.attn_map),
            ("reweight", self.reweight),
            ("dsa", self.dsa),
        ]
    }
}

/// Exact evaluation of `3ND² + 2NDk² + 2Nw²D + 2N·N_d·D`, term by term.
pub fn analytic_cost(n: usize, d: usize, spec: &SlideSpec) -> Result<CostBreakdown> {
    if n == 0 || d == 0 {
        return invalid("analytic_cost", format!("N and D must be positive, got {n}, {d}"));
    }
    let (n, d) = (n as u128, d as u128);
    let k = spec.offset_kernel as u128;
    let w = spec.window as u128;
    let nd = spec.pooled_tokens as u128;
    Ok(CostBreakdown {
        qkv_proj: 3 * n * d * d,
        offset_convs: 2 * n * d * k * k,
        attn_map: n * w * w * d,
        reweight: n * w * w * d,
        dsa: 2 * n * nd * d,
    })
}

/// Closed-form counts for any of the reportable operators: the combined
/// formula for [`CostOp::Tea`], projections plus a `w²`-key window for
/// [`CostOp::SkvSa`], projections plus all-pairs scores for [`CostOp::Sa`].
pub fn analytic_cost_for(op: CostOp, n: usize, d: usize, spec: &SlideSpec) -> Result<CostBreakdown> {
    let full = analytic_cost(n, d, spec)?;
    let (n, d) = (n as u128, d as u128);
    Ok(match op {
        CostOp::Tea => full,
        CostOp::SkvSa => CostBreakdown {
            offset_convs: 0,
            dsa: 0,
            ..full
        },
        CostOp::Sa => CostBreakdown {
            qkv_proj: full.qkv_proj,
            attn_map: n * n * d,
            reweight: n * n * d,
            ..CostBreakdown::default()
        },
    })
}

/// Counter readings sorted into the analytic terms, plus the work the
/// formula leaves out.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MeasuredCost {
    pub terms: CostBreakdown,
    /// Channel reduction of the offset features to coordinates (`4ND`).
    pub offset_reduce: u128,
    pub other: u128,
    /// Softmax exponentials.
    pub exps: u128,
}

/// Sorts a finished counter run into terms.
pub fn measured_cost(counter: &MacCounter) -> Result<MeasuredCost> {
    if !counter.enabled() {
        return Err(TeaError::CounterDisabled);
    }
    Ok(MeasuredCost {
        terms: CostBreakdown {
            qkv_proj: counter.macs(Phase::QkvProj),
            offset_convs: counter.macs(Phase::OffsetConv),
            attn_map: counter.macs(Phase::AttnMap),
            reweight: counter.macs(Phase::Reweight),
            dsa: counter.macs(Phase::Dsa),
        },
        offset_reduce: counter.macs(Phase::OffsetReduce),
        other: counter.macs(Phase::Other),
        exps: counter.exps(),
    })
}

/// Operators the scaling report can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostOp {
    Sa,
    SkvSa,
    Tea,
}

impl CostOp {
    pub fn name(self) -> &'static str {
        match self {
            CostOp::Sa => "sa",
            CostOp::SkvSa => "skvsa",
            CostOp::Tea => "tea",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sa" => Some(CostOp::Sa),
            "skvsa" => Some(CostOp::SkvSa),
            "tea" => Some(CostOp::Tea),
            _ => None,
        }
    }
}

/// Side of a square image with `n` pixels.
pub fn square_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n || n == 0 {
        return invalid("square_side", format!("{n} is not a positive perfect square"));
    }
    Ok(s)
}

/// Runs `op` once on a random `N = side²` token image under the counter.
pub fn measure(op: CostOp, n: usize, d: usize, spec: &SlideSpec, seed: u64) -> Result<MeasuredCost> {
    let side = square_side(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::uniform(&[side, side, d], -1.0, 1.0, &mut rng);
    let p = AttnParams::random(d, spec.offset_kernel, &mut rng);
    let (out, counter) = MacCounter::run(|| -> Result<()> {
        match op {
            CostOp::Sa => attention::self_attention(&x.reshape(&[n, d])?, &p).map(drop),
            CostOp::SkvSa => attention::skv_sa(&x, &p, spec).map(drop),
            CostOp::Tea => attention::tea(&x, &p, spec).map(drop),
        }
    });
    out?;
    measured_cost(&counter)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub total: u128,
    /// The term whose growth is being tracked: the score phase for global
    /// attention, everything but the projections otherwise.
    pub tracked: u128,
    /// `tracked` over the previous row's.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub op: CostOp,
    pub dim: usize,
    pub spec: SlideSpec,
    pub rows: Vec<ScalingRow>,
}

pub fn scaling_report(op: CostOp, sizes: &[usize], d: usize, spec: &SlideSpec, seed: u64) -> Result<ScalingReport> {
    if sizes.is_empty() {
        return invalid("scaling_report", "no sizes given");
    }
    let mut rows: Vec<ScalingRow> = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let m = measure(op, n, d, spec, seed)?;
        let tracked = match op {
            CostOp::Sa => m.terms.attn_map,
            CostOp::SkvSa | CostOp::Tea => m.terms.non_projection(),
        };
        let ratio = rows.last().map(|prev| tracked as f64 / prev.tracked as f64);
        rows.push(ScalingRow {
            n,
            total: m.terms.total(),
            tracked,
            ratio,
        });
    }
    Ok(ScalingReport {
        op,
        dim: d,
        spec: *spec,
        rows,
    })
}

impl ScalingReport {
    pub fn to_text(&self) -> String {
        let tracked = match self.op {
            CostOp::Sa => "score_macs",
            _ => "nonproj_macs",
        };
        let mut s = format!("# op={} D={} spec={} (1 MAC = 2 FLOPs)\n", self.op.name(), self.dim, self.spec);
        let _ = writeln!(s, "{:>8} {:>16} {:>16} {:>8}", "N", "total_macs", tracked, "ratio");
        for r in &self.rows {
            let ratio = r.ratio.map_or("-".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(s, "{:>8} {:>16} {:>16} {:>8}", r.n, r.total, r.tracked, ratio);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,n,total_macs,tracked_macs,ratio\n");
        for r in &self.rows {
            let ratio = r.ratio.map_or(String::new(), |x| format!("{x}"));
            let _ = writeln!(s, "{},{},{},{},{}", self.op.name(), r.n, r.total, r.tracked, ratio);
        }
        s
    }
}

/// Analytic against counted terms for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CostCheck {
    pub op: CostOp,
    pub n: usize,
    pub dim: usize,
    pub spec: SlideSpec,
    pub analytic: CostBreakdown,
    pub measured: MeasuredCost,
}

impl CostCheck {
    pub fn run(op: CostOp, n: usize, d: usize, spec: &SlideSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            op,
            n,
            dim: d,
            spec: *spec,
            analytic: analytic_cost_for(op, n, d, spec)?,
            measured: measure(op, n, d, spec, seed)?,
        })
    }

    pub fn matches(&self) -> bool {
        self.analytic == self.measured.terms
    }
}

pub fn checks_to_text(checks: &[CostCheck]) -> String {
    let mut s = format!(
        "{:>6} {:>6} {:>4} {:>10} {:>14} {:>12} {:>12} {:>12} {:>10} {:>14} {:>14} {:>6}\n",
        "op", "N", "D", "spec", "qkv_proj", "offset_convs", "attn_map", "reweight", "dsa", "analytic", "measured", "match"
    );
    for c in checks {
        let t = &c.measured.terms;
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>4} {:>10} {:>14} {:>12} {:>12} {:>12} {:>10} {:>14} {:>14} {:>6}",
            c.op.name(),
            c.n,
            c.dim,
            c.spec.to_string(),
            t.qkv_proj,
            t.offset_convs,
            t.attn_map,
            t.reweight,
            t.dsa,
            c.analytic.total(),
            t.total(),
            if c.matches() { "yes" } else { "NO" }
        );
    }
    s
}

pub fn checks_to_csv(checks: &[CostCheck]) -> String {
    let mut s = String::from("op,n,d,spec,term,analytic,measured\n");
    for c in checks {
        for ((name, a), (_, m)) in c.analytic.terms().iter().zip(c.measured.terms.terms()) {
            let _ = writeln!(s, "{},{},{},\"{}\",{name},{a},{m}", c.op.name(), c.n, c.dim, c.spec);
        }
    }
    s
}

/// Per-token MACs of everything but the projections, and of a window
/// attention with `window×window` windows, both as multiples of `D`.
pub fn per_token_vs_window(spec: &SlideSpec, window: usize) -> (u128, u128) {
    let k = spec.offset_kernel as u128;
    let w = spec.window as u128;
    let nd = spec.pooled_tokens as u128;
    let ours = 2 * k * k + 2 * w * w + 2 * nd;
    let win = 2 * (window as u128) * (window as u128);
    (ours, win)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SlideSpec {
        SlideSpec::new(7, 2, 3, 16).unwrap()
    }

    #[test]
    fn unit_evaluation() {
        let c = analytic_cost(1, 1, &SlideSpec::new(1, 1, 1, 1).unwrap()).unwrap();
        assert_eq!(
            [c.qkv_proj, c.offset_convs, c.attn_map, c.reweight, c.dsa],
            [3, 2, 1, 1, 2]
        );
        assert_eq!(c.total(), 9);
        assert_eq!(c.flops(), 18);
    }

    #[test]
    fn default_bundle_at_4096_tokens() {
        let c = analytic_cost(4096, 32, &SlideSpec::default()).unwrap();
        assert_eq!(c.qkv_proj, 12_582_912);
        assert_eq!(c.offset_convs, 2_359_296);
        assert_eq!(c.attn_map + c.reweight, 58_982_400);
        assert_eq!(c.dsa, 4_194_304);
        assert_eq!(c.total(), 78_118_912);
    }

    #[test]
    fn linear_in_tokens() {
        let s = SlideSpec::default();
        let a = analytic_cost(300, 24, &s).unwrap();
        let b = analytic_cost(600, 24, &s).unwrap();
        for ((_, x), (_, y)) in a.terms().iter().zip(b.terms()) {
            assert_eq!(2 * x, y);
        }
        assert!(analytic_cost(0, 4, &s).is_err());
    }

    #[test]
    fn projection_only_run() {
        let (n, d) = (64, 8);
        let x = Tensor::<f64>::full(&[n, d], 0.5);
        let w = Tensor::<f64>::full(&[d, d], 0.1);
        let (_, counter) = MacCounter::run(|| {
            crate::mac::in_phase(Phase::QkvProj, || {
                for _ in 0..3 {
                    crate::ops::linear_project(&x, &w).unwrap();
                }
            })
        });
        let m = measured_cost(&counter).unwrap();
        assert_eq!(m.terms.qkv_proj, analytic_cost(n, d, &small()).unwrap().qkv_proj);
        assert_eq!(m.terms.total(), m.terms.qkv_proj);
    }

    #[test]
    fn window_terms_and_global_contrast() {
        let (n, d) = (256, 8);
        let tea = measure(CostOp::Tea, n, d, &small(), 1).unwrap();
        assert_eq!(tea.terms.attn_map + tea.terms.reweight, 2 * 256 * 49 * 8);
        assert_eq!(tea.terms, analytic_cost(n, d, &small()).unwrap());
        assert_eq!(tea.offset_reduce, 4 * 256 * 8);
        let sa = measure(CostOp::Sa, n, d, &small(), 1).unwrap();
        assert_eq!(sa.terms.attn_map, 256 * 256 * 8);
        assert_eq!(sa.exps, 256 * 256);
    }

    #[test]
    fn every_operator_matches_its_formula() {
        for op in [CostOp::Sa, CostOp::SkvSa, CostOp::Tea] {
            let c = CostCheck::run(op, 256, 4, &small(), 2).unwrap();
            assert!(c.matches(), "{}", checks_to_text(std::slice::from_ref(&c)));
        }
        let unit = CostCheck::run(CostOp::Tea, 1, 1, &SlideSpec::new(1, 1, 1, 1).unwrap(), 0).unwrap();
        assert!(unit.matches());
        assert_eq!(unit.measured.terms.total(), 9);
        assert!(checks_to_csv(&[unit]).lines().count() == 6);
    }

    #[test]
    fn disabled_counter_is_rejected() {
        assert!(matches!(measured_cost(&MacCounter::default()), Err(TeaError::CounterDisabled)));
    }

    #[test]
    fn scaling_ratios() {
        let sizes = [256, 1024, 4096];
        let tea = scaling_report(CostOp::Tea, &sizes, 4, &small(), 3).unwrap();
        assert!(tea.rows[1..].iter().all(|r| r.ratio == Some(4.0)), "{}", tea.to_text());
        let sa = scaling_report(CostOp::Sa, &sizes[..2], 4, &small(), 3).unwrap();
        assert_eq!(sa.rows[1].ratio, Some(16.0));
        let one = scaling_report(CostOp::SkvSa, &[256], 4, &small(), 3).unwrap();
        assert_eq!(one.rows.len(), 1);
        assert_eq!(one.rows[0].ratio, None);
        assert!(one.to_csv().lines().count() == 2);
        assert!(scaling_report(CostOp::Tea, &[200], 4, &small(), 3).is_err());
    }

    #[test]
    fn per_token_below_window_16() {
        assert_eq!(per_token_vs_window(&SlideSpec::default(), 16), (500, 512));
    }
}
