//! Shift-equivariance audits: run an operator on a shifted input, shift its
//! original output, and compare the two away from the image border.

use std::fmt::{self, Write as _};

use crate::attention::SlideSpec;
use crate::error::{invalid, Result, TeaError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShiftMode {
    /// Pixels leaving one edge re-enter at the opposite edge.
    Cyclic,
    /// Pixels leaving the frame are dropped; vacated pixels are zero.
    Crop,
}

/// Integer translation `T(x)[p] = x[p − (dy, dx)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShiftOp {
    pub dy: i64,
    pub dx: i64,
    pub mode: ShiftMode,
}

impl ShiftOp {
    pub fn cyclic(dy: i64, dx: i64) -> Self {
        Self {
            dy,
            dx,
            mode: ShiftMode::Cyclic,
        }
    }

    pub fn crop(dy: i64, dx: i64) -> Self {
        Self {
            dy,
            dx,
            mode: ShiftMode::Crop,
        }
    }

    /// The same translation expressed on a grid `r` times finer.
    pub fn scaled(self, r: usize) -> Self {
        Self {
            dy: self.dy * r as i64,
            dx: self.dx * r as i64,
            ..self
        }
    }

    pub fn magnitude(self) -> u64 {
        self.dy.unsigned_abs().max(self.dx.unsigned_abs())
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = x.dims3("shift")?;
        let (hi, wi) = (h as i64, w as i64);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..hi {
            for col in 0..wi {
                let (sr, sc) = (r - self.dy, col - self.dx);
                match self.mode {
                    ShiftMode::Cyclic => {
                        out.extend_from_slice(x.pixel(sr.rem_euclid(hi) as usize, sc.rem_euclid(wi) as usize))
                    }
                    ShiftMode::Crop => {
                        if (0..hi).contains(&sr) && (0..wi).contains(&sc) {
                            out.extend_from_slice(x.pixel(sr as usize, sc as usize));
                        } else {
                            out.extend(std::iter::repeat_n(T::zero(), c));
                        }
                    }
                }
            }
        }
        Tensor::new(vec![h, w, c], out)
    }
}

impl fmt::Display for ShiftOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.dy, self.dx)
    }
}

/// All cyclic shifts in `[0, max]²` except the identity, ordered by `(dy, dx)`.
pub fn sweep(max: i64) -> Vec<ShiftOp> {
    let mut v = Vec::new();
    for dy in 0..=max {
        for dx in 0..=max {
            if (dy, dx) != (0, 0) {
                v.push(ShiftOp::cyclic(dy, dx));
            }
        }
    }
    v
}

/// All cyclic shifts with `|dy|, |dx| ≤ max` except the identity.
pub fn symmetric_sweep(max: i64) -> Vec<ShiftOp> {
    let mut v = Vec::new();
    for dy in -max..=max {
        for dx in -max..=max {
            if (dy, dx) != (0, 0) {
                v.push(ShiftOp::cyclic(dy, dx));
            }
        }
    }
    v
}

/// Parses `dy,dx`, `dy,dx;dy,dx;…` or `sweep:M`.
pub fn parse_shifts(s: &str, mode: ShiftMode) -> Result<Vec<ShiftOp>> {
    let bad = || TeaError::Invalid {
        op: "parse_shifts",
        detail: format!("expected dy,dx[;dy,dx…] or sweep:M, got {s:?}"),
    };
    if let Some(m) = s.strip_prefix("sweep:") {
        let m: i64 = m.trim().parse().map_err(|_| bad())?;
        if m < 1 {
            return Err(bad());
        }
        return Ok(sweep(m).into_iter().map(|sh| ShiftOp { mode, ..sh }).collect());
    }
    let mut out = Vec::new();
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = part.split_once(',').ok_or_else(bad)?;
        let dy = a.trim().parse().map_err(|_| bad())?;
        let dx = b.trim().parse().map_err(|_| bad())?;
        out.push(ShiftOp { dy, dx, mode });
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// How an operator mixes information across the whole image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    /// Output at a pixel depends only on a bounded neighbourhood.
    None,
    /// Global mixing through a pooled grid with this cell size: cyclic shifts
    /// by whole cells permute the pooled tokens, other shifts change them.
    Pooled((usize, usize)),
    /// Global mixing with no equivariance promise.
    Global,
}

/// Receptive margin of an operator: the border band (in input pixels) whose
/// outputs may see the image edge, plus how it mixes globally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Margin {
    pub local: usize,
    pub mixing: Mixing,
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

fn lcm2(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    (lcm(a.0, b.0), lcm(a.1, b.1))
}

impl Margin {
    pub fn local(m: usize) -> Self {
        Self {
            local: m,
            mixing: Mixing::None,
        }
    }

    pub fn pooled(local: usize, cell: (usize, usize)) -> Self {
        Self {
            local,
            mixing: Mixing::Pooled(cell),
        }
    }

    pub fn global(local: usize) -> Self {
        Self {
            local,
            mixing: Mixing::Global,
        }
    }

    /// Margin of `next ∘ self`. Local bands add; pooling stays exact only if
    /// everything before it was exact up to the border.
    pub fn then(self, next: Margin) -> Margin {
        use Mixing::*;
        let mixing = match (self.mixing, next.mixing) {
            (Global, _) | (_, Global) => Global,
            (m, None) => m,
            (None, Pooled(c)) if self.local == 0 => Pooled(c),
            (Pooled(a), Pooled(b)) if self.local == 0 => Pooled(lcm2(a, b)),
            _ => Global,
        };
        Margin {
            local: self.local + next.local,
            mixing,
        }
    }

    /// Margin of `self + other` evaluated on the same input.
    pub fn alongside(self, other: Margin) -> Margin {
        use Mixing::*;
        let mixing = match (self.mixing, other.mixing) {
            (Global, _) | (_, Global) => Global,
            (Pooled(a), Pooled(b)) => Pooled(lcm2(a, b)),
            (Pooled(c), None) | (None, Pooled(c)) => Pooled(c),
            (None, None) => None,
        };
        Margin {
            local: self.local.max(other.local),
            mixing,
        }
    }

    /// Whether the operator promises equivariance (outside the local band) for `shift`.
    pub fn promises(self, shift: ShiftOp) -> bool {
        match self.mixing {
            Mixing::None => true,
            Mixing::Pooled(cell) => {
                shift.mode == ShiftMode::Cyclic
                    && shift.dy.rem_euclid(cell.0 as i64) == 0
                    && shift.dx.rem_euclid(cell.1 as i64) == 0
            }
            Mixing::Global => false,
        }
    }

    pub fn describe(self) -> String {
        match self.mixing {
            Mixing::None => format!("local:{}", self.local),
            Mixing::Pooled(c) => format!("pooled:{}:{}x{}", self.local, c.0, c.1),
            Mixing::Global => format!("global:{}", self.local),
        }
    }

    /// Pointwise operators (projections, activations).
    pub fn pointwise() -> Self {
        Margin::local(0)
    }

    pub fn conv(kernel: usize) -> Self {
        Margin::local(kernel / 2)
    }

    pub fn sliding(spec: &SlideSpec) -> Self {
        Margin::local(spec.half_span())
    }

    /// Offset generation plus gather whose rounded offsets move at most `reach` pixels.
    pub fn shuffle(spec: &SlideSpec, reach: usize) -> Self {
        Margin::local((spec.offset_kernel / 2).max(reach))
    }

    /// Adaptive sliding attention.
    pub fn adaptive(spec: &SlideSpec, reach: usize) -> Self {
        Margin::shuffle(spec, reach).then(Margin::sliding(spec))
    }

    /// Global attention without positions: any cyclic shift permutes tokens.
    pub fn global_attention() -> Self {
        Margin::pooled(0, (1, 1))
    }

    /// Downsampled attention on pointwise keys and values of an `h×w` image.
    pub fn downsampled(spec: &SlideSpec, h: usize, w: usize) -> Self {
        let g = spec.pool_side();
        if h.is_multiple_of(g) && w.is_multiple_of(g) {
            Margin::pooled(0, (h / g, w / g))
        } else {
            Margin::global(0)
        }
    }

    /// Adaptive sliding branch plus a downsampled branch fed by the shuffled
    /// keys and values. With identity offsets the shuffle is pointwise.
    pub fn combined(spec: &SlideSpec, reach: usize, h: usize, w: usize, offsets_identity: bool) -> Self {
        let shuffle = if offsets_identity {
            Margin::pointwise()
        } else {
            Margin::shuffle(spec, reach)
        };
        Margin::adaptive(spec, reach).alongside(shuffle.then(Margin::downsampled(spec, h, w)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Verdict {
    Exact,
    InteriorExact,
    Approximate,
    Fail,
}

impl Verdict {
    pub fn name(self) -> &'static str {
        match self {
            Verdict::Exact => "exact",
            Verdict::InteriorExact => "interior-exact",
            Verdict::Approximate => "approximate",
            Verdict::Fail => "fail",
        }
    }

    pub fn is_equivariant(self) -> bool {
        matches!(self, Verdict::Exact | Verdict::InteriorExact)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean deviation, relative to the mean magnitude of the reference output,
/// below which a non-equivariant comparison still counts as approximate.
pub const APPROX_REL_DEV: f64 = 0.1;

pub fn default_tol<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::scalar::DType::F64 => 1e-10,
        crate::scalar::DType::F32 => 1e-5,
    }
}

/// Comparison of one shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftRecord {
    pub shift: ShiftOp,
    /// Border band excluded on every side, in input pixels.
    pub margin: usize,
    /// Output rows and columns compared, half-open.
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub compared: usize,
    pub passed: usize,
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    pub mean_abs_ref: f64,
    pub verdict: Verdict,
}

impl ShiftRecord {
    pub fn te_score(&self) -> f64 {
        self.passed as f64 / self.compared as f64
    }
}

/// Result of auditing one operator over a list of shifts.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivReport {
    pub op: String,
    pub margin: Margin,
    pub tol: f64,
    pub records: Vec<ShiftRecord>,
    /// Fraction of all compared pixels, over every shift, within `tol`.
    pub te_score: f64,
    pub verdict: Verdict,
}

impl EquivReport {
    /// Assembles a report from per-shift records, kept in the given order.
    pub fn new(op: impl Into<String>, margin: Margin, tol: f64, records: Vec<ShiftRecord>) -> Self {
        let compared: usize = records.iter().map(|r| r.compared).sum();
        let passed: usize = records.iter().map(|r| r.passed).sum();
        let te_score = if compared == 0 { 1.0 } else { passed as f64 / compared as f64 };
        let verdict = records.iter().map(|r| r.verdict).max().unwrap_or(Verdict::Exact);
        Self {
            op: op.into(),
            margin,
            tol,
            records,
            te_score,
            verdict,
        }
    }

    pub fn max_abs_dev(&self) -> f64 {
        self.records.iter().map(|r| r.max_abs_dev).fold(0.0, f64::max)
    }

    /// Aligned, human-readable table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "op {}  margin {}  tol {:e}", self.op, self.margin.describe(), self.tol);
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>9} {:>12} {:>12} {:>8}  verdict",
            "dy", "dx", "margin", "compared", "max_dev", "mean_dev", "score"
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{:>6} {:>6} {:>6} {:>9} {:>12.3e} {:>12.3e} {:>8.4}  {}",
                r.shift.dy,
                r.shift.dx,
                r.margin,
                r.compared,
                r.max_abs_dev,
                r.mean_abs_dev,
                r.te_score(),
                r.verdict
            );
        }
        let _ = writeln!(s, "te_score {:.6}  verdict {}", self.te_score, self.verdict);
        s
    }

    /// One `key=value` record per shift, then a summary record.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "op={} dy={} dx={} mode={} margin={} rows={}..{} cols={}..{} compared={} passed={} max_abs_dev={:.17e} mean_abs_dev={:.17e} verdict={}",
                self.op,
                r.shift.dy,
                r.shift.dx,
                match r.shift.mode {
                    ShiftMode::Cyclic => "cyclic",
                    ShiftMode::Crop => "crop",
                },
                r.margin,
                r.rows.0,
                r.rows.1,
                r.cols.0,
                r.cols.1,
                r.compared,
                r.passed,
                r.max_abs_dev,
                r.mean_abs_dev,
                r.verdict
            );
        }
        let _ = writeln!(
            s,
            "op={} summary=1 margin={} tol={:e} shifts={} te_score={:.17e} verdict={}",
            self.op,
            self.margin.describe(),
            self.tol,
            self.records.len(),
            self.te_score,
            self.verdict
        );
        s
    }
}

/// Checks one shift against an already computed `reference = op(x)`.
pub fn audit_shift<T: Scalar>(
    op: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    reference: &Tensor<T>,
    shift: ShiftOp,
    tol: f64,
    margin: Margin,
) -> Result<ShiftRecord> {
    let (h, w, _) = x.dims3("audit")?;
    let (oh, ow, oc) = reference.dims3("audit")?;
    if oh % h != 0 || ow % w != 0 || oh / h != ow / w {
        return invalid("audit", format!("output {oh}x{ow} is not an integer upscale of {h}x{w}"));
    }
    let r = oh / h;
    let promised = margin.promises(shift);
    let m = margin.local;
    let (ay, ax) = (shift.dy.unsigned_abs() as usize, shift.dx.unsigned_abs() as usize);
    if 2 * (m + ay) >= h || 2 * (m + ax) >= w {
        return Err(TeaError::EmptyRegion(format!(
            "margin {m} with shift ({}, {}) leaves nothing of {h}x{w}",
            shift.dy, shift.dx
        )));
    }
    let rows = (r * (m + ay), r * (h - m - ay));
    let cols = (r * (m + ax), r * (w - m - ax));

    let moved = op(&shift.apply(x)?)?;
    if moved.shape() != reference.shape() {
        return invalid("audit", "operator output shape depends on the shift");
    }
    let expected = shift.scaled(r).apply(reference)?;

    let (mut compared, mut passed) = (0usize, 0usize);
    let (mut max_dev, mut sum_dev, mut sum_ref) = (0.0f64, 0.0f64, 0.0f64);
    for y in rows.0..rows.1 {
        for xx in cols.0..cols.1 {
            let a = moved.pixel(y, xx);
            let b = expected.pixel(y, xx);
            let mut dev = 0.0f64;
            for c in 0..oc {
                let d = (a[c] - b[c]).abs().as_f64();
                if !d.is_finite() {
                    return Err(TeaError::NonFinite("audit deviation"));
                }
                dev = dev.max(d);
                sum_dev += d;
                sum_ref += b[c].abs().as_f64();
            }
            max_dev = max_dev.max(dev);
            compared += 1;
            if dev <= tol {
                passed += 1;
            }
        }
    }
    let n = (compared * oc) as f64;
    let (mean_dev, mean_ref) = (sum_dev / n, sum_ref / n);
    let verdict = if passed == compared {
        if m == 0 && promised {
            Verdict::Exact
        } else {
            Verdict::InteriorExact
        }
    } else if mean_dev <= APPROX_REL_DEV * mean_ref {
        Verdict::Approximate
    } else {
        Verdict::Fail
    };
    Ok(ShiftRecord {
        shift,
        margin: m,
        rows,
        cols,
        compared,
        passed,
        max_abs_dev: max_dev,
        mean_abs_dev: mean_dev,
        mean_abs_ref: mean_ref,
        verdict,
    })
}

/// Shifts may move at most a quarter of the shorter side.
pub fn check_shift_bounds(h: usize, w: usize, shifts: &[ShiftOp]) -> Result<()> {
    for s in shifts {
        if 4 * s.magnitude() as usize > h.min(w) {
            return invalid("audit", format!("shift ({}, {}) exceeds a quarter of {h}x{w}", s.dy, s.dx));
        }
    }
    Ok(())
}

/// Audits `op` on `x` for every shift, sequentially and in order.
pub fn audit<T: Scalar>(
    name: &str,
    op: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    shifts: &[ShiftOp],
    tol: f64,
    margin: Margin,
) -> Result<EquivReport> {
    let (h, w, _) = x.dims3("audit")?;
    check_shift_bounds(h, w, shifts)?;
    let reference = op(x)?;
    let records = shifts
        .iter()
        .map(|&s| audit_shift(op, x, &reference, s, tol, margin))
        .collect::<Result<Vec<_>>>()?;
    Ok(EquivReport::new(name, margin, tol, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    Serial,
    Parallel,
}

/// An operator together with its declared margin.
pub struct Certified<'a, T> {
    pub name: String,
    pub op: Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a>,
    pub margin: Margin,
}

impl<'a, T: Scalar> Certified<'a, T> {
    pub fn new(name: impl Into<String>, margin: Margin, op: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a) -> Self {
        Self {
            name: name.into(),
            op: Box::new(op),
            margin,
        }
    }
}

/// Audits the serial chain (first applied first) or the parallel sum of
/// `ops` under the combined margin.
pub fn audit_composition<T: Scalar>(
    ops: &[Certified<'_, T>],
    mode: Composition,
    x: &Tensor<T>,
    shifts: &[ShiftOp],
    tol: f64,
) -> Result<EquivReport> {
    if ops.is_empty() {
        return invalid("audit_composition", "no operators");
    }
    let (h, w, _) = x.dims3("audit_composition")?;
    let margin = match mode {
        Composition::Serial => ops.iter().skip(1).fold(ops[0].margin, |m, o| m.then(o.margin)),
        Composition::Parallel => ops.iter().skip(1).fold(ops[0].margin, |m, o| m.alongside(o.margin)),
    };
    if 2 * margin.local >= h.min(w) {
        return Err(TeaError::EmptyRegion(format!("combined margin {} exceeds {h}x{w}", margin.local)));
    }
    let sep = match mode {
        Composition::Serial => " ; ",
        Composition::Parallel => " + ",
    };
    let name = ops.iter().map(|o| o.name.as_str()).collect::<Vec<_>>().join(sep);
    let composed = |t: &Tensor<T>| -> Result<Tensor<T>> {
        match mode {
            Composition::Serial => {
                let mut cur = t.clone();
                for o in ops {
                    cur = (o.op)(&cur)?;
                }
                Ok(cur)
            }
            Composition::Parallel => {
                let mut acc = (ops[0].op)(t)?;
                for o in &ops[1..] {
                    acc = acc.add(&(o.op)(t)?)?;
                }
                Ok(acc)
            }
        }
    };
    audit(&name, &composed, x, shifts, tol, margin)
}

/// Mean per-shift score over `[0, max_shift]²` without the identity.
pub fn te_score_sweep<T: Scalar>(
    op: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    max_shift: i64,
    tol: f64,
    margin: Margin,
) -> Result<f64> {
    let report = audit("sweep", op, x, &sweep(max_shift), tol, margin)?;
    let n = report.records.len().max(1) as f64;
    Ok(report.records.iter().map(ShiftRecord::te_score).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d_depthwise, PadMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn cyclic_shift_round_trips() {
        let x = Tensor::<f64>::uniform(&[5, 7, 2], -1.0, 1.0, &mut rng(1));
        let s = ShiftOp::cyclic(2, -3);
        let back = ShiftOp::cyclic(-2, 3).apply(&s.apply(&x).unwrap()).unwrap();
        assert_eq!(back, x);
        assert_eq!(s.apply(&x).unwrap().at3(2, 0, 1), x.at3(0, 3, 1));
    }

    #[test]
    fn crop_shift_zero_fills() {
        let x = Tensor::<f64>::full(&[4, 4, 1], 1.0);
        let y = ShiftOp::crop(1, 0).apply(&x).unwrap();
        assert_eq!(y.at3(0, 2, 0), 0.0);
        assert_eq!(y.at3(1, 2, 0), 1.0);
    }

    #[test]
    fn parses_shift_lists() {
        assert_eq!(parse_shifts("2,3", ShiftMode::Cyclic).unwrap(), vec![ShiftOp::cyclic(2, 3)]);
        assert_eq!(parse_shifts("1,0; -1,2", ShiftMode::Cyclic).unwrap().len(), 2);
        assert_eq!(parse_shifts("sweep:4", ShiftMode::Cyclic).unwrap().len(), 24);
        assert!(parse_shifts("sweep:0", ShiftMode::Cyclic).is_err());
        assert!(parse_shifts("1", ShiftMode::Cyclic).is_err());
        assert!(parse_shifts("", ShiftMode::Cyclic).is_err());
    }

    #[test]
    fn margin_algebra() {
        let l = Margin::local;
        assert_eq!(l(2).then(l(3)), l(5));
        assert_eq!(l(2).alongside(l(3)), l(3));
        let p = Margin::pooled(0, (4, 4));
        assert_eq!(l(0).then(p), p);
        assert_eq!(l(1).then(p), Margin::global(1));
        assert_eq!(p.then(l(3)), Margin::pooled(3, (4, 4)));
        assert_eq!(p.alongside(l(3)), Margin::pooled(3, (4, 4)));
        assert_eq!(p.alongside(Margin::pooled(1, (6, 2))), Margin::pooled(1, (12, 4)));
        assert_eq!(Margin::global(2).alongside(l(5)), Margin::global(5));
        assert!(p.promises(ShiftOp::cyclic(8, -4)));
        assert!(!p.promises(ShiftOp::cyclic(2, 0)));
        assert!(!p.promises(ShiftOp::crop(4, 0)));
        assert!(!Margin::global(0).promises(ShiftOp::cyclic(0, 1)));
    }

    #[test]
    fn identity_and_constant_ops_score_one() {
        let x = Tensor::<f64>::uniform(&[16, 16, 2], -1.0, 1.0, &mut rng(2));
        let id = |t: &Tensor<f64>| Ok(t.clone());
        assert_eq!(te_score_sweep(&id, &x, 3, 1e-10, Margin::local(0)).unwrap(), 1.0);
        let zero = |t: &Tensor<f64>| Ok(Tensor::zeros(t.shape()));
        assert_eq!(te_score_sweep(&zero, &x, 3, 1e-10, Margin::global(0)).unwrap(), 1.0);
    }

    #[test]
    fn replicate_conv_is_interior_exact() {
        let mut r = rng(3);
        let x = Tensor::<f64>::uniform(&[20, 20, 3], -1.0, 1.0, &mut r);
        let k = Tensor::<f64>::uniform(&[3, 3, 3], -1.0, 1.0, &mut r);
        let op = |t: &Tensor<f64>| conv2d_depthwise(t, &k, PadMode::Replicate);
        let shifts = [ShiftOp::cyclic(1, 0), ShiftOp::cyclic(0, 1), ShiftOp::cyclic(3, 5)];
        let rep = audit("conv", &op, &x, &shifts, 1e-12, Margin::conv(3)).unwrap();
        assert_eq!(rep.verdict, Verdict::InteriorExact);
        assert!(rep.max_abs_dev() <= 1e-12);
        assert_eq!(rep.te_score, 1.0);
        // the border does break equivariance
        let full = audit("conv", &op, &x, &shifts, 1e-12, Margin::local(0)).unwrap();
        assert!(full.te_score < 1.0);
    }

    #[test]
    fn serial_convs_compose() {
        let mut r = rng(4);
        let x = Tensor::<f64>::uniform(&[24, 24, 2], -1.0, 1.0, &mut r);
        let k1 = Tensor::<f64>::uniform(&[3, 3, 2], -1.0, 1.0, &mut r);
        let k2 = Tensor::<f64>::uniform(&[5, 5, 2], -1.0, 1.0, &mut r);
        let ops = [
            Certified::new("c3", Margin::conv(3), move |t: &Tensor<f64>| conv2d_depthwise(t, &k1, PadMode::Replicate)),
            Certified::new("c5", Margin::conv(5), move |t: &Tensor<f64>| conv2d_depthwise(t, &k2, PadMode::Zero)),
        ];
        let rep = audit_composition(&ops, Composition::Serial, &x, &sweep(2), 1e-10).unwrap();
        assert_eq!(rep.margin, Margin::local(3));
        assert!(rep.verdict.is_equivariant(), "{}", rep.to_text());
        let rep = audit_composition(&ops, Composition::Parallel, &x, &sweep(2), 1e-10).unwrap();
        assert_eq!(rep.margin, Margin::local(2));
        assert!(rep.verdict.is_equivariant());
    }

    #[test]
    fn empty_region_and_large_shift_error() {
        let x = Tensor::<f64>::zeros(&[8, 8, 1]);
        let id = |t: &Tensor<f64>| Ok(t.clone());
        assert!(matches!(
            audit("id", &id, &x, &[ShiftOp::cyclic(1, 0)], 1e-10, Margin::local(3)),
            Err(TeaError::EmptyRegion(_))
        ));
        assert!(audit("id", &id, &x, &[ShiftOp::cyclic(3, 0)], 1e-10, Margin::local(0)).is_err());
    }

    #[test]
    fn report_formats() {
        let x = Tensor::<f64>::uniform(&[8, 8, 1], -1.0, 1.0, &mut rng(5));
        let id = |t: &Tensor<f64>| Ok(t.clone());
        let rep = audit("id", &id, &x, &sweep(1), 1e-10, Margin::local(0)).unwrap();
        assert_eq!(rep.verdict, Verdict::Exact);
        assert_eq!(rep.to_kv().lines().count(), 4);
        assert!(rep.to_text().contains("verdict exact"));
    }
}
