use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TeaError};
use crate::ops::{KeySet, Pool};

/// Hyperparameters of the sliding and downsampled attention branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlideSpec {
    /// Taps per axis of the sliding window (odd).
    pub window: usize,
    /// Dilation between neighbouring taps.
    pub stride: usize,
    /// Side of the depthwise offset kernel (odd).
    pub offset_kernel: usize,
    /// Number of pooled global tokens (a perfect square).
    pub pooled_tokens: usize,
    pub pool: Pool,
}

impl Default for SlideSpec {
    fn default() -> Self {
        Self {
            window: 15,
            stride: 4,
            offset_kernel: 3,
            pooled_tokens: 16,
            pool: Pool::Avg,
        }
    }
}

fn spec_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TeaError::Spec(msg.into()))
}

impl SlideSpec {
    pub fn new(window: usize, stride: usize, offset_kernel: usize, pooled_tokens: usize) -> Result<Self> {
        if window == 0 || window.is_multiple_of(2) {
            return spec_err(format!("window must be odd and positive, got {window}"));
        }
        if stride == 0 {
            return spec_err("stride must be positive");
        }
        if offset_kernel == 0 || offset_kernel.is_multiple_of(2) {
            return spec_err(format!("offset kernel must be odd and positive, got {offset_kernel}"));
        }
        let side = (pooled_tokens as f64).sqrt().round() as usize;
        if pooled_tokens == 0 || side * side != pooled_tokens {
            return spec_err(format!("pooled token count must be a positive square, got {pooled_tokens}"));
        }
        Ok(Self {
            window,
            stride,
            offset_kernel,
            pooled_tokens,
            pool: Pool::Avg,
        })
    }

    pub fn with_pool(mut self, pool: Pool) -> Self {
        self.pool = pool;
        self
    }

    /// Side `g` of the `g×g` pooled grid.
    pub fn pool_side(&self) -> usize {
        (self.pooled_tokens as f64).sqrt().round() as usize
    }

    /// Distance from the query to the outermost tap of a centered window.
    pub fn half_span(&self) -> usize {
        (self.window - 1) * self.stride / 2
    }

    /// Pixels covered by one window along an axis.
    pub fn footprint(&self) -> usize {
        (self.window - 1) * self.stride + 1
    }

    /// Smallest image side the spec can slide over.
    pub fn min_side(&self) -> usize {
        (self.window * self.stride).max(self.pool_side())
    }

    pub fn keys_per_query(&self) -> usize {
        self.window * self.window
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        let need = self.window * self.stride;
        if need > height.min(width) {
            return spec_err(format!(
                "window {} with stride {} needs a side of at least {need}, image is {height}x{width}",
                self.window, self.stride
            ));
        }
        let g = self.pool_side();
        if g > height.min(width) {
            return spec_err(format!("pooled grid {g}x{g} larger than image {height}x{width}"));
        }
        Ok(())
    }
}

impl fmt::Display for SlideSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.window, self.stride, self.offset_kernel, self.pooled_tokens)
    }
}

impl FromStr for SlideSpec {
    type Err = TeaError;

    /// `w,s,k,nd`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| TeaError::Spec(format!("expected w,s,k,nd, got {s:?}")))?;
        match parts[..] {
            [w, st, k, nd] => Self::new(w, st, k, nd),
            _ => spec_err(format!("expected w,s,k,nd, got {s:?}")),
        }
    }
}

/// How a window was placed along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Centered,
    /// Would start before the first pixel; anchored at 0.
    BlockedLow,
    /// Would end past the last pixel; anchored to end there.
    BlockedHigh,
}

/// Key coordinates of one query's sliding window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowIndex {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub row_mode: Boundary,
    pub col_mode: Boundary,
}

impl WindowIndex {
    /// All `w²` key coordinates in raster order.
    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }
}

fn axis_start(pos: usize, len: usize, spec: &SlideSpec) -> (usize, Boundary) {
    let span = (spec.window - 1) * spec.stride;
    let half = spec.half_span();
    if pos < half {
        (0, Boundary::BlockedLow)
    } else if pos - half + span > len - 1 {
        (len - 1 - span, Boundary::BlockedHigh)
    } else {
        (pos - half, Boundary::Centered)
    }
}

pub fn build_window_index(row: usize, col: usize, height: usize, width: usize, spec: &SlideSpec) -> Result<WindowIndex> {
    if spec.window * spec.stride > height.min(width) {
        return spec_err(format!(
            "window {}x{} at stride {} does not fit {height}x{width}",
            spec.window, spec.window, spec.stride
        ));
    }
    if row >= height || col >= width {
        return Err(TeaError::Invalid {
            op: "build_window_index",
            detail: format!("query ({row}, {col}) outside {height}x{width}"),
        });
    }
    let (r0, row_mode) = axis_start(row, height, spec);
    let (c0, col_mode) = axis_start(col, width, spec);
    let taps = |start: usize| (0..spec.window).map(|a| start + a * spec.stride).collect();
    Ok(WindowIndex {
        rows: taps(r0),
        cols: taps(c0),
        row_mode,
        col_mode,
    })
}

/// Flat key table for every query of an image, raster order per query.
pub fn window_keys(height: usize, width: usize, spec: &SlideSpec) -> Result<KeySet> {
    spec.validate_for(height, width)?;
    let w = spec.window;
    let mut keys = Vec::with_capacity(height * width * w * w);
    let nudge = usize::from(crate::fault::is(crate::fault::Fault::WindowShift));
    let row_starts: Vec<usize> = (0..height)
        .map(|r| axis_start((r + nudge).min(height - 1), height, spec).0)
        .collect();
    let col_starts: Vec<usize> = (0..width).map(|c| axis_start(c, width, spec).0).collect();
    for &r0 in &row_starts {
        for &c0 in &col_starts {
            for a in 0..w {
                let r = r0 + a * spec.stride;
                for b in 0..w {
                    keys.push((r * width + c0 + b * spec.stride) as u32);
                }
            }
        }
    }
    Ok(KeySet::table(w * w, keys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_bundle() {
        let s = SlideSpec::default();
        assert_eq!((s.window, s.stride, s.offset_kernel, s.pooled_tokens), (15, 4, 3, 16));
        assert_eq!(s.pool_side(), 4);
        assert_eq!(s.half_span(), 28);
        assert_eq!("15,4,3,16".parse::<SlideSpec>().unwrap(), s);
        assert_eq!(s.to_string(), "15,4,3,16");
    }

    #[test]
    fn rejects_bad_bundles() {
        assert!(SlideSpec::new(4, 1, 3, 16).is_err());
        assert!(SlideSpec::new(5, 0, 3, 16).is_err());
        assert!(SlideSpec::new(5, 1, 2, 16).is_err());
        assert!(SlideSpec::new(5, 1, 3, 15).is_err());
        assert!("5,1,3".parse::<SlideSpec>().is_err());
        assert!(SlideSpec::default().validate_for(59, 64).is_err());
        assert!(SlideSpec::default().validate_for(60, 64).is_ok());
    }

    #[test]
    fn interior_window_is_centered() {
        let spec = SlideSpec::default();
        let idx = build_window_index(32, 32, 64, 64, &spec).unwrap();
        assert_eq!(idx.rows.len(), 15);
        assert_eq!(idx.rows[0], 4);
        assert_eq!(*idx.rows.last().unwrap(), 60);
        assert_eq!(idx.row_mode, Boundary::Centered);
    }

    #[test]
    fn edges_block() {
        let spec = SlideSpec::default();
        let top = build_window_index(0, 63, 64, 64, &spec).unwrap();
        assert_eq!(top.rows, (0..15).map(|a| a * 4).collect::<Vec<_>>());
        assert_eq!(top.row_mode, Boundary::BlockedLow);
        assert_eq!(*top.cols.last().unwrap(), 63);
        assert_eq!(top.col_mode, Boundary::BlockedHigh);
    }

    #[test]
    fn every_tap_in_bounds_on_61() {
        let spec = SlideSpec::new(15, 4, 3, 16).unwrap();
        for r in 0..61 {
            for c in 0..61 {
                let idx = build_window_index(r, c, 61, 61, &spec).unwrap();
                assert_eq!(idx.keys().count(), 225);
                assert!(idx.keys().all(|(a, b)| a < 61 && b < 61));
            }
        }
    }

    #[test]
    fn too_small_image_errors() {
        let spec = SlideSpec::new(7, 2, 3, 16).unwrap();
        assert!(build_window_index(0, 0, 13, 20, &spec).is_err());
        assert!(window_keys(13, 20, &spec).is_err());
    }
}
