//! Non-overlapping window attention with a relative position bias table, the
//! baseline the sliding operators are compared against.

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::ops::{AttendPhases, BiasIndex, KeySet};
use crate::scalar::Scalar;

use crate::mac::Phase;

use super::graph::{image_dims, project};

/// Entries of a relative position bias table for `m×m` windows.
pub fn bias_table_len(m: usize) -> usize {
    (2 * m - 1) * (2 * m - 1)
}

/// Key table and bias lookup for `m×m` windows on a grid rolled by `shift`
/// pixels along both axes. Windows wrap around the image edge.
pub fn partition_index(height: usize, width: usize, m: usize, shift: usize) -> Result<(KeySet, BiasIndex)> {
    if m == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return invalid("partition_index", format!("{height}x{width} is not tiled by {m}x{m} windows"));
    }
    let span = 2 * m - 1;
    let mut keys = Vec::with_capacity(height * width * m * m);
    let mut bias = Vec::with_capacity(height * width * m * m);
    for r in 0..height {
        let rr = (r + height - shift % height) % height;
        let (wr, qa) = (rr / m, rr % m);
        for c in 0..width {
            let cc = (c + width - shift % width) % width;
            let (wc, qb) = (cc / m, cc % m);
            for a in 0..m {
                let kr = (wr * m + a + shift) % height;
                for b in 0..m {
                    let kc = (wc * m + b + shift) % width;
                    keys.push((kr * width + kc) as u32);
                    bias.push(((a + m - 1 - qa) * span + (b + m - 1 - qb)) as u32);
                }
            }
        }
    }
    Ok((
        KeySet::table(m * m, keys),
        BiasIndex {
            index: bias.into(),
            table_len: span * span,
        },
    ))
}

/// Window attention over `x` (`[H, W, D]`) with learned `bias` of length
/// [`bias_table_len`]; `proj` holds the Q, K and V projections.
pub fn window_partition_attention<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    proj: [Var; 3],
    bias: Var,
    m: usize,
    shift: usize,
) -> Result<Var> {
    let (h, w, d) = image_dims(tape, x, "window_partition_attention")?;
    let (keys, index) = partition_index(h, w, m, shift)?;
    let rows = tape.reshape(x, &[h * w, d])?;
    let [q, k, v] = proj.map(|wt| project(tape, rows, wt, Phase::QkvProj));
    let out = tape.attend(q?, k?, v?, &keys, Some((bias, &index)), AttendPhases::WINDOW)?;
    tape.reshape(out, &[h, w, d])
}
