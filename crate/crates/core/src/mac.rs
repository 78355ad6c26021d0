//! Thread-local multiply-accumulate counter with phase attribution.
//!
//! Kernels call [`record`] with the number of MACs they perform. Nothing is
//! counted unless a [`MacCounter`] is active on the current thread; the phase
//! a count is charged to is whatever [`in_phase`] scope encloses the call.
//! Counting runs are single-threaded by contract, so no atomics are needed.

use std::cell::RefCell;

use crate::error::{Result, TeaError};

/// Attribution bucket for counted work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    /// Query/key/value projections.
    QkvProj,
    /// Depth-wise convolutions that generate adaptive offsets.
    OffsetConv,
    /// Channel reduction of the offset features to two coordinates.
    OffsetReduce,
    /// Query-key similarity inside the sliding window.
    AttnMap,
    /// Attention-weighted sum of values inside the sliding window.
    Reweight,
    /// Both halves of downsampled attention.
    Dsa,
    /// Anything not named above (convolutions, feed-forward, heads).
    Other,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::QkvProj,
        Phase::OffsetConv,
        Phase::OffsetReduce,
        Phase::AttnMap,
        Phase::Reweight,
        Phase::Dsa,
        Phase::Other,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::QkvProj => "qkv_proj",
            Phase::OffsetConv => "offset_convs",
            Phase::OffsetReduce => "offset_reduce",
            Phase::AttnMap => "attn_map",
            Phase::Reweight => "reweight",
            Phase::Dsa => "dsa",
            Phase::Other => "other",
        }
    }
}

/// Per-phase MAC totals plus the softmax exponentials, which are tallied
/// separately because the analytic cost model leaves them out.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    macs: [u128; 7],
    exps: u128,
    enabled: bool,
}

impl MacCounter {
    pub fn macs(&self, phase: Phase) -> u128 {
        self.macs[phase.slot()]
    }

    pub fn total_macs(&self) -> u128 {
        self.macs.iter().sum()
    }

    pub fn exps(&self) -> u128 {
        self.exps
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// Runs `f` with a fresh counter enabled on this thread and returns the
    /// counts it accumulated. Nested runs are isolated from the outer one.
    pub fn run<R>(f: impl FnOnce() -> R) -> (R, MacCounter) {
        let saved = STATE.with(|s| {
            std::mem::replace(
                &mut *s.borrow_mut(),
                State {
                    counter: MacCounter {
                        enabled: true,
                        ..MacCounter::default()
                    },
                    phase: Phase::Other,
                },
            )
        });
        let out = f();
        let state = STATE.with(|s| std::mem::replace(&mut *s.borrow_mut(), saved));
        (out, state.counter)
    }
}

struct State {
    counter: MacCounter,
    phase: Phase,
}

thread_local! {
    static STATE: RefCell<State> = const {
        RefCell::new(State {
            counter: MacCounter { macs: [0; 7], exps: 0, enabled: false },
            phase: Phase::Other,
        })
    };
}

/// Charges `n` MACs to the current phase if counting is enabled.
#[inline]
pub fn record(n: u128) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.counter.enabled {
            let slot = s.phase.slot();
            s.counter.macs[slot] += n;
        }
    });
}

/// Charges `n` MACs to an explicit phase regardless of the enclosing scope.
#[inline]
pub fn record_in(phase: Phase, n: u128) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.counter.enabled {
            s.counter.macs[phase.slot()] += n;
        }
    });
}

#[inline]
pub fn record_exps(n: u128) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        if s.counter.enabled {
            s.counter.exps += n;
        }
    });
}

/// Runs `f` with `phase` as the attribution target.
pub fn in_phase<R>(phase: Phase, f: impl FnOnce() -> R) -> R {
    let prev = STATE.with(|s| std::mem::replace(&mut s.borrow_mut().phase, phase));
    let out = f();
    STATE.with(|s| s.borrow_mut().phase = prev);
    out
}

pub fn current_phase() -> Phase {
    STATE.with(|s| s.borrow().phase)
}

/// Snapshot of the active counter; errors when counting is not enabled.
pub fn snapshot() -> Result<MacCounter> {
    STATE.with(|s| {
        let s = s.borrow();
        if s.counter.enabled {
            Ok(s.counter.clone())
        } else {
            Err(TeaError::CounterDisabled)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_counted_when_disabled() {
        record(10);
        assert!(snapshot().is_err());
        let ((), c) = MacCounter::run(|| {});
        assert_eq!(c.total_macs(), 0);
    }

    #[test]
    fn phases_attribute_and_restore() {
        let ((), c) = MacCounter::run(|| {
            record(1);
            in_phase(Phase::AttnMap, || {
                record(5);
                in_phase(Phase::Dsa, || record(7));
                record(2);
            });
            record_in(Phase::QkvProj, 3);
            record_exps(4);
        });
        assert_eq!(c.macs(Phase::Other), 1);
        assert_eq!(c.macs(Phase::AttnMap), 7);
        assert_eq!(c.macs(Phase::Dsa), 7);
        assert_eq!(c.macs(Phase::QkvProj), 3);
        assert_eq!(c.exps(), 4);
        assert_eq!(c.total_macs(), 18);
        assert_eq!(current_phase(), Phase::Other);
    }

    #[test]
    fn nested_runs_are_isolated() {
        let ((), outer) = MacCounter::run(|| {
            record(2);
            let ((), inner) = MacCounter::run(|| record(3));
            assert_eq!(inner.total_macs(), 3);
            record(1);
        });
        assert_eq!(outer.total_macs(), 3);
    }
}
