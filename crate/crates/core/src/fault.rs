//! Process-wide switch that plants a known bug in one kernel, so the self
//! test can demonstrate that its batteries catch it.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Attention scores skip the `1/√D` temperature.
    SoftmaxScale,
    /// Sliding windows are centred one row too low.
    WindowShift,
    /// The score half of attention over-reports its MACs.
    MacCount,
}

impl Fault {
    pub const ALL: [Fault; 3] = [Fault::SoftmaxScale, Fault::WindowShift, Fault::MacCount];

    pub fn name(self) -> &'static str {
        match self {
            Fault::None => "none",
            Fault::SoftmaxScale => "softmax-scale",
            Fault::WindowShift => "window-shift",
            Fault::MacCount => "mac-count",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Fault::None].into_iter().chain(Self::ALL).find(|f| f.name() == s)
    }

    fn code(self) -> u8 {
        self as u8
    }
}

static ACTIVE: AtomicU8 = AtomicU8::new(0);

/// Activates `fault` for the whole process until replaced.
pub fn inject(fault: Fault) {
    ACTIVE.store(fault.code(), Ordering::SeqCst);
}

pub fn active() -> Fault {
    match ACTIVE.load(Ordering::Relaxed) {
        1 => Fault::SoftmaxScale,
        2 => Fault::WindowShift,
        3 => Fault::MacCount,
        _ => Fault::None,
    }
}

#[inline]
pub(crate) fn is(f: Fault) -> bool {
    active() == f
}
