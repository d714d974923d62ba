//! Opt-in operation counter used to audit the static analyzer.
//!
//! Every tape op reports its cost here. Counting is thread-local and off
//! unless a [`count_ops`] scope is active.
//!
//! Cost convention (shared with [`crate::analyzer`]): convolutions and linear
//! layers cost one unit per multiply-accumulate; group norms, activations and
//! the elementwise multiplies of modulation and gating cost one unit per
//! output element; additions, concatenation, resampling and table lookups are
//! free.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Multiply-accumulates of stride-1 3×3 convolutions.
    pub conv3x3_s1: u64,
    /// Multiply-accumulates of all other convolutions.
    pub conv_other: u64,
    pub linear: u64,
    pub elementwise: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.conv3x3_s1 + self.conv_other + self.linear + self.elementwise
    }
}

thread_local! {
    static COUNTS: Cell<Option<OpCounts>> = const { Cell::new(None) };
}

pub(crate) fn record(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        if let Some(mut counts) = c.get() {
            f(&mut counts);
            c.set(Some(counts));
        }
    });
}

/// Runs `f` and returns its result along with the cost of every op it executed.
pub fn count_ops<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let prev = COUNTS.with(|c| c.replace(Some(OpCounts::default())));
    let out = f();
    let counts = COUNTS.with(|c| c.replace(prev)).unwrap_or_default();
    (out, counts)
}
