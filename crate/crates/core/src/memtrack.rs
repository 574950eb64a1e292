//! Per-thread accounting of live [`ScalarField3D`](crate::grid::ScalarField3D) buffers.
//!
//! Counts are thread-local so concurrently running computations (and tests)
//! do not see each other's fields.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn acquire() {
    LIVE.with(|live| {
        let n = live.get() + 1;
        live.set(n);
        PEAK.with(|peak| {
            if n > peak.get() {
                peak.set(n);
            }
        });
    });
}

pub(crate) fn release() {
    LIVE.with(|live| live.set(live.get().saturating_sub(1)));
}

/// Fields currently alive on this thread.
pub fn live_fields() -> usize {
    LIVE.with(Cell::get)
}

/// Highest live count since the last [`reset_peak`].
pub fn peak_fields() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak() {
    let live = live_fields();
    PEAK.with(|peak| peak.set(live));
}
