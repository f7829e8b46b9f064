//! Accounting for auxiliary (scratch) allocations made inside kernels.
//!
//! Kernels announce large scratch buffers with [`reserve`]; a caller wraps
//! a computation in [`measure_peak`] to learn the high-water mark. The meter
//! is thread-local, so concurrent measurements on different threads do not
//! interfere.

use std::cell::Cell;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Live reservation; releases its bytes when dropped.
#[must_use = "a reservation is released as soon as it is dropped"]
pub struct Reservation {
    bytes: usize,
}

impl Drop for Reservation {
    fn drop(&mut self) {
        CURRENT.with(|c| c.set(c.get() - self.bytes));
    }
}

/// Records `bytes` of live scratch memory until the guard is dropped.
pub fn reserve(bytes: usize) -> Reservation {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| p.set(p.get().max(now)));
    });
    Reservation { bytes }
}

/// Convenience for `f32` buffers.
pub fn reserve_f32(elems: usize) -> Reservation {
    reserve(elems * std::mem::size_of::<f32>())
}

/// Runs `f` and returns its result with the peak scratch bytes reserved
/// during the call (relative to the level at entry).
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.with(Cell::get);
    let outer_peak = PEAK.with(|p| p.replace(base));
    let out = f();
    let inner_peak = PEAK.with(Cell::get);
    PEAK.with(|p| p.set(outer_peak.max(inner_peak)));
    (out, inner_peak - base)
}
