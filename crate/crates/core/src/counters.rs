//! Thread-local operation counters.
//!
//! Forward kernels add the multiply-accumulates they execute to
//! [`macs`]; the parallel scan adds every application of its associative
//! operator to [`scan_combines`]. Backward kernels never count. The cost
//! model is checked against these counters.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static SCAN_COMBINES: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

#[inline]
pub(crate) fn add_scan_combines(n: u64) {
    SCAN_COMBINES.with(|c| c.set(c.get() + n));
}

pub fn macs() -> u64 {
    MACS.with(Cell::get)
}

pub fn scan_combines() -> u64 {
    SCAN_COMBINES.with(Cell::get)
}

pub fn reset() {
    MACS.with(|c| c.set(0));
    SCAN_COMBINES.with(|c| c.set(0));
}

/// Runs `f` and returns its result with the MACs it executed.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = macs();
    let r = f();
    (r, macs() - before)
}
