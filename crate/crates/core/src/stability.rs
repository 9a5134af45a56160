//! Instrumented exponential for the stabilized exp-gate paths.
//!
//! Every exponential whose argument must be non-positive by construction goes
//! through [`exp_le0`]. The probe counts calls and violations per thread, so
//! a test can wrap a single-threaded run and assert the bound held.

use std::cell::Cell;

thread_local! {
    static CALLS: Cell<u64> = const { Cell::new(0) };
    static VIOLATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Counters collected by [`probe`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StabilityReport {
    pub calls: u64,
    pub violations: u64,
}

impl StabilityReport {
    pub fn merge(self, other: StabilityReport) -> StabilityReport {
        StabilityReport {
            calls: self.calls + other.calls,
            violations: self.violations + other.violations,
        }
    }
}

/// `exp(x)` for arguments that must be `<= 0`. A positive or NaN argument is
/// recorded as a violation but still evaluated.
#[inline]
pub fn exp_le0(x: f64) -> f64 {
    CALLS.with(|c| c.set(c.get() + 1));
    if !(x <= 0.0) {
        VIOLATIONS.with(|v| v.set(v.get() + 1));
    }
    x.exp()
}

/// Run `f` and report how many guarded exponentials it evaluated on this
/// thread and how many of those had a positive argument.
pub fn probe<R>(f: impl FnOnce() -> R) -> (R, StabilityReport) {
    let c0 = CALLS.with(|c| c.get());
    let v0 = VIOLATIONS.with(|v| v.get());
    let out = f();
    let report = StabilityReport {
        calls: CALLS.with(|c| c.get()) - c0,
        violations: VIOLATIONS.with(|v| v.get()) - v0,
    };
    (out, report)
}
