//! Multiply-add meter for the forward kernels.
//!
//! Kernels charge this global counter as they run, using the same convention
//! the analytic cost model uses (one fused multiply-add per FLOP; pooling
//! windows charged at full kernel area; comparisons counted like adds; bias
//! adds absorbed into the MAC). That makes a metered forward pass an
//! independent oracle for the closed-form cost formulas: the formulas predict
//! counts, the meter observes them from the kernels themselves.
//!
//! The counter is global, so measurements grab a session lock to keep
//! concurrently running tests from interleaving charges.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};

static MADDS: AtomicU64 = AtomicU64::new(0);
static SESSION: Mutex<()> = Mutex::new(());

/// Add `n` multiply-adds to the running total. Kernels call this once per
/// invocation with their whole charge, so the atomic is not in any hot loop.
#[inline]
pub fn charge(n: u64) {
    MADDS.fetch_add(n, Ordering::Relaxed);
}

/// Exclusive measurement window. Creating a session resets the counter;
/// `madds()` reads the charges accumulated since.
pub struct MeterSession {
    _guard: MutexGuard<'static, ()>,
}

impl MeterSession {
    pub fn begin() -> Self {
        let guard = SESSION.lock().unwrap_or_else(|e| e.into_inner());
        MADDS.store(0, Ordering::Relaxed);
        MeterSession { _guard: guard }
    }

    pub fn madds(&self) -> u64 {
        MADDS.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        MADDS.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_counts_charges() {
        let session = MeterSession::begin();
        charge(5);
        charge(7);
        assert_eq!(session.madds(), 12);
        session.reset();
        assert_eq!(session.madds(), 0);
    }
}
