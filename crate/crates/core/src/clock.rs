//! Time sources. Everything that stamps records takes a [`Clock`] so tests
//! can pin timestamps.

use std::sync::atomic::{AtomicU64, Ordering};

pub trait Clock: Send + Sync + 'static {
    /// Milliseconds since the Unix epoch (or since an arbitrary origin for test clocks).
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        crate::gateway::now_ms()
    }
}

/// Returns `start`, `start + step`, `start + 2*step`, ... on successive calls.
#[derive(Debug)]
pub struct StepClock {
    next: AtomicU64,
    step: u64,
}

impl StepClock {
    pub fn new(start: u64, step: u64) -> Self {
        Self {
            next: AtomicU64::new(start),
            step,
        }
    }

    /// Always returns `t`.
    pub fn fixed(t: u64) -> Self {
        Self::new(t, 0)
    }
}

impl Clock for StepClock {
    fn now_ms(&self) -> u64 {
        self.next.fetch_add(self.step, Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_clock_advances() {
        let c = StepClock::new(10, 5);
        assert_eq!([c.now_ms(), c.now_ms(), c.now_ms()], [10, 15, 20]);
        let f = StepClock::fixed(3);
        assert_eq!(f.now_ms(), f.now_ms());
    }
}
