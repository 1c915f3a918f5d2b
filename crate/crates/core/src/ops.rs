//! Multiplication accounting.
//!
//! Every detector threads a [`MulCounter`] through its arithmetic so that
//! complexity comparisons are measured, not assumed. Divisions are counted
//! as multiplications; additions are free.

/// Running count of real multiplications (and divisions).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MulCounter(u64);

impl MulCounter {
    pub fn new() -> Self {
        Self(0)
    }

    #[inline]
    pub fn add(&mut self, n: usize) {
        self.0 += n as u64;
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}
