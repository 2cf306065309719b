//! Deterministic accounting of retained intermediate scalars.
//!
//! Training-memory comparisons here are made with a ledger instead of OS
//! allocation probes: every solver/tape site that keeps an intermediate
//! alive registers its scalar count, and releases it when the value is
//! dropped. The resulting peaks are platform-independent, reproducible in
//! CI, and directly expose the scaling difference between implicit
//! differentiation (constant retained set) and unrolled backpropagation
//! (one saved activation stack per layer).

/// Which phase of a training step is currently charging the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerPhase {
    Idle,
    ForwardSolve,
    Backward,
}

#[derive(Debug, Clone)]
pub struct MemoryLedger {
    current: usize,
    peak: usize,
    forward_peak: usize,
    backward_peak: usize,
    phase: LedgerPhase,
}

impl Default for MemoryLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryLedger {
    pub fn new() -> Self {
        MemoryLedger {
            current: 0,
            peak: 0,
            forward_peak: 0,
            backward_peak: 0,
            phase: LedgerPhase::Idle,
        }
    }

    pub fn set_phase(&mut self, phase: LedgerPhase) {
        self.phase = phase;
    }

    pub fn phase(&self) -> LedgerPhase {
        self.phase
    }

    /// Register `scalars` newly retained values.
    pub fn retain(&mut self, scalars: usize) {
        self.current += scalars;
        self.peak = self.peak.max(self.current);
        match self.phase {
            LedgerPhase::ForwardSolve => {
                self.forward_peak = self.forward_peak.max(self.current)
            }
            LedgerPhase::Backward => {
                self.backward_peak = self.backward_peak.max(self.current)
            }
            LedgerPhase::Idle => {}
        }
    }

    /// Release previously retained values.
    pub fn release(&mut self, scalars: usize) {
        debug_assert!(self.current >= scalars, "ledger release exceeds retained");
        self.current = self.current.saturating_sub(scalars);
    }

    pub fn current(&self) -> usize {
        self.current
    }

    pub fn peak(&self) -> usize {
        self.peak
    }

    pub fn forward_peak(&self) -> usize {
        self.forward_peak
    }

    pub fn backward_peak(&self) -> usize {
        self.backward_peak
    }

    /// Clear counts for the next training step (peaks included).
    pub fn reset(&mut self) {
        *self = MemoryLedger::new();
    }
}
