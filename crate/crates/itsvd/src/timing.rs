//! Per-line wall-clock accounting of the update step.
//!
//! The construction overhead is dominated by a handful of algebraic lines in
//! the update; timing them individually is how the overhead is analyzed, so
//! the instrumentation is part of the library rather than ad hoc in callers.

use std::time::Duration;

/// The instrumented lines of one factorization update, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateLine {
    /// M = Uᵀ B plus its all-reduce.
    MProduct = 0,
    /// P = B − U M.
    ResidualP,
    /// Distributed QR of P.
    QrP,
    /// Widening Q = [U | Q_P].
    ConcatQ,
    /// Distributed re-orthonormalization QR of Q.
    QrQ,
    /// Assembly of K and its dense SVD on the master partition.
    SmallSvd,
    /// Adaptive rank decision.
    AdaptRank,
    /// Broadcast of the rank and the small factors.
    Broadcast,
    /// Right factor rotation V ← [V 0; 0 I] V'.
    UpdateV,
    /// Left factor rotation U ← Q_Q U'.
    UpdateU,
}

pub const UPDATE_LINES: [UpdateLine; 10] = [
    UpdateLine::MProduct,
    UpdateLine::ResidualP,
    UpdateLine::QrP,
    UpdateLine::ConcatQ,
    UpdateLine::QrQ,
    UpdateLine::SmallSvd,
    UpdateLine::AdaptRank,
    UpdateLine::Broadcast,
    UpdateLine::UpdateV,
    UpdateLine::UpdateU,
];

impl UpdateLine {
    pub fn label(self) -> &'static str {
        match self {
            UpdateLine::MProduct => "m_product",
            UpdateLine::ResidualP => "p_residual",
            UpdateLine::QrP => "p_qr",
            UpdateLine::ConcatQ => "q_concat",
            UpdateLine::QrQ => "q_qr",
            UpdateLine::SmallSvd => "small_svd",
            UpdateLine::AdaptRank => "adapt_rank",
            UpdateLine::Broadcast => "broadcast",
            UpdateLine::UpdateV => "v_update",
            UpdateLine::UpdateU => "u_update",
        }
    }
}

/// Summed per-line durations over all updates of a construction run.
#[derive(Debug, Clone, Default)]
pub struct UpdateTimings {
    totals: [Duration; UPDATE_LINES.len()],
    updates: u64,
}

impl UpdateTimings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, line: UpdateLine, d: Duration) {
        self.totals[line as usize] += d;
    }

    pub fn count_update(&mut self) {
        self.updates += 1;
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn total(&self, line: UpdateLine) -> Duration {
        self.totals[line as usize]
    }

    pub fn grand_total(&self) -> Duration {
        self.totals.iter().sum()
    }

    /// (label, summed duration) rows in execution order.
    pub fn rows(&self) -> Vec<(&'static str, Duration)> {
        UPDATE_LINES
            .iter()
            .map(|&l| (l.label(), self.totals[l as usize]))
            .collect()
    }
}
