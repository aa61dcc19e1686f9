use super::{canonicalize, fold_final_state, TraceFile};

/// Outcome of comparing a trace with a rerun of the same configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayReport {
    /// Canonical forms are byte-identical.
    pub identical: bool,
    /// Index of the first event that differs, or the shorter length if one
    /// stream is a prefix of the other.
    pub first_divergence: Option<u64>,
    /// The stored final state equals the one recomputed from the events.
    pub final_state_consistent: bool,
}

impl ReplayReport {
    pub fn ok(&self) -> bool {
        self.identical && self.final_state_consistent
    }
}

/// Compares two traces after stripping wall-clock fields.
pub fn replay_check(original: &TraceFile, rerun: &TraceFile) -> ReplayReport {
    let a = canonicalize(original);
    let b = canonicalize(rerun);
    let first_divergence = a
        .events
        .iter()
        .zip(&b.events)
        .position(|(x, y)| x != y)
        .or_else(|| (a.events.len() != b.events.len()).then(|| a.events.len().min(b.events.len())))
        .map(|i| i as u64);
    ReplayReport {
        identical: a.to_json() == b.to_json(),
        first_divergence,
        final_state_consistent: fold_final_state(original) == original.final_state,
    }
}
