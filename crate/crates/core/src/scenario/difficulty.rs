use std::fmt;

use serde::{Deserialize, Serialize};

use super::Scenario;

/// Fraction of injective meeting→slot assignments that are feasible, kept exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub feasible: u64,
    pub total: u64,
}

impl Difficulty {
    pub fn new(feasible: u64, total: u64) -> Self {
        Self { feasible, total }
    }

    pub fn value(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.feasible as f64 / self.total as f64
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.feasible, self.total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyBucket {
    Easy,
    Medium,
    Hard,
}

impl fmt::Display for DifficultyBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DifficultyBucket::Easy => "easy",
            DifficultyBucket::Medium => "medium",
            DifficultyBucket::Hard => "hard",
        })
    }
}

/// Cutoffs on `d`. Higher `d` means more assignments work, so easier.
///
/// `d < hard_below` is hard, `d >= easy_from` is easy, anything between is medium.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBuckets {
    pub hard_below: f64,
    pub easy_from: f64,
}

impl Default for DifficultyBuckets {
    fn default() -> Self {
        Self {
            hard_below: 1.0 / 3.0,
            easy_from: 2.0 / 3.0,
        }
    }
}

impl DifficultyBuckets {
    /// Tertile cutoffs over a suite's `d` values.
    pub fn tertiles(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| v[((v.len() as f64 * q).floor() as usize).min(v.len() - 1)];
        Self {
            hard_below: at(1.0 / 3.0),
            easy_from: at(2.0 / 3.0),
        }
    }

    pub fn classify(&self, d: f64) -> DifficultyBucket {
        if d < self.hard_below {
            DifficultyBucket::Hard
        } else if d >= self.easy_from {
            DifficultyBucket::Easy
        } else {
            DifficultyBucket::Medium
        }
    }
}

/// Recounts `d` from the scenario's initial calendars.
pub fn compute_difficulty(scenario: &Scenario) -> Difficulty {
    let problem = scenario.problem();
    Difficulty::new(
        problem.count_feasible_assignments(),
        problem.total_assignments(),
    )
}
