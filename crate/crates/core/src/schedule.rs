//! Day-indexed parameter schedules used to model drift.

use serde::{Deserialize, Serialize};

/// How a scalar parameter changes over days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    /// Jumps to `value` from `at_day` onward.
    Step { at_day: u64, value: f64 },
    /// Moves linearly from the base value at `from_day` to `value` at `to_day`.
    Linear {
        from_day: u64,
        to_day: u64,
        value: f64,
    },
}

impl Drift {
    pub fn apply(&self, base: f64, day: u64) -> f64 {
        match *self {
            Drift::Step { at_day, value } => {
                if day >= at_day {
                    value
                } else {
                    base
                }
            }
            Drift::Linear {
                from_day,
                to_day,
                value,
            } => {
                if day <= from_day {
                    base
                } else if day >= to_day {
                    value
                } else {
                    let frac = (day - from_day) as f64 / (to_day - from_day) as f64;
                    base + frac * (value - base)
                }
            }
        }
    }
}

/// Applies an optional drift to `base`.
pub fn drifted(base: f64, drift: Option<&Drift>, day: u64) -> f64 {
    drift.map_or(base, |d| d.apply(base, day))
}
