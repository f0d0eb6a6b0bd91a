//! Budget limits and normalized progress.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EvaluatorError;

/// Limits on iterations, wall time, and cost. At least one must be set and
/// every set limit is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BudgetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_time_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cost: Option<f64>,
}

impl BudgetSpec {
    pub fn iterations(n: u64) -> Self {
        Self { max_iterations: Some(n), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EvaluatorError> {
        if self.max_iterations.is_none() && self.max_wall_time_ms.is_none() && self.max_cost.is_none() {
            return Err(EvaluatorError::Config("budget must set at least one limit".into()));
        }
        if self.max_iterations == Some(0) {
            return Err(EvaluatorError::Config("max_iterations must be positive".into()));
        }
        if self.max_wall_time_ms == Some(0) {
            return Err(EvaluatorError::Config("max_wall_time_ms must be positive".into()));
        }
        if let Some(c) = self.max_cost {
            if !(c > 0.0 && c.is_finite()) {
                return Err(EvaluatorError::Config(format!("max_cost must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Resources consumed so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Consumed {
    pub iterations: u64,
    pub wall_time_ms: u64,
    pub cost: f64,
}

impl Consumed {
    pub fn wall_time(&self) -> Duration {
        Duration::from_millis(self.wall_time_ms)
    }
}

/// Fraction of the most binding limit that has been consumed, in `[0, 1]`.
pub fn budget_progress(budget: &BudgetSpec, consumed: &Consumed) -> f64 {
    let mut ratios = Vec::with_capacity(3);
    if let Some(n) = budget.max_iterations {
        ratios.push(consumed.iterations as f64 / n as f64);
    }
    if let Some(ms) = budget.max_wall_time_ms {
        ratios.push(consumed.wall_time_ms as f64 / ms as f64);
    }
    if let Some(c) = budget.max_cost {
        ratios.push(consumed.cost.max(0.0) / c);
    }
    let beta = ratios.into_iter().fold(0.0_f64, f64::max);
    if beta.is_nan() {
        return 1.0;
    }
    beta.clamp(0.0, 1.0)
}
