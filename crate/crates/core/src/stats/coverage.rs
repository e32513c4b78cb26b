use serde::{Deserialize, Serialize};

use crate::domain::AbundanceVector;

/// Estimated sample coverage. `defined` is false for samples of size <= 1,
/// where the estimator has no meaning and `value` is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub value: f64,
    pub defined: bool,
}

/// `1 - (f1/n) * ((n-1) f1 / ((n-1) f1 + 2 f2))` from singleton and
/// doubleton counts.
pub fn coverage_from_counts(n: u64, f1: u64, f2: u64) -> Coverage {
    if n <= 1 {
        return Coverage { value: 0.0, defined: false };
    }
    if f1 == 0 {
        return Coverage { value: 1.0, defined: true };
    }
    let n = n as f64;
    let f1 = f1 as f64;
    let f2 = f2 as f64;
    let ratio = ((n - 1.0) * f1) / ((n - 1.0) * f1 + 2.0 * f2);
    let value = (1.0 - (f1 / n) * ratio).clamp(0.0, 1.0);
    Coverage { value, defined: true }
}

pub fn coverage(v: &AbundanceVector) -> Coverage {
    coverage_from_counts(v.n(), v.f1(), v.f2())
}
