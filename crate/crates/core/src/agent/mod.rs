//! Recurrent controller, clipped policy-gradient training and the search loop.

pub mod controller;
pub mod ppo;
pub mod search;

pub use controller::{ControllerPolicy, ControllerShape, Rollout};
pub use ppo::{ppo_update, Adam, Baseline, PpoConfig, UpdateStats};
pub use search::{
    run_search, CandidateContext, CandidateEvaluator, Evaluation, SearchConfig, SearchLog, SearchOutcome,
    SearchRecord, Searcher,
};

use crate::error::{Error, Result};

/// Accuracy traded against compute: `acc · (cost / target)^alpha`.
///
/// With a negative `alpha`, cheaper networks are rewarded and costlier ones penalized.
pub fn reward(acc: f64, cost: f64, target_cost: f64, alpha: f64) -> Result<f64> {
    if !(cost > 0.0 && cost.is_finite()) {
        return Err(Error::InvalidArgument(format!("cost must be positive, got {cost}")));
    }
    if !(target_cost > 0.0 && target_cost.is_finite()) {
        return Err(Error::InvalidArgument(format!("target cost must be positive, got {target_cost}")));
    }
    if !acc.is_finite() || !alpha.is_finite() {
        return Err(Error::InvalidArgument("accuracy and alpha must be finite".into()));
    }
    Ok(acc * (cost / target_cost).powf(alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reward_at_target_is_accuracy() {
        assert_eq!(reward(0.73, 5e6, 5e6, -0.07).unwrap(), 0.73);
        assert_eq!(reward(0.73, 2e6, 5e6, 0.0).unwrap(), 0.73);
    }

    #[test]
    fn reward_doubling_cost() {
        // 2^-0.07 computed independently.
        let r = reward(1.0, 2.0, 1.0, -0.07).unwrap();
        assert!((r - 0.952_637_998_043_937_3).abs() < 1e-12, "{r}");
    }

    #[test]
    fn reward_cost_double_target() {
        // 0.9 · 2^-0.07, evaluated at higher precision.
        let r = reward(0.9, 2.0, 1.0, -0.07).unwrap();
        assert!((r - 0.857_374_198_239_543_6).abs() < 1e-12, "{r}");
        assert!((r - 0.85737).abs() < 5e-6);
    }

    #[test]
    fn reward_rejects_nonpositive_cost() {
        assert!(reward(0.5, 0.0, 1.0, -0.07).is_err());
        assert!(reward(0.5, -3.0, 1.0, -0.07).is_err());
        assert!(reward(0.5, 1.0, 0.0, -0.07).is_err());
    }

    proptest! {
        #[test]
        fn reward_is_monotone(acc in 0.01f64..1.0, c1 in 1.0f64..1e9, c2 in 1.0f64..1e9, t in 1.0f64..1e9) {
            let (lo, hi) = if c1 < c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(reward(acc, lo, t, -0.07).unwrap() >= reward(acc, hi, t, -0.07).unwrap());
            prop_assert!(reward(acc, lo, t, 0.07).unwrap() <= reward(acc, hi, t, 0.07).unwrap());
            prop_assert!(reward(acc, lo, t, -0.07).unwrap() <= reward(acc + 0.001, lo, t, -0.07).unwrap());
        }
    }
}
