//! Generalized advantage estimation.

use crate::error::{RlError, Result};

/// Advantages and value targets for one worker's time-ordered segment.
///
/// `dones[t]` marks that the episode ended after step `t`; no value is
/// bootstrapped across it. `bootstrap` is `V(s_T)` for the state after the
/// last step, used when the segment ends mid-episode.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    for (what, len) in [("values", values.len()), ("dones", dones.len())] {
        if len != n {
            return Err(RlError::ShapeMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 == n {
            (bootstrap, 1.0)
        } else {
            (values[t + 1], 1.0)
        };
        let delta = rewards[t] + discount * next_value - values[t];
        running = delta + discount * lambda * carry * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts and scales to zero mean and unit population variance.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std > 1e-12 { 1.0 / std } else { 1.0 };
    for a in adv.iter_mut() {
        *a = (*a - mean) * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rewards_zero_values() {
        let (a, r) = compute_gae(&[0.0; 5], &[0.0; 5], &[false, false, true, false, false], 0.0, 0.99, 0.95).unwrap();
        assert!(a.iter().chain(&r).all(|&v| v == 0.0));
    }

    #[test]
    fn hand_recursion() {
        // δ = (1, 1, 1); A2 = 1, A1 = 1 + 0.25·1, A0 = 1 + 0.25·1.25
        let (a, r) = compute_gae(&[1.0; 3], &[0.0; 3], &[false, false, true], 7.0, 0.5, 0.5).unwrap();
        assert_eq!(a, vec![1.3125, 1.25, 1.0]);
        assert_eq!(r, a);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_gae(&[1.0; 3], &[0.0; 2], &[false; 3], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn bootstrap_used_at_segment_end() {
        let (a, _) = compute_gae(&[0.0], &[0.0], &[false], 2.0, 0.5, 1.0).unwrap();
        assert_eq!(a, vec![1.0]);
    }
}
