//! Tanh-squashed Gaussian over feedback amplitudes in `(-5, 5)`.

use rand::Rng;
use rand_distr::StandardNormal;

pub const ACTION_SCALE: f64 = 5.0;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// One draw from the policy. `pre_squash` is kept so the log-density can be
/// re-evaluated later without an `atanh`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub amplitude: f64,
    pub pre_squash: f64,
    pub log_prob: f64,
}

pub fn squash(u: f64) -> f64 {
    ACTION_SCALE * u.tanh()
}

/// Inverse of [`squash`] for amplitudes strictly inside the bound.
pub fn unsquash(amplitude: f64) -> f64 {
    (amplitude / ACTION_SCALE).atanh()
}

/// `ln N(u; mean, exp(log_std))`.
pub fn gaussian_log_density(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - HALF_LN_TWO_PI
}

/// `ln |d amplitude / du| = ln 5 + ln(1 − tanh² u)`, written to stay finite
/// for large `|u|`.
pub fn log_squash_jacobian(u: f64) -> f64 {
    let a = u.abs();
    let softplus = (-2.0 * a).exp().ln_1p();
    ACTION_SCALE.ln() + 2.0 * (std::f64::consts::LN_2 - a - softplus)
}

/// Log-density of the squashed amplitude produced by `u`.
pub fn log_prob(u: f64, mean: f64, log_std: f64) -> f64 {
    gaussian_log_density(u, mean, log_std) - log_squash_jacobian(u)
}

/// Differential entropy of the pre-squash Gaussian.
pub fn gaussian_entropy(log_std: f64) -> f64 {
    log_std + 0.5 + HALF_LN_TWO_PI
}

/// Stochastic draw, or `5 tanh(mean)` when `deterministic`.
pub fn sample_action<R: Rng + ?Sized>(mean: f64, log_std: f64, deterministic: bool, rng: &mut R) -> ActionSample {
    let u = if deterministic {
        mean
    } else {
        mean + log_std.exp() * rng.sample::<f64, _>(StandardNormal)
    };
    ActionSample {
        amplitude: squash(u),
        pre_squash: u,
        log_prob: log_prob(u, mean, log_std),
    }
}
