//! Spectral efficiency and estimation error.

use num_complex::Complex64;

use crate::channel::ChannelState;
use crate::configurator::RisConfig;

/// SE in bit/s/Hz when the RIS applies `theta`:
/// `log2(1 + |Σ h_n g_n θ_n + d|² P_d / σ²)`.
pub fn se_achieved(theta: &RisConfig, state: &ChannelState, data_power: f64, noise_power: f64) -> f64 {
    (1.0 + state.effective_gain(theta).norm_sqr() * data_power / noise_power).log2()
}

/// Upper bound `log2(1 + (Σ|h_n g_n| + |d|)² P_d / σ²)`, reached when every path adds coherently.
pub fn se_max(state: &ChannelState, data_power: f64, noise_power: f64) -> f64 {
    let amp: f64 = state.h.iter().zip(&state.g).map(|(h, g)| (h * g).norm()).sum::<f64>() + state.d.norm();
    (1.0 + amp * amp * data_power / noise_power).log2()
}

/// Normalised squared error of a channel estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nmse {
    pub value: f64,
    /// The reference was the zero vector, so `value` is the unnormalised `‖ĝ‖²`.
    pub zero_reference: bool,
}

pub fn nmse(g_hat: &[Complex64], g: &[Complex64]) -> Nmse {
    assert_eq!(g_hat.len(), g.len(), "nmse needs equal lengths");
    let err: f64 = g_hat.iter().zip(g).map(|(a, b)| (a - b).norm_sqr()).sum();
    let norm: f64 = g.iter().map(|x| x.norm_sqr()).sum();
    if norm == 0.0 {
        Nmse { value: err, zero_reference: true }
    } else {
        Nmse { value: err / norm, zero_reference: false }
    }
}
