//! Ground-truth channels and noisy pilot observations.
//!
//! A pilot sent under configuration `θ` is received as
//! `y = (θᵀ D_h g + d) √P_p + w` with `w ~ CN(0, σ²)`.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::{Aoa, ArrayGeometry};
use crate::configurator::RisConfig;
use crate::{wrap_phase, Error, Result};

/// Parameters of a rank-one LOS channel `g = √β e^{jω} a(φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosChannelParams {
    pub beta: f64,
    pub omega: f64,
    pub aoa: Aoa,
}

impl LosChannelParams {
    pub fn new(beta: f64, omega: f64, aoa: Aoa) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidConfig(format!("channel gain must be >= 0, got {beta}")));
        }
        Ok(Self { beta, omega: wrap_phase(omega), aoa })
    }
}

/// `g = √β e^{jω} a(φ)`.
pub fn make_los_channel(params: &LosChannelParams, geom: &ArrayGeometry) -> Vec<Complex64> {
    let scale = Complex64::from_polar(params.beta.sqrt(), params.omega);
    let mut g = geom.array_response(params.aoa);
    for x in &mut g {
        *x *= scale;
    }
    g
}

/// The UE-RIS vector `g`, the direct scalar `d` and the known RIS-BS vector `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub g: Vec<Complex64>,
    pub d: Complex64,
    pub h: Vec<Complex64>,
}

impl ChannelState {
    pub fn new(g: Vec<Complex64>, d: Complex64, h: Vec<Complex64>) -> Result<Self> {
        if g.len() != h.len() {
            return Err(Error::DimensionMismatch { expected: h.len(), found: g.len() });
        }
        Ok(Self { g, d, h })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    /// Noise-free effective scalar channel `θᵀ D_h g + d` for one configuration.
    pub fn effective_gain(&self, theta: &RisConfig) -> Complex64 {
        let cascaded: Complex64 = theta
            .as_slice()
            .iter()
            .zip(&self.h)
            .zip(&self.g)
            .map(|((t, h), g)| t * h * g)
            .sum();
        cascaded + self.d
    }
}

/// The diagonal operator `D_h = diag(h_1, ..., h_N)`, stored as its diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeDiag(Vec<Complex64>);

impl CascadeDiag {
    pub fn new(h: &[Complex64]) -> Self {
        Self(h.to_vec())
    }

    pub fn diagonal(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `D_h v = h ⊙ v`.
    pub fn apply(&self, v: &[Complex64]) -> Result<Vec<Complex64>> {
        if v.len() != self.0.len() {
            return Err(Error::DimensionMismatch { expected: self.0.len(), found: v.len() });
        }
        Ok(self.0.iter().zip(v).map(|(h, x)| h * x).collect())
    }
}

/// Observations collected under a sequence of RIS configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotSession {
    configs: Vec<RisConfig>,
    y: Vec<Complex64>,
    pilot_power: f64,
    noise_power: f64,
}

impl PilotSession {
    pub fn new(pilot_power: f64, noise_power: f64) -> Self {
        Self { configs: Vec::new(), y: Vec::new(), pilot_power, noise_power }
    }

    /// Appends one configuration and the sample received under it.
    ///
    /// Rejects a configuration that was already used in this session.
    pub fn push(&mut self, config: RisConfig, sample: Complex64) -> Result<()> {
        if let Some(first) = self.configs.first() {
            if first.len() != config.len() {
                return Err(Error::DimensionMismatch { expected: first.len(), found: config.len() });
            }
        }
        if self.configs.contains(&config) {
            return Err(Error::InvalidConfig("configuration already used in this session".into()));
        }
        self.configs.push(config);
        self.y.push(sample);
        Ok(())
    }

    /// Rows of the configuration matrix `B`.
    pub fn configs(&self) -> &[RisConfig] {
        &self.configs
    }

    pub fn received(&self) -> &[Complex64] {
        &self.y
    }

    pub fn pilot_power(&self) -> f64 {
        self.pilot_power
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Powers and LOS gain that realise a per-element data SNR and a pilot SNR.
///
/// Noise power and data power are fixed to one and `|h_n| = 1`, so the
/// per-element gain `β = |h_n g_n|²` carries the data SNR and the pilot power
/// carries the pilot-to-data SNR offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub data_power: f64,
    pub pilot_power: f64,
    pub noise_power: f64,
    pub beta: f64,
}

impl LinkBudget {
    pub fn from_snr_db(snr_d_db: f64, snr_p_db: f64) -> Self {
        let beta = 10f64.powf(snr_d_db / 10.0);
        Self { data_power: 1.0, pilot_power: 10f64.powf((snr_p_db - snr_d_db) / 10.0), noise_power: 1.0, beta }
    }

    pub fn snr_d(&self) -> f64 {
        self.data_power * self.beta / self.noise_power
    }

    pub fn snr_p(&self) -> f64 {
        self.pilot_power * self.beta / self.noise_power
    }
}

/// Circularly-symmetric complex Gaussian sample with `E|x|² = variance`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

/// Anything that can answer a pilot transmission under a given RIS configuration.
pub trait PilotLink {
    fn transmit<R: Rng + ?Sized>(&mut self, config: &RisConfig, rng: &mut R) -> Complex64;
}

/// A fixed channel observed through AWGN.
#[derive(Debug, Clone, Copy)]
pub struct NoisyLink<'a> {
    pub state: &'a ChannelState,
    pub pilot_power: f64,
    pub noise_power: f64,
}

impl PilotLink for NoisyLink<'_> {
    fn transmit<R: Rng + ?Sized>(&mut self, config: &RisConfig, rng: &mut R) -> Complex64 {
        let clean = self.state.effective_gain(config) * self.pilot_power.sqrt();
        if self.noise_power > 0.0 {
            clean + complex_gaussian(rng, self.noise_power)
        } else {
            clean
        }
    }
}

/// `y = (B D_h g + d 1) √P_p + w` for the configurations in `rows`.
///
/// Noise samples are drawn in row order, so this agrees sample-for-sample
/// with transmitting the rows one at a time through [`NoisyLink`].
pub fn synth_received_pilots<R: Rng + ?Sized>(
    state: &ChannelState,
    rows: &[RisConfig],
    pilot_power: f64,
    noise_power: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if !(pilot_power >= 0.0 && noise_power >= 0.0) {
        return Err(Error::InvalidConfig("powers must be non-negative".into()));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != state.len()) {
        return Err(Error::DimensionMismatch { expected: state.len(), found: bad.len() });
    }
    let mut link = NoisyLink { state, pilot_power, noise_power };
    Ok(rows.iter().map(|r| link.transmit(r, rng)).collect())
}

/// Direct channel `d ~ CN(0, 10 |h_n g_n|²)`.
pub fn draw_direct_channel<R: Rng + ?Sized>(per_element_gain: f64, rng: &mut R) -> Complex64 {
    if per_element_gain <= 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    complex_gaussian(rng, 10.0 * per_element_gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::child_rng;
    use std::f64::consts::{PI, TAU};

    fn geom() -> ArrayGeometry {
        ArrayGeometry::new(4, 2, 0.25, 0.25).unwrap()
    }

    fn ones(n: usize) -> Vec<Complex64> {
        vec![Complex64::new(1.0, 0.0); n]
    }

    #[test]
    fn los_channel_examples() {
        let g = geom();
        let zero = Aoa::new(0.0, 0.0).unwrap();
        let v = make_los_channel(&LosChannelParams::new(1.0, 0.0, zero).unwrap(), &g);
        assert_eq!(v, ones(8));

        let v = make_los_channel(&LosChannelParams::new(4.0, PI, Aoa::new(0.3, 0.2).unwrap()).unwrap(), &g);
        assert!(v.iter().all(|x| (x.norm() - 2.0).abs() < 1e-12));
        assert!((v[0] - Complex64::new(-2.0, 0.0)).norm() < 1e-12);

        let v = make_los_channel(&LosChannelParams::new(0.0, 1.0, zero).unwrap(), &g);
        assert!(v.iter().all(|x| x.norm() == 0.0));

        assert!(LosChannelParams::new(-1.0, 0.0, zero).is_err());
        assert!((LosChannelParams::new(1.0, -0.5, zero).unwrap().omega - (TAU - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn cascade_diag_examples() {
        let d = CascadeDiag::new(&ones(3));
        let v = vec![Complex64::new(1.0, 2.0), Complex64::new(-3.0, 0.5), Complex64::new(0.0, 1.0)];
        assert_eq!(d.apply(&v).unwrap(), v);

        let j = Complex64::new(0.0, 1.0);
        let d = CascadeDiag::new(&[j, -j]);
        assert_eq!(d.apply(&ones(2)).unwrap(), vec![j, -j]);
        assert_eq!(d.apply(&[Complex64::new(0.0, 0.0); 2]).unwrap(), vec![Complex64::new(0.0, 0.0); 2]);
        assert!(matches!(d.apply(&ones(3)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn noiseless_pilot_examples() {
        let g = geom();
        let n = g.len();
        let mut rng = child_rng(1, &[]);
        let state = ChannelState::new(ones(n), Complex64::new(0.0, 0.0), ones(n)).unwrap();
        let row = RisConfig::new(ones(n)).unwrap();
        let y = synth_received_pilots(&state, &[row], 1.0, 0.0, &mut rng).unwrap();
        assert_eq!(y, vec![Complex64::new(n as f64, 0.0)]);

        // cascaded path cancels: alternate signs over a constant g
        let alt: Vec<Complex64> = (0..n).map(|i| Complex64::new(if i % 2 == 0 { 1.0 } else { -1.0 }, 0.0)).collect();
        let state = ChannelState::new(ones(n), Complex64::new(5.0, 0.0), ones(n)).unwrap();
        let rows = vec![RisConfig::new(alt.clone()).unwrap(), RisConfig::new(alt.iter().map(|x| -x).collect()).unwrap()];
        let y = synth_received_pilots(&state, &rows, 4.0, 0.0, &mut rng).unwrap();
        assert_eq!(y, vec![Complex64::new(10.0, 0.0); 2]);
    }

    #[test]
    fn pilots_are_reproducible_and_affine() {
        let geom = geom();
        let n = geom.len();
        let mut rng = child_rng(3, &[1]);
        let g = make_los_channel(&LosChannelParams::new(0.5, 1.0, Aoa::new(0.2, -0.4).unwrap()).unwrap(), &geom);
        let h = geom.array_response(Aoa::new(0.3, -0.2).unwrap());
        let state = ChannelState::new(g, Complex64::new(0.3, -0.1), h).unwrap();
        let rows: Vec<RisConfig> = (0..5)
            .map(|_| RisConfig::new((0..n).map(|_| Complex64::from_polar(1.0, rng.random::<f64>() * TAU)).collect()).unwrap())
            .collect();
        let a = synth_received_pilots(&state, &rows, 2.0, 0.5, &mut child_rng(11, &[])).unwrap();
        let b = synth_received_pilots(&state, &rows, 2.0, 0.5, &mut child_rng(11, &[])).unwrap();
        assert_eq!(a, b);

        // noiseless y is affine in g: y(g1 + g2) - y(0) = (y(g1) - y(0)) + (y(g2) - y(0))
        let zero_g = ChannelState { g: vec![Complex64::new(0.0, 0.0); n], ..state.clone() };
        let twice = ChannelState { g: state.g.iter().map(|x| x * 2.0).collect(), ..state.clone() };
        let y0 = synth_received_pilots(&zero_g, &rows, 2.0, 0.0, &mut rng).unwrap();
        let y1 = synth_received_pilots(&state, &rows, 2.0, 0.0, &mut rng).unwrap();
        let y2 = synth_received_pilots(&twice, &rows, 2.0, 0.0, &mut rng).unwrap();
        for i in 0..rows.len() {
            assert!(((y2[i] - y0[i]) - 2.0 * (y1[i] - y0[i])).norm() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn noiseless_pilots_follow_the_model(seed in proptest::prelude::any::<u64>(), pp in 0.0..100.0f64) {
            let geom = geom();
            let n = geom.len();
            let mut rng = child_rng(seed, &[]);
            let h: Vec<Complex64> = (0..n).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
            let g: Vec<Complex64> = (0..n).map(|_| complex_gaussian(&mut rng, 1.0)).collect();
            let d = complex_gaussian(&mut rng, 1.0);
            let state = ChannelState::new(g.clone(), d, h.clone()).unwrap();
            let rows: Vec<RisConfig> =
                (0..3).map(|_| RisConfig::from_phases((0..n).map(|_| rng.random::<f64>() * TAU))).collect();
            let y = synth_received_pilots(&state, &rows, pp, 0.0, &mut rng).unwrap();
            for (row, yl) in rows.iter().zip(&y) {
                let cascade: Complex64 = row.as_slice().iter().zip(&h).zip(&g).map(|((t, hn), gn)| t * hn * gn).sum();
                let expect = (cascade + d) * pp.sqrt();
                proptest::prop_assert!((yl - expect).norm() <= 1e-12 * expect.norm().max(1.0));
            }
        }
    }

    #[test]
    fn noise_variance_matches() {
        // E|w|² = σ² with independent real/imag parts of σ²/2 each
        let n = 2;
        let state = ChannelState::new(ones(n), Complex64::new(0.7, 0.2), ones(n)).unwrap();
        let row = RisConfig::new(ones(n)).unwrap();
        let mut rng = child_rng(5, &[]);
        let clean = state.effective_gain(&row) * 3.0f64.sqrt();
        let draws = 100_000;
        let sigma2 = 0.8;
        let mut link = NoisyLink { state: &state, pilot_power: 3.0, noise_power: sigma2 };
        let samples: Vec<Complex64> = (0..draws).map(|_| link.transmit(&row, &mut rng) - clean).collect();
        let mean: Complex64 = samples.iter().sum::<Complex64>() / draws as f64;
        let var = samples.iter().map(|s| (s - mean).norm_sqr()).sum::<f64>() / (draws - 1) as f64;
        assert!((var / sigma2 - 1.0).abs() < 0.03, "variance {var}");
        let var_re = samples.iter().map(|s| (s.re - mean.re).powi(2)).sum::<f64>() / draws as f64;
        assert!((var_re / (sigma2 / 2.0) - 1.0).abs() < 0.03, "real-part variance {var_re}");
    }

    #[test]
    fn direct_channel_power() {
        let mut rng = child_rng(6, &[]);
        assert_eq!(draw_direct_channel(0.0, &mut rng), Complex64::new(0.0, 0.0));
        let draws = 100_000;
        let p = (0..draws).map(|_| draw_direct_channel(0.1, &mut rng).norm_sqr()).sum::<f64>() / draws as f64;
        assert!((p - 1.0).abs() < 0.03, "E|d|^2 = {p}");
    }

    /// Asymptotic Kolmogorov distribution tail `P(K > x)`.
    fn kolmogorov_tail(x: f64) -> f64 {
        let mut s = 0.0;
        for k in 1..200 {
            let k = k as f64;
            s += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        }
        s.clamp(0.0, 1.0)
    }

    #[test]
    fn direct_channel_phase_is_uniform() {
        let mut rng = child_rng(7, &[]);
        let m = 10_000;
        let mut u: Vec<f64> = (0..m).map(|_| wrap_phase(draw_direct_channel(0.1, &mut rng).arg()) / TAU).collect();
        u.sort_by(f64::total_cmp);
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / m as f64 - x).max(x - i as f64 / m as f64))
            .fold(0.0, f64::max);
        let n = m as f64;
        let p = kolmogorov_tail((n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d);
        assert!(p > 0.01, "KS p-value {p}");
    }

    #[test]
    fn session_rejects_repeats_and_bad_lengths() {
        let mut s = PilotSession::new(1.0, 1.0);
        s.push(RisConfig::new(ones(3)).unwrap(), Complex64::new(1.0, 0.0)).unwrap();
        assert!(s.push(RisConfig::new(ones(3)).unwrap(), Complex64::new(1.0, 0.0)).is_err());
        assert!(s.push(RisConfig::new(ones(2)).unwrap(), Complex64::new(1.0, 0.0)).is_err());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn link_budget_hits_target_snrs() {
        let b = LinkBudget::from_snr_db(-10.0, 0.0);
        assert!((b.snr_d() - 0.1).abs() < 1e-15);
        assert!((b.snr_p() - 1.0).abs() < 1e-12);
        assert!((b.pilot_power / b.data_power - 10.0).abs() < 1e-12);
    }

    #[test]
    fn per_element_snr_bookkeeping() {
        let (p_d, sigma2, c) = (2.5, 0.4, 0.16);
        let geom = geom();
        let g = make_los_channel(&LosChannelParams::new(c, 0.3, Aoa::new(0.1, 0.2).unwrap()).unwrap(), &geom);
        let h = geom.array_response(Aoa::new(0.3, -0.2).unwrap());
        for (gn, hn) in g.iter().zip(&h) {
            let snr = p_d * (gn * hn).norm_sqr() / sigma2;
            assert!((snr - p_d * c / sigma2).abs() < 1e-12);
        }
    }
}
