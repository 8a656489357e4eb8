//! Shared workloads for the estimation benchmarks.

use ris_core::channel::{draw_direct_channel, make_los_channel, synth_received_pilots, LinkBudget, NoisyLink};
use ris_core::configurator::{build_codebook, run_adaptive_estimation, AdaptiveOutcome, MleEngine};
use ris_core::rng::{child_rng, TrialRng};
use ris_core::{AoaSearch, Aoa, ArrayGeometry, ChannelState, Complex64, ConfigCodebook, InitPolicy, LosChannelParams, RisConfig};

/// A fixed channel on an `n_h x n_v` surface at SNR_d = -10 dB, SNR_p = 0 dB.
pub struct Workload {
    pub engine: MleEngine,
    pub codebook: ConfigCodebook,
    pub state: ChannelState,
    pub budget: LinkBudget,
}

impl Workload {
    /// `tabulated` caches codebook responses over the search grid.
    pub fn new(n_h: usize, n_v: usize, tabulated: bool) -> Self {
        let geom = ArrayGeometry::new(n_h, n_v, 0.25, 0.25).expect("valid geometry");
        let h = geom.array_response(Aoa::new(0.3, -0.2).expect("valid angle"));
        let codebook = build_codebook(&h, &geom);
        let mut engine = MleEngine::new(geom, h.clone(), AoaSearch::standard()).expect("matching sizes");
        if tabulated {
            engine = engine.with_table(&codebook);
        }
        let budget = LinkBudget::from_snr_db(-10.0, 0.0);
        let mut rng = child_rng(1, &[]);
        let params = LosChannelParams::new(budget.beta, 1.3, Aoa::new(0.4, -0.5).expect("valid angle")).expect("valid");
        let d = draw_direct_channel(budget.beta, &mut rng);
        let state = ChannelState::new(make_los_channel(&params, &geom), d, h).expect("matching sizes");
        Self { engine, codebook, state, budget }
    }

    /// One random-init adaptive session of `pilots` transmissions.
    pub fn session(&self, pilots: usize, rng: &mut TrialRng) -> AdaptiveOutcome {
        let mut codebook = self.codebook.clone();
        let mut link = NoisyLink { state: &self.state, pilot_power: self.budget.pilot_power, noise_power: self.budget.noise_power };
        run_adaptive_estimation(
            pilots,
            &mut codebook,
            &InitPolicy::Random,
            &mut link,
            &self.engine,
            self.budget.pilot_power,
            self.budget.noise_power,
            rng,
        )
        .expect("codebook large enough")
    }

    /// Noisy pilots through `rows`.
    pub fn pilots(&self, rows: &[RisConfig], rng: &mut TrialRng) -> Vec<Complex64> {
        synth_received_pilots(&self.state, rows, self.budget.pilot_power, self.budget.noise_power, rng).expect("valid rows")
    }
}
