//! RIS configurations, the angle codebook and the adaptive pilot loop.
//!
//! The loop starts from two codebook entries, estimates the channel after
//! every pilot, and picks the next pilot configuration as the unused
//! codebook entry closest (in `|θ̄ᴴθ|`) to the configuration that would be
//! optimal for the current estimate. A codebook entry is never reused
//! within a session.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{configuration_angle_grid, Aoa, ArrayGeometry};
use crate::channel::{CascadeDiag, PilotLink, PilotSession};
use crate::estimator::{estimate_all, estimate_all_tabulated, AoaSearch, CodebookResponses, Estimate};
use crate::{Error, Result};

const UNIT_TOL: f64 = 1e-12;

/// Unit-modulus RIS phase-shift vector `θ = [e^{-jθ_1}, ..., e^{-jθ_N}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RisConfig(Vec<Complex64>);

impl RisConfig {
    pub fn new(entries: Vec<Complex64>) -> Result<Self> {
        for (index, x) in entries.iter().enumerate() {
            let modulus = x.norm();
            if !((modulus - 1.0).abs() <= UNIT_TOL) {
                return Err(Error::NotUnitModulus { index, modulus });
            }
        }
        Ok(Self(entries))
    }

    /// Configuration with entries `e^{j phase_n}`.
    pub fn from_phases(phases: impl IntoIterator<Item = f64>) -> Self {
        Self(phases.into_iter().map(|p| Complex64::from_polar(1.0, p)).collect())
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `|selfᴴ other|`.
    pub fn overlap(&self, other: &RisConfig) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.conj() * b).sum::<Complex64>().norm()
    }
}

/// Relative overlap above which two entries count as the same configuration.
const ALIAS_TOL: f64 = 1e-9;

/// The configuration set built from the configuration angle grid, with a
/// per-entry used flag.
///
/// Grid angles at elevation ±π/2 all map to the same phase profile, since the
/// horizontal phase gradient vanishes there. Such entries are aliases: once
/// one of them is used, the others are no longer offered for selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigCodebook {
    configs: Vec<RisConfig>,
    angles: Vec<Aoa>,
    used: Vec<bool>,
    /// Lowest index of the entry with the same configuration.
    alias: Vec<usize>,
    group_used: Vec<bool>,
}

impl ConfigCodebook {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn configs(&self) -> &[RisConfig] {
        &self.configs
    }

    pub fn config(&self, index: usize) -> &RisConfig {
        &self.configs[index]
    }

    pub fn angle(&self, index: usize) -> Aoa {
        self.angles[index]
    }

    pub fn is_used(&self, index: usize) -> bool {
        self.used[index]
    }

    pub fn unused_count(&self) -> usize {
        self.used.iter().filter(|u| !**u).count()
    }

    pub fn unused(&self) -> impl Iterator<Item = usize> + '_ {
        self.used.iter().enumerate().filter(|(_, u)| !**u).map(|(i, _)| i)
    }

    /// One index per configuration that has not been used yet: the lowest
    /// index among its aliases.
    pub fn available(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.alias[i] == i && !self.group_used[i])
    }

    pub fn available_count(&self) -> usize {
        self.available().count()
    }

    /// Number of distinct configurations.
    pub fn distinct_count(&self) -> usize {
        self.alias.iter().enumerate().filter(|(i, a)| i == *a).count()
    }

    /// Index of the first entry with the same configuration as `index`.
    pub fn alias_of(&self, index: usize) -> usize {
        self.alias[index]
    }

    fn mark_used(&mut self, index: usize) {
        debug_assert!(!self.used[index]);
        self.used[index] = true;
        self.group_used[self.alias[index]] = true;
    }

    /// Marks every entry unused again.
    pub fn reset(&mut self) {
        self.used.iter_mut().for_each(|u| *u = false);
        self.group_used.iter_mut().for_each(|u| *u = false);
    }
}

fn phase_compensation(h: &[Complex64]) -> impl Iterator<Item = Complex64> + '_ {
    h.iter().map(|x| Complex64::from_polar(1.0, -x.arg()))
}

/// `θ(φ) = diag(e^{-j arg h_n}) a*(φ)` for every configuration angle.
pub fn build_codebook(h: &[Complex64], geom: &ArrayGeometry) -> ConfigCodebook {
    assert_eq!(h.len(), geom.len(), "h must have one entry per RIS element");
    let grid = configuration_angle_grid(geom);
    let configs: Vec<RisConfig> = grid
        .points()
        .iter()
        .map(|&aoa| {
            let a = geom.array_response(aoa);
            RisConfig(phase_compensation(h).zip(&a).map(|(c, an)| c * an.conj()).collect())
        })
        .collect();
    let n = grid.len();
    let alias = alias_groups(&configs);
    ConfigCodebook { configs, angles: grid.points().to_vec(), used: vec![false; n], alias, group_used: vec![false; n] }
}

fn alias_groups(configs: &[RisConfig]) -> Vec<usize> {
    let mut alias: Vec<usize> = (0..configs.len()).collect();
    for i in 0..configs.len() {
        let n = configs[i].len() as f64;
        if let Some(j) = (0..i).find(|&j| alias[j] == j && configs[i].overlap(&configs[j]) >= n * (1.0 - ALIAS_TOL)) {
            alias[i] = j;
        }
    }
    alias
}

/// SE-maximising configuration for the estimated phases and angle:
/// `e^{j(ϑ - ω)} diag(e^{-j arg h_n}) a*(φ)`.
pub fn optimal_config(vartheta: f64, omega: f64, aoa: Aoa, h: &[Complex64], geom: &ArrayGeometry) -> RisConfig {
    let rot = Complex64::from_polar(1.0, vartheta - omega);
    let a = geom.array_response(aoa);
    RisConfig(phase_compensation(h).zip(&a).map(|(c, an)| rot * c * an.conj()).collect())
}

/// Configuration that co-phases every cascaded path with the direct path for
/// an unstructured estimate `(ĝ, d̂)`: entries `e^{j(arg d - arg h_n - arg g_n)}`.
pub fn coherent_config(g: &[Complex64], d: Complex64, h: &[Complex64]) -> RisConfig {
    let ref_phase = d.arg();
    RisConfig::from_phases(g.iter().zip(h).map(|(gn, hn)| ref_phase - hn.arg() - gn.arg()))
}

/// Picks the available entry maximising `|targetᴴ θ|` (lowest index on ties)
/// and marks it used.
pub fn nearest_unused(target: &RisConfig, codebook: &mut ConfigCodebook) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in codebook.available() {
        let o = target.overlap(&codebook.configs[i]);
        if best.is_none_or(|(_, b)| o > b) {
            best = Some((i, o));
        }
    }
    let (i, _) = best.ok_or(Error::CodebookExhausted)?;
    codebook.mark_used(i);
    Ok(i)
}

fn draw_available<R: Rng + ?Sized>(codebook: &mut ConfigCodebook, rng: &mut R) -> Result<usize> {
    let free: Vec<usize> = codebook.available().collect();
    if free.is_empty() {
        return Err(Error::CodebookExhausted);
    }
    let i = free[rng.random_range(0..free.len())];
    codebook.mark_used(i);
    Ok(i)
}

/// Two available entries with distinct configurations, drawn uniformly
/// without replacement.
pub fn random_init<R: Rng + ?Sized>(codebook: &mut ConfigCodebook, rng: &mut R) -> Result<[usize; 2]> {
    if codebook.available_count() < 2 {
        return Err(Error::CodebookExhausted);
    }
    let first = draw_available(codebook, rng)?;
    let second = draw_available(codebook, rng)?;
    Ok([first, second])
}

/// First entry closest to the previously applied configuration, second one random.
pub fn smart_init<R: Rng + ?Sized>(
    previous_best: &RisConfig,
    codebook: &mut ConfigCodebook,
    rng: &mut R,
) -> Result<[usize; 2]> {
    if codebook.available_count() < 2 {
        return Err(Error::CodebookExhausted);
    }
    let first = nearest_unused(previous_best, codebook)?;
    let second = draw_available(codebook, rng)?;
    Ok([first, second])
}

/// How the first two pilot configurations of a session are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum InitPolicy {
    Random,
    /// Seed from the configuration applied after the previous session.
    Smart(RisConfig),
}

/// Array geometry, known RIS-BS channel and AoA search shared by all
/// sessions, optionally with cached codebook responses.
#[derive(Debug, Clone)]
pub struct MleEngine {
    geom: ArrayGeometry,
    h: Vec<Complex64>,
    d_h: CascadeDiag,
    search: AoaSearch,
    table: Option<CodebookResponses>,
}

impl MleEngine {
    pub fn new(geom: ArrayGeometry, h: Vec<Complex64>, search: AoaSearch) -> Result<Self> {
        if h.len() != geom.len() {
            return Err(Error::DimensionMismatch { expected: geom.len(), found: h.len() });
        }
        let d_h = CascadeDiag::new(&h);
        Ok(Self { geom, h, d_h, search, table: None })
    }

    /// Precomputes the responses of `codebook` over the search grid.
    ///
    /// Sessions must then draw their rows from a codebook with the same entries.
    pub fn with_table(mut self, codebook: &ConfigCodebook) -> Self {
        self.table = Some(CodebookResponses::build(codebook, &self.d_h, &self.geom, self.search.grid()));
        self
    }

    pub fn geometry(&self) -> &ArrayGeometry {
        &self.geom
    }

    pub fn h(&self) -> &[Complex64] {
        &self.h
    }

    pub fn cascade(&self) -> &CascadeDiag {
        &self.d_h
    }

    pub fn search(&self) -> &AoaSearch {
        &self.search
    }

    pub fn build_codebook(&self) -> ConfigCodebook {
        build_codebook(&self.h, &self.geom)
    }

    /// Estimate from a session whose rows are codebook entries `ids`.
    pub fn estimate(&self, session: &PilotSession, ids: &[usize]) -> Result<Estimate> {
        let (y, rows, pp) = (session.received(), session.configs(), session.pilot_power());
        match &self.table {
            Some(t) => estimate_all_tabulated(y, rows, ids, t, &self.d_h, &self.geom, pp, &self.search),
            None => estimate_all(y, rows, &self.d_h, &self.geom, pp, &self.search),
        }
    }

    pub fn optimal_config(&self, est: &Estimate) -> RisConfig {
        optimal_config(est.vartheta, est.omega, est.aoa, &self.h, &self.geom)
    }
}

/// Per-iteration snapshot of the adaptive loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub pilots: usize,
    pub aoa: Aoa,
    pub omega: f64,
    pub beta: f64,
    pub vartheta: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptiveOutcome {
    pub estimate: Estimate,
    pub session: PilotSession,
    /// Codebook indices in pilot order.
    pub used: Vec<usize>,
    /// Configuration to apply after the session, built from the final estimate.
    pub theta_bar: RisConfig,
    pub history: Vec<IterationRecord>,
}

/// Runs `pilots` transmissions of the adaptive estimation loop.
///
/// `codebook` is consumed entry by entry; callers start each session from a
/// fresh (or [`ConfigCodebook::reset`]) codebook.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptive_estimation<L: PilotLink, R: Rng + ?Sized>(
    pilots: usize,
    codebook: &mut ConfigCodebook,
    init: &InitPolicy,
    link: &mut L,
    engine: &MleEngine,
    pilot_power: f64,
    noise_power: f64,
    rng: &mut R,
) -> Result<AdaptiveOutcome> {
    let n = codebook.len();
    if pilots < 2 || pilots > n {
        return Err(Error::InvalidPilotCount { pilots, elements: n });
    }
    if codebook.available_count() < pilots {
        return Err(Error::CodebookExhausted);
    }
    let pair = match init {
        InitPolicy::Random => random_init(codebook, rng)?,
        InitPolicy::Smart(prev) => smart_init(prev, codebook, rng)?,
    };

    let mut session = PilotSession::new(pilot_power, noise_power);
    let mut used = Vec::with_capacity(pilots);
    for &i in &pair {
        let cfg = codebook.config(i).clone();
        let sample = link.transmit(&cfg, rng);
        session.push(cfg, sample)?;
        used.push(i);
    }

    let mut history = Vec::with_capacity(pilots - 1);
    loop {
        let est = engine.estimate(&session, &used)?;
        history.push(IterationRecord {
            pilots: session.len(),
            aoa: est.aoa,
            omega: est.omega,
            beta: est.beta,
            vartheta: est.vartheta,
        });
        let theta_bar = engine.optimal_config(&est);
        if session.len() == pilots {
            return Ok(AdaptiveOutcome { estimate: est, session, used, theta_bar, history });
        }
        let next = nearest_unused(&theta_bar, codebook)?;
        let cfg = codebook.config(next).clone();
        let sample = link.transmit(&cfg, rng);
        session.push(cfg, sample)?;
        used.push(next);
    }
}
