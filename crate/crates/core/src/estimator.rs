//! Closed-form maximum-likelihood estimation of `(g, d)` and the LS baseline.
//!
//! With `v(φ) = B D_h a(φ)` and the centring projector `P = I - 11ᵀ/L`, the
//! angle estimate maximises
//!
//! ```text
//!     |yᴴ P v(φ)|² / (‖v(φ)‖² - |1ᵀ v(φ)|² / L)
//! ```
//!
//! The denominator equals `‖P v‖²`, which is how it is evaluated here. Given
//! the angle, the LOS gain and phase and then the direct channel follow in
//! closed form.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{local_grid, search_grid, AngleGrid, Aoa, ArrayGeometry};
use crate::channel::CascadeDiag;
use crate::configurator::{ConfigCodebook, RisConfig};
use crate::{wrap_phase, Error, Result};

/// Relative threshold under which `‖P v‖²` counts as zero.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Responses with `‖v‖²` below this fraction of `L (Σ|h_n|)²` are rounding
/// noise: every pilot row has a null at that angle.
pub const NULL_TOL: f64 = 1e-20;

/// Absolute floor on `‖v‖²` for `L` pilots.
fn null_floor(d_h: &CascadeDiag, pilots: usize) -> f64 {
    let peak: f64 = d_h.diagonal().iter().map(|h| h.norm()).sum();
    NULL_TOL * pilots as f64 * peak * peak
}

/// Relative gain a refinement point needs over the coarse maximum to replace
/// it. Smaller gains are rounding noise on a flat criterion.
pub const REFINE_GAIN_TOL: f64 = 1e-12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Local refinement pass run around the coarse argmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub points_per_axis: usize,
    /// Angular pitch in radians.
    pub pitch: f64,
}

impl Default for Refinement {
    fn default() -> Self {
        Self { points_per_axis: 11, pitch: 0.1 * PI / 180.0 }
    }
}

/// Grid search over the angle set with an optional refinement pass.
#[derive(Debug, Clone)]
pub struct AoaSearch {
    grid: AngleGrid,
    refinement: Option<Refinement>,
}

impl AoaSearch {
    pub fn new(grid: AngleGrid, refinement: Option<Refinement>) -> Self {
        Self { grid, refinement }
    }

    /// 181 x 181 grid (1 degree) refined by 11 x 11 points at 0.1 degree.
    pub fn standard() -> Self {
        Self::new(search_grid(181, 181).expect("valid resolution"), Some(Refinement::default()))
    }

    pub fn grid(&self) -> &AngleGrid {
        &self.grid
    }

    pub fn refinement(&self) -> Option<Refinement> {
        self.refinement
    }
}

/// Output of the estimator: the five channel parameters and the rebuilt channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub aoa: Aoa,
    pub omega: f64,
    pub beta: f64,
    pub vartheta: f64,
    pub alpha: f64,
    pub g_hat: Vec<Complex64>,
    pub d_hat: Complex64,
    /// Value of the angle criterion at the returned angle.
    pub objective: f64,
}

fn check_inputs(y: &[Complex64], rows: &[RisConfig], d_h: &CascadeDiag) -> Result<()> {
    if rows.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: rows.len(), found: y.len() });
    }
    if y.len() < 2 {
        return Err(Error::TooFewPilots(y.len()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d_h.len()) {
        return Err(Error::DimensionMismatch { expected: d_h.len(), found: r.len() });
    }
    Ok(())
}

/// `v = B D_h a(φ)` written into `out`.
fn cascaded_response(
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    aoa: Aoa,
    scratch: &mut [Complex64],
    out: &mut Vec<Complex64>,
) {
    geom.array_response_into(aoa, scratch);
    for (s, h) in scratch.iter_mut().zip(d_h.diagonal()) {
        *s *= h;
    }
    out.clear();
    out.extend(rows.iter().map(|r| r.as_slice().iter().zip(scratch.iter()).map(|(t, x)| t * x).sum::<Complex64>()));
}

/// `conj(y - ȳ)`, so that `Σ z_l v_l = yᴴ P v`.
fn centered_conj(y: &[Complex64]) -> Vec<Complex64> {
    let mean = y.iter().sum::<Complex64>() / y.len() as f64;
    y.iter().map(|yl| (yl - mean).conj()).collect()
}

/// `(yᴴ P v, ‖P v‖², ‖v‖²)`, with `z` from [`centered_conj`].
#[inline]
fn raw_terms(z: &[Complex64], v: &[Complex64]) -> (Complex64, f64, f64) {
    let mut inner = ZERO;
    let mut sum = ZERO;
    let mut norm = 0.0;
    for (zl, vl) in z.iter().zip(v) {
        inner += zl * vl;
        sum += vl;
        norm += vl.norm_sqr();
    }
    (inner, norm - sum.norm_sqr() / v.len() as f64, norm)
}

#[inline]
fn is_degenerate(den: f64, norm: f64, floor: f64) -> bool {
    den <= DEGENERACY_TOL * norm || norm <= floor
}

/// Criterion terms `(yᴴ P v, ‖P v‖²)` for one angle, rejecting degenerate directions.
#[inline]
fn centered_terms(z: &[Complex64], v: &[Complex64], floor: f64) -> Result<(Complex64, f64)> {
    let (inner, den, norm) = raw_terms(z, v);
    if is_degenerate(den, norm, floor) {
        return Err(Error::DegenerateDirection);
    }
    Ok((inner, den))
}

/// The angle criterion evaluated at a single angle.
pub fn mle_objective(
    y: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    aoa: Aoa,
) -> Result<f64> {
    check_inputs(y, rows, d_h)?;
    let mut scratch = vec![ZERO; geom.len()];
    let mut v = Vec::with_capacity(rows.len());
    cascaded_response(rows, d_h, geom, aoa, &mut scratch, &mut v);
    let (inner, den) = centered_terms(&centered_conj(y), &v, null_floor(d_h, y.len()))?;
    Ok(inner.norm_sqr() / den)
}

/// Numerator `|yᴴ P v|²` and denominator `‖v‖² - |1ᵀv|²/L` of the angle
/// criterion, with no degeneracy test applied.
pub fn criterion_terms(
    y: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    aoa: Aoa,
) -> Result<(f64, f64)> {
    check_inputs(y, rows, d_h)?;
    let mut scratch = vec![ZERO; geom.len()];
    let mut v = Vec::with_capacity(rows.len());
    cascaded_response(rows, d_h, geom, aoa, &mut scratch, &mut v);
    let (inner, den, _) = raw_terms(&centered_conj(y), &v);
    Ok((inner.norm_sqr(), den))
}

/// Responses `(θ_m ⊙ h)ᵀ a(φ_p)` of every codebook entry at every grid point.
///
/// With these cached, evaluating the criterion at a grid point costs `O(L)`
/// instead of `O(L N)`. The table is only valid for the `h`, geometry and
/// grid it was built from.
#[derive(Debug, Clone)]
pub struct CodebookResponses {
    entries: usize,
    points: usize,
    // entry-major: data[m * points + p], so a session scans L contiguous columns
    data: Vec<Complex64>,
}

impl CodebookResponses {
    pub fn build(codebook: &ConfigCodebook, d_h: &CascadeDiag, geom: &ArrayGeometry, grid: &AngleGrid) -> Self {
        let entries = codebook.len();
        let weighted: Vec<Vec<Complex64>> = codebook
            .configs()
            .iter()
            .map(|c| c.as_slice().iter().zip(d_h.diagonal()).map(|(t, h)| t * h).collect())
            .collect();
        let responses: Vec<Vec<Complex64>> = grid.points().par_iter().map(|&aoa| geom.array_response(aoa)).collect();
        let data: Vec<Complex64> = weighted
            .par_iter()
            .flat_map_iter(|w| {
                responses
                    .iter()
                    .map(move |a| w.iter().zip(a).map(|(x, y)| x * y).sum::<Complex64>())
                    .collect::<Vec<_>>()
            })
            .collect();
        Self { entries, points: grid.len(), data }
    }

    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn points(&self) -> usize {
        self.points
    }

    fn column(&self, entry: usize) -> &[Complex64] {
        &self.data[entry * self.points..(entry + 1) * self.points]
    }
}

/// Where the coarse scan gets `v(φ_p)` from.
#[derive(Clone, Copy)]
enum Responses<'a> {
    Direct,
    Tabulated { table: &'a CodebookResponses, ids: &'a [usize] },
}

const CHUNK: usize = 1024;

/// First index of the largest value, skipping `None`.
fn first_argmax(values: impl Iterator<Item = (usize, Option<f64>)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, val) in values {
        if let Some(val) = val {
            if best.is_none_or(|(_, b)| val > b) {
                best = Some((i, val));
            }
        }
    }
    best
}

fn coarse_scan(
    z: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    grid: &AngleGrid,
    source: Responses<'_>,
) -> Result<(usize, f64)> {
    let points = grid.len();
    let chunks = points.div_ceil(CHUNK);
    let floor = null_floor(d_h, z.len());
    let columns: Vec<&[Complex64]> = match source {
        Responses::Direct => Vec::new(),
        Responses::Tabulated { table, ids } => ids.iter().map(|&m| table.column(m)).collect(),
    };
    // per-chunk maxima are reduced in chunk order, so ties resolve to the
    // lowest grid index whatever the scheduling
    let chunk_best: Vec<Option<(usize, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(points);
            match source {
                Responses::Direct => {
                    let mut v = Vec::with_capacity(rows.len());
                    let mut scratch = vec![ZERO; geom.len()];
                    first_argmax(range.map(|p| {
                        cascaded_response(rows, d_h, geom, grid.points()[p], &mut scratch, &mut v);
                        (p, centered_terms(z, &v, floor).ok().map(|(i, d)| i.norm_sqr() / d))
                    }))
                }
                Responses::Tabulated { .. } => {
                    let l = z.len() as f64;
                    first_argmax(range.map(|p| {
                        let mut inner = ZERO;
                        let mut sum = ZERO;
                        let mut norm = 0.0;
                        for (zl, col) in z.iter().zip(&columns) {
                            let vl = col[p];
                            inner += zl * vl;
                            sum += vl;
                            norm += vl.norm_sqr();
                        }
                        // same arithmetic as centered_terms
                        let den = norm - sum.norm_sqr() / l;
                        (p, (!is_degenerate(den, norm, floor)).then(|| inner.norm_sqr() / den))
                    }))
                }
            }
        })
        .collect();
    first_argmax(chunk_best.into_iter().flatten().map(|(i, v)| (i, Some(v)))).ok_or(Error::AllDegenerate)
}

fn search_aoa(
    y: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    search: &AoaSearch,
    source: Responses<'_>,
) -> Result<(Aoa, f64)> {
    let z = centered_conj(y);
    let floor = null_floor(d_h, z.len());
    let (idx, coarse) = coarse_scan(&z, rows, d_h, geom, &search.grid, source)?;
    let center = search.grid.points()[idx];
    let Some(refine) = search.refinement else {
        return Ok((center, coarse));
    };
    let mut scratch = vec![ZERO; geom.len()];
    let mut v = Vec::with_capacity(rows.len());
    let local = local_grid(center, refine.points_per_axis, refine.pitch);
    let refined = first_argmax(local.iter().enumerate().map(|(k, &aoa)| {
        cascaded_response(rows, d_h, geom, aoa, &mut scratch, &mut v);
        (k, centered_terms(&z, &v, floor).ok().map(|(inner, den)| inner.norm_sqr() / den))
    }));
    match refined {
        Some((k, val)) if val > coarse * (1.0 + REFINE_GAIN_TOL) => Ok((local[k], val)),
        _ => Ok((center, coarse)),
    }
}

/// Angle estimate: argmax of [`mle_objective`] over the search grid, then refined.
pub fn estimate_aoa(
    y: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    search: &AoaSearch,
) -> Result<(Aoa, f64)> {
    check_inputs(y, rows, d_h)?;
    search_aoa(y, rows, d_h, geom, search, Responses::Direct)
}

/// Closed-form gain/phase estimates once the angle is fixed.
fn complete_estimate(
    y: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    pilot_power: f64,
    aoa: Aoa,
    objective: f64,
) -> Result<Estimate> {
    let l = y.len() as f64;
    let mut scratch = vec![ZERO; geom.len()];
    let mut v = Vec::with_capacity(rows.len());
    cascaded_response(rows, d_h, geom, aoa, &mut scratch, &mut v);
    // the angle already passed the degeneracy test during the search; the
    // direct recomputation may round differently near the threshold
    let (inner, den, _) = raw_terms(&centered_conj(y), &v);
    if !(den > 0.0) {
        return Err(Error::DegenerateDirection);
    }

    let omega = wrap_phase(-inner.arg());
    let beta = (inner.norm() / den).powi(2) / pilot_power;
    let gain = Complex64::from_polar(beta.sqrt(), omega);
    let g_hat: Vec<Complex64> = geom.array_response(aoa).into_iter().map(|a| a * gain).collect();

    // v already holds B D_h a(φ̂), so B D_h ĝ = gain * v
    let sp = pilot_power.sqrt();
    let resid: Complex64 = y.iter().zip(&v).map(|(yl, vl)| yl - sp * gain * vl).sum();
    let vartheta = wrap_phase(resid.arg());
    let alpha = resid.norm_sqr() / (pilot_power * l * l);
    let d_hat = Complex64::from_polar(alpha.sqrt(), vartheta);

    Ok(Estimate { aoa, omega, beta, vartheta, alpha, g_hat, d_hat, objective })
}

/// Joint MLE of the LOS channel `g` and the direct channel `d`.
pub fn estimate_all(
    y: &[Complex64],
    rows: &[RisConfig],
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    pilot_power: f64,
    search: &AoaSearch,
) -> Result<Estimate> {
    check_inputs(y, rows, d_h)?;
    let (aoa, objective) = search_aoa(y, rows, d_h, geom, search, Responses::Direct)?;
    complete_estimate(y, rows, d_h, geom, pilot_power, aoa, objective)
}

/// [`estimate_all`] for sessions whose rows are codebook entries `ids`,
/// using cached responses for the coarse scan.
///
/// The table must have been built from the same `h`, geometry and search grid.
#[allow(clippy::too_many_arguments)]
pub fn estimate_all_tabulated(
    y: &[Complex64],
    rows: &[RisConfig],
    ids: &[usize],
    table: &CodebookResponses,
    d_h: &CascadeDiag,
    geom: &ArrayGeometry,
    pilot_power: f64,
    search: &AoaSearch,
) -> Result<Estimate> {
    check_inputs(y, rows, d_h)?;
    if ids.len() != rows.len() {
        return Err(Error::DimensionMismatch { expected: rows.len(), found: ids.len() });
    }
    if table.points != search.grid.len() {
        return Err(Error::DimensionMismatch { expected: search.grid.len(), found: table.points });
    }
    if let Some(&bad) = ids.iter().find(|&&m| m >= table.entries) {
        return Err(Error::DimensionMismatch { expected: table.entries, found: bad + 1 });
    }
    let source = Responses::Tabulated { table, ids };
    let (aoa, objective) = search_aoa(y, rows, d_h, geom, search, source)?;
    complete_estimate(y, rows, d_h, geom, pilot_power, aoa, objective)
}

/// Least-squares channel estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LsEstimate {
    pub g_hat: Vec<Complex64>,
    pub d_hat: Complex64,
}

/// Minimum-norm least-squares solver for a fixed configuration matrix.
///
/// Solves `min ‖y - √P_p [B D_h | 1] [g; d]‖²` through the pseudo-inverse,
/// which is computed once so repeated solves are a matrix-vector product.
#[derive(Debug, Clone)]
pub struct LsSolver {
    pinv: DMatrix<Complex64>,
}

impl LsSolver {
    pub fn new(rows: &[RisConfig], d_h: &CascadeDiag, pilot_power: f64) -> Result<Self> {
        let n = d_h.len();
        if rows.is_empty() {
            return Err(Error::TooFewPilots(0));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, found: r.len() });
        }
        let sp = pilot_power.sqrt();
        let h = d_h.diagonal();
        let a = DMatrix::from_fn(rows.len(), n + 1, |l, k| {
            if k < n {
                rows[l].as_slice()[k] * h[k] * sp
            } else {
                Complex64::new(sp, 0.0)
            }
        });
        let svd = a.svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let tol = smax * (rows.len().max(n + 1) as f64) * f64::EPSILON;
        let pinv = svd.pseudo_inverse(tol).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(Self { pinv })
    }

    pub fn solve(&self, y: &[Complex64]) -> Result<LsEstimate> {
        if y.len() != self.pinv.ncols() {
            return Err(Error::DimensionMismatch { expected: self.pinv.ncols(), found: y.len() });
        }
        let n = self.pinv.nrows() - 1;
        let mut x = vec![ZERO; n + 1];
        for (k, xk) in x.iter_mut().enumerate() {
            *xk = y.iter().enumerate().map(|(l, yl)| self.pinv[(k, l)] * yl).sum();
        }
        let d_hat = x[n];
        x.truncate(n);
        Ok(LsEstimate { g_hat: x, d_hat })
    }
}

/// One-shot least-squares estimate; see [`LsSolver`].
pub fn ls_estimate(y: &[Complex64], rows: &[RisConfig], d_h: &CascadeDiag, pilot_power: f64) -> Result<LsEstimate> {
    LsSolver::new(rows, d_h, pilot_power)?.solve(y)
}

/// The first `count` columns of the `N x N` DFT matrix as RIS configurations.
pub fn dft_configs(n: usize, count: usize) -> Vec<RisConfig> {
    (0..count)
        .map(|k| {
            let v = (0..n)
                .map(|i| Complex64::from_polar(1.0, -2.0 * PI * ((i * k) % n) as f64 / n as f64))
                .collect();
            RisConfig::new(v).expect("DFT entries are unit modulus")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_los_channel, synth_received_pilots, ChannelState, LosChannelParams};
    use crate::configurator::build_codebook;
    use crate::phase_diff;
    use crate::rng::child_rng;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;

    fn setup(nh: usize, nv: usize) -> (ArrayGeometry, Vec<Complex64>, ConfigCodebook) {
        let geom = ArrayGeometry::new(nh, nv, 0.25, 0.25).unwrap();
        let h = geom.array_response(Aoa::new(0.3, -0.2).unwrap());
        let cb = build_codebook(&h, &geom);
        (geom, h, cb)
    }

    fn coarse(res: usize) -> AoaSearch {
        AoaSearch::new(search_grid(res, res).unwrap(), None)
    }

    #[test]
    fn constant_observation_has_zero_objective() {
        let (geom, h, cb) = setup(4, 4);
        let d_h = CascadeDiag::new(&h);
        let rows: Vec<RisConfig> = cb.configs()[..5].to_vec();
        let y = vec![Complex64::new(1.5, -0.5); 5];
        for &aoa in coarse(9).grid().points() {
            match mle_objective(&y, &rows, &d_h, &geom, aoa) {
                Ok(v) => assert!(v.abs() < 1e-20, "objective {v}"),
                Err(e) => assert!(matches!(e, Error::DegenerateDirection)),
            }
        }
    }

    #[test]
    fn objective_scales_with_squared_modulus() {
        let (geom, h, cb) = setup(4, 4);
        let d_h = CascadeDiag::new(&h);
        let rows: Vec<RisConfig> = cb.configs()[3..7].to_vec();
        let mut rng = child_rng(2, &[]);
        let y: Vec<Complex64> = (0..4).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let c = Complex64::new(-1.3, 0.7);
        let yc: Vec<Complex64> = y.iter().map(|x| x * c).collect();
        let aoa = Aoa::new(0.2, 0.1).unwrap();
        let a = mle_objective(&y, &rows, &d_h, &geom, aoa).unwrap();
        let b = mle_objective(&yc, &rows, &d_h, &geom, aoa).unwrap();
        assert!((b / a - c.norm_sqr()).abs() < 1e-10);
    }

    #[test]
    fn noiseless_objective_peaks_at_truth() {
        let (geom, h, cb) = setup(4, 4);
        let d_h = CascadeDiag::new(&h);
        let search = coarse(13);
        let truth = search.grid().points()[40];
        let (beta, pp) = (0.7, 3.0);
        let g = make_los_channel(&LosChannelParams::new(beta, 2.0, truth).unwrap(), &geom);
        let state = ChannelState::new(g, Complex64::new(-0.4, 1.1), h.clone()).unwrap();
        let rows: Vec<RisConfig> = [0usize, 5, 9].iter().map(|&i| cb.configs()[i].clone()).collect();
        let y = synth_received_pilots(&state, &rows, pp, 0.0, &mut child_rng(0, &[])).unwrap();

        // closed form: P_p β (‖v‖² - |1ᵀv|²/L)
        let a = geom.array_response(truth);
        let v: Vec<Complex64> = rows
            .iter()
            .map(|r| r.as_slice().iter().zip(&h).zip(&a).map(|((t, hn), an)| t * hn * an).sum())
            .collect();
        let s: Complex64 = v.iter().sum();
        let expect = pp * beta * (v.iter().map(|x| x.norm_sqr()).sum::<f64>() - s.norm_sqr() / 3.0);
        let at_truth = mle_objective(&y, &rows, &d_h, &geom, truth).unwrap();
        assert!((at_truth - expect).abs() < 1e-9 * expect);
        for &p in search.grid().points() {
            if let Ok(v) = mle_objective(&y, &rows, &d_h, &geom, p) {
                assert!(v <= at_truth * (1.0 + 1e-12));
            }
        }
        let (found, _) = estimate_aoa(&y, &rows, &d_h, &geom, &search).unwrap();
        assert_eq!(found, truth);
    }

    #[test]
    fn recovers_parameters_noiselessly() {
        let (geom, h, cb) = setup(8, 8);
        let d_h = CascadeDiag::new(&h);
        let search = coarse(61);
        let mut rng = child_rng(10, &[]);
        for _ in 0..10 {
            let truth = search.grid().points()[rng.random_range(0..search.grid().len())];
            let (beta, omega) = (rng.random_range(0.05..2.0), rng.random_range(0.0..6.28));
            let d = Complex64::from_polar(rng.random_range(0.1..2.0), rng.random_range(0.0..6.28));
            let g = make_los_channel(&LosChannelParams::new(beta, omega, truth).unwrap(), &geom);
            let state = ChannelState::new(g, d, h.clone()).unwrap();
            // the top elevation row of the codebook collapses to a single beam
            let usable: Vec<usize> = (0..cb.len()).filter(|&i| cb.angle(i).elevation < 1.5).collect();
            let rows_u: Vec<RisConfig> = rand::seq::index::sample(&mut rng, usable.len(), 4)
                .iter()
                .map(|k| cb.configs()[usable[k]].clone())
                .collect();
            let y = synth_received_pilots(&state, &rows_u, 2.0, 0.0, &mut rng).unwrap();
            let est = estimate_all(&y, &rows_u, &d_h, &geom, 2.0, &search).unwrap();
            if truth.elevation.abs() == FRAC_PI_2 {
                // azimuth is unobservable at the poles
                assert_eq!(est.aoa.elevation, truth.elevation);
            } else {
                assert_eq!(est.aoa, truth);
            }
            assert!((est.beta / beta - 1.0).abs() < 1e-6);
            assert!(phase_diff(est.omega, omega).abs() < 1e-6);
            assert!((est.alpha / d.norm_sqr() - 1.0).abs() < 1e-6);
            assert!(phase_diff(est.vartheta, d.arg()).abs() < 1e-6);
        }
    }

    #[test]
    fn pure_direct_path() {
        let (geom, h, cb) = setup(4, 4);
        let d_h = CascadeDiag::new(&h);
        let d = Complex64::new(0.6, -0.8);
        let state = ChannelState::new(vec![ZERO; 16], d, h.clone()).unwrap();
        let rows = cb.configs()[..4].to_vec();
        let y = synth_received_pilots(&state, &rows, 5.0, 0.0, &mut child_rng(0, &[])).unwrap();
        let est = estimate_all(&y, &rows, &d_h, &geom, 5.0, &coarse(21)).unwrap();
        assert!((est.alpha - d.norm_sqr()).abs() < 1e-12);
        assert!(phase_diff(est.vartheta, d.arg()).abs() < 1e-12);
        assert!(est.beta < 1e-20);
    }

    #[test]
    fn pilot_power_scaling_is_neutral() {
        let (geom, h, cb) = setup(4, 4);
        let d_h = CascadeDiag::new(&h);
        let search = coarse(15);
        let truth = search.grid().points()[100];
        let g = make_los_channel(&LosChannelParams::new(0.3, 4.0, truth).unwrap(), &geom);
        let state = ChannelState::new(g, Complex64::new(0.2, 0.5), h.clone()).unwrap();
        let rows = vec![cb.configs()[1].clone(), cb.configs()[6].clone(), cb.configs()[11].clone()];
        let mut rng = child_rng(0, &[]);
        let y1 = synth_received_pilots(&state, &rows, 1.0, 0.0, &mut rng).unwrap();
        let y4 = synth_received_pilots(&state, &rows, 4.0, 0.0, &mut rng).unwrap();
        let a = estimate_all(&y1, &rows, &d_h, &geom, 1.0, &search).unwrap();
        let b = estimate_all(&y4, &rows, &d_h, &geom, 4.0, &search).unwrap();
        assert_eq!(a.aoa, b.aoa);
        assert!((a.beta - b.beta).abs() < 1e-12 && (a.alpha - b.alpha).abs() < 1e-12);
        assert!(phase_diff(a.omega, b.omega).abs() < 1e-12);
        assert!(phase_diff(a.vartheta, b.vartheta).abs() < 1e-12);
    }

    #[test]
    fn tabulated_matches_direct() {
        let (geom, h, cb) = setup(8, 8);
        let d_h = CascadeDiag::new(&h);
        let search = AoaSearch::new(search_grid(91, 91).unwrap(), Some(Refinement::default()));
        let table = CodebookResponses::build(&cb, &d_h, &geom, search.grid());
        let mut rng = child_rng(4, &[]);
        let truth = Aoa::new(0.41, -0.23).unwrap();
        let g = make_los_channel(&LosChannelParams::new(0.1, 1.0, truth).unwrap(), &geom);
        let state = ChannelState::new(g, Complex64::new(0.3, 0.3), h.clone()).unwrap();
        let ids = [3usize, 17, 40, 41, 55];
        let rows: Vec<RisConfig> = ids.iter().map(|&i| cb.configs()[i].clone()).collect();
        let y = synth_received_pilots(&state, &rows, 1.0, 1.0, &mut rng).unwrap();
        let a = estimate_all(&y, &rows, &d_h, &geom, 1.0, &search).unwrap();
        let b = estimate_all_tabulated(&y, &rows, &ids, &table, &d_h, &geom, 1.0, &search).unwrap();
        assert_eq!(a.aoa, b.aoa);
        assert!((a.beta - b.beta).abs() < 1e-12 * a.beta.max(1.0));
        assert!((a.objective - b.objective).abs() < 1e-9 * a.objective);
    }

    #[test]
    fn rejects_single_pilot_and_mismatches() {
        let (geom, h, cb) = setup(2, 2);
        let d_h = CascadeDiag::new(&h);
        let rows = cb.configs()[..1].to_vec();
        let y = vec![Complex64::new(1.0, 0.0)];
        assert!(matches!(estimate_all(&y, &rows, &d_h, &geom, 1.0, &coarse(5)), Err(Error::TooFewPilots(1))));
        let rows = cb.configs()[..2].to_vec();
        assert!(matches!(
            estimate_all(&y, &rows, &d_h, &geom, 1.0, &coarse(5)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rounding_noise_responses_are_degenerate() {
        let h = vec![Complex64::new(1.0, 0.0); 16];
        let floor = null_floor(&CascadeDiag::new(&h), 2);
        let z = centered_conj(&[Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.5)]);
        let noise = [Complex64::new(0.0, 7.8e-16), Complex64::new(3e-16, 7.7e-16)];
        assert!(matches!(centered_terms(&z, &noise, floor), Err(Error::DegenerateDirection)));
        let weak = [Complex64::new(0.0, 1e-6), Complex64::new(1e-6, 0.0)];
        assert!(centered_terms(&z, &weak, floor).is_ok());
    }

    #[test]
    fn identical_rows_are_all_degenerate() {
        // B D_h a(φ) ∝ 1 for every φ when the rows coincide
        let (geom, h, cb) = setup(2, 2);
        let d_h = CascadeDiag::new(&h);
        let rows = vec![cb.configs()[0].clone(), cb.configs()[0].clone()];
        let y = vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        assert!(matches!(estimate_aoa(&y, &rows, &d_h, &geom, &coarse(7)), Err(Error::AllDegenerate)));
    }

    #[test]
    fn ls_exact_recovery_with_full_rank() {
        let geom = ArrayGeometry::new(2, 2, 0.25, 0.25).unwrap();
        let n = geom.len();
        let h = geom.array_response(Aoa::new(0.3, -0.2).unwrap());
        let d_h = CascadeDiag::new(&h);
        let mut rng = child_rng(8, &[]);
        let rows: Vec<RisConfig> = (0..n + 1)
            .map(|_| RisConfig::new((0..n).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..6.28))).collect()).unwrap())
            .collect();
        let g: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.random(), rng.random())).collect();
        let d = Complex64::new(-0.3, 0.9);
        let state = ChannelState::new(g.clone(), d, h.clone()).unwrap();
        let y = synth_received_pilots(&state, &rows, 2.0, 0.0, &mut rng).unwrap();
        let est = ls_estimate(&y, &rows, &d_h, 2.0).unwrap();
        let gn: f64 = g.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        for (a, b) in est.g_hat.iter().zip(&g) {
            assert!((a - b).norm() < 1e-8 * gn);
        }
        assert!((est.d_hat - d).norm() < 1e-8 * d.norm());
    }

    #[test]
    fn ls_zero_observation_gives_zero() {
        let (_, h, _) = setup(4, 2);
        let d_h = CascadeDiag::new(&h);
        let rows = dft_configs(8, 5);
        let est = ls_estimate(&[ZERO; 5], &rows, &d_h, 1.0).unwrap();
        assert!(est.g_hat.iter().all(|x| x.norm() == 0.0));
        assert_eq!(est.d_hat, ZERO);
    }

    #[test]
    fn ls_is_minimum_norm_solution() {
        // underdetermined: the solution fits the data and lies in the row space
        let (_, h, _) = setup(4, 2);
        let d_h = CascadeDiag::new(&h);
        let rows = dft_configs(8, 3);
        let y = vec![Complex64::new(1.0, 0.5), Complex64::new(-0.2, 0.1), Complex64::new(0.3, -0.7)];
        let est = ls_estimate(&y, &rows, &d_h, 1.0).unwrap();
        let x: Vec<Complex64> = est.g_hat.iter().copied().chain([est.d_hat]).collect();
        let a = DMatrix::from_fn(3, 9, |l, k| if k < 8 { rows[l].as_slice()[k] * h[k] } else { Complex64::new(1.0, 0.0) });
        for l in 0..3 {
            let fit: Complex64 = (0..9).map(|k| a[(l, k)] * x[k]).sum();
            assert!((fit - y[l]).norm() < 1e-12);
        }
        // minimum norm: compare with A^H (A A^H)^{-1} y from the normal equations
        let aah = &a * a.adjoint();
        let z = aah.lu().solve(&nalgebra::DVector::from_column_slice(&y)).unwrap();
        let xm = a.adjoint() * z;
        for k in 0..9 {
            assert!((xm[k] - x[k]).norm() < 1e-10);
        }
    }

    #[test]
    fn dft_configs_are_orthogonal() {
        let rows = dft_configs(8, 8);
        assert_eq!(rows[0].as_slice(), &[Complex64::new(1.0, 0.0); 8]);
        for i in 0..8 {
            for j in 0..8 {
                let ip: Complex64 = rows[i].as_slice().iter().zip(rows[j].as_slice()).map(|(a, b)| a.conj() * b).sum();
                let expect = if i == j { 8.0 } else { 0.0 };
                assert!((ip - Complex64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }
}
