//! Planar RIS geometry, array responses and angle grids.
//!
//! Elements are flattened row-major with the vertical index outermost:
//! element `(ih, iv)` (zero based) lives at flat index `iv * n_h + ih`.
//! Every other module relies on this ordering through [`ArrayGeometry::flat_index`].

use std::f64::consts::{FRAC_PI_2, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ANGLE_SLACK: f64 = 1e-12;

/// Uniform planar array with spacings expressed in wavelengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    n_h: usize,
    n_v: usize,
    delta_h: f64,
    delta_v: f64,
}

impl ArrayGeometry {
    pub fn new(n_h: usize, n_v: usize, delta_h: f64, delta_v: f64) -> Result<Self> {
        if n_h == 0 || n_v == 0 {
            return Err(Error::InvalidGeometry(format!(
                "element counts must be positive, got {n_h}x{n_v}"
            )));
        }
        if !(delta_h > 0.0 && delta_v > 0.0) || !delta_h.is_finite() || !delta_v.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "spacings must be positive, got ({delta_h}, {delta_v})"
            )));
        }
        Ok(Self { n_h, n_v, delta_h, delta_v })
    }

    pub fn n_h(&self) -> usize {
        self.n_h
    }

    pub fn n_v(&self) -> usize {
        self.n_v
    }

    pub fn delta_h(&self) -> f64 {
        self.delta_h
    }

    pub fn delta_v(&self) -> f64 {
        self.delta_v
    }

    /// Total number of elements `N = n_h * n_v`.
    pub fn len(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn flat_index(&self, ih: usize, iv: usize) -> usize {
        iv * self.n_h + ih
    }

    /// Inter-element phase progressions `(ψ_H, ψ_V)` for a plane wave from `aoa`.
    pub fn steering_phases(&self, aoa: Aoa) -> (f64, f64) {
        let psi_h = TAU * self.delta_h * aoa.azimuth.sin() * aoa.elevation.cos();
        let psi_v = TAU * self.delta_v * aoa.elevation.sin();
        (psi_h, psi_v)
    }

    /// Array response `a(φ)`.
    ///
    /// Entry `(ih, iv)` is `exp(-j (ih ψ_H + iv ψ_V))`, i.e. the conjugated
    /// phase profile, so that `a*(φ)` is the matched beam towards `φ`.
    pub fn array_response(&self, aoa: Aoa) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.len()];
        self.array_response_into(aoa, &mut out);
        out
    }

    /// Same as [`Self::array_response`] but writes into a caller buffer of length `N`.
    pub fn array_response_into(&self, aoa: Aoa, out: &mut [Complex64]) {
        debug_assert_eq!(out.len(), self.len());
        let (psi_h, psi_v) = self.steering_phases(aoa);
        let (first, rest) = out.split_at_mut(self.n_h);
        for (ih, x) in first.iter_mut().enumerate() {
            *x = Complex64::from_polar(1.0, -(ih as f64) * psi_h);
        }
        for (k, chunk) in rest.chunks_exact_mut(self.n_h).enumerate() {
            let row = Complex64::from_polar(1.0, -((k + 1) as f64) * psi_v);
            for (x, h) in chunk.iter_mut().zip(first.iter()) {
                *x = row * h;
            }
        }
    }
}

/// Azimuth/elevation angle of arrival, both restricted to `[-π/2, π/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aoa {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Aoa {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x.abs() <= FRAC_PI_2 + ANGLE_SLACK;
        if !ok(azimuth) || !ok(elevation) {
            return Err(Error::InvalidConfig(format!(
                "angle of arrival ({azimuth}, {elevation}) outside [-pi/2, pi/2]^2"
            )));
        }
        Ok(Self {
            azimuth: azimuth.clamp(-FRAC_PI_2, FRAC_PI_2),
            elevation: elevation.clamp(-FRAC_PI_2, FRAC_PI_2),
        })
    }

    pub fn contains(&self) -> bool {
        self.azimuth.abs() <= FRAC_PI_2 && self.elevation.abs() <= FRAC_PI_2
    }
}

/// Which family a grid belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridKind {
    /// The `N` plausible angles from which the configuration codebook is built.
    Configuration,
    /// Uniform grid over the full angle set used by the AoA search.
    Search { res_az: usize, res_el: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    points: Vec<Aoa>,
    kind: GridKind,
}

impl AngleGrid {
    pub fn points(&self) -> &[Aoa] {
        &self.points
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<Aoa> {
        self.points.get(index).copied()
    }

    /// Grid position closest to `aoa` (first one on ties).
    pub fn nearest(&self, aoa: Aoa) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points.iter().enumerate() {
            let d = (p.azimuth - aoa.azimuth).powi(2) + (p.elevation - aoa.elevation).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

fn dft_angles(n: usize) -> Vec<f64> {
    let lo = -(((n as i64) - 1) / 2);
    let hi = (n as i64) / 2;
    (lo..=hi)
        .map(|m| (2.0 * m as f64 / n as f64).clamp(-1.0, 1.0).asin())
        .collect()
}

/// The `N` configuration angles `arcsin(2m / N_H) x arcsin(2m / N_V)`.
///
/// Ordered elevation-major, matching the element flattening.
pub fn configuration_angle_grid(geom: &ArrayGeometry) -> AngleGrid {
    let az = dft_angles(geom.n_h());
    let el = dft_angles(geom.n_v());
    let points = el
        .iter()
        .flat_map(|&e| az.iter().map(move |&a| Aoa { azimuth: a, elevation: e }))
        .collect();
    AngleGrid { points, kind: GridKind::Configuration }
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(move |i| if i == n - 1 { hi } else { lo + step * i as f64 })
}

/// Uniform `res_az x res_el` grid over `[-π/2, π/2]^2`, endpoints included.
pub fn search_grid(res_az: usize, res_el: usize) -> Result<AngleGrid> {
    if res_az < 2 || res_el < 2 {
        return Err(Error::InvalidGridResolution { res_az, res_el });
    }
    let az: Vec<f64> = linspace(-FRAC_PI_2, FRAC_PI_2, res_az).collect();
    let points = linspace(-FRAC_PI_2, FRAC_PI_2, res_el)
        .flat_map(|e| az.iter().map(move |&a| Aoa { azimuth: a, elevation: e }))
        .collect();
    Ok(AngleGrid { points, kind: GridKind::Search { res_az, res_el } })
}

/// Local grid of `points_per_axis^2` angles with the given pitch, centred on
/// `center`, dropping anything that falls outside `[-π/2, π/2]^2`.
pub(crate) fn local_grid(center: Aoa, points_per_axis: usize, pitch: f64) -> Vec<Aoa> {
    let half = (points_per_axis / 2) as i64;
    let offsets: Vec<f64> = (-half..=half).map(|k| k as f64 * pitch).collect();
    let mut out = Vec::with_capacity(offsets.len() * offsets.len());
    for de in &offsets {
        for da in &offsets {
            let (a, e) = (center.azimuth + da, center.elevation + de);
            if a.abs() <= FRAC_PI_2 && e.abs() <= FRAC_PI_2 {
                out.push(Aoa { azimuth: a, elevation: e });
            }
        }
    }
    out
}
