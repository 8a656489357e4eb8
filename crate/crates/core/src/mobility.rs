//! Indoor random-walk mobility and channel tracking.
//!
//! The UE walks at constant step length with a heading that performs a
//! Gaussian random walk and reflects specularly off the room walls. Each
//! position is mapped to the AoA seen from the RIS and to the propagation
//! phase at the reference element, which drives the LOS channel over time.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::array::{Aoa, ArrayGeometry};
use crate::channel::{make_los_channel, ChannelState, LinkBudget, LosChannelParams, NoisyLink};
use crate::configurator::{run_adaptive_estimation, ConfigCodebook, InitPolicy, MleEngine, RisConfig};
use crate::metrics::{se_achieved, se_max};
use crate::{wrap_phase, Error, Result};

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Room, RIS placement and walking parameters. Lengths in metres, times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScenario {
    pub room_x: f64,
    pub room_y: f64,
    pub ris_center: Vec3,
    /// Boresight of the RIS, pointing into the room.
    pub ris_normal: Vec3,
    pub ue_height: f64,
    pub wavelength: f64,
    pub step_interval: f64,
    pub step_distance: f64,
    /// Standard deviation of the per-step heading change, radians.
    pub turn_sigma: f64,
    /// Minimum distance the UE keeps from every wall.
    pub wall_margin: f64,
}

impl Default for RoomScenario {
    fn default() -> Self {
        Self {
            room_x: 5.0,
            room_y: 5.0,
            ris_center: [0.0, 2.5, 1.5],
            ris_normal: [1.0, 0.0, 0.0],
            ue_height: 1.0,
            wavelength: 0.1,
            step_interval: 0.2,
            step_distance: 0.1,
            turn_sigma: 30f64.to_radians(),
            wall_margin: 0.2,
        }
    }
}

impl RoomScenario {
    /// Average walking speed in m/s.
    pub fn speed(&self) -> f64 {
        self.step_distance / self.step_interval
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.room_x > 2.0 * self.wall_margin && self.room_y > 2.0 * self.wall_margin) {
            return bad("room must be larger than twice the wall margin");
        }
        if !(self.wall_margin >= 0.0) {
            return bad("wall margin must be non-negative");
        }
        if !(self.wavelength > 0.0) {
            return bad("wavelength must be positive");
        }
        if !(self.step_interval > 0.0 && self.step_distance > 0.0) {
            return bad("step interval and step distance must be positive");
        }
        if !(self.turn_sigma >= 0.0) {
            return bad("turn sigma must be non-negative");
        }
        if (norm(self.ris_normal) - 1.0).abs() > 1e-9 {
            return bad("RIS normal must be a unit vector");
        }
        if self.ris_normal[2].abs() > 1e-9 {
            return bad("RIS normal must be horizontal (wall-mounted surface)");
        }
        let [x, y, _] = self.ris_center;
        let tol = 1e-9;
        let on_wall = x.abs() < tol || (x - self.room_x).abs() < tol || y.abs() < tol || (y - self.room_y).abs() < tol;
        let inward = [x + 1e-3 * self.ris_normal[0], y + 1e-3 * self.ris_normal[1]];
        let points_in = inward[0] > 0.0 && inward[0] < self.room_x && inward[1] > 0.0 && inward[1] < self.room_y;
        if !on_wall || !points_in {
            return bad("RIS must sit on a wall and face into the room");
        }
        Ok(())
    }

    fn local_frame(&self) -> (Vec3, Vec3, Vec3) {
        let n = self.ris_normal;
        let up = [0.0, 0.0, 1.0];
        let horizontal = cross(up, n);
        let horizontal = scale(horizontal, 1.0 / norm(horizontal));
        let vertical = cross(n, horizontal);
        (n, horizontal, vertical)
    }
}

/// One sample of the UE trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub position: Vec3,
    pub aoa: Aoa,
    /// Distance from the RIS centre.
    pub distance: f64,
}

/// AoA of the line from the RIS centre to `position`, in the RIS frame.
pub fn aoa_from_position(scenario: &RoomScenario, position: Vec3) -> Result<Aoa> {
    let r = sub(position, scenario.ris_center);
    let (n, horizontal, vertical) = scenario.local_frame();
    let along = dot(r, n);
    let dist = norm(r);
    if !(along > 0.0) || dist == 0.0 {
        return Err(Error::BehindSurface);
    }
    let elevation = (dot(r, vertical) / dist).clamp(-1.0, 1.0).asin();
    let azimuth = dot(r, horizontal).atan2(along);
    Aoa::new(azimuth, elevation)
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> (f64, bool) {
    let mut flipped = false;
    while x < lo || x > hi {
        x = if x < lo { 2.0 * lo - x } else { 2.0 * hi - x };
        flipped = !flipped;
    }
    (x, flipped)
}

/// Random walk of `duration` seconds sampled every `step_interval`.
///
/// The start point is uniform over the allowed floor area and the initial
/// heading is uniform.
pub fn random_walk<R: Rng + ?Sized>(scenario: &RoomScenario, duration: f64, rng: &mut R) -> Result<Vec<TrajectoryPoint>> {
    scenario.validate()?;
    if !(duration > 0.0) {
        return Err(Error::InvalidConfig(format!("duration must be positive, got {duration}")));
    }
    let steps = (duration / scenario.step_interval).round() as usize;
    let m = scenario.wall_margin;
    let (xlo, xhi, ylo, yhi) = (m, scenario.room_x - m, m, scenario.room_y - m);
    let turn = Normal::new(0.0, scenario.turn_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut pos = [rng.random_range(xlo..xhi), rng.random_range(ylo..yhi), scenario.ue_height];
    let mut heading = rng.random_range(0.0..TAU);
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        if k > 0 {
            heading += turn.sample(rng);
            let (x, fx) = reflect(pos[0] + scenario.step_distance * heading.cos(), xlo, xhi);
            let (y, fy) = reflect(pos[1] + scenario.step_distance * heading.sin(), ylo, yhi);
            if fx {
                heading = PI - heading;
            }
            if fy {
                heading = -heading;
            }
            heading = wrap_phase(heading);
            pos = [x, y, scenario.ue_height];
        }
        let aoa = aoa_from_position(scenario, pos)?;
        let distance = norm(sub(pos, scenario.ris_center));
        out.push(TrajectoryPoint { t: k as f64 * scenario.step_interval, position: pos, aoa, distance });
    }
    Ok(out)
}

/// Channel at a trajectory point.
///
/// `ω` is the propagation phase `-2π r / λ` at the reference element. The
/// direct path keeps magnitude `√(10 β)` with a freshly drawn uniform phase.
pub fn channel_at<R: Rng + ?Sized>(
    scenario: &RoomScenario,
    point: &TrajectoryPoint,
    beta: f64,
    geom: &ArrayGeometry,
    h: &[Complex64],
    rng: &mut R,
) -> Result<ChannelState> {
    let omega = wrap_phase(-TAU * point.distance / scenario.wavelength);
    let params = LosChannelParams::new(beta, omega, point.aoa)?;
    let d = Complex64::from_polar((10.0 * beta).sqrt(), rng.random_range(0.0..TAU));
    ChannelState::new(make_los_channel(&params, geom), d, h.to_vec())
}

/// Per-instant outcome of the tracking experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingSample {
    pub t: f64,
    pub se_achieved: f64,
    pub se_max: f64,
    /// Whether the RIS was re-estimated at this instant.
    pub updated: bool,
}

/// Number of channel instances between RIS updates for `policy_period`.
pub fn period_in_steps(scenario: &RoomScenario, policy_period: f64) -> Result<usize> {
    let ratio = policy_period / scenario.step_interval;
    let steps = ratio.round();
    if !(steps >= 1.0) || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "policy period {policy_period} s is not a positive multiple of the {} s step",
            scenario.step_interval
        )));
    }
    Ok(steps as usize)
}

/// Tracks a given channel sequence, re-estimating every `period_steps` instances.
///
/// The first session uses random initialisation; later ones start from the
/// configuration applied after the previous session. Between updates the
/// configuration is held fixed.
#[allow(clippy::too_many_arguments)]
pub fn track_channels<R: Rng + ?Sized>(
    channels: &[ChannelState],
    times: &[f64],
    period_steps: usize,
    pilots: usize,
    engine: &MleEngine,
    codebook: &ConfigCodebook,
    budget: &LinkBudget,
    rng: &mut R,
) -> Result<Vec<TrackingSample>> {
    if channels.len() != times.len() {
        return Err(Error::DimensionMismatch { expected: channels.len(), found: times.len() });
    }
    if period_steps == 0 {
        return Err(Error::InvalidConfig("update period must be at least one step".into()));
    }
    let mut held: Option<RisConfig> = None;
    let mut out = Vec::with_capacity(channels.len());
    for (k, (state, &t)) in channels.iter().zip(times).enumerate() {
        let updated = k % period_steps == 0;
        if updated {
            let init = match held.take() {
                Some(prev) => InitPolicy::Smart(prev),
                None => InitPolicy::Random,
            };
            let mut cb = codebook.clone();
            let mut link = NoisyLink { state, pilot_power: budget.pilot_power, noise_power: budget.noise_power };
            let outcome = run_adaptive_estimation(
                pilots,
                &mut cb,
                &init,
                &mut link,
                engine,
                budget.pilot_power,
                budget.noise_power,
                rng,
            )?;
            held = Some(outcome.theta_bar);
        }
        let theta = held.as_ref().expect("configured at k = 0");
        let sample = TrackingSample {
            t,
            se_achieved: se_achieved(theta, state, budget.data_power, budget.noise_power),
            se_max: se_max(state, budget.data_power, budget.noise_power),
            updated,
        };
        debug_assert!(sample.se_achieved <= sample.se_max * (1.0 + 1e-12));
        out.push(sample);
    }
    Ok(out)
}

/// Trajectory, channels and the SE trace of one tracking run.
#[derive(Debug, Clone)]
pub struct TrackingRun {
    pub trajectory: Vec<TrajectoryPoint>,
    pub channels: Vec<ChannelState>,
    pub samples: Vec<TrackingSample>,
}

/// Walks for `total_duration` seconds and tracks the channel with updates
/// every `policy_period` seconds using `pilots` pilots per update.
#[allow(clippy::too_many_arguments)]
pub fn run_tracking<R: Rng + ?Sized>(
    scenario: &RoomScenario,
    policy_period: f64,
    pilots: usize,
    total_duration: f64,
    engine: &MleEngine,
    codebook: &ConfigCodebook,
    budget: &LinkBudget,
    rng: &mut R,
) -> Result<TrackingRun> {
    let period_steps = period_in_steps(scenario, policy_period)?;
    let trajectory = random_walk(scenario, total_duration, rng)?;
    let channels = trajectory
        .iter()
        .map(|p| channel_at(scenario, p, budget.beta, engine.geometry(), engine.h(), rng))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = trajectory.iter().map(|p| p.t).collect();
    let samples = track_channels(&channels, &times, period_steps, pilots, engine, codebook, budget, rng)?;
    Ok(TrackingRun { trajectory, channels, samples })
}
