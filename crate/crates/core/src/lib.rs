//! Parametric line-of-sight channel estimation for RIS-aided uplinks.
//!
//! The crate models a single-antenna UE talking to a single-antenna base
//! station through a planar reconfigurable intelligent surface (RIS), with
//! an additional non-LOS direct path. It provides
//!
//! * planar array responses and angle grids ([`array`]),
//! * ground-truth channels and noisy pilot synthesis ([`channel`]),
//! * the closed-form maximum-likelihood estimator of the LOS UE-RIS channel
//!   and the direct channel, plus a least-squares baseline ([`estimator`]),
//! * the adaptive pilot-configuration loop that grows the configuration
//!   matrix one codebook entry at a time ([`configurator`]),
//! * a random-walk mobility model and channel tracking ([`mobility`]),
//! * spectral-efficiency metrics ([`metrics`]),
//! * seeded Monte-Carlo experiments and result files ([`harness`]).
//!
//! ```
//! use ris_core::array::{Aoa, ArrayGeometry};
//!
//! let geom = ArrayGeometry::new(8, 8, 0.25, 0.25).unwrap();
//! let a = geom.array_response(Aoa::new(0.0, 0.0).unwrap());
//! assert_eq!(a.len(), 64);
//! assert!(a.iter().all(|x| (x.re - 1.0).abs() < 1e-15 && x.im == 0.0));
//! ```

pub mod array;
pub mod channel;
pub mod configurator;
mod error;
pub mod estimator;
pub mod harness;
pub mod metrics;
pub mod mobility;
pub mod rng;

pub use num_complex::Complex64;

pub use array::{AngleGrid, Aoa, ArrayGeometry, GridKind};
pub use channel::{CascadeDiag, ChannelState, LinkBudget, LosChannelParams, PilotSession};
pub use configurator::{ConfigCodebook, InitPolicy, RisConfig};
pub use error::{Error, Result};
pub use estimator::{AoaSearch, Estimate, Refinement};
pub use harness::ExperimentConfig;
pub use mobility::RoomScenario;

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_phase(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = x.rem_euclid(tau);
    // rem_euclid can round up to exactly tau for tiny negative inputs
    if r >= tau {
        0.0
    } else {
        r
    }
}

/// Smallest signed difference `a - b` between two angles, in `(-π, π]`.
pub fn phase_diff(a: f64, b: f64) -> f64 {
    let d = wrap_phase(a - b);
    if d > std::f64::consts::PI {
        d - std::f64::consts::TAU
    } else {
        d
    }
}
