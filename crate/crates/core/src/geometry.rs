//! Bistatic scene types and the single-bounce forward model.
//!
//! A transmitter with known pose illuminates the scene, a receiver with
//! position, heading and clock bias records each propagation path as a
//! (time of arrival, angle of departure, angle of arrival) triple. For a
//! single-bounce path reflecting at incidence point `p`:
//!
//! ```text
//! toa = |p_tx - p| / c + |p - p_rx| / c + b_rx
//! aod = atan2(p - p_tx) - alpha_tx
//! aoa = atan2(p - p_rx) - alpha_rx
//! ```

use std::f64::consts::PI;

use nalgebra::{Matrix3x2, Matrix3x4, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Points closer than this (meters) are treated as coincident.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let two_pi = 2.0 * PI;
    let mut w = a - two_pi * ((a + PI) / two_pi).floor();
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w += two_pi;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxState {
    pub position: Vec2,
    pub orientation: f64,
}

impl TxState {
    pub fn new(position: Vec2, orientation: f64) -> Self {
        Self {
            position,
            orientation: wrap_angle(orientation),
        }
    }
}

/// Receiver state: the unknown in snapshot SLAM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RxState {
    pub position: Vec2,
    pub heading: f64,
    /// Clock offset relative to the transmitter, seconds.
    pub clock_bias: f64,
}

impl RxState {
    pub fn new(position: Vec2, heading: f64, clock_bias: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            clock_bias,
        }
    }
}

/// Diagonal measurement covariance in SI units (s², rad², rad²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCov {
    pub var: [f64; 3],
}

impl NoiseCov {
    pub fn from_std(toa_s: f64, aod_rad: f64, aoa_rad: f64) -> Result<Self> {
        Self::from_var([toa_s * toa_s, aod_rad * aod_rad, aoa_rad * aoa_rad])
    }

    /// Standard deviations given in nanoseconds and degrees.
    pub fn from_ns_deg(toa_ns: f64, aod_deg: f64, aoa_deg: f64) -> Result<Self> {
        Self::from_std(toa_ns * 1e-9, aod_deg.to_radians(), aoa_deg.to_radians())
    }

    pub fn from_var(var: [f64; 3]) -> Result<Self> {
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(
                "noise_cov",
                format!("diagonal entries must be finite and positive, got {var:?}"),
            ));
        }
        Ok(Self { var })
    }

    pub fn std(&self) -> [f64; 3] {
        self.var.map(f64::sqrt)
    }

    /// Square root of the inverse covariance, applied to residuals.
    pub fn whitening(&self) -> Vector3<f64> {
        Vector3::new(
            1.0 / self.var[0].sqrt(),
            1.0 / self.var[1].sqrt(),
            1.0 / self.var[2].sqrt(),
        )
    }
}

impl Default for NoiseCov {
    /// 1 ns, 1 deg, 1 deg standard deviations.
    fn default() -> Self {
        Self::from_ns_deg(1.0, 1.0, 1.0).expect("positive defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathKind {
    #[default]
    Unknown,
    Los,
    Nlos,
}

/// One propagation path's channel-parameter estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathMeasurement {
    pub toa: f64,
    pub aod: f64,
    pub aoa: f64,
    pub noise_cov: NoiseCov,
    pub path_id: u32,
    pub kind_hint: PathKind,
}

impl PathMeasurement {
    pub fn new(path_id: u32, z: Vector3<f64>, noise_cov: NoiseCov) -> Self {
        Self {
            toa: z[0],
            aod: wrap_angle(z[1]),
            aoa: wrap_angle(z[2]),
            noise_cov,
            path_id,
            kind_hint: PathKind::Unknown,
        }
    }

    pub fn z(&self) -> Vector3<f64> {
        Vector3::new(self.toa, self.aod, self.aoa)
    }
}

/// Estimated single-bounce reflection point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncidencePoint {
    pub position: Vec2,
    pub source_path_id: u32,
    /// Value of the quadratic cost at the returned point.
    pub residual_cost: f64,
    pub converged: bool,
}

fn check_distinct(a: &Vec2, b: &Vec2, what: &str) -> Result<f64> {
    let d = (a - b).norm();
    if d <= DEGENERACY_TOL || !d.is_finite() {
        return Err(Error::DegenerateGeometry(format!(
            "incidence point coincides with {what} ({d:e} m)"
        )));
    }
    Ok(d)
}

/// Noise-free channel parameters of the single-bounce path through `ip`.
pub fn forward_model(tx: &TxState, rx: &RxState, ip: &Vec2) -> Result<Vector3<f64>> {
    let d_tx = check_distinct(ip, &tx.position, "tx")?;
    let d_rx = check_distinct(ip, &rx.position, "rx")?;
    let from_tx = ip - tx.position;
    let from_rx = ip - rx.position;
    Ok(Vector3::new(
        d_tx / SPEED_OF_LIGHT + d_rx / SPEED_OF_LIGHT + rx.clock_bias,
        wrap_angle(from_tx.y.atan2(from_tx.x) - tx.orientation),
        wrap_angle(from_rx.y.atan2(from_rx.x) - rx.heading),
    ))
}

/// Jacobian of the forward model with respect to the incidence point.
pub fn jacobian_ip(tx: &TxState, rx: &RxState, ip: &Vec2) -> Result<Matrix3x2<f64>> {
    let d_tx = check_distinct(ip, &tx.position, "tx")?;
    let d_rx = check_distinct(ip, &rx.position, "rx")?;
    let u = ip - tx.position;
    let v = ip - rx.position;
    let range = (u / d_tx + v / d_rx) / SPEED_OF_LIGHT;
    let s_tx = d_tx * d_tx;
    let s_rx = d_rx * d_rx;
    Ok(Matrix3x2::new(
        range.x,
        range.y,
        -u.y / s_tx,
        u.x / s_tx,
        -v.y / s_rx,
        v.x / s_rx,
    ))
}

/// Jacobian of the forward model with respect to the receiver state
/// `[x, y, heading, clock_bias]`.
pub fn jacobian_rx(tx: &TxState, rx: &RxState, ip: &Vec2) -> Result<Matrix3x4<f64>> {
    check_distinct(ip, &tx.position, "tx")?;
    let d_rx = check_distinct(ip, &rx.position, "rx")?;
    let v = ip - rx.position;
    let s_rx = d_rx * d_rx;
    Ok(Matrix3x4::new(
        -v.x / d_rx / SPEED_OF_LIGHT,
        -v.y / d_rx / SPEED_OF_LIGHT,
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        v.y / s_rx,
        -v.x / s_rx,
        -1.0,
        0.0,
    ))
}

/// Measurement residual `z - g` with both angle components wrapped.
pub fn residual(z: &Vector3<f64>, predicted: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        z[0] - predicted[0],
        wrap_angle(z[1] - predicted[1]),
        wrap_angle(z[2] - predicted[2]),
    )
}

/// Adds zero-mean Gaussian noise to a noise-free observation.
pub fn perturb<R: Rng + ?Sized>(z: Vector3<f64>, noise_cov: &NoiseCov, rng: &mut R) -> Vector3<f64> {
    let std = noise_cov.std();
    let mut out = z;
    for k in 0..3 {
        let e: f64 = StandardNormal.sample(rng);
        out[k] += std[k] * e;
    }
    out[1] = wrap_angle(out[1]);
    out[2] = wrap_angle(out[2]);
    out
}

/// Draws one noisy measurement of the path through `ip`, reproducible
/// from `rng_seed`.
pub fn synthesize_path(
    tx: &TxState,
    rx: &RxState,
    ip: &Vec2,
    noise_cov: NoiseCov,
    path_id: u32,
    rng_seed: u64,
) -> Result<PathMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    synthesize_path_with(tx, rx, ip, noise_cov, path_id, &mut rng)
}

pub fn synthesize_path_with<R: Rng + ?Sized>(
    tx: &TxState,
    rx: &RxState,
    ip: &Vec2,
    noise_cov: NoiseCov,
    path_id: u32,
    rng: &mut R,
) -> Result<PathMeasurement> {
    let z = forward_model(tx, rx, ip)?;
    let mut m = PathMeasurement::new(path_id, perturb(z, &noise_cov, rng), noise_cov);
    m.kind_hint = PathKind::Nlos;
    Ok(m)
}
