//! Incidence-point estimation with a known receiver state.
//!
//! Each path is solved on its own: minimize the Mahalanobis residual between
//! the measured (toa, aod, aoa) and the forward model over the 2D reflection
//! point, starting from a handful of geometric seeds.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    forward_model, jacobian_ip, residual, IncidencePoint, PathMeasurement, RxState, TxState, Vec2,
    SPEED_OF_LIGHT,
};
use crate::lsq::{self, LeastSquaresProblem, LmSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    /// Initial Levenberg–Marquardt damping.
    pub step_damping_init: f64,
    /// How many geometric seeds to start from.
    pub multistart_count: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tol: 1e-9,
            step_damping_init: 1e-3,
            multistart_count: 3,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.gradient_tol > 0.0) {
            return Err(Error::invalid("gradient_tol", "must be positive"));
        }
        if !(self.step_damping_init > 0.0) {
            return Err(Error::invalid("step_damping_init", "must be positive"));
        }
        if self.multistart_count < 1 {
            return Err(Error::invalid("multistart_count", "must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn lm_settings(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.max_iterations,
            gradient_tol: self.gradient_tol,
            lambda_init: self.step_damping_init,
        }
    }
}

pub(crate) fn whitened(z: &PathMeasurement, predicted: &Vector3<f64>) -> Vector3<f64> {
    residual(&z.z(), predicted).component_mul(&z.noise_cov.whitening())
}

/// Quadratic cost `(z - g)ᵀ R⁻¹ (z - g)` with angle residuals wrapped.
pub fn cost_j(z: &PathMeasurement, rx: &RxState, tx: &TxState, ip: &Vec2) -> Result<f64> {
    let g = forward_model(tx, rx, ip)?;
    Ok(whitened(z, &g).norm_squared())
}

/// Gradient of [`cost_j`] with respect to the incidence point.
pub fn cost_gradient(z: &PathMeasurement, rx: &RxState, tx: &TxState, ip: &Vec2) -> Result<Vec2> {
    let g = forward_model(tx, rx, ip)?;
    let w = z.noise_cov.whitening();
    let r = whitened(z, &g).component_mul(&w);
    let jac = jacobian_ip(tx, rx, ip)?;
    Ok(-2.0 * jac.transpose() * r)
}

struct SinglePath<'a> {
    z: &'a PathMeasurement,
    rx: &'a RxState,
    tx: &'a TxState,
}

impl LeastSquaresProblem for SinglePath<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let g = forward_model(self.tx, self.rx, &Vec2::new(x[0], x[1])).ok()?;
        let r = whitened(self.z, &g);
        Some(DVector::from_column_slice(r.as_slice()))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let jac = jacobian_ip(self.tx, self.rx, &Vec2::new(x[0], x[1])).ok()?;
        let w = self.z.noise_cov.whitening();
        let mut out = DMatrix::zeros(3, 2);
        for r in 0..3 {
            for c in 0..2 {
                out[(r, c)] = -w[r] * jac[(r, c)];
            }
        }
        Some(out)
    }
}

/// Candidate starting points for [`estimate_ip`], best first:
/// the AoD/AoA ray intersection (when the rays meet in front of both
/// ends), the point on the AoA ray consistent with the bistatic range,
/// and the tx/rx midpoint.
pub fn geometric_seed(z: &PathMeasurement, rx: &RxState, tx: &TxState) -> Vec<Vec2> {
    let mut seeds = Vec::with_capacity(3);
    let aod_dir = unit(z.aod + tx.orientation);
    let aoa_dir = unit(z.aoa + rx.heading);
    if let Some(p) = ray_intersection(&tx.position, &aod_dir, &rx.position, &aoa_dir) {
        seeds.push(p);
    }
    if let Some(p) = bistatic_point_on_ray(tx, rx, &aoa_dir, z.toa) {
        seeds.push(p);
    }
    seeds.push((tx.position + rx.position) / 2.0);
    seeds
}

pub(crate) fn unit(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

/// Intersection of the forward rays `a + s·u` and `b + t·v` (s, t > 0).
pub(crate) fn ray_intersection(a: &Vec2, u: &Vec2, b: &Vec2, v: &Vec2) -> Option<Vec2> {
    let denom = u.perp(v);
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = b - a;
    let s = w.perp(v) / denom;
    let t = w.perp(u) / denom;
    (s > 0.0 && t > 0.0).then(|| a + u * s)
}

/// Point `rx + d·dir` with `|tx - p| + d = c·(toa - bias)`.
fn bistatic_point_on_ray(tx: &TxState, rx: &RxState, dir: &Vec2, toa: f64) -> Option<Vec2> {
    let range = SPEED_OF_LIGHT * (toa - rx.clock_bias);
    let w = tx.position - rx.position;
    // |w - d·dir|² = (range - d)²  reduces to a linear equation in d.
    let denom = 2.0 * (range - w.dot(dir));
    let d = (range * range - w.norm_squared()) / denom;
    (d.is_finite() && d > 0.0 && d < range).then(|| rx.position + dir * d)
}

/// Estimates the incidence point of one path with the receiver state known.
///
/// Runs Levenberg–Marquardt from up to `multistart_count` geometric seeds
/// and keeps the lowest-cost result. The returned point is never worse
/// than the best seed. `converged` is false when the gradient norm stayed
/// above `gradient_tol`.
pub fn estimate_ip(
    z: &PathMeasurement,
    rx: &RxState,
    tx: &TxState,
    cfg: &MappingConfig,
) -> Result<IncidencePoint> {
    cfg.validate()?;
    let problem = SinglePath { z, rx, tx };
    let settings = cfg.lm_settings();
    let mut best: Option<lsq::LmOutcome> = None;
    for seed in geometric_seed(z, rx, tx).into_iter().take(cfg.multistart_count) {
        let Some(out) = lsq::minimize(&problem, DVector::from_column_slice(seed.as_slice()), &settings)
        else {
            continue;
        };
        if best.as_ref().is_none_or(|b| out.cost < b.cost) {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| {
        Error::DegenerateGeometry(format!(
            "path {}: every seed coincides with tx or rx",
            z.path_id
        ))
    })?;
    Ok(IncidencePoint {
        position: Vec2::new(best.x[0], best.x[1]),
        source_path_id: z.path_id,
        residual_cost: best.cost,
        converged: best.converged,
    })
}

/// Runs [`estimate_ip`] for every path.
pub fn estimate_all(
    measurements: &[PathMeasurement],
    rx: &RxState,
    tx: &TxState,
    cfg: &MappingConfig,
) -> Result<Vec<IncidencePoint>> {
    measurements
        .iter()
        .map(|z| estimate_ip(z, rx, tx, cfg))
        .collect()
}
