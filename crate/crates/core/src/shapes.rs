//! Ground-truth star-convex shapes and noisy contour sampling.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::PolarTrainingSet;
use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::gp::{gram, uniform_angles, GpHyperParams};

/// Resolution of the precomputed grid behind GP-sampled shapes.
const GP_SAMPLE_GRID: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeKind {
    Circle {
        radius: f64,
    },
    Rectangle {
        half_w: f64,
        half_h: f64,
    },
    /// `r(θ) = base_radius + amplitude·cos(lobes·θ)`.
    Star {
        base_radius: f64,
        amplitude: f64,
        lobes: u32,
    },
    /// One draw from the GP prior with these hyperparameters
    /// (`noise_var` is ignored).
    GpSample {
        hyper: GpHyperParams,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    #[serde(default = "Vec2::zeros")]
    pub center: Vec2,
}

impl ShapeSpec {
    pub fn circle(radius: f64) -> Self {
        Self {
            kind: ShapeKind::Circle { radius },
            center: Vec2::zeros(),
        }
    }

    pub fn rectangle(half_w: f64, half_h: f64) -> Self {
        Self {
            kind: ShapeKind::Rectangle { half_w, half_h },
            center: Vec2::zeros(),
        }
    }

    pub fn star(base_radius: f64, amplitude: f64, lobes: u32) -> Self {
        Self {
            kind: ShapeKind::Star {
                base_radius,
                amplitude,
                lobes,
            },
            center: Vec2::zeros(),
        }
    }

    /// Star with base radius 2, amplitude 0.5 and five lobes.
    pub fn default_star() -> Self {
        Self::star(2.0, 0.5, 5)
    }

    pub fn at(mut self, center: Vec2) -> Self {
        self.center = center;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ShapeKind::Circle { .. } => "circle",
            ShapeKind::Rectangle { .. } => "rectangle",
            ShapeKind::Star { .. } => "star",
            ShapeKind::GpSample { .. } => "gp_sample",
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

/// A shape ready for radial evaluation.
#[derive(Debug, Clone)]
pub struct Shape {
    spec: ShapeSpec,
    grid: Option<Vec<f64>>,
}

impl Shape {
    pub fn new(spec: ShapeSpec) -> Result<Self> {
        let grid = match spec.kind {
            ShapeKind::Circle { radius } => {
                positive("radius", radius)?;
                None
            }
            ShapeKind::Rectangle { half_w, half_h } => {
                positive("half_w", half_w)?;
                positive("half_h", half_h)?;
                None
            }
            ShapeKind::Star {
                base_radius,
                amplitude,
                lobes,
            } => {
                positive("base_radius", base_radius)?;
                positive("amplitude", amplitude)?;
                if amplitude >= base_radius {
                    return Err(Error::invalid("amplitude", "must be below base_radius"));
                }
                if lobes == 0 {
                    return Err(Error::invalid("lobes", "must be at least 1"));
                }
                None
            }
            ShapeKind::GpSample { hyper, seed } => Some(gp_prior_draw(&hyper, seed)?),
        };
        Ok(Self { spec, grid })
    }

    pub fn spec(&self) -> &ShapeSpec {
        &self.spec
    }

    /// Distance from the shape center to its contour along angle `theta`.
    pub fn radial_truth(&self, theta: f64) -> f64 {
        match self.spec.kind {
            ShapeKind::Circle { radius } => radius,
            ShapeKind::Rectangle { half_w, half_h } => {
                // 1/0 = inf picks the other branch on the axes.
                (half_w / theta.cos().abs()).min(half_h / theta.sin().abs())
            }
            ShapeKind::Star {
                base_radius,
                amplitude,
                lobes,
            } => base_radius + amplitude * (lobes as f64 * theta).cos(),
            ShapeKind::GpSample { .. } => {
                let grid = self.grid.as_ref().expect("grid built in Shape::new");
                let n = grid.len();
                let pos = (theta + PI).rem_euclid(2.0 * PI) / (2.0 * PI) * n as f64;
                let i = (pos.floor() as usize) % n;
                let frac = pos - pos.floor();
                grid[i] * (1.0 - frac) + grid[(i + 1) % n] * frac
            }
        }
    }

    /// Contour point at angle `theta`.
    pub fn contour_point(&self, theta: f64) -> Vec2 {
        self.spec.center + Vec2::new(theta.cos(), theta.sin()) * self.radial_truth(theta)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        let d = p - self.spec.center;
        d.norm() <= self.radial_truth(d.y.atan2(d.x))
    }

    /// Distance from `origin` to the first contour crossing along `theta`.
    /// `None` when `origin` lies outside the shape.
    pub fn radial_about(&self, origin: &Vec2, theta: f64) -> Option<f64> {
        if !self.contains(origin) {
            return None;
        }
        if *origin == self.spec.center {
            return Some(self.radial_truth(theta));
        }
        let dir = Vec2::new(theta.cos(), theta.sin());
        let reach = (origin - self.spec.center).norm() + self.max_radius();
        let steps = 4096;
        let mut inside = 0.0;
        for k in 1..=steps {
            let t = reach * k as f64 / steps as f64;
            if !self.contains(&(origin + dir * t)) {
                let mut lo = inside;
                let mut hi = t;
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if self.contains(&(origin + dir * mid)) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            inside = t;
        }
        Some(reach)
    }

    fn max_radius(&self) -> f64 {
        match self.spec.kind {
            ShapeKind::Circle { radius } => radius,
            ShapeKind::Rectangle { half_w, half_h } => half_w.hypot(half_h),
            ShapeKind::Star {
                base_radius,
                amplitude,
                ..
            } => base_radius + amplitude,
            ShapeKind::GpSample { .. } => self
                .grid
                .as_ref()
                .map_or(0.0, |g| g.iter().copied().fold(0.0, f64::max)),
        }
    }
}

fn gp_prior_draw(hyper: &GpHyperParams, seed: u64) -> Result<Vec<f64>> {
    positive("signal_var", hyper.signal_var)?;
    positive("length_scale_sq", hyper.length_scale_sq)?;
    let angles = uniform_angles(GP_SAMPLE_GRID);
    let mut k = gram(&angles, hyper);
    for i in 0..GP_SAMPLE_GRID {
        k[(i, i)] += 1e-8 * hyper.signal_var;
    }
    let chol = k
        .cholesky()
        .ok_or(Error::IllConditioned { max_jitter: 1e-8 * hyper.signal_var })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(GP_SAMPLE_GRID, |_, _| StandardNormal.sample(&mut rng));
    let draw = chol.l() * z;
    let grid: Vec<f64> = draw.iter().map(|v| v + hyper.mean_radius).collect();
    if grid.iter().any(|r| *r <= 0.0) {
        return Err(Error::invalid(
            "gp_sample",
            "prior draw reaches a non-positive radius; raise mean_radius",
        ));
    }
    Ok(grid)
}

pub fn radial_truth(shape: &Shape, theta: f64) -> f64 {
    shape.radial_truth(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSpacing {
    /// `θ_k = -π + 2πk/M`.
    #[default]
    Equal,
    /// Independent uniform draws on `[-π, π)`.
    Uniform,
}

/// `m` contour measurements `r(θ) + N(0, noise_std²)`, radii clamped at
/// zero, about the shape center.
pub fn sample_contour<R: Rng + ?Sized>(
    shape: &Shape,
    m: usize,
    noise_std: f64,
    spacing: AngleSpacing,
    rng: &mut R,
) -> Result<PolarTrainingSet> {
    if m < 1 {
        return Err(Error::invalid("m", "need at least one sample"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise_std", "must be finite and non-negative"));
    }
    let angles = match spacing {
        AngleSpacing::Equal => uniform_angles(m),
        AngleSpacing::Uniform => (0..m).map(|_| rng.random_range(-PI..PI)).collect(),
    };
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let radii = angles
        .iter()
        .map(|t| {
            let truth = shape.radial_truth(*t);
            if noise_std == 0.0 {
                truth
            } else {
                (truth + noise.sample(rng)).max(0.0)
            }
        })
        .collect();
    PolarTrainingSet::new(0, shape.spec().center, angles, radii)
}

/// Root-mean-square of pointwise differences.
pub fn rmse(truth: &[f64], predicted: &[f64]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("rmse input"));
    }
    let sum: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sum / truth.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn radial_about_off_center_circle() {
        let shape = Shape::new(ShapeSpec::circle(2.0).at(Vec2::new(1.0, 1.0))).unwrap();
        let origin = Vec2::new(1.5, 1.0);
        let r = shape.radial_about(&origin, 0.0).unwrap();
        assert!((r - 1.5).abs() < 1e-9);
        let r = shape.radial_about(&origin, PI).unwrap();
        assert!((r - 2.5).abs() < 1e-9);
        assert!(shape.radial_about(&Vec2::new(10.0, 0.0), 0.0).is_none());
    }

    #[test]
    fn radial_about_center_is_truth() {
        let shape = Shape::new(ShapeSpec::default_star()).unwrap();
        for k in 0..16 {
            let t = -PI + k as f64 * PI / 8.0;
            assert_eq!(shape.radial_about(&Vec2::zeros(), t), Some(shape.radial_truth(t)));
        }
    }

    #[test]
    fn circle_is_constant() {
        let s = Shape::new(ShapeSpec::circle(1.0)).unwrap();
        for t in [-3.0, -1.0, 0.0, 0.5, 3.1] {
            assert_eq!(s.radial_truth(t), 1.0);
        }
    }

    #[test]
    fn square_corner() {
        let a = 1.5;
        let s = Shape::new(ShapeSpec::rectangle(a, a)).unwrap();
        assert!((s.radial_truth(PI / 4.0) - a * 2f64.sqrt()).abs() < 1e-12);
        assert!((s.radial_truth(0.0) - a).abs() < 1e-15);
        assert!((s.radial_truth(PI / 2.0) - a).abs() < 1e-12);
    }

    // Ray from the origin against the four rectangle edges.
    fn ray_cast_rectangle(hw: f64, hh: f64, theta: f64) -> f64 {
        let corners = [
            Vec2::new(hw, hh),
            Vec2::new(-hw, hh),
            Vec2::new(-hw, -hh),
            Vec2::new(hw, -hh),
        ];
        let dir = Vec2::new(theta.cos(), theta.sin());
        let mut best = f64::INFINITY;
        for k in 0..4 {
            let a = corners[k];
            let b = corners[(k + 1) % 4];
            let e = b - a;
            let denom = dir.x * (-e.y) - dir.y * (-e.x);
            if denom.abs() < 1e-15 {
                continue;
            }
            // Solve t·dir = a + s·e.
            let t = (a.x * (-e.y) - a.y * (-e.x)) / denom;
            let s = (dir.x * a.y - dir.y * a.x) / denom;
            if t > 0.0 && (-1e-12..=1.0 + 1e-12).contains(&s) {
                best = best.min(t);
            }
        }
        best
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Shape::new(ShapeSpec::circle(0.0)).is_err());
        assert!(Shape::new(ShapeSpec::star(1.0, 1.0, 3)).is_err());
        assert!(Shape::new(ShapeSpec::rectangle(1.0, -1.0)).is_err());
    }

    #[test]
    fn gp_sample_is_deterministic_and_periodic() {
        let hyper = GpHyperParams {
            signal_var: 0.04,
            length_scale_sq: 0.5,
            noise_var: 0.01,
            mean_radius: 2.0,
        };
        let spec = ShapeSpec {
            kind: ShapeKind::GpSample { hyper, seed: 3 },
            center: Vec2::zeros(),
        };
        let a = Shape::new(spec).unwrap();
        let b = Shape::new(spec).unwrap();
        for t in [-3.0, 0.0, 1.0, 3.1] {
            assert_eq!(a.radial_truth(t), b.radial_truth(t));
            assert!((a.radial_truth(t) - a.radial_truth(t + 2.0 * PI)).abs() < 1e-9);
            assert!(a.radial_truth(t) > 0.0);
        }
        // continuous across the ±π seam
        assert!((a.radial_truth(PI - 1e-9) - a.radial_truth(-PI)).abs() < 1e-6);
    }

    #[test]
    fn noiseless_samples_are_exact() {
        let s = Shape::new(ShapeSpec::default_star()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let set = sample_contour(&s, 32, 0.0, AngleSpacing::Equal, &mut rng).unwrap();
        for (t, r) in set.angles.iter().zip(&set.radii) {
            assert_eq!(*r, s.radial_truth(*t));
        }
        let gaps: Vec<f64> = set.angles.windows(2).map(|w| w[1] - w[0]).collect();
        let wrap = set.angles[0] + 2.0 * PI - set.angles[31];
        let max_gap = gaps.iter().copied().fold(wrap, f64::max);
        assert!((max_gap - 2.0 * PI / 32.0).abs() < 1e-12);
    }

    #[test]
    fn sample_noise_std() {
        let s = Shape::new(ShapeSpec::circle(5.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set = sample_contour(&s, 10_000, 0.1, AngleSpacing::Uniform, &mut rng).unwrap();
        let var = set.radii.iter().map(|r| (r - 5.0).powi(2)).sum::<f64>() / 10_000.0;
        assert!((var.sqrt() / 0.1 - 1.0).abs() < 0.05);
    }

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch { .. })));
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn rmse_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mut acc = 0.0;
        for d in &diffs {
            acc += d * d;
        }
        let two_pass = (acc / diffs.len() as f64).sqrt();
        assert!((rmse(&a, &b).unwrap() - two_pass).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rectangle_matches_ray_casting(hw in 0.1..5.0f64, hh in 0.1..5.0f64, t in -PI..PI) {
            let s = Shape::new(ShapeSpec::rectangle(hw, hh)).unwrap();
            let expect = ray_cast_rectangle(hw, hh, t);
            prop_assert!((s.radial_truth(t) - expect).abs() < 1e-9 * expect.max(1.0));
        }

        #[test]
        fn shapes_are_star_convex(t in -10.0..10.0f64, a in 0.01..1.9f64, lobes in 1u32..9) {
            for spec in [ShapeSpec::circle(0.3), ShapeSpec::rectangle(0.2, 3.0), ShapeSpec::star(2.0, a, lobes)] {
                prop_assert!(Shape::new(spec).unwrap().radial_truth(t) > 0.0);
            }
        }

        #[test]
        fn rectangle_continuous_at_axes(hw in 0.1..5.0f64, hh in 0.1..5.0f64, k in 0i32..4) {
            let s = Shape::new(ShapeSpec::rectangle(hw, hh)).unwrap();
            let axis = k as f64 * PI / 2.0 - PI;
            let left = s.radial_truth(axis - 1e-9);
            let right = s.radial_truth(axis + 1e-9);
            prop_assert!((left - right).abs() < 1e-6 * left.max(1.0));
            prop_assert!((s.radial_truth(axis) - left).abs() < 1e-6 * left.max(1.0));
        }
    }
}
