//! Synthetic measurement scenes: single-bounce paths off star-convex
//! objects plus clutter.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{
    forward_model, perturb, NoiseCov, PathKind, PathMeasurement, RxState, TxState, Vec2,
    DEGENERACY_TOL,
};
use crate::mapping::{estimate_ip, MappingConfig};
use crate::shapes::{Shape, ShapeSpec};

/// Per-component noise standard deviations in nanoseconds and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub toa_ns: f64,
    pub aod_deg: f64,
    pub aoa_deg: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            toa_ns: 1.0,
            aod_deg: 1.0,
            aoa_deg: 1.0,
        }
    }
}

impl NoiseSpec {
    pub fn to_cov(&self) -> Result<NoiseCov> {
        NoiseCov::from_ns_deg(self.toa_ns, self.aod_deg, self.aoa_deg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub tx: TxState,
    /// Needed to synthesize paths and for mapping; unknown in SLAM.
    #[serde(default)]
    pub rx: Option<RxState>,
    #[serde(default)]
    pub objects: Vec<ShapeSpec>,
    #[serde(default = "default_paths_per_object")]
    pub paths_per_object: usize,
    #[serde(default)]
    pub outlier_count: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// When false, measurements are the exact forward model; `noise` still
    /// sets their covariance.
    #[serde(default = "default_true")]
    pub add_noise: bool,
    /// Range of the extra delay given to outlier paths, nanoseconds.
    #[serde(default = "default_outlier_delay")]
    pub outlier_delay_ns: [f64; 2],
    /// Outliers are redrawn until no single-bounce point under the true
    /// receiver explains them with a cost below this.
    #[serde(default = "default_outlier_min_cost")]
    pub outlier_min_cost: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_paths_per_object() -> usize {
    16
}

fn default_true() -> bool {
    true
}

fn default_outlier_delay() -> [f64; 2] {
    [10.0, 50.0]
}

fn default_outlier_min_cost() -> f64 {
    100.0
}

/// Draws per outlier before giving up on `outlier_min_cost`.
const OUTLIER_ATTEMPTS: usize = 1000;

impl SceneConfig {
    pub fn new(tx: TxState, rx: RxState, objects: Vec<ShapeSpec>) -> Self {
        Self {
            tx,
            rx: Some(rx),
            objects,
            paths_per_object: default_paths_per_object(),
            outlier_count: 0,
            noise: NoiseSpec::default(),
            add_noise: true,
            outlier_delay_ns: default_outlier_delay(),
            outlier_min_cost: default_outlier_min_cost(),
            seed: 0,
        }
    }

    /// Two round pillars and a thin wall behind the receiver, 24 paths each.
    pub fn pillars_and_wall() -> Self {
        let mut cfg = Self::new(
            TxState::new(Vec2::new(0.0, 0.0), 0.0),
            RxState::new(Vec2::new(8.0, 0.0), PI, 10e-9),
            vec![
                ShapeSpec::circle(0.5).at(Vec2::new(2.5, 3.5)),
                ShapeSpec::circle(0.5).at(Vec2::new(5.0, -3.5)),
                ShapeSpec::rectangle(0.1, 2.5).at(Vec2::new(11.5, 1.0)),
            ],
        );
        cfg.paths_per_object = 24;
        cfg
    }

    /// Checks what synthesis needs.
    pub fn validate(&self) -> Result<()> {
        if self.rx.is_none() {
            return Err(Error::Config("scene has no rx state to synthesize from".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::Empty("objects"));
        }
        if self.paths_per_object < 1 {
            return Err(Error::invalid("paths_per_object", "must be at least 1"));
        }
        let [lo, hi] = self.outlier_delay_ns;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::invalid("outlier_delay_ns", "need 0 <= low <= high"));
        }
        if !(self.outlier_min_cost >= 0.0 && self.outlier_min_cost.is_finite()) {
            return Err(Error::invalid("outlier_min_cost", "must be finite and non-negative"));
        }
        self.noise.to_cov()?;
        Ok(())
    }
}

/// One synthesized measurement with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePath {
    pub measurement: PathMeasurement,
    /// Reflection point for single-bounce paths; `None` for outliers.
    pub truth: Option<Vec2>,
    pub is_outlier: bool,
    /// Index into `objects` for single-bounce paths.
    pub object: Option<usize>,
}

/// Path ids start at 1; 0 is kept for a line-of-sight path.
pub fn synthesize_scene(cfg: &SceneConfig) -> Result<Vec<ScenePath>> {
    cfg.validate()?;
    let rx = cfg.rx.expect("validated");
    let cov = cfg.noise.to_cov()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.objects.len() * cfg.paths_per_object + cfg.outlier_count);
    let mut next_id = 1u32;
    let m = cfg.paths_per_object;
    let step = 2.0 * PI / m as f64;
    for (oi, spec) in cfg.objects.iter().enumerate() {
        let shape = Shape::new(*spec)?;
        let phase = rng.random_range(0.0..step);
        for k in 0..m {
            let ip = shape.contour_point(-PI + phase + step * k as f64);
            let z = forward_model(&cfg.tx, &rx, &ip)?;
            let z = if cfg.add_noise { perturb(z, &cov, &mut rng) } else { z };
            let mut measurement = PathMeasurement::new(next_id, z, cov);
            measurement.kind_hint = PathKind::Nlos;
            out.push(ScenePath {
                measurement,
                truth: Some(ip),
                is_outlier: false,
                object: Some(oi),
            });
            next_id += 1;
        }
    }

    let (lo, hi) = clutter_box(cfg, &rx);
    let [d_lo, d_hi] = cfg.outlier_delay_ns;
    for _ in 0..cfg.outlier_count {
        let mut attempts = 0;
        let z = loop {
            attempts += 1;
            if attempts > OUTLIER_ATTEMPTS {
                return Err(Error::DegenerateGeometry(format!(
                    "no outlier with cost above {} after {OUTLIER_ATTEMPTS} draws",
                    cfg.outlier_min_cost
                )));
            }
            let ip = Vec2::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y));
            let delay = if d_hi > d_lo { rng.random_range(d_lo..d_hi) } else { d_lo } * 1e-9;
            if (ip - cfg.tx.position).norm() <= 0.5 || (ip - rx.position).norm() <= 0.5 {
                continue;
            }
            let mut z = forward_model(&cfg.tx, &rx, &ip)?;
            z[0] += delay;
            if cfg.outlier_min_cost > 0.0 {
                let probe = PathMeasurement::new(next_id, z, cov);
                let best = estimate_ip(&probe, &rx, &cfg.tx, &MappingConfig::default())?;
                if best.residual_cost < cfg.outlier_min_cost {
                    continue;
                }
            }
            break z;
        };
        let z = if cfg.add_noise { perturb(z, &cov, &mut rng) } else { z };
        let mut measurement = PathMeasurement::new(next_id, z, cov);
        measurement.kind_hint = PathKind::Nlos;
        out.push(ScenePath {
            measurement,
            truth: None,
            is_outlier: true,
            object: None,
        });
        next_id += 1;
    }
    Ok(out)
}

/// Box around tx, rx and every object center, padded by 2 m.
fn clutter_box(cfg: &SceneConfig, rx: &RxState) -> (Vec2, Vec2) {
    let mut lo = cfg.tx.position.inf(&rx.position);
    let mut hi = cfg.tx.position.sup(&rx.position);
    for o in &cfg.objects {
        lo = lo.inf(&o.center);
        hi = hi.sup(&o.center);
    }
    let pad = Vec2::repeat(2.0);
    let (lo, hi) = (lo - pad, hi + pad);
    debug_assert!((hi - lo).min() > DEGENERACY_TOL);
    (lo, hi)
}

pub fn measurements(paths: &[ScenePath]) -> Vec<PathMeasurement> {
    paths.iter().map(|p| p.measurement).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SceneConfig {
        let mut cfg = SceneConfig::new(
            TxState::new(Vec2::new(0.0, 0.0), 0.0),
            RxState::new(Vec2::new(12.0, 0.0), PI, 5e-9),
            vec![ShapeSpec::circle(1.0).at(Vec2::new(6.0, 5.0))],
        );
        cfg.paths_per_object = 8;
        cfg
    }

    #[test]
    fn noiseless_paths_match_truth() {
        let mut cfg = config();
        cfg.add_noise = false;
        let paths = synthesize_scene(&cfg).unwrap();
        assert_eq!(paths.len(), 8);
        for p in &paths {
            let z = forward_model(&cfg.tx, &cfg.rx.unwrap(), &p.truth.unwrap()).unwrap();
            assert_eq!(z, p.measurement.z());
            assert!(!p.is_outlier);
        }
        let ids: Vec<u32> = paths.iter().map(|p| p.measurement.path_id).collect();
        assert_eq!(ids, (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn outliers_are_tagged() {
        let mut cfg = config();
        cfg.outlier_count = 3;
        let paths = synthesize_scene(&cfg).unwrap();
        assert_eq!(paths.len(), 11);
        assert_eq!(paths.iter().filter(|p| p.is_outlier).count(), 3);
        assert!(paths.iter().filter(|p| p.is_outlier).all(|p| p.truth.is_none()));
    }

    #[test]
    fn noiseless_round_trip() {
        let mut cfg = config();
        cfg.add_noise = false;
        cfg.objects.push(ShapeSpec::default_star().at(Vec2::new(4.0, -6.0)));
        for p in synthesize_scene(&cfg).unwrap() {
            let ip = estimate_ip(&p.measurement, &cfg.rx.unwrap(), &cfg.tx, &MappingConfig::default()).unwrap();
            assert!((ip.position - p.truth.unwrap()).norm() < 1e-6);
        }
    }

    #[test]
    fn empty_objects_rejected() {
        let mut cfg = config();
        cfg.objects.clear();
        assert!(matches!(synthesize_scene(&cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn seeded_scene_is_reproducible() {
        let mut cfg = config();
        cfg.outlier_count = 2;
        cfg.seed = 11;
        assert_eq!(synthesize_scene(&cfg).unwrap(), synthesize_scene(&cfg).unwrap());
    }

    #[test]
    fn scene_json_defaults() {
        let json = r#"{
            "tx": {"position": [0.0, 0.0], "orientation": 0.0},
            "rx": {"position": [10.0, 0.0], "heading": 3.0, "clock_bias": 0.0},
            "objects": [{"kind": {"type": "circle", "radius": 1.0}, "center": [5.0, 4.0]}]
        }"#;
        let cfg: SceneConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.paths_per_object, 16);
        assert!(cfg.add_noise);
        assert_eq!(cfg.noise, NoiseSpec::default());
    }
}
