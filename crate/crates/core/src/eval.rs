//! Monte Carlo evaluation of GP contour estimation on synthetic shapes.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit, predict, GpHyperParams, OptimizerConfig, RadialPrediction};
use crate::shapes::{rmse, sample_contour, AngleSpacing, Shape, ShapeSpec};

/// Synthetic contour noise used when none is configured, meters.
pub const DEFAULT_NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub m_values: Vec<usize>,
    pub iterations: usize,
    pub base_seed: u64,
    pub noise_std: f64,
    pub spacing: AngleSpacing,
    pub optimizer: OptimizerConfig,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            m_values: vec![16, 32, 64, 128],
            iterations: 1000,
            base_seed: 0,
            noise_std: DEFAULT_NOISE_STD,
            spacing: AngleSpacing::Equal,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub shape: ShapeSpec,
    pub m_values: Vec<usize>,
    /// Mean RMSE per entry of `m_values`, over successful iterations.
    pub mean_rmse: Vec<f64>,
    /// Iterations whose fit failed, per entry of `m_values`.
    pub failures: Vec<usize>,
    pub iterations: usize,
    pub seed: u64,
    pub noise_std: f64,
}

/// Outcome of one synthetic fit: sample, train from the default init,
/// predict at the training angles.
#[derive(Debug, Clone)]
pub struct Trial {
    pub truth: Vec<f64>,
    pub prediction: RadialPrediction,
    pub hyper: GpHyperParams,
    pub rmse: f64,
}

/// RNG for iteration `iteration` of grid entry `m_index`, independent of
/// evaluation order.
pub fn trial_rng(base_seed: u64, m_index: usize, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(((m_index as u64) << 32) | iteration as u64);
    rng
}

pub fn run_trial(
    shape: &Shape,
    m: usize,
    noise_std: f64,
    spacing: AngleSpacing,
    optimizer: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Trial> {
    let data = sample_contour(shape, m, noise_std, spacing, rng)?;
    let model = fit(&data, GpHyperParams::initial_for(&data.radii), optimizer)?;
    let prediction = predict(&model, &data.angles)?;
    let truth: Vec<f64> = data.angles.iter().map(|t| shape.radial_truth(*t)).collect();
    let rmse = rmse(&truth, &prediction.mean)?;
    Ok(Trial {
        truth,
        prediction,
        hyper: model.hyper,
        rmse,
    })
}

/// Fraction of points whose truth lies inside mean ± CI half-width.
pub fn ci_coverage(truth: &[f64], prediction: &RadialPrediction) -> Result<f64> {
    if truth.len() != prediction.mean.len() {
        return Err(Error::LengthMismatch {
            left: truth.len(),
            right: prediction.mean.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("coverage input"));
    }
    let inside = truth
        .iter()
        .zip(prediction.mean.iter().zip(&prediction.ci95_half_width))
        .filter(|(t, (m, h))| (*t - *m).abs() <= **h)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

/// Mean RMSE per measurement count, averaged over seeded iterations.
/// Iterations run in parallel; results are reduced in iteration order so
/// the report depends only on the configuration.
pub fn monte_carlo(spec: &ShapeSpec, cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    if cfg.iterations < 1 {
        return Err(Error::invalid("iterations", "must be at least 1"));
    }
    if cfg.m_values.is_empty() {
        return Err(Error::Empty("m_values"));
    }
    let shape = Shape::new(*spec)?;
    let mut mean_rmse = Vec::with_capacity(cfg.m_values.len());
    let mut failures = Vec::with_capacity(cfg.m_values.len());
    for (mi, &m) in cfg.m_values.iter().enumerate() {
        if m < 2 {
            return Err(Error::invalid("m_values", "every entry must be at least 2"));
        }
        let results: Vec<Option<f64>> = (0..cfg.iterations)
            .into_par_iter()
            .map(|it| {
                let mut rng = trial_rng(cfg.base_seed, mi, it);
                match run_trial(&shape, m, cfg.noise_std, cfg.spacing, &cfg.optimizer, &mut rng) {
                    Ok(t) => Some(t.rmse),
                    Err(e) => {
                        log::warn!("M={m} iteration {it}: {e}");
                        None
                    }
                }
            })
            .collect();
        let ok: Vec<f64> = results.iter().flatten().copied().collect();
        failures.push(results.len() - ok.len());
        mean_rmse.push(if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        });
    }
    Ok(MonteCarloReport {
        shape: *spec,
        m_values: cfg.m_values.clone(),
        mean_rmse,
        failures,
        iterations: cfg.iterations,
        seed: cfg.base_seed,
        noise_std: cfg.noise_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_iteration_is_reproducible() {
        let cfg = MonteCarloConfig {
            m_values: vec![16, 32],
            iterations: 1,
            base_seed: 99,
            ..Default::default()
        };
        let a = monte_carlo(&ShapeSpec::default_star(), &cfg).unwrap();
        let b = monte_carlo(&ShapeSpec::default_star(), &cfg).unwrap();
        assert_eq!(
            a.mean_rmse.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.mean_rmse.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.failures, vec![0, 0]);
    }

    #[test]
    fn noiseless_circle_is_exact() {
        let cfg = MonteCarloConfig {
            m_values: vec![16, 64],
            iterations: 3,
            noise_std: 0.0,
            ..Default::default()
        };
        let report = monte_carlo(&ShapeSpec::circle(2.0), &cfg).unwrap();
        assert!(report.mean_rmse.iter().all(|r| *r < 1e-3), "{:?}", report.mean_rmse);
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = MonteCarloConfig {
            iterations: 0,
            ..Default::default()
        };
        assert!(monte_carlo(&ShapeSpec::circle(1.0), &cfg).is_err());
    }

    #[test]
    fn coverage_counts_inside() {
        let p = RadialPrediction {
            test_angles: vec![0.0, 1.0],
            mean: vec![1.0, 1.0],
            variance: vec![0.01, 0.01],
            ci95_half_width: vec![0.2, 0.2],
        };
        assert_eq!(ci_coverage(&[1.1, 1.5], &p).unwrap(), 0.5);
    }
}
