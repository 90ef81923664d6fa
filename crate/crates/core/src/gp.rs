//! Gaussian-process regression of a star-convex radial function `r(θ)`.
//!
//! The radial function is modelled as a GP with constant mean `μ` and the
//! periodic squared-exponential kernel
//!
//! ```text
//! k(θ, θ') = σ_f² · exp(-2 sin²(|θ - θ'| / 2) / ℓ²)
//! ```
//!
//! whose period is 2π, so predictions wrap around the contour. Training
//! maximizes the log marginal likelihood over `(μ, σ_f², ℓ², σ_n²)`; the
//! three variance-like parameters are optimized in log space.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::cluster::PolarTrainingSet;
use crate::error::{Error, Result};
use crate::geometry::Vec2;

/// Jitter ladder, as multiples of `σ_f²`, tried when `K + σ_n² I` does not
/// factor. Zero is tried first.
pub const JITTER_LADDER: [f64; 8] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Predictive variances more negative than this are an error; smaller
/// negatives are clamped to zero.
pub const NEGATIVE_VARIANCE_LIMIT: f64 = -1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    /// `σ_f²`, m².
    pub signal_var: f64,
    /// `ℓ²`, dimensionless.
    pub length_scale_sq: f64,
    /// `σ_n²`, m².
    pub noise_var: f64,
    /// `μ`, m.
    pub mean_radius: f64,
}

impl GpHyperParams {
    /// `ℓ = 2`, `σ_f = 2`, `σ_n = 2` and `μ` at the mean observed radius.
    pub fn initial_for(radii: &[f64]) -> Self {
        let mean = if radii.is_empty() {
            0.0
        } else {
            radii.iter().sum::<f64>() / radii.len() as f64
        };
        Self {
            signal_var: 4.0,
            length_scale_sq: 4.0,
            noise_var: 4.0,
            mean_radius: mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("signal_var", self.signal_var),
            ("length_scale_sq", self.length_scale_sq),
            ("noise_var", self.noise_var),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !self.mean_radius.is_finite() {
            return Err(Error::invalid("mean_radius", "must be finite"));
        }
        Ok(())
    }

    fn to_search(self) -> [f64; 4] {
        [
            self.mean_radius,
            self.signal_var.ln(),
            self.length_scale_sq.ln(),
            self.noise_var.ln(),
        ]
    }

    fn from_search(u: &[f64; 4]) -> Self {
        Self {
            mean_radius: u[0],
            signal_var: u[1].exp(),
            length_scale_sq: u[2].exp(),
            noise_var: u[3].exp(),
        }
    }
}

/// `sin²(|θ - θ'| / 2)`, the squared half-chord between two angles.
fn half_chord_sq(a: f64, b: f64) -> f64 {
    let s = (0.5 * (a - b).abs()).sin();
    s * s
}

/// Periodic squared-exponential covariance between two angles.
pub fn kernel(a: f64, b: f64, hyper: &GpHyperParams) -> f64 {
    hyper.signal_var * (-2.0 * half_chord_sq(a, b) / hyper.length_scale_sq).exp()
}

/// Noise-free Gram matrix `K` over `angles`.
pub fn gram(angles: &[f64], hyper: &GpHyperParams) -> DMatrix<f64> {
    gram_from_chords(&chord_matrix(angles), hyper)
}

fn chord_matrix(angles: &[f64]) -> DMatrix<f64> {
    let m = angles.len();
    DMatrix::from_fn(m, m, |i, j| half_chord_sq(angles[i], angles[j]))
}

fn gram_from_chords(chords: &DMatrix<f64>, hyper: &GpHyperParams) -> DMatrix<f64> {
    let scale = -2.0 / hyper.length_scale_sq;
    chords.map(|s| hyper.signal_var * (scale * s).exp())
}

/// Cholesky factor of `K + (σ_n² + jitter) I`, walking the jitter ladder.
fn factor(k: &DMatrix<f64>, hyper: &GpHyperParams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    for rung in JITTER_LADDER {
        let jitter = rung * hyper.signal_var;
        let mut ky = k.clone();
        for i in 0..ky.nrows() {
            ky[(i, i)] += hyper.noise_var + jitter;
        }
        if let Some(chol) = ky.cholesky() {
            if rung > 0.0 {
                log::debug!("K_y factored with jitter {jitter:e}");
            }
            return Ok((chol, jitter));
        }
    }
    Err(Error::IllConditioned {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * hyper.signal_var,
    })
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

fn lml_from(chol: &Cholesky<f64, Dyn>, eta: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let m = eta.len() as f64;
    -0.5 * eta.dot(alpha) - 0.5 * log_det(chol) - 0.5 * m * (2.0 * std::f64::consts::PI).ln()
}

/// Log marginal likelihood and its gradient at one parameter point.
struct LmlEval {
    value: f64,
    /// With respect to `(μ, σ_f², ℓ², σ_n²)`.
    grad: [f64; 4],
}

/// `K_y⁻¹` from its lower Cholesky factor via `L⁻¹`, using the triangular
/// and symmetric structure.
fn spd_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let m = l.nrows();
    let lt = l.transpose();
    let rows = lt.as_slice();
    let mut linv = vec![0.0; m * m];
    for j in 0..m {
        let col = &mut linv[j * m..(j + 1) * m];
        col[j] = 1.0 / rows[j * m + j];
        for i in j + 1..m {
            let row = &rows[i * m..i * m + i];
            let s: f64 = row[j..i].iter().zip(&col[j..i]).map(|(a, b)| a * b).sum();
            col[i] = -s / rows[i * m + i];
        }
    }
    let mut inv = DMatrix::zeros(m, m);
    for j in 0..m {
        let b = &linv[j * m + j..(j + 1) * m];
        for i in 0..=j {
            let a = &linv[i * m + j..(i + 1) * m];
            let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    inv
}

fn evaluate(
    chords: &DMatrix<f64>,
    radii: &DVector<f64>,
    hyper: &GpHyperParams,
    with_grad: bool,
) -> Result<LmlEval> {
    let k = gram_from_chords(chords, hyper);
    let (chol, jitter) = factor(&k, hyper)?;
    let eta = radii.add_scalar(-hyper.mean_radius);
    let alpha = chol.solve(&eta);
    let value = lml_from(&chol, &eta, &alpha);
    if !with_grad {
        return Ok(LmlEval {
            value,
            grad: [0.0; 4],
        });
    }
    let ky_inv = spd_inverse(chol.l_dirty());
    let m = radii.len();
    // ½ tr[(ααᵀ - K_y⁻¹) ∂K_y/∂β] for each β, where
    //   ∂K_y/∂σ_f² = K / σ_f²,  ∂K_y/∂ℓ² = K ⊙ 2 sin²(Δ/2) / ℓ⁴,  ∂K_y/∂σ_n² = I.
    // tr(K_y⁻¹ K) = M - (σ_n² + jitter)·tr(K_y⁻¹).
    let ell4 = hyper.length_scale_sq * hyper.length_scale_sq;
    let trace_inv = ky_inv.trace();
    let mut alpha_k_alpha = 0.0;
    let mut g_ell = 0.0;
    for j in 0..m {
        for i in 0..m {
            let kij = k[(i, j)];
            let aa = alpha[i] * alpha[j];
            alpha_k_alpha += aa * kij;
            g_ell += (aa - ky_inv[(i, j)]) * kij * 2.0 * chords[(i, j)];
        }
    }
    let trace_inv_k = m as f64 - (hyper.noise_var + jitter) * trace_inv;
    Ok(LmlEval {
        value,
        grad: [
            alpha.sum(),
            0.5 * (alpha_k_alpha - trace_inv_k) / hyper.signal_var,
            0.5 * g_ell / ell4,
            0.5 * (alpha.norm_squared() - trace_inv),
        ],
    })
}

fn radii_vector(data: &PolarTrainingSet) -> DVector<f64> {
    DVector::from_column_slice(&data.radii)
}

/// `-½ ηᵀK_y⁻¹η - ½ log|K_y| - (M/2) log 2π` with `η = r - μ`.
pub fn log_marginal(data: &PolarTrainingSet, hyper: &GpHyperParams) -> Result<f64> {
    hyper.validate()?;
    Ok(evaluate(&chord_matrix(&data.angles), &radii_vector(data), hyper, false)?.value)
}

/// Analytic gradient of [`log_marginal`] with respect to
/// `(μ, σ_f², ℓ², σ_n²)`.
pub fn lml_gradient(data: &PolarTrainingSet, hyper: &GpHyperParams) -> Result<[f64; 4]> {
    hyper.validate()?;
    Ok(evaluate(&chord_matrix(&data.angles), &radii_vector(data), hyper, true)?.grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when the projected log-space gradient norm falls below this.
    pub gradient_tol: f64,
    /// Stop when one iteration improves the objective by less than this,
    /// relative to `1 + |LML|`.
    pub function_tol: f64,
    /// Box on `ln σ_f²`, `ln ℓ²`, `ln σ_n²`.
    pub log_lower: f64,
    pub log_upper: f64,
    /// Lower bound on `ℓ` as a multiple of the mean angular spacing
    /// `2π / M`. Shorter length scales cannot be told apart from noise.
    /// Zero disables the bound.
    pub min_length_scale_spacings: f64,
    /// Extra starts, as `ℓ²` values, each with `σ_f²` at the sample
    /// variance of the radii and `σ_n² = σ_f² / 4`. The best optimum wins.
    pub restart_length_scales_sq: Vec<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-6,
            function_tol: 1e-10,
            log_lower: (1e-10f64).ln(),
            log_upper: (1e6f64).ln(),
            min_length_scale_spacings: 1.0,
            restart_length_scales_sq: vec![0.25],
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.gradient_tol >= 0.0 && self.function_tol >= 0.0) {
            return Err(Error::invalid("gradient_tol", "tolerances must be non-negative"));
        }
        if !(self.log_lower < self.log_upper) || !self.log_lower.is_finite() || !self.log_upper.is_finite() {
            return Err(Error::invalid("log_lower", "need finite log_lower < log_upper"));
        }
        if !(self.min_length_scale_spacings >= 0.0 && self.min_length_scale_spacings.is_finite()) {
            return Err(Error::invalid("min_length_scale_spacings", "must be non-negative"));
        }
        if self.restart_length_scales_sq.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("restart_length_scales_sq", "entries must be positive"));
        }
        Ok(())
    }
}

/// A GP conditioned on one training set. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub hyper: GpHyperParams,
    pub train_angles: Vec<f64>,
    pub train_radii: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    /// `K_y⁻¹ (r - μ1)`.
    pub alpha: DVector<f64>,
    pub log_marginal: f64,
    /// Diagonal jitter that was needed to factor `K_y`.
    pub jitter: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// What gets written to disk for a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModelSummary {
    pub hyper: GpHyperParams,
    pub log_marginal: f64,
    pub jitter: f64,
    pub converged: bool,
    pub iterations: usize,
    pub training_points: usize,
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on `data`. An empty
    /// training set gives the prior.
    pub fn condition(data: &PolarTrainingSet, hyper: GpHyperParams) -> Result<Self> {
        hyper.validate()?;
        if data.is_empty() {
            return Ok(Self::prior(hyper));
        }
        let k = gram(&data.angles, &hyper);
        let (chol, jitter) = factor(&k, &hyper)?;
        let eta = radii_vector(data).add_scalar(-hyper.mean_radius);
        let alpha = chol.solve(&eta);
        let log_marginal = lml_from(&chol, &eta, &alpha);
        Ok(Self {
            hyper,
            train_angles: data.angles.clone(),
            train_radii: data.radii.clone(),
            chol: Some(chol),
            alpha,
            log_marginal,
            jitter,
            converged: true,
            iterations: 0,
        })
    }

    /// The GP prior: no training data.
    pub fn prior(hyper: GpHyperParams) -> Self {
        Self {
            hyper,
            train_angles: Vec::new(),
            train_radii: Vec::new(),
            chol: None,
            alpha: DVector::zeros(0),
            log_marginal: 0.0,
            jitter: 0.0,
            converged: true,
            iterations: 0,
        }
    }

    pub fn summary(&self) -> GpModelSummary {
        GpModelSummary {
            hyper: self.hyper,
            log_marginal: self.log_marginal,
            jitter: self.jitter,
            converged: self.converged,
            iterations: self.iterations,
            training_points: self.train_angles.len(),
        }
    }

    /// Lower Cholesky factor of `K_y`, when there is training data.
    pub fn chol_factor(&self) -> Option<DMatrix<f64>> {
        self.chol.as_ref().map(|c| c.l())
    }
}

struct SearchOutcome {
    u: [f64; 4],
    f: f64,
    converged: bool,
    iterations: usize,
}

/// Trains `(μ, σ_f², ℓ², σ_n²)` by maximizing the log marginal likelihood,
/// then conditions on `data`.
///
/// Uses BFGS with a backtracking Armijo line search in
/// `(μ, ln σ_f², ln ℓ², ln σ_n²)`, projected onto the configured box.
/// The search runs from `init` and from each configured restart; the best
/// optimum is kept, so the result never has a lower log marginal
/// likelihood than `init` projected onto the box.
pub fn fit(data: &PolarTrainingSet, init: GpHyperParams, cfg: &OptimizerConfig) -> Result<GpModel> {
    init.validate()?;
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::InsufficientPaths {
            needed: 2,
            got: data.len(),
        });
    }
    let chords = chord_matrix(&data.angles);
    let radii = radii_vector(data);
    let m = data.len() as f64;
    let spacing = cfg.min_length_scale_spacings * std::f64::consts::TAU / m;
    let ell_lower = if spacing > 0.0 {
        (2.0 * spacing.ln()).max(cfg.log_lower).min(cfg.log_upper)
    } else {
        cfg.log_lower
    };
    let lower = [f64::NEG_INFINITY, cfg.log_lower, ell_lower, cfg.log_lower];
    let upper = [f64::INFINITY, cfg.log_upper, cfg.log_upper, cfg.log_upper];

    let mean = radii.mean();
    let spread = (radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0)).max(1e-6);
    let mut starts = vec![init.to_search()];
    starts.extend(cfg.restart_length_scales_sq.iter().map(|&ell_sq| {
        GpHyperParams {
            signal_var: spread,
            length_scale_sq: ell_sq,
            noise_var: spread / 4.0,
            mean_radius: mean,
        }
        .to_search()
    }));

    let mut best: Option<SearchOutcome> = None;
    let mut total_iterations = 0;
    for u0 in starts {
        let Some(outcome) = bfgs(&chords, &radii, u0, &lower, &upper, cfg) else {
            continue;
        };
        total_iterations += outcome.iterations;
        if best.as_ref().is_none_or(|b| outcome.f < b.f) {
            best = Some(outcome);
        }
    }
    let best = best.ok_or(Error::IllConditioned {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] * init.signal_var,
    })?;
    if !best.converged {
        log::debug!("GP hyperparameter search stopped after {} iterations", best.iterations);
    }
    let mut model = GpModel::condition(data, GpHyperParams::from_search(&best.u))?;
    model.converged = best.converged;
    model.iterations = total_iterations;
    Ok(model)
}

fn bfgs(
    chords: &DMatrix<f64>,
    radii: &DVector<f64>,
    u0: [f64; 4],
    lower: &[f64; 4],
    upper: &[f64; 4],
    cfg: &OptimizerConfig,
) -> Option<SearchOutcome> {
    let clamp = |u: [f64; 4]| -> [f64; 4] { std::array::from_fn(|i| u[i].clamp(lower[i], upper[i])) };

    // Minimize f(u) = -LML(u); returns (f, ∇_u f).
    let objective = |u: &[f64; 4]| -> Option<(f64, [f64; 4])> {
        let hyper = GpHyperParams::from_search(u);
        let eval = evaluate(chords, radii, &hyper, true).ok()?;
        if !eval.value.is_finite() {
            return None;
        }
        let g = eval.grad;
        Some((
            -eval.value,
            [
                -g[0],
                -g[1] * hyper.signal_var,
                -g[2] * hyper.length_scale_sq,
                -g[3] * hyper.noise_var,
            ],
        ))
    };
    let projected = |u: &[f64; 4], g: &[f64; 4]| -> [f64; 4] {
        std::array::from_fn(|i| {
            if (u[i] <= lower[i] && g[i] > 0.0) || (u[i] >= upper[i] && g[i] < 0.0) {
                0.0
            } else {
                g[i]
            }
        })
    };
    let norm = |v: &[f64; 4]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut u = clamp(u0);
    let (mut f, mut g) = objective(&u)?;
    let mut h_inv = nalgebra::Matrix4::<f64>::identity();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        let pg = projected(&u, &g);
        if norm(&pg) <= cfg.gradient_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = nalgebra::Vector4::from(pg);
        let mut dir = -(h_inv * gv);
        if dir.dot(&gv) >= 0.0 {
            h_inv = nalgebra::Matrix4::identity();
            dir = -gv;
        }
        for i in 0..4 {
            if (u[i] <= lower[i] && dir[i] < 0.0) || (u[i] >= upper[i] && dir[i] > 0.0) {
                dir[i] = 0.0;
            }
        }
        // Cap the step so one iteration never moves a log-parameter by more
        // than a few e-folds.
        let longest = dir.amax();
        if longest > 4.0 {
            dir *= 4.0 / longest;
        }
        let slope = dir.dot(&nalgebra::Vector4::from(g));
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial = clamp(std::array::from_fn(|i| u[i] + step * dir[i]));
            if let Some((ft, gt)) = objective(&trial) {
                if ft <= f + 1e-4 * step * slope.min(0.0) && ft <= f {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((u_new, f_new, g_new)) = accepted else {
            break;
        };
        let s = nalgebra::Vector4::from(std::array::from_fn::<f64, 4, _>(|i| u_new[i] - u[i]));
        let y = nalgebra::Vector4::from(std::array::from_fn::<f64, 4, _>(|i| g_new[i] - g[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iterations == 1 {
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let i4 = nalgebra::Matrix4::<f64>::identity();
            h_inv = (i4 - rho * s * y.transpose()) * h_inv * (i4 - rho * y * s.transpose())
                + rho * s * s.transpose();
        }
        let improvement = f - f_new;
        u = u_new;
        f = f_new;
        g = g_new;
        if improvement <= cfg.function_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }
    Some(SearchOutcome {
        u,
        f,
        converged,
        iterations,
    })
}

/// Pointwise posterior of the radial function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialPrediction {
    pub test_angles: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `2·sqrt(variance)`.
    pub ci95_half_width: Vec<f64>,
}

/// Predictive mean `μ + k*ᵀ K_y⁻¹ (r - μ)` and variance
/// `k(θ*, θ*) - k*ᵀ K_y⁻¹ k*` at each test angle.
pub fn predict(model: &GpModel, test_angles: &[f64]) -> Result<RadialPrediction> {
    let hyper = &model.hyper;
    let t = test_angles.len();
    let (mean, variance) = match &model.chol {
        None => (vec![hyper.mean_radius; t], vec![hyper.signal_var; t]),
        Some(chol) => {
            let m = model.train_angles.len();
            let k_star = DMatrix::from_fn(m, t, |i, j| {
                kernel(model.train_angles[i], test_angles[j], hyper)
            });
            let mean = (k_star.tr_mul(&model.alpha)).add_scalar(hyper.mean_radius);
            let v = chol
                .l_dirty()
                .solve_lower_triangular(&k_star)
                .ok_or(Error::IllConditioned { max_jitter: model.jitter })?;
            let mut variance = Vec::with_capacity(t);
            for j in 0..t {
                let var = hyper.signal_var - v.column(j).norm_squared();
                if var < NEGATIVE_VARIANCE_LIMIT {
                    return Err(Error::NegativeVariance { value: var });
                }
                variance.push(var.max(0.0));
            }
            (mean.iter().copied().collect(), variance)
        }
    };
    let ci95_half_width = variance.iter().map(|v| 2.0 * v.sqrt()).collect();
    Ok(RadialPrediction {
        test_angles: test_angles.to_vec(),
        mean,
        variance,
        ci95_half_width,
    })
}

/// `n` equally spaced angles on `[-π, π)`.
pub fn uniform_angles(n: usize) -> Vec<f64> {
    let step = 2.0 * std::f64::consts::PI / n as f64;
    (0..n).map(|k| -std::f64::consts::PI + step * k as f64).collect()
}

/// Cartesian contours of a radial prediction about `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contours {
    pub mean: Vec<Vec2>,
    /// Mean minus the CI half-width, clamped at zero radius.
    pub inner: Vec<Vec2>,
    pub outer: Vec<Vec2>,
}

pub fn reconstruct_contour(prediction: &RadialPrediction, origin: Vec2) -> Contours {
    let at = |theta: f64, r: f64| origin + Vec2::new(theta.cos(), theta.sin()) * r;
    let mut out = Contours {
        mean: Vec::with_capacity(prediction.mean.len()),
        inner: Vec::with_capacity(prediction.mean.len()),
        outer: Vec::with_capacity(prediction.mean.len()),
    };
    for ((theta, mean), half) in prediction
        .test_angles
        .iter()
        .zip(&prediction.mean)
        .zip(&prediction.ci95_half_width)
    {
        out.mean.push(at(*theta, *mean));
        out.inner.push(at(*theta, (mean - half).max(0.0)));
        out.outer.push(at(*theta, mean + half));
    }
    out
}
