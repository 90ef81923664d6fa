//! Snapshot SLAM: receiver state and incidence points from a single set of
//! paths when the receiver is unknown.
//!
//! Random minimal subsets propose receiver states; every path is scored by
//! its profiled mapping cost under the proposal, the proposal with the
//! largest consensus wins, and the state is refit on its inliers.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    forward_model, jacobian_ip, jacobian_rx, wrap_angle, IncidencePoint, PathMeasurement, RxState,
    TxState, Vec2, SPEED_OF_LIGHT,
};
use crate::lsq::{self, LeastSquaresProblem, LmSettings, LAMBDA_MAX, LAMBDA_MIN};
use crate::mapping::{cost_j, estimate_ip, unit, whitened, MappingConfig};

/// 99% quantile of the chi-square distribution with 3 degrees of freedom.
pub const CHI2_3_99: f64 = 11.344_866_730_144_373;

/// Unknowns in the receiver state: position, heading, clock bias.
const RX_DIM: usize = 4;

/// Score charged for a path whose rays do not meet under a candidate.
const INFEASIBLE_COST: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub minimal_subset_size: usize,
    pub ransac_iterations: usize,
    /// Paths whose profiled cost is at most this are inliers.
    pub inlier_gate: f64,
    pub refine_max_iters: usize,
    pub rng_seed: u64,
    /// Headings tried when building a candidate from a minimal subset.
    pub heading_grid: usize,
    /// Times a round refits on its own inliers and rescores.
    pub local_refits: usize,
    /// Candidates whose clock bias exceeds this in magnitude are discarded,
    /// seconds.
    pub max_clock_bias: f64,
    /// Settings for the per-path incidence point solves.
    pub mapping: MappingConfig,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            minimal_subset_size: 4,
            ransac_iterations: 200,
            inlier_gate: CHI2_3_99,
            refine_max_iters: 200,
            rng_seed: 0,
            heading_grid: 360,
            local_refits: 3,
            max_clock_bias: 1e-6,
            mapping: MappingConfig::default(),
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minimal_subset_size < 4 {
            return Err(Error::invalid(
                "minimal_subset_size",
                "at least 4 paths are needed to fix the receiver state",
            ));
        }
        if self.ransac_iterations < 1 {
            return Err(Error::invalid("ransac_iterations", "must be at least 1"));
        }
        if !(self.inlier_gate > 0.0) {
            return Err(Error::invalid("inlier_gate", "must be positive"));
        }
        if self.refine_max_iters < 1 {
            return Err(Error::invalid("refine_max_iters", "must be at least 1"));
        }
        if self.heading_grid < 8 {
            return Err(Error::invalid("heading_grid", "must be at least 8"));
        }
        if !(self.max_clock_bias > 0.0) {
            return Err(Error::invalid("max_clock_bias", "must be positive"));
        }
        self.mapping.validate()
    }

    fn refine_settings(&self) -> LmSettings {
        LmSettings {
            max_iterations: self.refine_max_iters,
            ..self.mapping.lm_settings()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamResult {
    pub rx_estimate: RxState,
    pub inlier_ids: BTreeSet<u32>,
    pub outlier_ids: BTreeSet<u32>,
    /// One per inlier, in input order.
    pub incidence_points: Vec<IncidencePoint>,
    /// Summed cost of the final incidence points.
    pub total_cost: f64,
    /// Summed inlier cost of the winning candidate before the refit.
    pub candidate_cost: f64,
    pub converged: bool,
}

/// Joint estimate over a set of paths.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFit {
    pub rx: RxState,
    pub incidence_points: Vec<IncidencePoint>,
    pub total_cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// State layout: `[x, y, heading, c·bias, p1x, p1y, …]`. The bias is
/// carried in meters so every coordinate has a similar scale.
struct Joint<'a> {
    paths: &'a [&'a PathMeasurement],
    tx: &'a TxState,
}

fn rx_from_state(x: &DVector<f64>) -> RxState {
    RxState {
        position: Vec2::new(x[0], x[1]),
        heading: x[2],
        clock_bias: x[3] / SPEED_OF_LIGHT,
    }
}

fn state_of(rx: &RxState, ips: &[Vec2]) -> DVector<f64> {
    let mut x = DVector::zeros(RX_DIM + 2 * ips.len());
    x[0] = rx.position.x;
    x[1] = rx.position.y;
    x[2] = rx.heading;
    x[3] = rx.clock_bias * SPEED_OF_LIGHT;
    for (i, p) in ips.iter().enumerate() {
        x[RX_DIM + 2 * i] = p.x;
        x[RX_DIM + 2 * i + 1] = p.y;
    }
    x
}

fn ip_at(x: &DVector<f64>, i: usize) -> Vec2 {
    Vec2::new(x[RX_DIM + 2 * i], x[RX_DIM + 2 * i + 1])
}

impl LeastSquaresProblem for Joint<'_> {
    fn dim(&self) -> usize {
        RX_DIM + 2 * self.paths.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let rx = rx_from_state(x);
        let mut r = DVector::zeros(3 * self.paths.len());
        for (i, z) in self.paths.iter().enumerate() {
            let g = forward_model(self.tx, &rx, &ip_at(x, i)).ok()?;
            r.fixed_rows_mut::<3>(3 * i).copy_from(&whitened(z, &g));
        }
        Some(r)
    }

    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let rx = rx_from_state(x);
        let mut jac = DMatrix::zeros(3 * self.paths.len(), self.dim());
        for (i, z) in self.paths.iter().enumerate() {
            let ip = ip_at(x, i);
            let j_rx = jacobian_rx(self.tx, &rx, &ip).ok()?;
            let j_ip = jacobian_ip(self.tx, &rx, &ip).ok()?;
            let w = z.noise_cov.whitening();
            for r in 0..3 {
                let row = 3 * i + r;
                for c in 0..3 {
                    jac[(row, c)] = -w[r] * j_rx[(r, c)];
                }
                jac[(row, 3)] = -w[r] * j_rx[(r, 3)] / SPEED_OF_LIGHT;
                jac[(row, RX_DIM + 2 * i)] = -w[r] * j_ip[(r, 0)];
                jac[(row, RX_DIM + 2 * i + 1)] = -w[r] * j_ip[(r, 1)];
            }
        }
        Some(jac)
    }
}

/// Per-path normal-equation blocks: receiver/receiver, receiver/point and
/// point/point products, and both gradient parts.
struct Blocks {
    a: Matrix4<f64>,
    b: Vec<Matrix4x2<f64>>,
    d: Vec<Matrix2<f64>>,
    g_rx: Vector4<f64>,
    g_p: Vec<Vector2<f64>>,
}

impl Joint<'_> {
    fn blocks(&self, x: &DVector<f64>, r: &DVector<f64>) -> Option<Blocks> {
        let rx = rx_from_state(x);
        let n = self.paths.len();
        let mut out = Blocks {
            a: Matrix4::zeros(),
            b: Vec::with_capacity(n),
            d: Vec::with_capacity(n),
            g_rx: Vector4::zeros(),
            g_p: Vec::with_capacity(n),
        };
        for (i, z) in self.paths.iter().enumerate() {
            let ip = ip_at(x, i);
            let mut j_rx = jacobian_rx(self.tx, &rx, &ip).ok()?;
            let mut j_p = jacobian_ip(self.tx, &rx, &ip).ok()?;
            let w = z.noise_cov.whitening();
            for row in 0..3 {
                for c in 0..4 {
                    j_rx[(row, c)] *= -w[row];
                }
                j_rx[(row, 3)] /= SPEED_OF_LIGHT;
                j_p[(row, 0)] *= -w[row];
                j_p[(row, 1)] *= -w[row];
            }
            let ri = r.fixed_rows::<3>(3 * i);
            out.a += j_rx.tr_mul(&j_rx);
            out.g_rx += j_rx.tr_mul(&ri);
            out.b.push(j_rx.tr_mul(&j_p));
            out.d.push(j_p.tr_mul(&j_p));
            out.g_p.push(j_p.tr_mul(&ri));
        }
        Some(out)
    }

    fn gradient_norm(bl: &Blocks) -> f64 {
        let sq = bl.g_rx.norm_squared() + bl.g_p.iter().map(|g| g.norm_squared()).sum::<f64>();
        2.0 * sq.sqrt()
    }
}

/// Damped step from the blocks, eliminating the points first.
fn damped_step(bl: &Blocks, lambda: f64) -> Option<DVector<f64>> {
    let n = bl.d.len();
    let max_diag = (0..4)
        .map(|k| bl.a[(k, k)])
        .chain(bl.d.iter().flat_map(|d| [d[(0, 0)], d[(1, 1)]]))
        .fold(0.0_f64, f64::max);
    let floor = 1e-12 * (1.0 + max_diag);
    let mut s = bl.a;
    for k in 0..4 {
        s[(k, k)] += lambda * bl.a[(k, k)].max(floor);
    }
    let mut rhs = -bl.g_rx;
    let mut d_inv = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = bl.d[i];
        for k in 0..2 {
            d[(k, k)] += lambda * bl.d[i][(k, k)].max(floor);
        }
        let inv = d.cholesky()?.inverse();
        let bd = bl.b[i] * inv;
        s -= bd * bl.b[i].transpose();
        rhs += bd * bl.g_p[i];
        d_inv.push(inv);
    }
    let d_rx = s.cholesky()?.solve(&rhs);
    let mut step = DVector::zeros(RX_DIM + 2 * n);
    step.fixed_rows_mut::<4>(0).copy_from(&d_rx);
    for i in 0..n {
        let dp = d_inv[i] * (-bl.g_p[i] - bl.b[i].tr_mul(&d_rx));
        step.fixed_rows_mut::<2>(RX_DIM + 2 * i).copy_from(&dp);
    }
    Some(step)
}

/// Levenberg–Marquardt on the joint problem with the same acceptance
/// rules as [`lsq::minimize`], but each step costs O(paths): the normal
/// equations are block-arrow shaped, so the point blocks are eliminated
/// and only a 4×4 receiver system is factored.
fn joint_minimize(problem: &Joint<'_>, x0: DVector<f64>, settings: &LmSettings) -> Option<lsq::LmOutcome> {
    let mut x = x0;
    let mut r = problem.residuals(&x)?;
    let mut cost = r.norm_squared();
    let mut lambda = settings.lambda_init;
    let mut iterations = 0;
    let mut gradient_norm = f64::INFINITY;

    while iterations < settings.max_iterations {
        let Some(bl) = problem.blocks(&x, &r) else {
            break;
        };
        gradient_norm = Joint::gradient_norm(&bl);
        if gradient_norm <= settings.gradient_tol {
            break;
        }
        let mut stalled = true;
        while lambda <= LAMBDA_MAX {
            if let Some(step) = damped_step(&bl, lambda) {
                let candidate = &x + &step;
                if let Some(r_new) = problem.residuals(&candidate) {
                    let c_new = r_new.norm_squared();
                    if c_new < cost {
                        let tiny = step.norm() <= 1e-15 * (x.norm() + 1e-15);
                        x = candidate;
                        r = r_new;
                        cost = c_new;
                        lambda = (lambda / 10.0).max(LAMBDA_MIN);
                        stalled = tiny;
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        iterations += 1;
        if stalled {
            break;
        }
    }

    if let Some(bl) = problem.blocks(&x, &r) {
        gradient_norm = Joint::gradient_norm(&bl);
    }
    Some(lsq::LmOutcome {
        converged: gradient_norm <= settings.gradient_tol,
        x,
        cost,
        gradient_norm,
        iterations,
    })
}

fn check_identifiable(n: usize) -> Result<()> {
    // Each path adds 3 observations and 2 unknowns; the receiver adds 4.
    if n < RX_DIM {
        return Err(Error::InsufficientPaths {
            needed: RX_DIM,
            got: n,
        });
    }
    Ok(())
}

/// Levenberg–Marquardt over the receiver state and every incidence point,
/// starting from `rx_init` with incidence points profiled under it.
pub fn joint_ls_refine(
    paths: &[PathMeasurement],
    tx: &TxState,
    rx_init: &RxState,
    cfg: &SlamConfig,
) -> Result<JointFit> {
    cfg.validate()?;
    check_identifiable(paths.len())?;
    let ips = paths
        .iter()
        .map(|z| estimate_ip(z, rx_init, tx, &cfg.mapping).map(|ip| ip.position))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PathMeasurement> = paths.iter().collect();
    refine_from(&refs, tx, rx_init, &ips, &cfg.refine_settings())
}

fn refine_from(
    paths: &[&PathMeasurement],
    tx: &TxState,
    rx: &RxState,
    ips: &[Vec2],
    settings: &LmSettings,
) -> Result<JointFit> {
    let out = joint_minimize(&Joint { paths, tx }, state_of(rx, ips), settings).ok_or_else(|| {
        Error::DegenerateGeometry("joint refinement started on a degenerate configuration".into())
    })?;
    let rx = rx_from_state(&out.x);
    let incidence_points = paths
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let position = ip_at(&out.x, i);
            Ok(IncidencePoint {
                position,
                source_path_id: z.path_id,
                residual_cost: cost_j(z, &rx, tx, &position)?,
                converged: out.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JointFit {
        rx: RxState::new(rx.position, rx.heading, rx.clock_bias),
        incidence_points,
        total_cost: out.cost,
        converged: out.converged,
        iterations: out.iterations,
    })
}

/// Receiver position and bias that make every path's range consistent for a
/// fixed heading, scored with incidence points at the AoD/AoA ray
/// intersections.
#[derive(Debug, Clone)]
struct HeadingFit {
    rx: RxState,
    score: f64,
}

fn solve_for_heading(paths: &[&PathMeasurement], tx: &TxState, heading: f64) -> Option<HeadingFit> {
    // With q = rx - tx and the AoD/AoA unit vectors u, e, the reflection
    // point is tx + s·u = rx + t·e, so s = q⊥e / u⊥e and t = q⊥u / u⊥e are
    // linear in q, and s + t + c·bias = c·toa is linear in (q, c·bias).
    let mut rows = Vec::with_capacity(paths.len());
    for z in paths {
        let u = unit(z.aod + tx.orientation);
        let e = unit(z.aoa + heading);
        let d = u.perp(&e);
        if d.abs() < 1e-9 {
            continue;
        }
        let sum = u + e;
        rows.push(([sum.y / d, -sum.x / d, 1.0], SPEED_OF_LIGHT * z.toa));
    }
    if rows.len() < 3 {
        return None;
    }
    let a = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i].0[j]);
    let b = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
    let sol = a.svd(true, true).solve(&b, 1e-12).ok()?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let q = Vec2::new(sol[0], sol[1]);
    let rx = RxState {
        position: tx.position + q,
        heading,
        clock_bias: sol[2] / SPEED_OF_LIGHT,
    };
    let mut score = 0.0;
    for z in paths {
        let u = unit(z.aod + tx.orientation);
        let e = unit(z.aoa + heading);
        let d = u.perp(&e);
        let ip = (d.abs() >= 1e-9)
            .then(|| (q.perp(&e) / d, q.perp(&u) / d))
            .filter(|(s, t)| *s > 0.0 && *t > 0.0)
            .map(|(s, _)| tx.position + u * s);
        score += ip
            .and_then(|p| cost_j(z, &rx, tx, &p).ok())
            .unwrap_or(INFEASIBLE_COST);
    }
    Some(HeadingFit { rx, score })
}

/// Heading implied by the path ranges: circular mean, over paths, of the
/// bearing from the receiver to the point on the AoD ray at the measured
/// bistatic range, minus the AoA.
fn implied_heading(paths: &[&PathMeasurement], tx: &TxState, rx: &RxState) -> Option<f64> {
    let w = rx.position - tx.position;
    let (mut s, mut c) = (0.0, 0.0);
    for z in paths {
        let u = unit(z.aod + tx.orientation);
        let range = SPEED_OF_LIGHT * (z.toa - rx.clock_bias);
        // |s·u - w| = range - s is linear in s.
        let along = (range * range - w.norm_squared()) / (2.0 * (range - u.dot(&w)));
        if !(along.is_finite() && along > 0.0 && along < range) {
            continue;
        }
        let v = tx.position + u * along - rx.position;
        let h = v.y.atan2(v.x) - z.aoa;
        s += h.sin();
        c += h.cos();
    }
    (s.hypot(c) > 1e-12).then(|| s.atan2(c))
}

/// Bias that makes the median path range consistent, with the receiver
/// position and heading fixed and incidence points at the ray
/// intersections.
pub fn median_bias(paths: &[PathMeasurement], tx: &TxState, position: Vec2, heading: f64) -> Option<f64> {
    let mut residuals: Vec<f64> = paths
        .iter()
        .filter_map(|z| {
            let u = unit(z.aod + tx.orientation);
            let e = unit(z.aoa + heading);
            let ip = crate::mapping::ray_intersection(&tx.position, &u, &position, &e)?;
            Some(z.toa - ((ip - tx.position).norm() + (ip - position).norm()) / SPEED_OF_LIGHT)
        })
        .collect();
    if residuals.is_empty() {
        return None;
    }
    residuals.sort_by(f64::total_cmp);
    let n = residuals.len();
    Some(if n % 2 == 1 {
        residuals[n / 2]
    } else {
        0.5 * (residuals[n / 2 - 1] + residuals[n / 2])
    })
}

/// Receiver state proposed by a small subset of paths.
///
/// Sweeps a randomly offset heading grid; for each heading the position
/// and bias follow from a linear least-squares fit of the path ranges.
/// The best few headings are sharpened by iterating the circular mean of
/// the implied headings, and the lowest summed cost wins.
pub fn initial_candidate<R: Rng + ?Sized>(
    paths: &[PathMeasurement],
    tx: &TxState,
    heading_grid: usize,
    rng: &mut R,
) -> Result<RxState> {
    let refs: Vec<&PathMeasurement> = paths.iter().collect();
    candidate_from(&refs, tx, heading_grid, rng)
}

fn candidate_from<R: Rng + ?Sized>(
    paths: &[&PathMeasurement],
    tx: &TxState,
    heading_grid: usize,
    rng: &mut R,
) -> Result<RxState> {
    let k = heading_grid.max(8);
    let step = std::f64::consts::TAU / k as f64;
    let offset = rng.random_range(0.0..step);
    let sweep: Vec<Option<HeadingFit>> = (0..k)
        .map(|i| solve_for_heading(paths, tx, -std::f64::consts::PI + offset + step * i as f64))
        .collect();
    let score = |i: usize| sweep[i % k].as_ref().map_or(f64::INFINITY, |f| f.score);
    let mut minima: Vec<usize> = (0..k)
        .filter(|&i| sweep[i].is_some() && score(i) <= score(i + k - 1) && score(i) <= score(i + 1))
        .collect();
    minima.sort_by(|a, b| score(*a).total_cmp(&score(*b)));

    let mut best: Option<HeadingFit> = None;
    for &i in minima.iter().take(3) {
        let mut fit = sweep[i].clone().expect("filtered");
        for _ in 0..20 {
            let Some(h) = implied_heading(paths, tx, &fit.rx) else { break };
            let Some(next) = solve_for_heading(paths, tx, h) else { break };
            let moved = wrap_angle(h - fit.rx.heading).abs();
            if next.score >= fit.score {
                break;
            }
            fit = next;
            if moved < 1e-12 {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| fit.score < b.score) {
            best = Some(fit);
        }
    }
    best.map(|f| RxState::new(f.rx.position, f.rx.heading, f.rx.clock_bias))
        .ok_or_else(|| Error::DegenerateGeometry("no heading gives a consistent receiver position".into()))
}

#[derive(Debug, Clone)]
struct RoundResult {
    rx: RxState,
    /// Profiled incidence point per input path, when one exists.
    profiled: Vec<Option<IncidencePoint>>,
    inliers: Vec<usize>,
    inlier_cost: f64,
}

fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

fn run_round(paths: &[PathMeasurement], tx: &TxState, cfg: &SlamConfig, round: usize) -> Option<RoundResult> {
    let mut rng = round_rng(cfg.rng_seed, round);
    let mut idx = rand::seq::index::sample(&mut rng, paths.len(), cfg.minimal_subset_size).into_vec();
    idx.sort_unstable();
    let subset: Vec<&PathMeasurement> = idx.iter().map(|&i| &paths[i]).collect();
    let candidate = candidate_from(&subset, tx, cfg.heading_grid, &mut rng).ok()?;
    let ips: Option<Vec<Vec2>> = subset
        .iter()
        .map(|z| estimate_ip(z, &candidate, tx, &cfg.mapping).ok().map(|p| p.position))
        .collect();
    let rx = ips
        .and_then(|ips| refine_from(&subset, tx, &candidate, &ips, &cfg.refine_settings()).ok())
        .map_or(candidate, |f| f.rx);
    let mut best = score_candidate(paths, tx, rx, cfg)?;
    for _ in 0..cfg.local_refits {
        if best.inliers.len() < RX_DIM {
            break;
        }
        let inliers: Vec<&PathMeasurement> = best.inliers.iter().map(|&i| &paths[i]).collect();
        let ips: Vec<Vec2> = best
            .inliers
            .iter()
            .map(|&i| best.profiled[i].expect("inlier has a point").position)
            .collect();
        let Ok(fit) = refine_from(&inliers, tx, &best.rx, &ips, &cfg.refine_settings()) else {
            break;
        };
        let Some(next) = score_candidate(paths, tx, fit.rx, cfg) else {
            break;
        };
        if !beats(&next, &best) {
            break;
        }
        best = next;
    }
    Some(best)
}

/// Most inliers first, then the lower summed inlier cost.
fn beats(a: &RoundResult, b: &RoundResult) -> bool {
    a.inliers.len() > b.inliers.len()
        || (a.inliers.len() == b.inliers.len() && a.inlier_cost < b.inlier_cost)
}

fn score_candidate(
    paths: &[PathMeasurement],
    tx: &TxState,
    rx: RxState,
    cfg: &SlamConfig,
) -> Option<RoundResult> {
    if !(rx.clock_bias.abs() <= cfg.max_clock_bias) || !rx.position.iter().all(|v| v.is_finite()) {
        return None;
    }
    let profiled: Vec<Option<IncidencePoint>> = paths
        .iter()
        .map(|z| estimate_ip(z, &rx, tx, &cfg.mapping).ok())
        .collect();
    let inliers: Vec<usize> = profiled
        .iter()
        .enumerate()
        .filter(|(_, ip)| ip.is_some_and(|p| p.residual_cost <= cfg.inlier_gate))
        .map(|(i, _)| i)
        .collect();
    let inlier_cost = inliers
        .iter()
        .map(|&i| profiled[i].expect("inlier has a point").residual_cost)
        .sum();
    Some(RoundResult {
        rx,
        profiled,
        inliers,
        inlier_cost,
    })
}

/// Robust joint estimate of the receiver state and incidence points.
///
/// Rounds run in parallel, each on its own RNG stream, and are reduced in
/// round order: most inliers wins, ties go to the lower summed inlier
/// cost, then to the earlier round. The result depends only on the inputs
/// and `rng_seed`.
pub fn snapshot_slam(paths: &[PathMeasurement], tx: &TxState, cfg: &SlamConfig) -> Result<SlamResult> {
    cfg.validate()?;
    if paths.len() < cfg.minimal_subset_size {
        return Err(Error::InsufficientPaths {
            needed: cfg.minimal_subset_size,
            got: paths.len(),
        });
    }
    let ids: BTreeSet<u32> = paths.iter().map(|p| p.path_id).collect();
    if ids.len() != paths.len() {
        return Err(Error::invalid("path_id", "path ids must be unique"));
    }

    let rounds: Vec<Option<RoundResult>> = (0..cfg.ransac_iterations)
        .into_par_iter()
        .map(|r| run_round(paths, tx, cfg, r))
        .collect();
    let mut best: Option<RoundResult> = None;
    for r in rounds.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| beats(&r, b)) {
            best = Some(r);
        }
    }
    let best = best.ok_or(Error::NoConsensus {
        inliers: 0,
        needed: cfg.minimal_subset_size,
    })?;
    if best.inliers.len() < cfg.minimal_subset_size {
        return Err(Error::NoConsensus {
            inliers: best.inliers.len(),
            needed: cfg.minimal_subset_size,
        });
    }

    let inlier_paths: Vec<&PathMeasurement> = best.inliers.iter().map(|&i| &paths[i]).collect();
    let start_ips: Vec<Vec2> = best
        .inliers
        .iter()
        .map(|&i| best.profiled[i].expect("inlier has a point").position)
        .collect();
    let joint = refine_from(&inlier_paths, tx, &best.rx, &start_ips, &cfg.refine_settings())?;

    // Re-solve each point under the refit receiver; keep the joint point
    // when the independent solve lands in a worse local minimum.
    let incidence_points: Vec<IncidencePoint> = inlier_paths
        .iter()
        .zip(&joint.incidence_points)
        .map(|(z, joint_ip)| match estimate_ip(z, &joint.rx, tx, &cfg.mapping) {
            Ok(ip) if ip.residual_cost <= joint_ip.residual_cost => ip,
            _ => *joint_ip,
        })
        .collect();
    let total_cost = incidence_points.iter().map(|p| p.residual_cost).sum();
    let inlier_ids: BTreeSet<u32> = inlier_paths.iter().map(|z| z.path_id).collect();
    let outlier_ids = ids.difference(&inlier_ids).copied().collect();
    Ok(SlamResult {
        rx_estimate: joint.rx,
        inlier_ids,
        outlier_ids,
        incidence_points,
        total_cost,
        candidate_cost: best.inlier_cost,
        converged: joint.converged,
    })
}
