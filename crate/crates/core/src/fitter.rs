//! Fitting a single superquadric to a truncated signed distance field.
//!
//! Each reweighting round freezes per-voxel weights
//!
//! ```text
//! lambda = P / (1[phi < 0] * C (1 - w) / w + P),   P = exp(-(phi - phi_sq)^2 / (2 sigma^2))
//! ```
//!
//! over a box neighborhood of the current primitive, then runs a few
//! Levenberg-Marquardt iterations on `sum lambda (phi_sq - phi)^2`, where both fields
//! are clamped to `[-tau, tau]`. Inside voxels get a small weight, so the
//! primitive is pushed hard away from exterior voxels and only gently towards
//! uncovered interior: it grows into the shape without spilling over.

use nalgebra::{SMatrix, SVector, UnitQuaternion, Vector3};
use rayon::prelude::*;
use thiserror::Error;

pub use crate::config::FitConfig;
use crate::grid::TsdfGrid;
use crate::superquadric::{Prepared, Superquadric, EPS_MAX, EPS_MIN};

pub const N_PARAMS: usize = 11;
type Vec11 = SVector<f64, N_PARAMS>;
type Mat11 = SMatrix<f64, N_PARAMS, N_PARAMS>;

/// Finite-difference step for exponents, scales and translation.
pub const FD_STEP: f64 = 1e-5;
/// Finite-difference step for rotation increments (radians).
pub const FD_STEP_ANGLE: f64 = 1e-4;

const MAX_CONSECUTIVE_REJECTS: usize = 8;
const CHUNK: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("no interior voxel in the neighborhood of the initial primitive")]
    EmptyNeighborhood,
    #[error("all weights are zero")]
    DegenerateWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub sq: Superquadric,
    /// Weighted squared error of the returned primitive.
    pub final_residual: f64,
    /// Reweighting rounds performed.
    pub iters: usize,
    pub converged: bool,
    /// Matching variance used for the final weights.
    pub sigma2: f64,
}

/// Weight of one voxel.
#[inline]
pub fn lambda_weight(phi: f64, predicted: f64, sigma2: f64, decay: f64) -> f64 {
    let d = phi - predicted;
    let p = (-d * d / (2.0 * sigma2)).exp();
    let inside = if phi < 0.0 { decay } else { 0.0 };
    p / (inside + p)
}

/// Weights for the given voxels under primitive `sq`.
pub fn lambda_weights(grid: &TsdfGrid, sq: &Superquadric, config: &FitConfig, voxels: &[usize], sigma2: f64) -> Vec<f64> {
    let prep = Prepared::new(sq);
    let decay = config.decay();
    voxels
        .iter()
        .map(|&i| {
            let pred = prep.srdf(&grid.center(i)).clamp(-grid.tau, grid.tau);
            lambda_weight(grid.values[i] as f64, pred, sigma2, decay)
        })
        .collect()
}

/// Weighted residual variance with a floor of `tau^2`.
pub fn update_sigma(residuals: &[f64], weights: &[f64], tau: f64) -> Result<f64, FitError> {
    update_sigma_floor(residuals, weights, tau * tau)
}

fn update_sigma_floor(residuals: &[f64], weights: &[f64], floor: f64) -> Result<f64, FitError> {
    let wsum: f64 = weights.iter().sum();
    if !(wsum > 0.0) {
        return Err(FitError::DegenerateWeights);
    }
    let num: f64 = residuals.iter().zip(weights).map(|(r, w)| w * r * r).sum();
    Ok((num / wsum).max(floor))
}

/// Parameter bounds derived from the grid.
#[derive(Clone, Copy, Debug)]
struct Bounds {
    a_min: f64,
    a_max: f64,
    t_min: Vector3<f64>,
    t_max: Vector3<f64>,
}

impl Bounds {
    fn for_grid(grid: &TsdfGrid) -> Self {
        let h = grid.voxel_size;
        let extent = grid.resolution as f64 * h;
        Self {
            a_min: 0.5 * h,
            a_max: extent,
            t_min: grid.origin - Vector3::repeat(0.5 * h),
            t_max: grid.origin + Vector3::repeat((grid.resolution as f64 - 0.5) * h),
        }
    }

    fn project(&self, mut sq: Superquadric) -> Superquadric {
        for e in sq.eps.iter_mut() {
            *e = e.clamp(EPS_MIN, EPS_MAX);
        }
        sq.scale = sq.scale.map(|a| a.clamp(self.a_min, self.a_max));
        sq.translation = sq.translation.sup(&self.t_min).inf(&self.t_max);
        sq.rotation = UnitQuaternion::new_normalize(*sq.rotation.quaternion());
        sq
    }
}

/// Moves `sq` by a parameter increment: additive on exponents, scales and
/// translation; a local-frame rotation vector composed onto the orientation.
fn retract(sq: &Superquadric, d: &Vec11) -> Superquadric {
    Superquadric {
        eps: [sq.eps[0] + d[0], sq.eps[1] + d[1]],
        scale: sq.scale + Vector3::new(d[2], d[3], d[4]),
        rotation: sq.rotation * UnitQuaternion::from_scaled_axis(Vector3::new(d[5], d[6], d[7])),
        translation: sq.translation + Vector3::new(d[8], d[9], d[10]),
    }
}

fn fd_step(k: usize) -> f64 {
    if (5..8).contains(&k) {
        FD_STEP_ANGLE
    } else {
        FD_STEP
    }
}

fn unit(k: usize, h: f64) -> Vec11 {
    let mut d = Vec11::zeros();
    d[k] = h;
    d
}

/// Central-difference gradient of the clamped radial distance at `x` with respect
/// to the eleven parameters (exponents, scales, rotation increment, translation).
pub fn clamped_jacobian_probe(sq: &Superquadric, x: &Vector3<f64>, tau: f64) -> [f64; N_PARAMS] {
    clamped_jacobian_probe_with(sq, x, tau, 1.0)
}

/// Same as [`clamped_jacobian_probe`] with every step multiplied by `step_scale`.
pub fn clamped_jacobian_probe_with(sq: &Superquadric, x: &Vector3<f64>, tau: f64, step_scale: f64) -> [f64; N_PARAMS] {
    std::array::from_fn(|k| {
        let h = fd_step(k) * step_scale;
        let plus = retract(sq, &unit(k, h)).srdf_truncated(x, tau);
        let minus = retract(sq, &unit(k, -h)).srdf_truncated(x, tau);
        (plus - minus) / (2.0 * h)
    })
}

/// Voxels examined when fitting `sq`: its world box scaled about the center by
/// `neighborhood_scale` and grown by `tau`.
pub fn neighborhood(grid: &TsdfGrid, sq: &Superquadric, config: &FitConfig, exclude: Option<&[bool]>) -> Vec<usize> {
    let bb = sq.world_aabb(0.0);
    let half = bb.half_extents() * config.neighborhood_scale + Vector3::repeat(grid.tau);
    let c = bb.center();
    let Some((lo, hi)) = grid.index_box(&(c - half), &(c + half)) else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity((hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1));
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let i = grid.index(x, y, z);
                if exclude.is_none_or(|m| !m[i]) {
                    out.push(i);
                }
            }
        }
    }
    out
}

struct Evaluation {
    energy: f64,
    pred: Vec<f64>,
    active: Vec<bool>,
}

/// Fitting target restricted to one neighborhood.
struct Samples {
    pts: Vec<Vector3<f64>>,
    phi: Vec<f64>,
    tau: f64,
}

impl Samples {
    fn gather(grid: &TsdfGrid, voxels: &[usize]) -> Self {
        Self {
            pts: voxels.iter().map(|&i| grid.center(i)).collect(),
            phi: voxels.iter().map(|&i| grid.values[i] as f64).collect(),
            tau: grid.tau,
        }
    }

    fn len(&self) -> usize {
        self.pts.len()
    }

    fn chunks(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.len().div_ceil(CHUNK))
            .map(|c| c * CHUNK..((c + 1) * CHUNK).min(self.len()))
            .collect()
    }

    /// Weighted error at `sq` with clamped predictions and the voxels lying in
    /// the differentiable band.
    fn evaluate(&self, sq: &Superquadric, lambda: &[f64]) -> Evaluation {
        let prep = Prepared::new(sq);
        let tau = self.tau;
        let parts: Vec<(f64, Vec<f64>, Vec<bool>)> = self
            .chunks()
            .into_par_iter()
            .map(|r| {
                let mut acc = 0.0;
                let mut pred = Vec::with_capacity(r.len());
                let mut active = Vec::with_capacity(r.len());
                for i in r {
                    let (v, evaluated) = prep.srdf_truncated_local(&prep.local(&self.pts[i]), tau);
                    if !lambda.is_empty() {
                        let d = v - self.phi[i];
                        acc += lambda[i] * d * d;
                    }
                    pred.push(v);
                    active.push(evaluated && v.abs() < tau);
                }
                (acc, pred, active)
            })
            .collect();
        let mut out = Evaluation {
            energy: 0.0,
            pred: Vec::with_capacity(self.len()),
            active: Vec::with_capacity(self.len()),
        };
        for (e, p, a) in parts {
            out.energy += e;
            out.pred.extend(p);
            out.active.extend(a);
        }
        out
    }

    fn weights(&self, pred: &[f64], sigma2: f64, decay: f64) -> Vec<f64> {
        pred.iter()
            .zip(&self.phi)
            .map(|(p, f)| lambda_weight(*f, *p, sigma2, decay))
            .collect()
    }

    /// Gauss-Newton normal equations `J^T W J` and `J^T W r` over band voxels.
    fn normal_equations(&self, sq: &Superquadric, pred: &[f64], active: &[bool], lambda: &[f64]) -> (Mat11, Vec11) {
        let jac = BandJacobian::new(sq);
        let parts: Vec<(Mat11, Vec11)> = self
            .chunks()
            .into_par_iter()
            .map(|r| {
                let mut a = Mat11::zeros();
                let mut g = Vec11::zeros();
                for i in r {
                    if !active[i] {
                        continue;
                    }
                    let row = jac.row(&self.pts[i], pred[i]);
                    let w = lambda[i];
                    a.ger(w, &row, &row, 1.0);
                    g.axpy(w * (pred[i] - self.phi[i]), &row, 1.0);
                }
                (a, g)
            })
            .collect();
        let mut a = Mat11::zeros();
        let mut g = Vec11::zeros();
        for (pa, pg) in parts {
            a += pa;
            g += pg;
        }
        (a, g)
    }
}

const LOCAL_STEP: f64 = 1e-5;

/// Jacobian rows of the radial distance inside the truncation band.
///
/// Only the local-frame gradient and the exponent derivatives are differenced.
/// Scale, rotation and translation derivatives follow from the local gradient
/// by the chain rule, since the distance depends on the scales only through
/// `l / a` apart from the radial factor.
struct BandJacobian {
    prep: Prepared,
    eps1: (Prepared, Prepared),
    eps2: (Prepared, Prepared),
    rot: nalgebra::Matrix3<f64>,
    scale: Vector3<f64>,
}

impl BandJacobian {
    fn new(sq: &Superquadric) -> Self {
        Self {
            prep: Prepared::new(sq),
            eps1: (
                Prepared::new(&retract(sq, &unit(0, FD_STEP))),
                Prepared::new(&retract(sq, &unit(0, -FD_STEP))),
            ),
            eps2: (
                Prepared::new(&retract(sq, &unit(1, FD_STEP))),
                Prepared::new(&retract(sq, &unit(1, -FD_STEP))),
            ),
            rot: sq.rotation.to_rotation_matrix().into_inner(),
            scale: sq.scale,
        }
    }

    /// Row at world point `p` where the distance is `s0`.
    fn row(&self, p: &Vector3<f64>, s0: f64) -> Vec11 {
        let l = self.prep.local(p);
        let r2 = l.norm_squared();
        let mut grad = Vector3::zeros();
        for k in 0..3 {
            let mut q = l;
            q[k] += LOCAL_STEP;
            let plus = self.prep.srdf_local(&q);
            q[k] -= 2.0 * LOCAL_STEP;
            grad[k] = (plus - self.prep.srdf_local(&q)) / (2.0 * LOCAL_STEP);
        }
        let mut row = Vec11::zeros();
        row[0] = (self.eps1.0.srdf_local(&l) - self.eps1.1.srdf_local(&l)) / (2.0 * FD_STEP);
        row[1] = (self.eps2.0.srdf_local(&l) - self.eps2.1.srdf_local(&l)) / (2.0 * FD_STEP);
        for k in 0..3 {
            row[2 + k] = if r2 > 0.0 {
                l[k] / self.scale[k] * (l[k] * s0 / r2 - grad[k])
            } else {
                0.0
            };
        }
        let dr = grad.cross(&l);
        let dt = -(self.rot * grad);
        for k in 0..3 {
            row[5 + k] = dr[k];
            row[8 + k] = dt[k];
        }
        row
    }
}

fn param_distance(a: &Superquadric, b: &Superquadric) -> f64 {
    let de = (a.eps[0] - b.eps[0]).powi(2) + (a.eps[1] - b.eps[1]).powi(2);
    let da = (a.scale - b.scale).norm_squared();
    let dt = (a.translation - b.translation).norm_squared();
    let dr = a.rotation.angle_to(&b.rotation).powi(2);
    (de + da + dt + dr).sqrt()
}

/// Fits one superquadric starting from `init`.
pub fn fit_one(grid: &TsdfGrid, init: &Superquadric, config: &FitConfig) -> Result<FitResult, FitError> {
    fit_one_masked(grid, init, config, None)
}

/// [`fit_one`] ignoring voxels flagged in `exclude`.
pub fn fit_one_masked(
    grid: &TsdfGrid,
    init: &Superquadric,
    config: &FitConfig,
    exclude: Option<&[bool]>,
) -> Result<FitResult, FitError> {
    let bounds = Bounds::for_grid(grid);
    let floor = config.sigma_floor.unwrap_or(grid.tau * grid.tau);
    let decay = config.decay();
    let init = bounds.project(init.clone());

    let mut voxels = neighborhood(grid, &init, config, exclude);
    if !voxels.iter().any(|&i| grid.values[i] < 0.0) {
        return Err(FitError::EmptyNeighborhood);
    }

    let mut theta = init.clone();
    let mut sigma2: Option<f64> = None;
    let mut mu = 1e-3;
    let mut iterates: Vec<Superquadric> = Vec::new();
    let mut converged = false;
    let mut iters = 0;

    for outer in 0..config.max_outer_iters {
        if outer > 0 {
            voxels = neighborhood(grid, &theta, config, exclude);
        }
        if voxels.is_empty() {
            break;
        }
        iters = outer + 1;
        let samples = Samples::gather(grid, &voxels);
        let mut current = samples.evaluate(&theta, &[]);
        let s2 = sigma2.unwrap_or_else(|| {
            let mse = current
                .pred
                .iter()
                .zip(&samples.phi)
                .map(|(p, f)| (p - f).powi(2))
                .sum::<f64>()
                / samples.len() as f64;
            mse.max(floor)
        });
        let lambda = samples.weights(&current.pred, s2, decay);
        current = samples.evaluate(&theta, &lambda);
        let start = theta.clone();
        let mut accepted = 0;
        let mut rejects = 0;
        let mut stalled = false;
        let mut normal = None;
        while accepted < config.max_inner_iters {
            let (a, g) = normal.get_or_insert_with(|| samples.normal_equations(&theta, &current.pred, &current.active, &lambda));
            if g.norm() == 0.0 {
                break;
            }
            let max_diag = (0..N_PARAMS).map(|k| a[(k, k)]).fold(0.0, f64::max);
            let mut damped = *a;
            for k in 0..N_PARAMS {
                damped[(k, k)] += mu * (a[(k, k)] + 1e-9 * max_diag + 1e-12);
            }
            let improved = damped.cholesky().and_then(|c| {
                let cand = bounds.project(retract(&theta, &c.solve(&(-*g))));
                let eval = samples.evaluate(&cand, &lambda);
                (eval.energy < current.energy).then_some((cand, eval))
            });
            match improved {
                Some((cand, eval)) => {
                    theta = cand;
                    current = eval;
                    normal = None;
                    mu = (mu * 0.1).max(1e-12);
                    accepted += 1;
                    rejects = 0;
                }
                None => {
                    mu = (mu * 10.0).min(1e12);
                    rejects += 1;
                    if rejects >= MAX_CONSECUTIVE_REJECTS {
                        stalled = true;
                        break;
                    }
                }
            }
        }

        let residuals: Vec<f64> = current.pred.iter().zip(&samples.phi).map(|(p, f)| p - f).collect();
        sigma2 = Some(update_sigma_floor(&residuals, &lambda, floor)?);
        iterates.push(theta.clone());
        if param_distance(&start, &theta) < config.param_tol {
            converged = true;
            break;
        }
        if stalled {
            break;
        }
    }

    let s2 = sigma2.unwrap_or(floor);
    // Round energies use different weights and neighborhoods, so iterates are
    // ranked by likelihood over the union of their neighborhoods.
    let mut mask = vec![false; grid.len()];
    for sq in std::iter::once(&init).chain(&iterates) {
        for i in neighborhood(grid, sq, config, exclude) {
            mask[i] = true;
        }
    }
    let shared: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
    let mut chosen = (log_likelihood(grid, &init, config, s2, &shared), init.clone(), false);
    for (k, sq) in iterates.iter().enumerate() {
        let ll = log_likelihood(grid, sq, config, s2, &shared);
        if ll >= chosen.0 {
            chosen = (ll, sq.clone(), converged && k + 1 == iterates.len());
        }
    }
    let (_, sq, converged) = chosen;
    let samples = Samples::gather(grid, &neighborhood(grid, &sq, config, exclude));
    let at = samples.evaluate(&sq, &[]);
    let lambda = samples.weights(&at.pred, s2, decay);
    let final_residual = samples.evaluate(&sq, &lambda).energy;
    Ok(FitResult {
        sq,
        final_residual,
        iters,
        converged,
        sigma2: s2,
    })
}

/// `sum lambda (phi_sq - phi)^2` of `eval` with weights frozen from `weights_from`
/// on the neighborhood of `weights_from`.
pub fn frozen_objective(
    grid: &TsdfGrid,
    eval: &Superquadric,
    weights_from: &Superquadric,
    config: &FitConfig,
    sigma2: f64,
) -> f64 {
    let samples = Samples::gather(grid, &neighborhood(grid, weights_from, config, None));
    let pred = samples.evaluate(weights_from, &[]).pred;
    let lambda = samples.weights(&pred, sigma2, config.decay());
    samples.evaluate(eval, &lambda).energy
}

/// Mixture log-likelihood `sum ln(P + 1[phi < 0] C (1 - w) / w)` of `sq` over
/// `voxels`. Unlike the weighted error it does not depend on the weights, so it
/// ranks fits started from different initial primitives.
pub fn log_likelihood(grid: &TsdfGrid, sq: &Superquadric, config: &FitConfig, sigma2: f64, voxels: &[usize]) -> f64 {
    let samples = Samples::gather(grid, voxels);
    let pred = samples.evaluate(sq, &[]).pred;
    let decay = config.decay();
    pred.iter()
        .zip(&samples.phi)
        .map(|(p, f)| {
            let d = f - p;
            let inside = if *f < 0.0 { decay } else { 0.0 };
            ((-d * d / (2.0 * sigma2)).exp() + inside).ln()
        })
        .sum()
}

/// Outer iterations spent on each frame before committing to one.
pub const SCREENING_ITERS: usize = 4;

/// Fits from a sphere over `voxels`, trying each assignment of the principal
/// axes to the local `z` axis. The candidates are screened for a few rounds and
/// the most likely one is fitted to convergence.
pub fn fit_from_sphere(
    grid: &TsdfGrid,
    voxels: &[u32],
    center: Vector3<f64>,
    radius: f64,
    config: &FitConfig,
    exclude: Option<&[bool]>,
) -> Result<FitResult, FitError> {
    let base = oriented_sphere(grid, voxels, center, radius);
    let cycle = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.0)
        * UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(1.0, 1.0, 1.0)),
            2.0 * std::f64::consts::PI / 3.0,
        );
    let screen_cfg = FitConfig {
        max_outer_iters: SCREENING_ITERS.min(config.max_outer_iters),
        ..config.clone()
    };
    let mut screened = Vec::with_capacity(3);
    let mut frame = base.rotation;
    for _ in 0..3 {
        let init = Superquadric { rotation: frame, ..base.clone() };
        screened.push(fit_one_masked(grid, &init, &screen_cfg, exclude)?);
        frame *= cycle;
    }
    let sigma2 = screened.iter().map(|r| r.sigma2).fold(0.0, f64::max);
    let mut mask = vec![false; grid.len()];
    for r in &screened {
        for i in neighborhood(grid, &r.sq, config, exclude) {
            mask[i] = true;
        }
    }
    let shared: Vec<usize> = (0..grid.len()).filter(|&i| mask[i]).collect();
    let mut best = 0;
    let mut best_ll = f64::NEG_INFINITY;
    for (k, r) in screened.iter().enumerate() {
        let ll = log_likelihood(grid, &r.sq, config, sigma2, &shared);
        if ll > best_ll {
            best_ll = ll;
            best = k;
        }
    }
    let screened_iters: usize = screened.iter().map(|r| r.iters).sum();
    let winner = &screened[best];
    if winner.converged {
        return Ok(FitResult {
            iters: screened_iters,
            ..winner.clone()
        });
    }
    let mut res = fit_one_masked(grid, &winner.sq, config, exclude)?;
    res.iters += screened_iters;
    Ok(res)
}

/// Initial primitive for a voxel set: a sphere of the given radius at `center`,
/// with its frame aligned to the principal axes of the voxels (largest first).
pub fn oriented_sphere(grid: &TsdfGrid, voxels: &[u32], center: Vector3<f64>, radius: f64) -> Superquadric {
    let mut sq = Superquadric::sphere(center, radius);
    sq.rotation = principal_frame(voxels.iter().map(|&i| grid.center(i as usize)));
    sq
}

/// Rotation whose columns are the principal axes of `points`, ordered by
/// decreasing variance, each with a non-negative largest component.
pub fn principal_frame(points: impl Iterator<Item = Vector3<f64>>) -> UnitQuaternion<f64> {
    let pts: Vec<Vector3<f64>> = points.collect();
    if pts.len() < 3 {
        return UnitQuaternion::identity();
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in &pts {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut cols: Vec<Vector3<f64>> = order
        .iter()
        .map(|&k| {
            let v = eig.eigenvectors.column(k).into_owned();
            if v[v.iamax()] < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect();
    cols[2] = cols[0].cross(&cols[1]);
    let m = nalgebra::Matrix3::from_columns(&cols);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix(&m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        // Outside voxel: indicator is zero so the weight is one.
        assert_eq!(lambda_weight(0.02, -0.02, 4e-4, 49.0), 1.0);
        assert_eq!(lambda_weight(0.0, 0.02, 4e-4, 49.0), 1.0);
        // Perfect inside match with w = 0.02, C = 1: 1 / (49 + 1).
        let cfg = FitConfig::default();
        assert!((lambda_weight(-0.02, -0.02, 4e-4, cfg.decay()) - 0.02).abs() < 1e-15);
        // Large mismatch vanishes.
        assert!(lambda_weight(-1.0, 1.0, 1e-4, 49.0) < 1e-100);
    }

    #[test]
    fn sigma_examples() {
        let tau = 0.02;
        assert_eq!(update_sigma(&[0.0, 0.0], &[1.0, 0.5], tau).unwrap(), tau * tau);
        let s = update_sigma(&[3.0 * tau], &[1.0], tau).unwrap();
        assert!((s - 9.0 * tau * tau).abs() < 1e-15);
        let s = update_sigma(&[0.0, 2.0 * tau], &[1.0, 1.0], tau).unwrap();
        assert!((s - 2.0 * tau * tau).abs() < 1e-15);
        assert_eq!(update_sigma(&[1.0], &[0.0], tau), Err(FitError::DegenerateWeights));
    }

    #[test]
    fn probe_on_sphere() {
        let sq = Superquadric::sphere(Vector3::zeros(), 0.5);
        let j = clamped_jacobian_probe(&sq, &Vector3::new(0.51, 0.0, 0.0), 0.05);
        assert!((j[2] + 1.0).abs() < 1e-6, "{j:?}");
        assert!(j[3].abs() < 1e-6 && j[4].abs() < 1e-6);
        for k in 5..8 {
            assert!(j[k].abs() < 1e-6);
        }
        // Moving the center towards the probe shrinks the distance.
        assert!((j[8] + 1.0).abs() < 1e-6);
        // Saturated region has zero gradient.
        let far = clamped_jacobian_probe(&sq, &Vector3::new(0.9, 0.0, 0.0), 0.05);
        assert!(far.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn probe_richardson_consistency() {
        let sq = Superquadric::new(
            [0.6, 1.2],
            Vector3::new(0.3, 0.4, 0.25),
            UnitQuaternion::from_euler_angles(0.2, 0.5, -0.3),
            Vector3::new(0.05, 0.0, -0.05),
        );
        let tau = 0.1;
        let mut checked = 0;
        for i in 0..400 {
            let dir = Vector3::new(((i * 7) % 13) as f64 - 6.0, ((i * 11) % 17) as f64 - 8.0, ((i * 5) % 19) as f64 - 9.0);
            if dir.norm() == 0.0 {
                continue;
            }
            let d = dir.normalize();
            let local_surface = d * sq.surface_radius(&d);
            let x = sq.to_world(&(local_surface * (1.0 + 0.02 * ((i % 5) as f64 - 2.0))));
            if sq.srdf(&x).abs() > 0.8 * tau {
                continue;
            }
            let a = clamped_jacobian_probe(&sq, &x, tau);
            let b = clamped_jacobian_probe_with(&sq, &x, tau, 0.5);
            for k in 0..N_PARAMS {
                let scale = a[k].abs().max(b[k].abs()).max(1e-3);
                assert!((a[k] - b[k]).abs() / scale < 1e-3, "param {k}: {} vs {}", a[k], b[k]);
            }
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn band_rows_match_probe() {
        let sq = Superquadric::new(
            [0.7, 1.3],
            Vector3::new(0.35, 0.2, 0.3),
            UnitQuaternion::from_euler_angles(-0.4, 0.3, 1.1),
            Vector3::new(-0.1, 0.05, 0.0),
        );
        let tau = 0.1;
        let jac = BandJacobian::new(&sq);
        let mut checked = 0;
        for i in 0..300 {
            let d = Vector3::new((i as f64 * 0.37).sin(), (i as f64 * 0.71).cos(), (i as f64 * 1.13).sin()).normalize();
            let x = sq.to_world(&(d * sq.surface_radius(&d) * (0.96 + 0.0003 * i as f64)));
            let s0 = sq.srdf(&x);
            if s0.abs() > 0.5 * tau {
                continue;
            }
            let row = jac.row(&x, s0);
            let probe = clamped_jacobian_probe_with(&sq, &x, tau, 0.05);
            for k in 0..N_PARAMS {
                assert!((row[k] - probe[k]).abs() < 5e-3 * probe[k].abs().max(1.0), "param {k}: {} vs {}", row[k], probe[k]);
            }
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn sphere_grows_to_target() {
        let grid = TsdfGrid::from_sdf(64, 1.0, |p| p.norm() - 0.5);
        let init = Superquadric::sphere(Vector3::zeros(), 0.3);
        let res = fit_one(&grid, &init, &FitConfig::default()).unwrap();
        let h = grid.voxel_size;
        for k in 0..3 {
            assert!((res.sq.scale[k] - 0.5).abs() <= 1.5 * h, "{:?}", res.sq);
        }
        for e in res.sq.eps {
            assert!((e - 1.0).abs() <= 0.15, "{:?}", res.sq);
        }
        assert!(res.sigma2 >= grid.tau * grid.tau);
    }

    #[test]
    fn init_far_from_interior_is_rejected() {
        let grid = TsdfGrid::from_sdf(32, 1.0, |p| p.norm() - 0.3);
        let init = Superquadric::sphere(Vector3::new(0.8, 0.8, 0.8), 0.05);
        assert_eq!(fit_one(&grid, &init, &FitConfig::default()), Err(FitError::EmptyNeighborhood));
    }

    #[test]
    fn fit_is_monotone_and_deterministic() {
        let target = Superquadric::new(
            [0.4, 0.8],
            Vector3::new(0.4, 0.25, 0.2),
            UnitQuaternion::from_euler_angles(0.0, 0.0, 0.4),
            Vector3::new(0.05, -0.05, 0.0),
        );
        let grid = TsdfGrid::from_sdf(48, 1.0, |p| target.srdf(p));
        let init = Superquadric::sphere(Vector3::new(0.05, -0.05, 0.0), 0.15);
        let cfg = FitConfig::default();
        let a = fit_one(&grid, &init, &cfg).unwrap();
        let b = fit_one(&grid, &init, &cfg).unwrap();
        assert_eq!(a, b);
        let e_fit = frozen_objective(&grid, &a.sq, &a.sq, &cfg, a.sigma2);
        let e_init = frozen_objective(&grid, &init, &a.sq, &cfg, a.sigma2);
        assert!(e_fit <= e_init);
        assert!((e_fit - a.final_residual).abs() <= 1e-12 * e_fit.max(1.0));
    }
}
