//! Quasi-maximum-likelihood estimation of the relative intensity model.
//!
//! The model: a market order at time t is ask-side with probability
//! r^MA = 1/(1 + exp(−θ·X(t−))) and bid-side with probability
//! r^MB = 1 − r^MA. The quasi-log likelihood is the sum of log r^side over
//! observed market orders; it is concave in θ, and is maximized here by
//! projected Newton iterations over the box [−R, R]^d.
//!
//! The curvature normalized by the session count T estimates the Γ tensor
//! of the asymptotic theory: √T(θ̂ − θ*) is approximately N(0, Γ^{−1}), so
//! standard errors are sqrt(diag(Γ̂^{−1})/T).
//!
//! All sums (likelihood, gradient, Hessian) reduce fixed-size chunks in
//! index order, so results are bit-identical regardless of thread count.

use crate::book::Side;
use crate::covariates::{BuiltDataset, MarketOrderSample};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

/// Chunk length for deterministic parallel reductions. Fixed so the
/// reduction tree depends only on the data length.
const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("feature length {found} does not match dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least {need} samples for dimension {d}, found {have}")]
    TooFewSamples { need: usize, have: usize, d: usize },
    #[error("singular Hessian: features are collinear along {directions:?}")]
    SingularHessian { directions: Vec<Vec<f64>> },
    #[error("gamma matrix is singular")]
    SingularGamma,
}

/// Observation set in fitting layout: row-major features plus side labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Vec<f64>,
    is_ma: Vec<bool>,
    n: usize,
    d: usize,
    /// Number of calibration sessions T (the asymptotic scale).
    pub sessions: usize,
}

impl Dataset {
    pub fn from_samples(
        samples: &[MarketOrderSample],
        sessions: usize,
    ) -> Result<Dataset, EstimatorError> {
        if samples.is_empty() {
            return Err(EstimatorError::EmptyDataset);
        }
        let d = samples[0].features.len();
        let mut x = Vec::with_capacity(samples.len() * d);
        let mut is_ma = Vec::with_capacity(samples.len());
        for s in samples {
            if s.features.len() != d {
                return Err(EstimatorError::DimensionMismatch {
                    expected: d,
                    found: s.features.len(),
                });
            }
            x.extend_from_slice(&s.features);
            is_ma.push(s.side == Side::Ask);
        }
        Ok(Dataset {
            x,
            is_ma,
            n: samples.len(),
            d,
            sessions: sessions.max(1),
        })
    }

    pub fn from_built(built: &BuiltDataset) -> Result<Dataset, EstimatorError> {
        Self::from_samples(&built.samples, built.sessions)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn is_ma(&self, i: usize) -> bool {
        self.is_ma[i]
    }

    pub fn ask_count(&self) -> usize {
        self.is_ma.iter().filter(|&&b| b).count()
    }

    fn check_dim(&self, theta: &[f64]) -> Result<(), EstimatorError> {
        if theta.len() != self.d {
            return Err(EstimatorError::DimensionMismatch {
                expected: self.d,
                found: theta.len(),
            });
        }
        Ok(())
    }
}

/// (r^MA, r^MB) for a linear predictor z = θ·x, stable for any |z| and
/// summing to 1 exactly: the smaller ratio is q/(1+q) with q = e^{−|z|},
/// the larger is its exact complement.
pub fn ratio_pair(z: f64) -> (f64, f64) {
    let q = (-z.abs()).exp();
    let small = q / (1.0 + q);
    let big = 1.0 - small;
    if z >= 0.0 {
        (big, small)
    } else {
        (small, big)
    }
}

/// log r^MA(z); use `log_ratio(-z)` for the bid side. Evaluated in log1p
/// form so it stays finite and accurate far into the tails.
pub fn log_ratio(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-log likelihood H_T(θ) = Σ log r^{side_i}(θ·x_i). Always ≤ 0.
pub fn quasi_log_likelihood(theta: &[f64], data: &Dataset) -> Result<f64, EstimatorError> {
    data.check_dim(theta)?;
    let d = data.d;
    let partials: Vec<f64> = data
        .x
        .par_chunks(CHUNK * d)
        .enumerate()
        .map(|(ci, rows)| {
            let base = ci * CHUNK;
            let mut acc = 0.0;
            for (k, row) in rows.chunks_exact(d).enumerate() {
                let z = dot(theta, row);
                acc += log_ratio(if data.is_ma[base + k] { z } else { -z });
            }
            acc
        })
        .collect();
    Ok(partials.iter().sum())
}

/// Score vector: ∂H_T/∂θ_j = Σ (1{MA} − r^MA) x_j.
pub fn gradient(theta: &[f64], data: &Dataset) -> Result<Vec<f64>, EstimatorError> {
    data.check_dim(theta)?;
    let d = data.d;
    let partials: Vec<Vec<f64>> = data
        .x
        .par_chunks(CHUNK * d)
        .enumerate()
        .map(|(ci, rows)| {
            let base = ci * CHUNK;
            let mut acc = vec![0.0; d];
            for (k, row) in rows.chunks_exact(d).enumerate() {
                let z = dot(theta, row);
                let (r_ma, _) = ratio_pair(z);
                let w = if data.is_ma[base + k] { 1.0 - r_ma } else { -r_ma };
                for (a, &xj) in acc.iter_mut().zip(row) {
                    *a += w * xj;
                }
            }
            acc
        })
        .collect();
    let mut g = vec![0.0; d];
    for p in partials {
        for (a, b) in g.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok(g)
}

/// Hessian: −Σ r^MA r^MB x xᵀ, negative semidefinite for all θ.
pub fn hessian(theta: &[f64], data: &Dataset) -> Result<DMatrix<f64>, EstimatorError> {
    data.check_dim(theta)?;
    let d = data.d;
    // Accumulate the lower triangle per chunk, combine in chunk order.
    let partials: Vec<Vec<f64>> = data
        .x
        .par_chunks(CHUNK * d)
        .map(|rows| {
            let mut acc = vec![0.0; d * (d + 1) / 2];
            for row in rows.chunks_exact(d) {
                let z = dot(theta, row);
                let (r_ma, r_mb) = ratio_pair(z);
                let w = r_ma * r_mb;
                let mut idx = 0;
                for i in 0..d {
                    let wxi = w * row[i];
                    for &xj in &row[..=i] {
                        acc[idx] += wxi * xj;
                        idx += 1;
                    }
                }
            }
            acc
        })
        .collect();
    let mut tri = vec![0.0; d * (d + 1) / 2];
    for p in partials {
        for (a, b) in tri.iter_mut().zip(p) {
            *a += b;
        }
    }
    let mut h = DMatrix::zeros(d, d);
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            h[(i, j)] = -tri[idx];
            h[(j, i)] = -tri[idx];
            idx += 1;
        }
    }
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Convergence threshold on the max-norm of the projected gradient.
    pub tolerance: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Box radius R of the parameter space [−R, R]^d.
    pub box_radius: f64,
    /// Optional ridge penalty −ρ‖θ‖²/2 added to the objective during
    /// optimization only; reported in warnings when used.
    pub ridge: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tolerance: 1e-8,
            max_iter: 100,
            max_halvings: 30,
            box_radius: 50.0,
            ridge: None,
        }
    }
}

/// Curvature estimate with its conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct GammaEstimate {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
    /// Smallest eigenvalue at or below the degeneracy threshold: the
    /// asymptotic covariance is unreliable.
    pub degenerate: bool,
}

/// Fit output. `theta` lies in the box; `std_errors` is absent when Γ̂ is
/// singular. `objective_trace` records H_T after each accepted step.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub gamma: DMatrix<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub converged: bool,
    pub boundary_hit: bool,
    pub warnings: Vec<String>,
    pub sessions: usize,
    pub dimension: usize,
    pub sample_count: usize,
    pub objective_trace: Vec<f64>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Gradient with box-blocked components zeroed: a coordinate pinned at a
/// bound whose gradient points outward cannot move.
fn project_gradient(g: &[f64], theta: &[f64], r: f64) -> Vec<f64> {
    g.iter()
        .zip(theta)
        .map(|(&gj, &tj)| {
            if (tj >= r && gj > 0.0) || (tj <= -r && gj < 0.0) {
                0.0
            } else {
                gj
            }
        })
        .collect()
}

fn clamp_box(theta: &mut [f64], r: f64) {
    for t in theta.iter_mut() {
        *t = t.clamp(-r, r);
    }
}

/// Eigendirections with near-zero curvature, reported when the Hessian is
/// rank-deficient (collinear features).
fn null_directions(neg_h: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let eig = neg_h.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = max_ev * 1e-10 + 1e-300;
    let mut dirs = Vec::new();
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev <= tol {
            dirs.push(eig.eigenvectors.column(k).iter().copied().collect());
        }
    }
    dirs
}

/// Maximize the quasi-log likelihood over the box by projected Newton with
/// step halving.
///
/// One-sided windows (every order on the same side) are legal input: the
/// maximum then sits on the boundary and the result comes back flagged via
/// `boundary_hit` plus a warning rather than an error. Rank-deficient
/// feature sets are rejected as [`EstimatorError::SingularHessian`] with
/// the offending directions.
pub fn fit_qmle(data: &Dataset, options: &FitOptions) -> Result<FitResult, EstimatorError> {
    let d = data.d;
    if data.n == 0 {
        return Err(EstimatorError::EmptyDataset);
    }
    if data.n < d + 1 {
        return Err(EstimatorError::TooFewSamples {
            need: d + 1,
            have: data.n,
            d,
        });
    }
    let r = options.box_radius;
    let ridge = options.ridge.unwrap_or(0.0);
    let mut warnings = Vec::new();
    if ridge > 0.0 {
        warnings.push(format!("ridge penalty {ridge:e} applied during optimization"));
    }
    let ask = data.ask_count();
    if ask == 0 || ask == data.n {
        warnings.push(format!(
            "one-sided window: all {} orders on the {} side; estimate lies on the box boundary",
            data.n,
            if ask == 0 { "bid" } else { "ask" }
        ));
    }

    let penalized = |theta: &[f64], base: f64| base - 0.5 * ridge * dot(theta, theta);

    let mut theta = vec![0.0; d];
    if ridge == 0.0 {
        // At θ = 0 the negated Hessian is exactly ¼ of the feature Gram
        // matrix, so rank deficiency here means collinear features for
        // every θ: fail fast with the offending directions.
        let neg_h0 = -hessian(&theta, data)?;
        let eig = neg_h0.clone().symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b));
        if eig.eigenvalues.iter().any(|&e| e <= max_ev * 1e-10) {
            return Err(EstimatorError::SingularHessian {
                directions: null_directions(&neg_h0),
            });
        }
    }
    let mut objective = quasi_log_likelihood(&theta, data)?;
    let mut pen_obj = penalized(&theta, objective);
    let mut trace = vec![objective];
    let mut iterations = 0;
    let mut converged = false;
    let mut gradient_norm = f64::INFINITY;

    for iter in 1..=options.max_iter {
        iterations = iter;
        let mut g = gradient(&theta, data)?;
        if ridge > 0.0 {
            for (gj, &tj) in g.iter_mut().zip(&theta) {
                *gj -= ridge * tj;
            }
        }
        gradient_norm = max_abs(&g);
        let pg = project_gradient(&g, &theta, r);
        if max_abs(&pg) <= options.tolerance {
            converged = true;
            break;
        }

        let mut neg_h = -hessian(&theta, data)?;
        for i in 0..d {
            neg_h[(i, i)] += ridge;
        }
        let g_vec = DVector::from_column_slice(&g);
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&g_vec),
            None => {
                // Tiny jitter distinguishes a poorly scaled Hessian from a
                // truly rank-deficient one.
                let jitter = neg_h.trace().abs() / d as f64 * 1e-12 + 1e-300;
                let mut jittered = neg_h.clone();
                for i in 0..d {
                    jittered[(i, i)] += jitter;
                }
                match jittered.cholesky() {
                    Some(ch) => ch.solve(&g_vec),
                    None => {
                        return Err(EstimatorError::SingularHessian {
                            directions: null_directions(&neg_h),
                        })
                    }
                }
            }
        };

        // Half the Newton decrement is the predicted objective gain of the
        // exact step. Once it drops below the objective's floating-point
        // resolution the optimum is resolved to machine precision: no line
        // search can make strict progress, and the gradient cannot be
        // driven further toward zero.
        let predicted = 0.5 * g.iter().zip(step.iter()).map(|(a, b)| a * b).sum::<f64>();
        if predicted <= 4.0 * f64::EPSILON * (1.0 + pen_obj.abs()) {
            converged = true;
            break;
        }

        // Step halving on the Newton direction, falling back to steepest
        // ascent if the clamped Newton step cannot improve the objective.
        let mut improved = false;
        'direction: for dir in [step.as_slice(), &pg] {
            let mut alpha = 1.0;
            for _ in 0..=options.max_halvings {
                let mut cand: Vec<f64> =
                    theta.iter().zip(dir).map(|(&t, &s)| t + alpha * s).collect();
                clamp_box(&mut cand, r);
                let cand_obj = quasi_log_likelihood(&cand, data)?;
                let cand_pen = penalized(&cand, cand_obj);
                if cand_pen > pen_obj && cand != theta {
                    theta = cand;
                    objective = cand_obj;
                    pen_obj = cand_pen;
                    trace.push(objective);
                    improved = true;
                    break 'direction;
                }
                alpha *= 0.5;
            }
        }
        if !improved {
            // No ascent step exists numerically; treat the current point
            // as the constrained optimum if its projected gradient is
            // small, otherwise report non-convergence below.
            break;
        }
    }

    if !converged {
        let mut g = gradient(&theta, data)?;
        if ridge > 0.0 {
            for (gj, &tj) in g.iter_mut().zip(&theta) {
                *gj -= ridge * tj;
            }
        }
        gradient_norm = max_abs(&g);
        converged = max_abs(&project_gradient(&g, &theta, r)) <= options.tolerance;
        if !converged {
            warnings.push(format!(
                "did not converge in {} iterations: projected gradient max-norm {:.3e}",
                iterations, gradient_norm
            ));
        }
    }

    let boundary_hit = theta.iter().any(|&t| t.abs() >= r - 1e-12);
    let gamma = estimate_gamma(&theta, data)?;
    if gamma.degenerate {
        warnings.push(format!(
            "gamma estimate near-singular: min eigenvalue {:.3e}",
            gamma.min_eigenvalue
        ));
    }
    let std_errors = match standard_errors(&gamma.matrix, data.sessions) {
        Ok(se) => Some(se),
        Err(_) => {
            warnings.push("standard errors unavailable: gamma is singular".to_string());
            None
        }
    };

    Ok(FitResult {
        theta,
        objective,
        gradient_norm,
        iterations,
        gamma: gamma.matrix,
        std_errors,
        converged,
        boundary_hit,
        warnings,
        sessions: data.sessions,
        dimension: d,
        sample_count: data.n,
        objective_trace: trace,
    })
}

/// Γ̂ = −hessian(θ̂)/T: the per-session observed information. Under the
/// model at the true parameter this converges to the Γ tensor governing
/// the asymptotic covariance.
pub fn estimate_gamma(theta_hat: &[f64], data: &Dataset) -> Result<GammaEstimate, EstimatorError> {
    let h = hessian(theta_hat, data)?;
    let matrix = -h / data.sessions as f64;
    let eig = matrix.clone().symmetric_eigen();
    let min_eigenvalue = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    Ok(GammaEstimate {
        matrix,
        min_eigenvalue,
        degenerate: min_eigenvalue <= 1e-10,
    })
}

/// sqrt(diag(Γ̂^{−1})/T): the theorem's asymptotic scale √T(θ̂ − θ*) ≈
/// N(0, Γ^{−1}) read as per-coordinate standard errors.
pub fn standard_errors(gamma: &DMatrix<f64>, sessions: usize) -> Result<Vec<f64>, EstimatorError> {
    let t = sessions.max(1) as f64;
    let inv = gamma
        .clone()
        .cholesky()
        .ok_or(EstimatorError::SingularGamma)?
        .inverse();
    Ok((0..gamma.nrows()).map(|j| (inv[(j, j)] / t).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sample(side: Side, features: Vec<f64>) -> MarketOrderSample {
        MarketOrderSample {
            side,
            timestamp: 0,
            session_id: 0,
            features,
        }
    }

    /// Random dataset with labels drawn from the model at `theta_star`.
    fn model_dataset(theta_star: &[f64], n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = theta_star.len();
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = vec![1.0];
            for _ in 1..d {
                x.push(rng.gen_range(-1.0..1.0));
            }
            let z = dot(theta_star, &x);
            let (r_ma, _) = ratio_pair(z);
            let side = if rng.gen_bool(r_ma) { Side::Ask } else { Side::Bid };
            samples.push(sample(side, x));
        }
        Dataset::from_samples(&samples, 1).unwrap()
    }

    #[test]
    fn ratio_closed_forms() {
        let (ma, mb) = ratio_pair(0.0);
        assert_eq!(ma, 0.5);
        assert_eq!(mb, 0.5);
        let (ma, mb) = ratio_pair(3.0f64.ln());
        assert_abs_diff_eq!(ma, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(mb, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn ratios_sum_to_one_exactly() {
        for &z in &[
            0.0, 1e-9, -1e-9, 0.3, -0.7, 5.0, -12.0, 50.0, -300.0, 700.0, -700.0, 1e8, -1e8,
        ] {
            let (ma, mb) = ratio_pair(z);
            assert_eq!(ma + mb, 1.0, "z = {z}");
            assert!((0.0..=1.0).contains(&ma));
        }
    }

    #[test]
    fn log_ratio_stable_in_tails() {
        assert_abs_diff_eq!(log_ratio(0.0), -(2.0f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(log_ratio(3.0f64.ln()), 0.75f64.ln(), epsilon = 1e-15);
        // Deep tails: log r^MA(z) ~ z for very negative z, ~ 0 for large z.
        assert_abs_diff_eq!(log_ratio(-700.0), -700.0, epsilon = 1e-8);
        assert!(log_ratio(700.0).abs() < 1e-300);
        assert!(log_ratio(700.0) <= 0.0);
    }

    #[test]
    fn likelihood_at_zero_is_n_log_half() {
        let data = model_dataset(&[0.0, 0.0], 257, 1);
        let ll = quasi_log_likelihood(&[0.0, 0.0], &data).unwrap();
        assert_abs_diff_eq!(ll, 257.0 * 0.5f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn likelihood_single_sample() {
        let data =
            Dataset::from_samples(&[sample(Side::Ask, vec![1.0])], 1).unwrap();
        let ll = quasi_log_likelihood(&[3.0f64.ln()], &data).unwrap();
        assert_abs_diff_eq!(ll, 0.75f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn likelihood_matches_compensated_summation() {
        let data = model_dataset(&[0.2, -0.5, 0.9], 9_001, 2);
        let theta = [0.11, -0.37, 0.42];
        let fast = quasi_log_likelihood(&theta, &data).unwrap();
        // Kahan-compensated per-sample oracle.
        let (mut acc, mut c) = (0.0f64, 0.0f64);
        for i in 0..data.n() {
            let z = dot(&theta, data.row(i));
            let term = log_ratio(if data.is_ma(i) { z } else { -z });
            let y = term - c;
            let t = acc + y;
            c = (t - acc) - y;
            acc = t;
        }
        assert!((fast - acc).abs() <= 1e-12 * acc.abs());
    }

    #[test]
    fn gradient_vanishes_on_sign_paired_data() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        for _ in 0..50 {
            let x: Vec<f64> = vec![1.0, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            samples.push(sample(Side::Ask, x.clone()));
            samples.push(sample(Side::Ask, neg.clone()));
            samples.push(sample(Side::Bid, x));
            samples.push(sample(Side::Bid, neg));
        }
        let data = Dataset::from_samples(&samples, 1).unwrap();
        let g = gradient(&[0.0, 0.0, 0.0], &data).unwrap();
        assert!(max_abs(&g) < 1e-12, "gradient {g:?}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = model_dataset(&[0.4, -0.8, 0.2, 0.6], 800, 4);
        let theta = [0.15, -0.3, 0.45, -0.05];
        let g = gradient(&theta, &data).unwrap();
        for j in 0..theta.len() {
            let h = 1e-5 * theta[j].abs().max(1.0);
            let mut up = theta.to_vec();
            up[j] += h;
            let mut dn = theta.to_vec();
            dn[j] -= h;
            let fd = (quasi_log_likelihood(&up, &data).unwrap()
                - quasi_log_likelihood(&dn, &data).unwrap())
                / (2.0 * h);
            let rel = (g[j] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-6, "coordinate {j}: analytic {} fd {}", g[j], fd);
        }
    }

    #[test]
    fn hessian_matches_finite_differences_and_is_nsd() {
        let data = model_dataset(&[0.4, -0.8, 0.2], 500, 5);
        let theta = [0.2, 0.1, -0.6];
        let h = hessian(&theta, &data).unwrap();
        for j in 0..theta.len() {
            let step = 1e-5;
            let mut up = theta.to_vec();
            up[j] += step;
            let mut dn = theta.to_vec();
            dn[j] -= step;
            let gu = gradient(&up, &data).unwrap();
            let gd = gradient(&dn, &data).unwrap();
            for i in 0..theta.len() {
                let fd = (gu[i] - gd[i]) / (2.0 * step);
                assert!(
                    (h[(i, j)] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                    "H[{i},{j}] = {} vs fd {}",
                    h[(i, j)],
                    fd
                );
            }
        }
        let eig = h.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e <= 1e-10));
    }

    #[test]
    fn reductions_are_thread_count_invariant() {
        let data = model_dataset(&[0.3, -0.2, 0.7], 20_000, 6);
        let theta = [0.21, -0.43, 0.08];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                (
                    quasi_log_likelihood(&theta, &data).unwrap(),
                    gradient(&theta, &data).unwrap(),
                    hessian(&theta, &data).unwrap(),
                )
            })
        };
        let (l1, g1, h1) = run(1);
        let (l4, g4, h4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
        assert_eq!(h1, h4);
    }

    #[test]
    fn fit_recovers_null_model() {
        // Labels independent of features: the estimate must shrink to 0.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut samples = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            let x = vec![1.0, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let side = if rng.gen_bool(0.5) { Side::Ask } else { Side::Bid };
            samples.push(sample(side, x));
        }
        let data = Dataset::from_samples(&samples, 1).unwrap();
        let fit = fit_qmle(&data, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(!fit.boundary_hit);
        let norm = fit.theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!(norm < 0.05, "theta {:?}", fit.theta);
    }

    #[test]
    fn fit_matches_grid_search_oracle() {
        let data = model_dataset(&[0.12, -0.21], 2_000, 8);
        let opts = FitOptions {
            box_radius: 0.5,
            ..FitOptions::default()
        };
        let fit = fit_qmle(&data, &opts).unwrap();
        assert!(fit.converged && !fit.boundary_hit);

        // Two-stage exhaustive grid: a full coarse sweep of the box locates
        // the optimum's cell (the objective is strictly concave), then a
        // fine sweep around it resolves the argmax at 1e-3.
        let xs: Vec<f64> = (0..data.n()).map(|i| data.row(i)[1]).collect();
        let signs: Vec<f64> = (0..data.n())
            .map(|i| if data.is_ma(i) { 1.0 } else { -1.0 })
            .collect();
        let sweep = |lo0: f64, hi0: f64, lo1: f64, hi1: f64, res: f64| {
            let steps0 = ((hi0 - lo0) / res).round() as i64;
            let steps1 = ((hi1 - lo1) / res).round() as i64;
            (0..=steps0)
                .into_par_iter()
                .map(|i| {
                    let t0 = lo0 + i as f64 * res;
                    let mut row_best = (f64::NEG_INFINITY, 0.0, 0.0);
                    for k in 0..=steps1 {
                        let t1 = lo1 + k as f64 * res;
                        let mut ll = 0.0;
                        for (x1, s) in xs.iter().zip(&signs) {
                            ll += log_ratio(s * (t0 + t1 * x1));
                        }
                        if ll > row_best.0 {
                            row_best = (ll, t0, t1);
                        }
                    }
                    row_best
                })
                .reduce(
                    || (f64::NEG_INFINITY, 0.0, 0.0),
                    |a, b| if a.0 >= b.0 { a } else { b },
                )
        };
        let r = opts.box_radius;
        let coarse_res = 5e-3;
        let coarse = sweep(-r, r, -r, r, coarse_res);
        let pad = 2.0 * coarse_res;
        let res = 1e-3;
        let best = sweep(
            (coarse.1 - pad).max(-r),
            (coarse.1 + pad).min(r),
            (coarse.2 - pad).max(-r),
            (coarse.2 + pad).min(r),
            res,
        );
        assert!(
            (fit.theta[0] - best.1).abs() <= res && (fit.theta[1] - best.2).abs() <= res,
            "newton {:?} vs grid ({}, {})",
            fit.theta,
            best.1,
            best.2
        );
    }

    #[test]
    fn separation_drives_theta_to_boundary() {
        let mut samples = Vec::new();
        for i in 0..100 {
            let ma = i % 2 == 0;
            samples.push(sample(
                if ma { Side::Ask } else { Side::Bid },
                vec![1.0, if ma { 1.0 } else { -1.0 }],
            ));
        }
        let data = Dataset::from_samples(&samples, 1).unwrap();
        let opts = FitOptions {
            box_radius: 10.0,
            ..FitOptions::default()
        };
        let fit = fit_qmle(&data, &opts).unwrap();
        assert!(fit.boundary_hit);
        assert_abs_diff_eq!(fit.theta[1], 10.0, epsilon = 1e-9);
        assert!(fit.converged, "projected gradient vanishes at the boundary");
    }

    #[test]
    fn one_sided_data_flagged_not_rejected() {
        let mut samples = Vec::new();
        for i in 0..40 {
            samples.push(sample(Side::Ask, vec![1.0, (i as f64 / 40.0) - 0.5]));
        }
        let data = Dataset::from_samples(&samples, 1).unwrap();
        let opts = FitOptions {
            box_radius: 8.0,
            ..FitOptions::default()
        };
        let fit = fit_qmle(&data, &opts).unwrap();
        assert!(fit.boundary_hit);
        assert_abs_diff_eq!(fit.theta[0], 8.0, epsilon = 1e-9);
        assert!(fit.warnings.iter().any(|w| w.contains("one-sided")));
    }

    #[test]
    fn collinear_features_rejected_with_directions() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut samples = Vec::new();
        for _ in 0..200 {
            let v = rng.gen_range(-1.0..1.0);
            let side = if rng.gen_bool(0.5) { Side::Ask } else { Side::Bid };
            // Third feature is an exact linear combination of the others.
            samples.push(sample(side, vec![1.0, v, 2.0 * v - 1.0]));
        }
        let data = Dataset::from_samples(&samples, 1).unwrap();
        let err = fit_qmle(&data, &FitOptions::default()).unwrap_err();
        match err {
            EstimatorError::SingularHessian { directions } => {
                assert!(!directions.is_empty());
                // The reported direction must actually be a null direction
                // of the Gram matrix: x·dir = 0 for every sample.
                let dir = &directions[0];
                for i in 0..data.n() {
                    assert!(dot(data.row(i), dir).abs() < 1e-8);
                }
            }
            other => panic!("expected SingularHessian, got {other:?}"),
        }
    }

    #[test]
    fn newton_objective_is_monotone() {
        for seed in 10..16 {
            let data = model_dataset(&[0.8, -1.2, 0.5, 0.3], 3_000, seed);
            let fit = fit_qmle(&data, &FitOptions::default()).unwrap();
            for w in fit.objective_trace.windows(2) {
                assert!(w[1] > w[0], "trace must strictly increase: {w:?}");
            }
        }
    }

    #[test]
    fn gamma_closed_forms() {
        let samples: Vec<_> = (0..120).map(|i| {
            sample(if i % 2 == 0 { Side::Ask } else { Side::Bid }, vec![1.0])
        }).collect();
        let data = Dataset::from_samples(&samples, 6).unwrap();
        let gamma = estimate_gamma(&[0.0], &data).unwrap();
        // r^MA r^MB = 1/4 at θ·x = 0, so Γ̂ = N/(4T).
        assert_abs_diff_eq!(gamma.matrix[(0, 0)], 120.0 / (4.0 * 6.0), epsilon = 1e-12);
        assert!(!gamma.degenerate);

        let h = hessian(&[0.0], &data).unwrap();
        assert_abs_diff_eq!(gamma.matrix[(0, 0)], -h[(0, 0)] / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn standard_error_closed_forms() {
        let se = standard_errors(&DMatrix::identity(3, 3), 100).unwrap();
        for v in se {
            assert_abs_diff_eq!(v, 0.1, epsilon = 1e-15);
        }
        let gamma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let se = standard_errors(&gamma, 1).unwrap();
        assert_abs_diff_eq!(se[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(se[1], 1.0, epsilon = 1e-15);

        let singular = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            standard_errors(&singular, 1),
            Err(EstimatorError::SingularGamma)
        ));
    }

    proptest! {
        #[test]
        fn prop_ratio_sum_and_antisymmetry(z in -800.0f64..800.0) {
            let (ma, mb) = ratio_pair(z);
            prop_assert_eq!(ma + mb, 1.0);
            let (ma_neg, mb_neg) = ratio_pair(-z);
            prop_assert_eq!(ma, mb_neg);
            prop_assert_eq!(mb, ma_neg);
        }

        #[test]
        fn prop_relabel_negate_invariance(seed in 0u64..40, scale in 0.1f64..3.0) {
            let data = model_dataset(&[0.5, -0.4], 120, seed);
            let flipped: Vec<MarketOrderSample> = (0..data.n()).map(|i| {
                MarketOrderSample {
                    side: if data.is_ma(i) { Side::Bid } else { Side::Ask },
                    timestamp: 0,
                    session_id: 0,
                    features: data.row(i).to_vec(),
                }
            }).collect();
            let flipped = Dataset::from_samples(&flipped, 1).unwrap();
            let theta = [0.3 * scale, -0.9 * scale];
            let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
            let a = quasi_log_likelihood(&theta, &data).unwrap();
            let b = quasi_log_likelihood(&neg, &flipped).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }

        #[test]
        fn prop_likelihood_concave_on_midpoints(
            seed in 0u64..30,
            a0 in -2.0f64..2.0, a1 in -2.0f64..2.0,
            b0 in -2.0f64..2.0, b1 in -2.0f64..2.0,
        ) {
            let data = model_dataset(&[0.3, 0.7], 90, seed);
            let mid = [(a0 + b0) / 2.0, (a1 + b1) / 2.0];
            let fa = quasi_log_likelihood(&[a0, a1], &data).unwrap();
            let fb = quasi_log_likelihood(&[b0, b1], &data).unwrap();
            let fm = quasi_log_likelihood(&mid, &data).unwrap();
            prop_assert!(fm >= (fa + fb) / 2.0 - 1e-9 * fm.abs().max(1.0));
        }

        #[test]
        fn prop_likelihood_nonpositive(seed in 0u64..30, t0 in -5.0f64..5.0, t1 in -5.0f64..5.0) {
            let data = model_dataset(&[0.1, -0.1], 64, seed);
            prop_assert!(quasi_log_likelihood(&[t0, t1], &data).unwrap() <= 0.0);
        }
    }
}
