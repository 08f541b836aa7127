//! Closed-form Gaussian analytics of the linear part of the dynamics.
//!
//! Index convention used throughout the crate: the weight vectors `g1`, `g2`
//! and the projection coefficients `alpha`, `beta` have mathematical indices
//! `1..=k+1`; they are stored 0-based, so slot `i` holds index `i + 1` and is
//! the weight of the noise `z_{i+1}` drawn at step `i`.

use nalgebra::{DMatrix, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_dim, ensure_positive, Error, Result};
use crate::framework::Diffusion;

/// Threshold on `kappa * t` below which `Sigma_1` is summed as a power series.
const SERIES_SWITCH: f64 = 0.5;

/// Absolute floor on the determinant for the nondegenerate set.
pub const DET_FLOOR: f64 = 1e-14;

/// Entries of a 2x2 symmetric covariance (position, cross, velocity).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceTriple {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl CovarianceTriple {
    pub fn det(&self) -> f64 {
        self.s1 * self.s3 - self.s2 * self.s2
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { s1: self.s1 * factor, s2: self.s2 * factor, s3: self.s3 * factor }
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.s1, self.s2, self.s2, self.s3)
    }

    pub fn is_valid(&self) -> bool {
        self.s1 >= 0.0 && self.s3 >= 0.0 && self.det() >= 0.0
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.s1 - other.s1).abs().max((self.s2 - other.s2).abs()).max((self.s3 - other.s3).abs())
    }
}

/// `sigma^2 (1 - e^{-2 kappa t}) / (2 kappa t)`, equal to `sigma^2` at `t = 0`.
pub fn sigma_tilde_sq(t: f64, kappa: f64, sigma: f64) -> Result<f64> {
    ensure(t >= 0.0 && t.is_finite(), || format!("time must be nonnegative, got {t}"))?;
    ensure_positive("kappa", kappa)?;
    if t == 0.0 {
        return Ok(sigma * sigma);
    }
    let a = 2.0 * kappa * t;
    Ok(sigma * sigma * -(-a).exp_m1() / a)
}

/// Covariance of the position/velocity increments of the Ornstein-Uhlenbeck
/// process with zero force over a time `t`, per coordinate.
pub fn continuous_covariance(t: f64, kappa: f64, sigma: f64) -> Result<CovarianceTriple> {
    ensure(t >= 0.0 && t.is_finite(), || format!("time must be nonnegative, got {t}"))?;
    ensure_positive("kappa", kappa)?;
    let s2 = sigma * sigma;
    let a = kappa * t;
    let e1 = (-a).exp_m1();
    let position = if a < SERIES_SWITCH { s2 * t.powi(3) * position_series(a) } else { position_direct(a, kappa, s2) };
    Ok(CovarianceTriple {
        s1: position,
        s2: s2 * e1 * e1 / (2.0 * kappa * kappa),
        s3: -s2 * (-2.0 * a).exp_m1() / (2.0 * kappa),
    })
}

fn position_direct(a: f64, kappa: f64, s2: f64) -> f64 {
    s2 / (2.0 * kappa.powi(3)) * (2.0 * a + 4.0 * (-a).exp_m1() - (-2.0 * a).exp_m1())
}

/// `sum_{n >= 3} (-1)^n (2 - 2^{n-1}) a^{n-3} / n!`
fn position_series(a: f64) -> f64 {
    let mut sum = 0.0;
    let mut a_pow = 1.0;
    let mut factorial = 6.0;
    let mut two_pow = 4.0;
    for n in 3..40 {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * (2.0 - two_pow) * a_pow / factorial;
        a_pow *= a;
        factorial *= f64::from(n + 1);
        two_pow *= 2.0;
    }
    sum
}

#[doc(hidden)]
pub fn continuous_position_variants(t: f64, kappa: f64, sigma: f64) -> (f64, f64) {
    let a = kappa * t;
    let s2 = sigma * sigma;
    (s2 * t.powi(3) * position_series(a), position_direct(a, kappa, s2))
}

/// Weights of the noise increments in the aggregated position and velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseWeights {
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub k: usize,
    pub gamma: f64,
    pub tau: f64,
}

fn check_chain_params(gamma: f64, tau: f64) -> Result<()> {
    ensure_positive("gamma", gamma)?;
    ensure(tau > 0.0 && tau < 1.0, || format!("tau must lie in (0, 1), got {tau}"))
}

/// `1 - tau^n`
fn one_minus_pow(tau: f64, n: usize) -> f64 {
    -(n as f64 * tau.ln()).exp_m1()
}

/// `g1[i] = gamma (1 - tau^(k-i)) / (1 - tau)` and `g2[i] = tau^(k-i)`, `i = 0..=k`.
pub fn weight_vectors(k: usize, gamma: f64, tau: f64) -> Result<NoiseWeights> {
    check_chain_params(gamma, tau)?;
    let q = 1.0 - tau;
    let g1 = (0..=k).map(|i| gamma * one_minus_pow(tau, k - i) / q).collect();
    let g2 = (0..=k).map(|i| tau.powi((k - i) as i32)).collect();
    Ok(NoiseWeights { g1, g2, k, gamma, tau })
}

/// The matrix multiplying the initial condition after `k + 1` steps, as a `2d x 2d` block matrix.
pub fn transition_matrix_power(k: usize, gamma: f64, tau: f64, dim: usize) -> Result<DMatrix<f64>> {
    check_chain_params(gamma, tau)?;
    ensure(dim >= 1, || "dimension must be at least 1".into())?;
    let drift = gamma * one_minus_pow(tau, k + 1) / (1.0 - tau);
    let decay = tau.powi((k + 1) as i32);
    let mut m = DMatrix::zeros(2 * dim, 2 * dim);
    for j in 0..dim {
        m[(j, j)] = 1.0;
        m[(j, dim + j)] = drift;
        m[(dim + j, dim + j)] = decay;
    }
    Ok(m)
}

/// Covariance of the aggregated noise after `k + 1` steps and whether it is nondegenerate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCovariance {
    pub c: CovarianceTriple,
    pub det: f64,
    pub in_ec: bool,
}

/// Closed-form covariance of the aggregated noise, evaluated in double-double
/// arithmetic because the closed forms cancel badly when `tau` is close to one.
pub fn discrete_covariance(k: usize, gamma: f64, tau: f64) -> Result<DiscreteCovariance> {
    check_chain_params(gamma, tau)?;
    use twofold::Dd;
    let one = Dd::from(1.0);
    let t = Dd::from(tau);
    let g = Dd::from(gamma);
    let q = one - t;
    let tk = t.powi(k as u64);
    let t2k1 = tk * tk * t;
    let t2k2 = t2k1 * t;
    let prefactor = g * g / (q * q);
    let one_plus_t = one + t;

    let poly = t * (Dd::from(2.0) + t) - Dd::from(2.0) * t * one_plus_t * tk + t2k2;
    let bracket = one_plus_t * Dd::from(k as f64) * g - poly * g / q;
    let c1 = prefactor / one_plus_t * bracket;
    let c2 = prefactor * t / one_plus_t * (one - one_plus_t * tk + t2k1);
    let c3 = g / q / one_plus_t * (one - t2k2);
    let det = c1 * c3 - c2 * c2;

    let det = det.to_f64();
    Ok(DiscreteCovariance {
        c: CovarianceTriple { s1: c1.to_f64(), s2: c2.to_f64(), s3: c3.to_f64() },
        det,
        in_ec: det > DET_FLOOR,
    })
}

/// Solutions of the per-index 2x2 systems defining the projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub covariance: DiscreteCovariance,
    pub weights: NoiseWeights,
}

impl ProjectionCoefficients {
    /// `max(|alpha|_inf, |beta|_inf)`
    pub fn sup_norm(&self) -> f64 {
        sup_norm(&self.alpha).max(sup_norm(&self.beta))
    }
}

pub(crate) fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn solve_projection_coeffs(k: usize, gamma: f64, tau: f64) -> Result<ProjectionCoefficients> {
    let covariance = discrete_covariance(k, gamma, tau)?;
    if !covariance.in_ec {
        return Err(Error::Degenerate { k, gamma, det: covariance.det });
    }
    let weights = weight_vectors(k, gamma, tau)?;
    let CovarianceTriple { s1, s2, s3 } = covariance.c;
    let det = covariance.det;
    let alpha = weights.g1.iter().zip(&weights.g2).map(|(a, b)| (s3 * a - s2 * b) / det).collect();
    let beta = weights.g1.iter().zip(&weights.g2).map(|(a, b)| (s1 * b - s2 * a) / det).collect();
    Ok(ProjectionCoefficients { alpha, beta, covariance, weights })
}

/// Orthogonal projector onto the complement of `span(g1, g2)` and its reduced selector.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionData {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub projector: DMatrix<f64>,
    pub selector: DMatrix<f64>,
}

pub fn build_projector(k: usize, gamma: f64, tau: f64) -> Result<ProjectionData> {
    ensure(k >= 2, || format!("projector needs k >= 2, got {k}"))?;
    let coeffs = solve_projection_coeffs(k, gamma, tau)?;
    let n = k + 1;
    let (g1, g2) = (&coeffs.weights.g1, &coeffs.weights.g2);
    let projector = DMatrix::from_fn(n, n, |i, j| {
        let identity = if i == j { 1.0 } else { 0.0 };
        identity - gamma * coeffs.beta[i] * g2[j] - gamma * coeffs.alpha[i] * g1[j]
    });
    let selector = projector.rows(0, k - 1).into_owned();
    Ok(ProjectionData { alpha: coeffs.alpha, beta: coeffs.beta, projector, selector })
}

/// Independent intermediate increments and the final aggregated noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDecomposition {
    pub z_tilde: Vec<Vec<f64>>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub g3: Vec<f64>,
}

/// Splits `k + 1` standard Gaussian vectors into `k - 1` residual increments
/// independent of the aggregated noise `(G1, G2)`, plus `G3`.
///
/// `G1` only collects the first `k` draws because the last weight vanishes.
pub fn decompose_noise(
    k: usize,
    gamma: f64,
    tau: f64,
    z_draws: &[Vec<f64>],
    diffusion: &Diffusion,
) -> Result<NoiseDecomposition> {
    ensure(k >= 2, || format!("decomposition needs k >= 2, got {k}"))?;
    ensure_dim("z_draws", z_draws.len(), k + 1)?;
    let dim = z_draws[0].len();
    for z in z_draws {
        ensure_dim("noise vector", z.len(), dim)?;
    }
    let coeffs = solve_projection_coeffs(k, gamma, tau)?;
    let sq = gamma.sqrt();
    let mut big1 = vec![0.0; dim];
    let mut big2 = vec![0.0; dim];
    let mut sum = vec![0.0; dim];
    for (i, z) in z_draws.iter().enumerate() {
        for j in 0..dim {
            if i < k {
                big1[j] += sq * coeffs.weights.g1[i] * z[j];
            }
            big2[j] += sq * coeffs.weights.g2[i] * z[j];
            sum[j] += sq * z[j];
        }
    }
    let mut big3 = vec![0.0; dim];
    diffusion.apply(&sum, &mut big3);
    let z_tilde = (0..k - 1)
        .map(|i| {
            (0..dim)
                .map(|j| z_draws[i][j] - sq * coeffs.beta[i] * big2[j] - sq * coeffs.alpha[i] * big1[j])
                .collect()
        })
        .collect();
    Ok(NoiseDecomposition { z_tilde, g1: big1, g2: big2, g3: big3 })
}

/// The linear map from the stacked scalar draws `(z_1..z_{k+1})` to
/// `(z_tilde_1..z_tilde_{k-1}, G1, G2)`, as a `(k+1) x (k+1)` matrix.
pub fn decomposition_matrix(k: usize, gamma: f64, tau: f64) -> Result<DMatrix<f64>> {
    ensure(k >= 2, || format!("decomposition needs k >= 2, got {k}"))?;
    let coeffs = solve_projection_coeffs(k, gamma, tau)?;
    let sq = gamma.sqrt();
    let n = k + 1;
    let (g1, g2) = (&coeffs.weights.g1, &coeffs.weights.g2);
    let row_g1: Vec<f64> = (0..n).map(|i| if i < k { sq * g1[i] } else { 0.0 }).collect();
    let row_g2: Vec<f64> = (0..n).map(|i| sq * g2[i]).collect();
    Ok(DMatrix::from_fn(n, n, |r, c| {
        if r < k - 1 {
            let identity = if r == c { 1.0 } else { 0.0 };
            identity - sq * coeffs.beta[r] * row_g2[c] - sq * coeffs.alpha[r] * row_g1[c]
        } else if r == k - 1 {
            row_g1[c]
        } else {
            row_g2[c]
        }
    }))
}

/// One row of the discrete-versus-continuous covariance comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub gamma: f64,
    pub k: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub t0: f64,
    pub rows: Vec<ConsistencyRow>,
    /// `error(gamma_i) / error(gamma_{i+1})`
    pub ratios: Vec<f64>,
    pub sandwich: SandwichFit,
}

/// Number of steps covering `t0`, robust to `t0 / gamma` landing just below an integer.
pub fn steps_for_horizon(t0: f64, gamma: f64) -> usize {
    (t0 / gamma + 1e-9).floor() as usize
}

/// Compares the aggregated discrete covariance with `tau = e^{-kappa gamma}`
/// against the continuous one at `t0`, for each timestep of the grid.
pub fn covariance_consistency(t0: f64, gamma_grid: &[f64], kappa: f64, sigma: f64) -> Result<ConsistencyReport> {
    ensure_positive("t0", t0)?;
    ensure_positive("sigma", sigma)?;
    let reference = continuous_covariance(t0, kappa, sigma)?.scaled(1.0 / (sigma * sigma));
    let mut rows = Vec::with_capacity(gamma_grid.len());
    for &gamma in gamma_grid {
        ensure(gamma > 0.0 && gamma < t0, || format!("gamma grid entries must lie in (0, t0), got {gamma}"))?;
        let k = steps_for_horizon(t0, gamma);
        let c = discrete_covariance(k, gamma, (-kappa * gamma).exp())?.c;
        rows.push(ConsistencyRow { gamma, k, error: c.max_abs_diff(&reference) });
    }
    let ratios = rows.windows(2).map(|w| w[0].error / w[1].error).collect();
    let sandwich = fit_sandwich_constant(t0, kappa, sigma, 200)?;
    Ok(ConsistencyReport { t0, rows, ratios, sandwich })
}

/// Smallest constant `rho` with `t rho^{-1} diag(t^2, 1) <= Sigma(t) <= t rho diag(t^2, 1)`
/// on a log grid of `t` in `(0, t_max]`, and the eigenvalue checks at that constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichFit {
    pub rho: f64,
    pub min_upper_eigenvalue: f64,
    pub min_lower_eigenvalue: f64,
    pub holds: bool,
}

pub fn fit_sandwich_constant(t_max: f64, kappa: f64, sigma: f64, points: usize) -> Result<SandwichFit> {
    ensure(points >= 2, || "need at least two grid points".into())?;
    let grid = log_grid(t_max * 1e-4, t_max, points);
    let mut rho: f64 = 0.0;
    for &t in &grid {
        let n = normalized_covariance(t, kappa, sigma)?;
        let eig = n.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        ensure(lo > 0.0, || format!("continuous covariance degenerate at t = {t}"))?;
        rho = rho.max(hi).max(1.0 / lo);
    }
    // inflate slightly so the inequalities are strict
    let rho = rho * (1.0 + 1e-9);
    let (mut upper, mut lower) = (f64::INFINITY, f64::INFINITY);
    for &t in &grid {
        let sigma_t = continuous_covariance(t, kappa, sigma)?.matrix();
        let scale = Matrix2::new(t * t * t, 0.0, 0.0, t);
        let upper_gap = scale * rho - sigma_t;
        let lower_gap = sigma_t - scale / rho;
        // compare in the normalized frame so tiny t does not hide the sign
        let d = Matrix2::new(1.0 / (t * t.sqrt()), 0.0, 0.0, 1.0 / t.sqrt());
        upper = upper.min((d * upper_gap * d).symmetric_eigenvalues().min());
        lower = lower.min((d * lower_gap * d).symmetric_eigenvalues().min());
    }
    Ok(SandwichFit { rho, min_upper_eigenvalue: upper, min_lower_eigenvalue: lower, holds: upper > 0.0 && lower > 0.0 })
}

/// `D^{-1/2} Sigma(t) D^{-1/2} / t` with `D = diag(t^2, 1)`.
fn normalized_covariance(t: f64, kappa: f64, sigma: f64) -> Result<Matrix2<f64>> {
    let c = continuous_covariance(t, kappa, sigma)?;
    Ok(Matrix2::new(c.s1 / t.powi(3), c.s2 / (t * t), c.s2 / (t * t), c.s3 / t))
}

pub(crate) fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Scaled-covariance bounds over a horizon grid: the extreme values of
/// `Sigma_1 / (sigma^2 t^3)`, `Sigma_2 / (sigma^2 t^2)`, `Sigma_3 / (sigma^2 t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledCovarianceBounds {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    /// `lower[0] * lower[2] - upper[1]^2`, positive when the bounds certify nondegeneracy.
    pub margin: f64,
}

pub fn scaled_covariance_bounds(t_max: f64, kappa: f64, sigma: f64, points: usize) -> Result<ScaledCovarianceBounds> {
    let mut lower = [f64::INFINITY; 3];
    let mut upper = [f64::NEG_INFINITY; 3];
    for t in log_grid(t_max * 1e-4, t_max, points.max(2)) {
        let c = continuous_covariance(t, kappa, sigma)?.scaled(1.0 / (sigma * sigma));
        let scaled = [c.s1 / t.powi(3), c.s2 / (t * t), c.s3 / t];
        for i in 0..3 {
            lower[i] = lower[i].min(scaled[i]);
            upper[i] = upper[i].max(scaled[i]);
        }
    }
    Ok(ScaledCovarianceBounds { lower, upper, margin: lower[0] * lower[2] - upper[1] * upper[1] })
}

/// Sup norms of the projection coefficients at horizon `t0` and the limits they
/// are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientScaling {
    pub gamma: f64,
    pub alpha_sup: f64,
    pub beta_sup: f64,
    /// `(t0 S3 + S2) / det S` with `S` the continuous covariance over `sigma^2`
    pub alpha_limit: f64,
    /// `(S1 + t0 S2) / det S`
    pub beta_limit: f64,
}

impl CoefficientScaling {
    pub fn within(&self, factor: f64) -> bool {
        self.alpha_sup <= factor * self.alpha_limit && self.beta_sup <= factor * self.beta_limit
    }
}

pub fn coefficient_scaling(t0: f64, gamma: f64, kappa: f64, sigma: f64) -> Result<CoefficientScaling> {
    let k = steps_for_horizon(t0, gamma);
    let coeffs = solve_projection_coeffs(k, gamma, (-kappa * gamma).exp())?;
    let s = continuous_covariance(t0, kappa, sigma)?.scaled(1.0 / (sigma * sigma));
    let det = s.det();
    Ok(CoefficientScaling {
        gamma,
        alpha_sup: sup_norm(&coeffs.alpha),
        beta_sup: sup_norm(&coeffs.beta),
        alpha_limit: (t0 * s.s3 + s.s2) / det,
        beta_limit: (s.s1 + t0 * s.s2) / det,
    })
}

/// Correlation structure of the exact position/velocity noise over one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpEulerFactorization {
    pub covariance: CovarianceTriple,
    /// `Sigma_2 / sqrt(Sigma_1 Sigma_3)`
    pub alpha_corr: f64,
    /// Scalar position-noise coefficient of the generic form.
    pub d_scalar: f64,
}

impl ExpEulerFactorization {
    /// `(eta, xi)` from independent standard Gaussians `(z, w1)`.
    pub fn reconstruct(&self, z: f64, w1: f64) -> (f64, f64) {
        let c = &self.covariance;
        let xi = c.s3.sqrt() * z;
        let eta = c.s1.sqrt() * (self.alpha_corr * z + (1.0 - self.alpha_corr.powi(2)).sqrt() * w1);
        (eta, xi)
    }
}

pub fn exp_euler_factorization(gamma: f64, kappa: f64, sigma: f64) -> Result<ExpEulerFactorization> {
    ensure_positive("gamma", gamma)?;
    ensure_positive("sigma", sigma)?;
    let covariance = continuous_covariance(gamma, kappa, sigma)?;
    if !(covariance.det() > 0.0) {
        return Err(Error::Internal(format!(
            "one-step covariance not positive definite at gamma = {gamma} (det = {:e})",
            covariance.det()
        )));
    }
    let alpha_corr = covariance.s2 / (covariance.s1 * covariance.s3).sqrt();
    let sigma_tilde = sigma_tilde_sq(gamma, kappa, sigma)?.sqrt();
    let d_scalar = covariance.s2 / (sigma_tilde * (gamma.powi(3) * covariance.s3).sqrt());
    Ok(ExpEulerFactorization { covariance, alpha_corr, d_scalar })
}

/// Draws `(z, w1)` for one step and returns them with the factorization scalars.
pub fn exp_euler_noise_pair<R: Rng + ?Sized>(
    gamma: f64,
    kappa: f64,
    sigma: f64,
    dim: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>, ExpEulerFactorization)> {
    let factorization = exp_euler_factorization(gamma, kappa, sigma)?;
    let z = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let w1 = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok((z, w1, factorization))
}

/// Minimal double-double arithmetic.
mod twofold {
    use std::ops::{Add, Div, Mul, Sub};

    #[derive(Clone, Copy, Debug)]
    pub struct Dd {
        hi: f64,
        lo: f64,
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        (s, b - (s - a))
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    impl From<f64> for Dd {
        fn from(hi: f64) -> Self {
            Dd { hi, lo: 0.0 }
        }
    }

    impl Dd {
        pub fn to_f64(self) -> f64 {
            self.hi + self.lo
        }

        pub fn powi(self, mut n: u64) -> Dd {
            let mut base = self;
            let mut acc = Dd::from(1.0);
            while n > 0 {
                if n & 1 == 1 {
                    acc = acc * base;
                }
                base = base * base;
                n >>= 1;
            }
            acc
        }
    }

    impl Add for Dd {
        type Output = Dd;
        fn add(self, o: Dd) -> Dd {
            let (s, e) = two_sum(self.hi, o.hi);
            let (t, f) = two_sum(self.lo, o.lo);
            let (s, e) = quick_two_sum(s, e + t);
            let (hi, lo) = quick_two_sum(s, e + f);
            Dd { hi, lo }
        }
    }

    impl Sub for Dd {
        type Output = Dd;
        fn sub(self, o: Dd) -> Dd {
            self + Dd { hi: -o.hi, lo: -o.lo }
        }
    }

    impl Mul for Dd {
        type Output = Dd;
        fn mul(self, o: Dd) -> Dd {
            let (p, e) = two_prod(self.hi, o.hi);
            let e = e + (self.hi * o.lo + self.lo * o.hi);
            let (hi, lo) = quick_two_sum(p, e);
            Dd { hi, lo }
        }
    }

    impl Div for Dd {
        type Output = Dd;
        fn div(self, o: Dd) -> Dd {
            let q1 = self.hi / o.hi;
            let r = self - o * Dd::from(q1);
            let q2 = r.hi / o.hi;
            let r = r - o * Dd::from(q2);
            let q3 = r.hi / o.hi;
            let (hi, lo) = quick_two_sum(q1, q2);
            Dd { hi, lo } + Dd::from(q3)
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn recovers_lost_digits() {
            let third = Dd::from(1.0) / Dd::from(3.0);
            let back = third * Dd::from(3.0) - Dd::from(1.0);
            assert!(back.to_f64().abs() < 1e-30);
            let h = 2f64.powi(-33);
            let cancel = Dd::from(1.0 + h).powi(3) - Dd::from(1.0);
            let exact = 3.0 * h + 3.0 * h * h;
            assert!((cancel.to_f64() - exact).abs() <= 1e-30);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn sigma_tilde_values() {
        assert_eq!(sigma_tilde_sq(0.0, 1.0, 2.0).unwrap(), 4.0);
        assert!((sigma_tilde_sq(0.1, 1.0, 1.0).unwrap() - 0.906_346_2).abs() < 5e-8);
        let c = continuous_covariance(0.3, 1.0, 1.0).unwrap();
        assert!(close(c.s3 / 0.3, sigma_tilde_sq(0.3, 1.0, 1.0).unwrap(), 1e-14));
        assert!(sigma_tilde_sq(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn continuous_covariance_reference_values() {
        let c = continuous_covariance(0.5, 1.0, 1.0).unwrap();
        assert!((c.s1 - 0.029_121_6).abs() < 5e-8, "{}", c.s1);
        assert!((c.s2 - 0.077_409_1).abs() < 5e-8, "{}", c.s2);
        assert!((c.s3 - 0.316_060_3).abs() < 5e-8, "{}", c.s3);
        assert_eq!(continuous_covariance(0.0, 1.0, 1.0).unwrap(), CovarianceTriple { s1: 0.0, s2: 0.0, s3: 0.0 });
    }

    #[test]
    fn series_branch_meets_direct_formula() {
        let t = SERIES_SWITCH / 1.3;
        let (series, direct) = continuous_position_variants(t, 1.3, 0.7);
        assert!(close(series, direct, 1e-12), "{series} vs {direct}");
    }

    #[test]
    fn weight_vector_hand_values() {
        let w = weight_vectors(1, 0.1, 0.9).unwrap();
        assert!(close(w.g1[0], 0.1, 1e-14) && w.g1[1] == 0.0);
        assert!(close(w.g2[0], 0.9, 1e-15) && w.g2[1] == 1.0);
        let w0 = weight_vectors(0, 0.1, 0.9).unwrap();
        assert_eq!((w0.g1, w0.g2), (vec![0.0], vec![1.0]));
        assert!(weight_vectors(3, 0.1, 1.0).is_err());
    }

    #[test]
    fn discrete_covariance_small_cases() {
        let c0 = discrete_covariance(0, 0.1, 0.9).unwrap();
        assert!(c0.c.s1.abs() < 1e-30 && c0.c.s2.abs() < 1e-30);
        assert!(close(c0.c.s3, 0.1, 1e-15));
        assert!(!c0.in_ec);
        let c1 = discrete_covariance(1, 0.1, 0.9).unwrap();
        assert!(close(c1.c.s3, 0.181, 1e-14));
    }

    #[test]
    fn transition_matrix_hand_values() {
        let m = transition_matrix_power(1, 0.1, 0.9, 1).unwrap();
        assert!(close(m[(0, 1)], 0.19, 1e-14) && close(m[(1, 1)], 0.81, 1e-15));
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(1, 0)], 0.0);
    }

    #[test]
    fn diagonal_projection_system() {
        // with c = 2 I the solution of c (a, b) = (1, 1) is (0.5, 0.5)
        let (s1, s2, s3, det) = (2.0, 0.0, 2.0, 4.0);
        let (g1, g2) = (1.0, 1.0);
        assert_eq!(((s3 * g1 - s2 * g2) / det, (s1 * g2 - s2 * g1) / det), (0.5, 0.5));
    }

    #[test]
    fn degenerate_system_is_rejected() {
        assert!(matches!(solve_projection_coeffs(0, 0.1, 0.9), Err(Error::Degenerate { .. })));
        assert!(build_projector(1, 0.1, 0.9).is_err());
    }

    #[test]
    fn zero_noise_decomposes_to_zero() {
        let z = vec![vec![0.0; 2]; 6];
        let out = decompose_noise(5, 0.1, 0.9, &z, &Diffusion::Scalar(0.5)).unwrap();
        assert!(out.z_tilde.iter().flatten().chain(&out.g1).chain(&out.g2).chain(&out.g3).all(|v| *v == 0.0));
        assert_eq!(out.z_tilde.len(), 4);
    }

    #[test]
    fn exp_euler_factorization_limits() {
        for gamma in [1e-3, 0.1, 1.0, 10.0] {
            let f = exp_euler_factorization(gamma, 1.0, 1.0).unwrap();
            assert!(f.alpha_corr > 0.0 && f.alpha_corr < 1.0, "{gamma}: {}", f.alpha_corr);
        }
        let f = exp_euler_factorization(1e-4, 1.0, 1.0).unwrap();
        assert!((f.d_scalar - 0.5).abs() < 1e-3);
    }

    #[test]
    fn horizon_steps_are_exact_on_grid() {
        assert_eq!(steps_for_horizon(0.5, 0.05), 10);
        assert_eq!(steps_for_horizon(0.5, 0.025), 20);
        assert_eq!(steps_for_horizon(0.5, 0.0125), 40);
        assert_eq!(steps_for_horizon(0.3, 0.1), 3);
    }
}
