//! The concrete integrators, each written both in its own update form and as
//! an instance of the generic recursion.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_dim, ensure_positive, Error, Result};
use crate::framework::{norm, zero_drift, Diffusion, DriftArgs, DriftFn, GeneralScheme, State};
use crate::gaussian::{continuous_covariance, exp_euler_factorization, log_grid, sigma_tilde_sq};
use crate::potential::ForceModel;
use crate::rng::{CounterRng, NoiseDraw, NoiseSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "em")]
    EulerMaruyama,
    #[serde(rename = "bac")]
    VerletBac,
    #[serde(rename = "cab")]
    SplitCab,
    #[serde(rename = "abcba")]
    SplitAbcba,
    #[serde(rename = "cabac")]
    SplitCabac,
    #[serde(rename = "exp-euler")]
    ExpEuler,
    #[serde(rename = "sg-em")]
    SgEulerMaruyama,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 7] = [
        SchemeKind::EulerMaruyama,
        SchemeKind::VerletBac,
        SchemeKind::SplitCab,
        SchemeKind::SplitAbcba,
        SchemeKind::SplitCabac,
        SchemeKind::ExpEuler,
        SchemeKind::SgEulerMaruyama,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::EulerMaruyama => "em",
            SchemeKind::VerletBac => "bac",
            SchemeKind::SplitCab => "cab",
            SchemeKind::SplitAbcba => "abcba",
            SchemeKind::SplitCabac => "cabac",
            SchemeKind::ExpEuler => "exp-euler",
            SchemeKind::SgEulerMaruyama => "sg-em",
        }
    }

    /// Whether the friction part is integrated exactly, `tau = e^{-kappa gamma}`.
    pub fn exact_friction(self) -> bool {
        !matches!(self, SchemeKind::EulerMaruyama | SchemeKind::SgEulerMaruyama)
    }

    pub fn uses_w1(self) -> bool {
        matches!(self, SchemeKind::SplitCabac | SchemeKind::ExpEuler)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scheme '{s}'")))
    }
}

pub type EstimatorFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Stochastic estimate `H_x(y)` of the drift, with `y` built from a standard
/// Gaussian vector of length `y_dim`.
#[derive(Clone)]
pub struct GradientEstimator {
    h: EstimatorFn,
    y_dim: usize,
    lipschitz: f64,
}

impl fmt::Debug for GradientEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradientEstimator")
            .field("y_dim", &self.y_dim)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl GradientEstimator {
    pub fn new(h: EstimatorFn, y_dim: usize, lipschitz: f64) -> Self {
        Self { h, y_dim, lipschitz }
    }

    /// `H_x(y) = b(x) + scale * y` with `y` standard Gaussian in `R^dim`.
    pub fn additive_gaussian(force: ForceModel, scale: f64, dim: usize) -> Self {
        let lipschitz = force.lipschitz();
        let h: EstimatorFn = Arc::new(move |x: &[f64], y: &[f64], out: &mut [f64]| {
            force.eval(x, out);
            for (o, yi) in out.iter_mut().zip(y) {
                *o += scale * yi;
            }
        });
        Self { h, y_dim: dim, lipschitz }
    }

    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.h)(x, y, out)
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Largest `|H_x(y) - H_x'(y)| / |x - x'|` over random pairs sharing `y`,
    /// divided by the declared constant (`0/0` counts as 0).
    pub fn lipschitz_ratio(&self, dim: usize, trials: usize, seed: u64) -> f64 {
        let mut rng = CounterRng::with_window(seed, 0, 4 * dim + self.y_dim);
        let (mut x, mut xp, mut y) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; self.y_dim]);
        let (mut a, mut b) = (vec![0.0; dim], vec![0.0; dim]);
        let mut worst: f64 = 0.0;
        for t in 0..trials as u64 {
            rng.symmetric_uniforms(3 * t, &mut x);
            rng.symmetric_uniforms(3 * t + 1, &mut xp);
            rng.normals(3 * t + 2, &mut y);
            x.iter_mut().chain(xp.iter_mut()).for_each(|c| *c *= 10.0);
            self.eval(&x, &y, &mut a);
            self.eval(&xp, &y, &mut b);
            let num = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den = x.iter().zip(&xp).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(ratio(num, self.lipschitz * den));
        }
        worst
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Physical and numerical parameters shared by all schemes.
#[derive(Clone, Debug)]
pub struct SchemeParams {
    pub kappa: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub dim: usize,
    pub force: ForceModel,
    pub estimator: Option<GradientEstimator>,
}

impl SchemeParams {
    pub fn new(kappa: f64, sigma: f64, gamma: f64, dim: usize, force: ForceModel) -> Result<Self> {
        let p = Self { kappa, sigma, gamma, dim, force, estimator: None };
        p.validate()?;
        Ok(p)
    }

    pub fn with_estimator(mut self, estimator: GradientEstimator) -> Self {
        self.estimator = Some(estimator);
        self
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("kappa", self.kappa)?;
        ensure_positive("sigma", self.sigma)?;
        ensure_positive("gamma", self.gamma)?;
        ensure(self.dim >= 1, || "dim must be at least 1".into())
    }

    fn estimator(&self) -> Result<&GradientEstimator> {
        self.estimator
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("sg-em needs a gradient estimator".into()))
    }

    /// The estimator, or the exact drift wrapped as one when absent.
    pub fn estimator_or_exact(&self) -> GradientEstimator {
        self.estimator
            .clone()
            .unwrap_or_else(|| GradientEstimator::additive_gaussian(self.force.clone(), 0.0, self.dim))
    }
}

/// Noise layout consumed by a scheme.
pub fn noise_spec(kind: SchemeKind, p: &SchemeParams) -> NoiseSpec {
    let dim = p.dim;
    NoiseSpec {
        dim,
        w1_dim: if kind.uses_w1() { dim } else { 0 },
        w2_dim: match (kind, &p.estimator) {
            (SchemeKind::SgEulerMaruyama, Some(e)) => e.y_dim(),
            _ => 0,
        },
    }
}

/// `(e^{-a} - 1 + a) / a^2`, accurate for small `a`.
fn phi2(a: f64) -> f64 {
    if a < 1e-3 {
        0.5 - a / 6.0 + a * a / 24.0 - a * a * a / 120.0
    } else {
        ((-a).exp_m1() + a) / (a * a)
    }
}

/// Friction factors and effective noise levels at one timestep.
struct Factors {
    e: f64,
    eh: f64,
    sigma_tilde_sq: f64,
    sigma_tilde_half_sq: f64,
}

impl Factors {
    fn new(p: &SchemeParams) -> Result<Self> {
        let (k, g) = (p.kappa, p.gamma);
        Ok(Self {
            e: (-k * g).exp(),
            eh: (-0.5 * k * g).exp(),
            sigma_tilde_sq: sigma_tilde_sq(g, k, p.sigma)?,
            sigma_tilde_half_sq: sigma_tilde_sq(0.5 * g, k, p.sigma)?,
        })
    }
}

fn check_noise(kind: SchemeKind, p: &SchemeParams, s: &State, noise: &NoiseDraw) -> Result<()> {
    let spec = noise_spec(kind, p);
    ensure_dim("x", s.x.len(), p.dim)?;
    ensure_dim("v", s.v.len(), p.dim)?;
    ensure_dim("z", noise.z.len(), spec.dim)?;
    ensure_dim("w1", noise.w1.len(), spec.w1_dim)?;
    ensure_dim("w2", noise.w2.len(), spec.w2_dim)
}

/// One step of the scheme written as its own sequence of sub-steps.
pub fn native_step(kind: SchemeKind, p: &SchemeParams, s: &State, noise: &NoiseDraw) -> Result<State> {
    p.validate()?;
    if kind == SchemeKind::SgEulerMaruyama {
        p.estimator()?;
    }
    check_noise(kind, p, s, noise)?;
    let d = p.dim;
    let (kappa, sigma, gamma) = (p.kappa, p.sigma, p.gamma);
    let drift = |x: &[f64]| {
        let mut out = vec![0.0; d];
        p.force.eval(x, &mut out);
        out
    };
    let (x, v, z) = (&s.x, &s.v, &noise.z);
    let e = (-kappa * gamma).exp();
    // standard deviation of the exact velocity OU update over gamma
    let ou_sd = sigma * (-(-2.0 * kappa * gamma).exp_m1() / (2.0 * kappa)).sqrt();

    let (xn, vn): (Vec<f64>, Vec<f64>) = match kind {
        SchemeKind::EulerMaruyama | SchemeKind::SgEulerMaruyama => {
            let mut force = vec![0.0; d];
            if kind == SchemeKind::EulerMaruyama {
                p.force.eval(x, &mut force);
            } else {
                p.estimator()?.eval(x, &noise.w2, &mut force);
            }
            let xn = (0..d).map(|i| x[i] + gamma * v[i]).collect();
            let vn = (0..d)
                .map(|i| (1.0 - kappa * gamma) * v[i] + gamma * force[i] + gamma.sqrt() * sigma * z[i])
                .collect();
            (xn, vn)
        }
        SchemeKind::VerletBac => {
            let b = drift(x);
            let v1: Vec<f64> = (0..d).map(|i| v[i] + gamma * b[i]).collect();
            let xn = (0..d).map(|i| x[i] + gamma * v1[i]).collect();
            let vn = (0..d).map(|i| e * v1[i] + ou_sd * z[i]).collect();
            (xn, vn)
        }
        SchemeKind::SplitCab => {
            let v1: Vec<f64> = (0..d).map(|i| e * v[i] + ou_sd * z[i]).collect();
            let xn: Vec<f64> = (0..d).map(|i| x[i] + gamma * v1[i]).collect();
            let b = drift(&xn);
            let vn = (0..d).map(|i| v1[i] + gamma * b[i]).collect();
            (xn, vn)
        }
        SchemeKind::SplitAbcba => {
            let h = 0.5 * gamma;
            let x1: Vec<f64> = (0..d).map(|i| x[i] + h * v[i]).collect();
            let b = drift(&x1);
            let v1: Vec<f64> = (0..d).map(|i| v[i] + h * b[i]).collect();
            let v2: Vec<f64> = (0..d).map(|i| e * v1[i] + ou_sd * z[i]).collect();
            let v3: Vec<f64> = (0..d).map(|i| v2[i] + h * b[i]).collect();
            let xn = (0..d).map(|i| x1[i] + h * v3[i]).collect();
            (xn, v3)
        }
        SchemeKind::SplitCabac => {
            let h = 0.5 * gamma;
            let eh = (-kappa * h).exp();
            let half_sd = sigma * (-(-kappa * gamma).exp_m1() / (2.0 * kappa)).sqrt();
            let corr = eh / (1.0 + e).sqrt();
            let xi1: Vec<f64> = (0..d).map(|i| corr * z[i] + (1.0 - corr * corr).sqrt() * noise.w1[i]).collect();
            let xi2: Vec<f64> = (0..d).map(|i| (1.0 + e).sqrt() * z[i] - eh * xi1[i]).collect();
            let v1: Vec<f64> = (0..d).map(|i| eh * v[i] + half_sd * xi1[i]).collect();
            let x1: Vec<f64> = (0..d).map(|i| x[i] + h * v1[i]).collect();
            let b = drift(&x1);
            let v2: Vec<f64> = (0..d).map(|i| v1[i] + gamma * b[i]).collect();
            let xn = (0..d).map(|i| x1[i] + h * v2[i]).collect();
            let vn = (0..d).map(|i| eh * v2[i] + half_sd * xi2[i]).collect();
            (xn, vn)
        }
        SchemeKind::ExpEuler => {
            let fac = exp_euler_factorization(gamma, kappa, sigma)?;
            let b = drift(x);
            let a = kappa * gamma;
            let free = -(-a).exp_m1() / kappa;
            let kick = (a + (-a).exp_m1()) / (kappa * kappa);
            let mut xn = vec![0.0; d];
            let mut vn = vec![0.0; d];
            for i in 0..d {
                let (eta, xi) = fac.reconstruct(z[i], noise.w1[i]);
                xn[i] = x[i] + free * v[i] + kick * b[i] + eta;
                vn[i] = e * v[i] + free * b[i] + xi;
            }
            (xn, vn)
        }
    };
    let out = State { x: xn, v: vn };
    out.check_finite()?;
    Ok(out)
}

/// The scheme as `(tau, sigma_gamma, D, delta, f, g)`.
pub fn as_general_scheme(kind: SchemeKind, p: &SchemeParams) -> Result<GeneralScheme> {
    p.validate()?;
    let (kappa, gamma) = (p.kappa, p.gamma);
    let fac = Factors::new(p)?;
    let (e, eh) = (fac.e, fac.eh);
    let spec = noise_spec(kind, p);
    let force = p.force.clone();

    let (tau, sigma_gamma, diffusion, f, g): (f64, f64, f64, DriftFn, DriftFn) = match kind {
        SchemeKind::EulerMaruyama => {
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| force.eval(a.x, out));
            (1.0 - kappa * gamma, p.sigma, 0.0, zero_drift(), g)
        }
        SchemeKind::SgEulerMaruyama => {
            let est = p.estimator()?.clone();
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| est.eval(a.x, a.w2, out));
            (1.0 - kappa * gamma, p.sigma, 0.0, zero_drift(), g)
        }
        SchemeKind::VerletBac => {
            let force_g = force.clone();
            let f: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| {
                force.eval(a.x, out);
                out.iter_mut().for_each(|o| *o *= gamma);
            });
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| {
                force_g.eval(a.x, out);
                out.iter_mut().for_each(|o| *o *= e);
            });
            (e, fac.sigma_tilde_sq.sqrt(), 0.0, f, g)
        }
        SchemeKind::SplitCab => {
            let damp = (e - 1.0) / gamma;
            let f: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| {
                for (o, vi) in out.iter_mut().zip(a.v) {
                    *o = damp * vi;
                }
            });
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], y: &mut [f64]| {
                for i in 0..y.len() {
                    y[i] = a.x[i] + e * a.v[i] + a.z[i];
                }
                force.eval(y, out);
            });
            (e, fac.sigma_tilde_sq.sqrt(), 1.0, f, g)
        }
        SchemeKind::SplitAbcba => {
            let damp = (e - 1.0) / (2.0 * gamma);
            let kick = gamma * (1.0 + e) / 4.0;
            let force_g = force.clone();
            let f: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], y: &mut [f64]| {
                for i in 0..y.len() {
                    y[i] = a.x[i] + 0.5 * a.v[i];
                }
                force.eval(y, out);
                for (o, vi) in out.iter_mut().zip(a.v) {
                    *o = damp * vi + kick * *o;
                }
            });
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], y: &mut [f64]| {
                for i in 0..y.len() {
                    y[i] = a.x[i] + 0.5 * a.v[i];
                }
                force_g.eval(y, out);
                out.iter_mut().for_each(|o| *o *= 0.5 * (1.0 + e));
            });
            (e, fac.sigma_tilde_sq.sqrt(), 0.5, f, g)
        }
        SchemeKind::SplitCabac => {
            let st2 = fac.sigma_tilde_half_sq;
            let damp = (eh - 1.0) / gamma;
            let z_coef = eh / (2.0 * (1.0 + e));
            let w_inner = (gamma.powi(3) * st2 / (8.0 * (1.0 + e))).sqrt();
            let w_outer = (gamma.powi(3) * st2 / (2.0 * (1.0 + e))).sqrt() / gamma;
            let point = move |a: &DriftArgs<'_>, y: &mut [f64]| {
                for i in 0..y.len() {
                    y[i] = a.x[i] + 0.5 * eh * a.v[i] + z_coef * a.z[i] + w_inner * a.w1[i];
                }
            };
            let force_g = force.clone();
            let f: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], y: &mut [f64]| {
                point(a, y);
                force.eval(y, out);
                for i in 0..out.len() {
                    out[i] = damp * a.v[i] + 0.5 * gamma * out[i] + w_outer * a.w1[i];
                }
            });
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], y: &mut [f64]| {
                point(a, y);
                force_g.eval(y, out);
                out.iter_mut().for_each(|o| *o *= eh);
            });
            let sigma_gamma = (st2 * (1.0 + e) / 2.0).sqrt();
            (e, sigma_gamma, eh / (1.0 + e), f, g)
        }
        SchemeKind::ExpEuler => {
            let factorization = exp_euler_factorization(gamma, kappa, p.sigma)?;
            let cov = factorization.covariance;
            let c = -kappa * phi2(kappa * gamma);
            let w_coef = (cov.det() / cov.s3).sqrt() / gamma;
            let kick = -(-kappa * gamma).exp_m1() / (kappa * gamma);
            let force_g = force.clone();
            let f: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| {
                force.eval(a.x, out);
                for i in 0..out.len() {
                    out[i] = c * (a.v[i] - gamma / kappa * out[i]) + w_coef * a.w1[i];
                }
            });
            let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| {
                force_g.eval(a.x, out);
                out.iter_mut().for_each(|o| *o *= kick);
            });
            (e, fac.sigma_tilde_sq.sqrt(), factorization.d_scalar, f, g)
        }
    };
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "{kind}: kappa * gamma = {} gives tau = {tau} outside (0, 1)",
            kappa * gamma
        )));
    }
    GeneralScheme::new(gamma, tau, sigma_gamma, 1.0, Diffusion::Scalar(diffusion), spec, f, g)
}

/// Declared consistency constants of a scheme family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConstants {
    /// `|tau_gamma - e^{-kappa gamma}| <= c_kappa gamma^2`
    pub c_kappa: f64,
    /// Largest admissible timestep, `(kappa + 2 c_kappa / kappa)^{-1}`.
    pub gamma_bar: f64,
    pub sigma_bar: f64,
    pub diffusion_bar: f64,
}

pub fn consistency_constants(kind: SchemeKind, kappa: f64, sigma: f64) -> ConsistencyConstants {
    let c_kappa = if kind.exact_friction() { 0.0 } else { 0.5 * kappa * kappa };
    let diffusion_bar = match kind {
        SchemeKind::EulerMaruyama | SchemeKind::VerletBac | SchemeKind::SgEulerMaruyama => 0.0,
        SchemeKind::SplitCab => 1.0,
        SchemeKind::SplitAbcba | SchemeKind::SplitCabac | SchemeKind::ExpEuler => 0.5,
    };
    ConsistencyConstants { c_kappa, gamma_bar: 1.0 / (kappa + 2.0 * c_kappa / kappa), sigma_bar: sigma, diffusion_bar }
}

/// Coefficients `(on x, on v, on z)` bounding the variation of one drift correction.
fn combined(coeffs: (f64, f64, f64)) -> f64 {
    let (cx, cv, cz) = coeffs;
    cx.hypot(cv).max(cz)
}

/// Lipschitz constant of `(f, g)` in the scaled variables, in the sense
/// `|f(p) - f(p')| <= L (|(x, v) - (x', v')| + |z - z'|)`, at the given timestep.
pub fn effective_lipschitz(kind: SchemeKind, kappa: f64, gamma: f64, l: f64) -> f64 {
    let e = (-kappa * gamma).exp();
    let eh = (-0.5 * kappa * gamma).exp();
    let (f, g) = match kind {
        SchemeKind::EulerMaruyama | SchemeKind::SgEulerMaruyama => ((0.0, 0.0, 0.0), (l, 0.0, 0.0)),
        SchemeKind::VerletBac => ((gamma * l, 0.0, 0.0), (e * l, 0.0, 0.0)),
        SchemeKind::SplitCab => ((0.0, (1.0 - e) / gamma, 0.0), (l, e * l, l)),
        SchemeKind::SplitAbcba => (
            (gamma * (1.0 + e) * l / 4.0, (1.0 - e) / (2.0 * gamma) + gamma * (1.0 + e) * l / 8.0, 0.0),
            ((1.0 + e) * l / 2.0, (1.0 + e) * l / 4.0, 0.0),
        ),
        SchemeKind::SplitCabac => (
            (gamma * l / 2.0, (1.0 - eh) / gamma + gamma * l * eh / 4.0, gamma * l * eh / (4.0 * (1.0 + e))),
            (eh * l, eh * eh * l / 2.0, eh * eh * l / (2.0 * (1.0 + e))),
        ),
        SchemeKind::ExpEuler => {
            let c = kappa * phi2(kappa * gamma);
            ((c * gamma * l / kappa, c, 0.0), ((1.0 - e) * l / (kappa * gamma), 0.0, 0.0))
        }
    };
    combined(f).max(combined(g))
}

/// Lipschitz constant of `f + g` in `(z, w1)` at fixed `(x, v)`, in the sense
/// `|df| + |dg| <= L |(dz, dw1)|`, with `z` the scaled argument.
pub fn noise_lipschitz(kind: SchemeKind, p: &SchemeParams) -> Result<f64> {
    let (kappa, gamma, l) = (p.kappa, p.gamma, p.force.lipschitz());
    let fac = Factors::new(p)?;
    let (e, eh) = (fac.e, fac.eh);
    Ok(match kind {
        SchemeKind::EulerMaruyama | SchemeKind::SgEulerMaruyama | SchemeKind::VerletBac | SchemeKind::SplitAbcba => 0.0,
        SchemeKind::SplitCab => l,
        SchemeKind::SplitCabac => {
            let st2 = fac.sigma_tilde_half_sq;
            let z_coef = eh / (2.0 * (1.0 + e));
            let w_inner = (gamma.powi(3) * st2 / (8.0 * (1.0 + e))).sqrt();
            let w_outer = (gamma.powi(3) * st2 / (2.0 * (1.0 + e))).sqrt() / gamma;
            (0.5 * gamma + eh) * l * z_coef.hypot(w_inner) + w_outer
        }
        SchemeKind::ExpEuler => {
            let cov = continuous_covariance(gamma, kappa, p.sigma)?;
            (cov.det() / cov.s3).sqrt() / gamma
        }
    })
}

/// Coefficient of `v` inside `f`, which enters the Lyapunov cross term.
pub fn vartheta(kind: SchemeKind, kappa: f64, gamma: f64) -> f64 {
    let e = (-kappa * gamma).exp();
    match kind {
        SchemeKind::EulerMaruyama | SchemeKind::SgEulerMaruyama | SchemeKind::VerletBac => 0.0,
        SchemeKind::SplitCab => (e - 1.0) / gamma,
        SchemeKind::SplitAbcba => (e - 1.0) / (2.0 * gamma),
        SchemeKind::SplitCabac => ((-0.5 * kappa * gamma).exp() - 1.0) / gamma,
        SchemeKind::ExpEuler => -kappa * phi2(kappa * gamma),
    }
}

/// Bound on `|vartheta|` over all timesteps.
pub fn vartheta_bar(kind: SchemeKind, kappa: f64) -> f64 {
    match kind {
        SchemeKind::EulerMaruyama | SchemeKind::SgEulerMaruyama | SchemeKind::VerletBac => 0.0,
        SchemeKind::SplitCab => kappa,
        SchemeKind::SplitAbcba | SchemeKind::SplitCabac | SchemeKind::ExpEuler => 0.5 * kappa,
    }
}

/// Outcome of the consistency scan over timesteps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A1Report {
    pub declared: ConsistencyConstants,
    pub fitted_c_kappa: f64,
    pub fitted_sigma_bar: f64,
    pub fitted_diffusion_bar: f64,
    /// `|sigma_gamma / sigma - 1|` at the smallest timestep scanned
    pub sigma_limit_gap: f64,
    pub passed: bool,
    pub violation: Option<String>,
}

/// Outcome of the random-pair Lipschitz probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2Report {
    pub declared: f64,
    pub worst_ratio: f64,
    pub worst_gamma: f64,
    pub passed: bool,
    pub violation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub kind: SchemeKind,
    pub a1: A1Report,
    pub a2: A2Report,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.a1.passed && self.a2.passed
    }
}

const A2_SLACK: f64 = 0.01;

/// Scans timesteps up to the admissible ceiling for the consistency conditions
/// and probes the Lipschitz conditions on random pairs sharing `w`.
pub fn check_a1_a2(kind: SchemeKind, p: &SchemeParams, trials: usize, seed: u64) -> Result<AssumptionReport> {
    p.validate()?;
    ensure(p.force.lipschitz().is_finite(), || "force must declare a finite Lipschitz constant".into())?;
    let declared = consistency_constants(kind, p.kappa, p.sigma);
    let grid = log_grid(declared.gamma_bar * 1e-5, declared.gamma_bar * (1.0 - 1e-12), 60);

    let mut a1 = A1Report {
        declared,
        fitted_c_kappa: 0.0,
        fitted_sigma_bar: 0.0,
        fitted_diffusion_bar: 0.0,
        sigma_limit_gap: f64::NAN,
        passed: true,
        violation: None,
    };
    for (i, &gamma) in grid.iter().enumerate() {
        let scheme = as_general_scheme(kind, &p.with_gamma(gamma))?;
        let tau_gap = (scheme.tau() - (-p.kappa * gamma).exp()).abs();
        a1.fitted_c_kappa = a1.fitted_c_kappa.max(tau_gap / (gamma * gamma));
        a1.fitted_sigma_bar = a1.fitted_sigma_bar.max(scheme.sigma_gamma());
        let dnorm = scheme.diffusion().operator_norm();
        a1.fitted_diffusion_bar = a1.fitted_diffusion_bar.max(dnorm);
        if i == 0 {
            a1.sigma_limit_gap = (scheme.sigma_gamma() / p.sigma - 1.0).abs();
        }
        let tol = 1e-12;
        let violation = if tau_gap > declared.c_kappa * gamma * gamma * (1.0 + tol) + 1e-15 {
            Some(format!("|tau - exp(-kappa gamma)| = {tau_gap:e} exceeds c_kappa gamma^2 at gamma = {gamma}"))
        } else if scheme.sigma_gamma() > declared.sigma_bar * (1.0 + tol) {
            Some(format!("sigma_gamma = {} exceeds sigma_bar at gamma = {gamma}", scheme.sigma_gamma()))
        } else if dnorm > declared.diffusion_bar * (1.0 + tol) + tol {
            Some(format!("|D_gamma| = {dnorm} exceeds the declared bound at gamma = {gamma}"))
        } else {
            None
        };
        if violation.is_some() && a1.violation.is_none() {
            a1.passed = false;
            a1.violation = violation;
        }
    }
    if a1.sigma_limit_gap > 1e-3 && a1.violation.is_none() {
        a1.passed = false;
        a1.violation = Some(format!("sigma_gamma does not approach sigma (gap {})", a1.sigma_limit_gap));
    }

    let a2 = probe_a2(kind, p, &grid, trials, seed)?;
    Ok(AssumptionReport { kind, a1, a2 })
}

fn probe_a2(kind: SchemeKind, p: &SchemeParams, grid: &[f64], trials: usize, seed: u64) -> Result<A2Report> {
    let l = if kind == SchemeKind::SgEulerMaruyama { p.estimator()?.lipschitz() } else { p.force.lipschitz() };
    let probe_gammas: Vec<f64> = [0, grid.len() / 2, grid.len() - 1].iter().map(|&i| grid[i]).chain([p.gamma]).collect();
    let declared = grid.iter().map(|&g| effective_lipschitz(kind, p.kappa, g, l)).fold(0.0, f64::max);
    let d = p.dim;
    let mut report = A2Report { declared, worst_ratio: 0.0, worst_gamma: p.gamma, passed: true, violation: None };
    for (gi, &gamma) in probe_gammas.iter().enumerate() {
        let scheme = as_general_scheme(kind, &p.with_gamma(gamma))?;
        let spec = *scheme.noise_spec();
        let local = effective_lipschitz(kind, p.kappa, gamma, l);
        let mut rng = CounterRng::with_window(seed, gi as u64, 8 * d + spec.total());
        let mut buf = vec![0.0; 6 * d];
        let mut noise = spec.zeros();
        let (mut fa, mut fb, mut ga, mut gb) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        for t in 0..trials as u64 {
            rng.symmetric_uniforms(2 * t, &mut buf);
            rng.fill_noise(2 * t + 1, &mut noise);
            let scale = 10f64.powf(buf[0] * 2.0);
            let pts: Vec<f64> = buf.iter().map(|c| c * 5.0 * scale).collect();
            let (xa, va, za) = (&pts[0..d], &pts[d..2 * d], &pts[2 * d..3 * d]);
            let (xb, vb, zb) = (&pts[3 * d..4 * d], &pts[4 * d..5 * d], &pts[5 * d..6 * d]);
            let args_a = DriftArgs { x: xa, v: va, z: za, w1: &noise.w1, w2: &noise.w2 };
            let args_b = DriftArgs { x: xb, v: vb, z: zb, w1: &noise.w1, w2: &noise.w2 };
            scheme.eval_f(&args_a, &mut fa);
            scheme.eval_f(&args_b, &mut fb);
            scheme.eval_g(&args_a, &mut ga);
            scheme.eval_g(&args_b, &mut gb);
            let dxv = norm(&diff(xa, xb).into_iter().chain(diff(va, vb)).collect::<Vec<_>>());
            let dz = norm(&diff(za, zb));
            let den = dxv + dz;
            let worst_here = ratio(norm(&diff(&fa, &fb)), den).max(ratio(norm(&diff(&ga, &gb)), den));
            let r = if local == 0.0 {
                if worst_here == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                worst_here / local
            };
            if r > report.worst_ratio {
                report.worst_ratio = r;
                report.worst_gamma = gamma;
            }
            if r > 1.0 + A2_SLACK && report.violation.is_none() {
                report.passed = false;
                report.violation = Some(format!(
                    "Lipschitz bound {local} violated at gamma = {gamma}: ratio {r} between (x, v, z) = ({xa:?}, {va:?}, {za:?}) and ({xb:?}, {vb:?}, {zb:?})"
                ));
            }
        }
    }
    Ok(report)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}
