//! Lyapunov functions for the generic scheme, the structural drift conditions
//! they rely on, and a Monte-Carlo estimate of the one-step drift.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_positive, Error, Result};
use crate::framework::{norm, DriftArgs, GeneralScheme, State};
use crate::potential::Potential;
use crate::rng::CounterRng;
use crate::schemes::{as_general_scheme, consistency_constants, noise_spec, vartheta, vartheta_bar, SchemeKind, SchemeParams};
use crate::gaussian::sigma_tilde_sq;

/// Above this exponent `exp` is reported in the log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 700.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Constants of the drift conditions and the exponent of the Lyapunov weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovParams {
    pub varpi: f64,
    pub alpha_u: f64,
    /// Coefficient of the scaled velocity inside `f` at the working timestep.
    pub vartheta: f64,
    pub vartheta_bar: f64,
    pub zeta_u: f64,
    pub delta_u: f64,
    pub c_u: f64,
}

impl LyapunovParams {
    /// Defaults for a scheme at timestep `gamma`: `alpha_U = 1`, `zeta_U = 1/4`,
    /// the scheme's `vartheta` and `delta_U`, and `C_U` left for fitting.
    pub fn for_scheme(kind: SchemeKind, kappa: f64, gamma: f64, varpi: f64) -> Self {
        Self {
            varpi,
            alpha_u: 1.0,
            vartheta: vartheta(kind, kappa, gamma),
            vartheta_bar: vartheta_bar(kind, kappa),
            zeta_u: 0.25,
            delta_u: default_delta_u(kind),
            c_u: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("varpi", self.varpi)?;
        ensure_positive("alpha_u", self.alpha_u)?;
        ensure_positive("zeta_u", self.zeta_u)?;
        ensure(self.delta_u > 0.0 && self.delta_u <= 1.0, || {
            format!("delta_u must lie in (0, 1], got {}", self.delta_u)
        })?;
        ensure(self.c_u >= 0.0, || format!("c_u must be nonnegative, got {}", self.c_u))?;
        ensure(self.vartheta.abs() <= self.vartheta_bar * (1.0 + 1e-12), || {
            format!("|vartheta| = {} exceeds vartheta_bar = {}", self.vartheta.abs(), self.vartheta_bar)
        })
    }
}

/// Exponent `delta_U` with which each scheme's corrections vanish.
///
/// Schemes whose `f` carries a standalone `w1` term of size `sqrt(gamma)` only
/// reach `1/2`.
pub fn default_delta_u(kind: SchemeKind) -> f64 {
    match kind {
        SchemeKind::SplitCabac | SchemeKind::ExpEuler => 0.5,
        _ => 1.0,
    }
}

/// A value of `exp(a)`, kept as its logarithm once `a` is too large.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Weight {
    Linear(f64),
    LogDomain(f64),
}

impl Weight {
    pub fn from_exponent(a: f64) -> Self {
        if a > LOG_DOMAIN_THRESHOLD {
            Self::LogDomain(a)
        } else {
            Self::Linear(a.exp())
        }
    }

    pub fn ln(&self) -> f64 {
        match *self {
            Self::Linear(v) => v.ln(),
            Self::LogDomain(a) => a,
        }
    }

    /// The plain value, `inf` when it does not fit in a float.
    pub fn value(&self) -> f64 {
        match *self {
            Self::Linear(v) => v,
            Self::LogDomain(a) => a.exp(),
        }
    }
}

/// The quadratic-plus-potential function `W_gamma` at a fixed timestep.
#[derive(Clone, Debug)]
pub struct LyapunovFunction {
    kappa: f64,
    gamma: f64,
    tau: f64,
    vartheta: f64,
    delta: f64,
    alpha_u: f64,
    potential: Arc<dyn Potential>,
}

impl LyapunovFunction {
    pub fn new(
        kappa: f64,
        gamma: f64,
        tau: f64,
        vartheta: f64,
        delta: f64,
        alpha_u: f64,
        potential: Arc<dyn Potential>,
    ) -> Result<Self> {
        ensure_positive("kappa", kappa)?;
        ensure_positive("gamma", gamma)?;
        ensure(tau < 1.0, || format!("tau must be below 1, got {tau}"))?;
        ensure_positive("delta", delta)?;
        ensure_positive("alpha_u", alpha_u)?;
        Ok(Self { kappa, gamma, tau, vartheta, delta, alpha_u, potential })
    }

    /// `W_gamma` for `kind` at `p.gamma`; the force must come from a potential.
    pub fn for_scheme(kind: SchemeKind, p: &SchemeParams, alpha_u: f64) -> Result<Self> {
        let potential = Arc::clone(p.force.require_potential()?);
        let scheme = as_general_scheme(kind, p)?;
        Self::new(
            p.kappa,
            p.gamma,
            scheme.tau(),
            vartheta(kind, p.kappa, p.gamma),
            scheme.delta(),
            alpha_u,
            potential,
        )
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn potential(&self) -> &Arc<dyn Potential> {
        &self.potential
    }

    /// `kappa^2 gamma (1 + gamma^delta vartheta) / (1 - tau)`
    pub fn cross_coefficient(&self) -> f64 {
        let k2 = self.kappa * self.kappa;
        k2 * self.gamma * (1.0 + self.gamma.powf(self.delta) * self.vartheta) / (1.0 - self.tau)
    }

    pub fn w_gamma(&self, x: &[f64], v: &[f64]) -> f64 {
        0.5 * self.kappa * self.kappa * norm_sq(x)
            + norm_sq(v)
            + self.cross_coefficient() * dot(x, v)
            + 2.0 * self.alpha_u * self.potential.value(x)
    }

    /// `sqrt(1 + W_gamma)`
    pub fn phi(&self, x: &[f64], v: &[f64]) -> f64 {
        (1.0 + self.w_gamma(x, v)).max(0.0).sqrt()
    }

    /// `exp(varpi phi_gamma)`
    pub fn w_bar(&self, varpi: f64, x: &[f64], v: &[f64]) -> Weight {
        Weight::from_exponent(varpi * self.phi(x, v))
    }

    /// `|x|^2 + |v|^2 + U(x)`
    pub fn v_cal(&self, x: &[f64], v: &[f64]) -> f64 {
        norm_sq(x) + norm_sq(v) + self.potential.value(x)
    }

    /// `exp(varpi sqrt(1 + V))`
    pub fn v_bar(&self, varpi: f64, x: &[f64], v: &[f64]) -> Weight {
        Weight::from_exponent(varpi * (1.0 + self.v_cal(x, v)).sqrt())
    }
}

/// `|grad U(x)|^2 / L^2 + |v|^2 + |z|^2 + |w|^2 + |x|`; the last norm is not squared.
pub fn script_f(potential: &dyn Potential, l: f64, x: &[f64], v: &[f64], z: &[f64], w: &[f64]) -> Result<f64> {
    Ok(script_f_tilde(potential, l, x, v, w)? + norm_sq(z))
}

/// The same functional without the Gaussian argument.
pub fn script_f_tilde(potential: &dyn Potential, l: f64, x: &[f64], v: &[f64], w: &[f64]) -> Result<f64> {
    ensure_positive("L", l)?;
    let mut grad = vec![0.0; x.len()];
    potential.gradient(x, &mut grad);
    Ok(norm_sq(&grad) / (l * l) + norm_sq(v) + norm_sq(w) + norm(x))
}

/// Constants controlling `W_gamma` from below and `phi_gamma` from above.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// `W_gamma >= c_w (|x|^2 + |v|^2) + 2 alpha_U U`
    pub c_w: f64,
    /// Timestep ceiling under which the lower bound holds.
    pub gamma_bar_w: f64,
    /// `phi_gamma <= 1 + frak_c_phi (|x| + |v|)`
    pub frak_c_phi: f64,
    /// Lipschitz bound of `phi_gamma`.
    pub l_phi: f64,
}

impl DerivedConstants {
    /// Exponents with `V_bar^lower <= W_bar <= V_bar^upper` for every `varpi`.
    pub fn sandwich_exponents(&self, alpha_u: f64) -> (f64, f64) {
        let lower = self.c_w.min(2.0 * alpha_u).sqrt().min(1.0);
        (lower, self.frak_c_phi.max(1.0))
    }
}

pub fn derived_constants(
    kappa: f64,
    c_kappa: f64,
    alpha_u: f64,
    vartheta_bar: f64,
    l: f64,
    delta: f64,
    gamma_bar: f64,
) -> Result<DerivedConstants> {
    ensure_positive("kappa", kappa)?;
    ensure_positive("alpha_u", alpha_u)?;
    ensure_positive("delta", delta)?;
    ensure_positive("gamma_bar", gamma_bar)?;
    ensure(c_kappa >= 0.0 && vartheta_bar >= 0.0 && l >= 0.0, || {
        "c_kappa, vartheta_bar and L must be nonnegative".into()
    })?;
    let k2 = kappa * kappa;
    let c_w = 0.5 * (k2 / 6.0).min(0.25);
    let denom = kappa * vartheta_bar + (1.0 + vartheta_bar) * (2.0 * c_kappa + k2);
    let gamma_bar_w = 1f64.min(gamma_bar).min((c_w / denom).powf(1.0 / delta.min(1.0)));
    let cross = (1.0 + vartheta_bar) * (k2 + kappa + 2.0 * c_kappa);
    let frak_c_phi = ((0.5 * k2 + alpha_u * l).max(1.0) + 0.5 * cross).sqrt();
    let l_phi = 2f64.max(2.0 * alpha_u * l + k2).max(cross) / c_w.sqrt();
    Ok(DerivedConstants { c_w, gamma_bar_w, frak_c_phi, l_phi })
}

/// Derived constants with the scheme family's declared consistency constants.
pub fn derived_constants_for(kind: SchemeKind, kappa: f64, sigma: f64, alpha_u: f64, l: f64) -> Result<DerivedConstants> {
    let cc = consistency_constants(kind, kappa, sigma);
    derived_constants(kappa, cc.c_kappa, alpha_u, vartheta_bar(kind, kappa), l, 1.0, cc.gamma_bar)
}

/// Which drift condition a sample violated or saturated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum D2Inequality {
    /// `|f|^2 + |g + alpha_U grad U|^2 <= C_U [1 + gamma^delta_U F]`
    Magnitude,
    /// `<x, f> <= gamma^delta vartheta <x, v> + gamma^delta_U C_U |x| |w1| + C_U [1 + gamma^delta_U F]`
    PositionInner,
    /// `<x, g> <= -zeta_U [|grad U|^2 / L^2 + |x|] + C_U [1 + gamma^delta_U F]`
    VelocityInner,
    VarthetaBound,
    /// `<grad U(x), x> / (|x| + |grad U(x)|^2)` not bounded away from zero far out.
    TailGrowth,
    /// `C_U` fitted at the smallest timestep outgrows the one at the largest.
    NonUniform,
}

/// A sampled argument of the drift conditions, unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2Sample {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub z: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2Violation {
    pub inequality: D2Inequality,
    pub gamma: f64,
    pub detail: String,
    pub witness: Option<D2Sample>,
}

/// Smallest `C_U` making the three conditions hold on the samples at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2GammaFit {
    pub gamma: f64,
    pub vartheta: f64,
    pub c_u: f64,
    pub binding: D2Inequality,
    pub binding_sample: usize,
}

/// Coefficients of the CABAC corrections written as
/// `f = C1 v - gamma/2 grad U(x + C2 v + C3 z + gamma^{3/2} C4 w) + ...` and
/// `g = -G1 grad U(x + G2 v + G3 z + gamma^{3/2} G4 w)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CabacCoefficients {
    pub gamma: f64,
    pub c: [f64; 4],
    pub g: [f64; 4],
}

pub fn cabac_coefficients(gamma: f64, kappa: f64, sigma: f64) -> Result<CabacCoefficients> {
    let eh = (-0.5 * kappa * gamma).exp();
    let e = (-kappa * gamma).exp();
    let st2 = sigma_tilde_sq(0.5 * gamma, kappa, sigma)?;
    let c4 = (st2 / (8.0 * (1.0 + e))).sqrt();
    let inner = [eh / 2.0, eh / (2.0 * (1.0 + e)), c4];
    Ok(CabacCoefficients {
        gamma,
        c: [(eh - 1.0) / gamma, inner[0], inner[1], inner[2]],
        g: [eh, inner[0], inner[1], inner[2]],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CabacCheck {
    /// Largest `|C_i|` over the grid.
    pub c_bar: f64,
    pub g_bar: f64,
    /// Largest `|G1 - 1| / gamma`; bounded by `kappa / 2`.
    pub g1_slope: f64,
    pub g1_slope_bound: f64,
    /// Largest gap between `g` computed from the coefficients and the scheme's `g`.
    pub embedding_gap: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2Report {
    pub kind: SchemeKind,
    pub alpha_u: f64,
    pub zeta_u: f64,
    pub delta_u: f64,
    pub vartheta_bar: f64,
    pub fits: Vec<D2GammaFit>,
    /// Largest fitted `C_U` over the grid.
    pub c_u: f64,
    /// `C_U` at the smallest timestep over `C_U` at the largest.
    pub growth: f64,
    pub growth_limit: f64,
    /// Smallest sampled `<grad U(x), x> / (|x| + |grad U(x)|^2)` with `|x| >= 100`.
    pub tail_growth: f64,
    pub cabac: Option<CabacCheck>,
    pub passed: bool,
    pub violation: Option<D2Violation>,
}

fn fail(report: &mut D2Report, v: D2Violation) {
    if report.violation.is_none() {
        report.passed = false;
        report.violation = Some(v);
    }
}

const D2_LOG_RADIUS: (f64, f64) = (-3.0, 6.0);
const TAIL_RADIUS: f64 = 100.0;
const GROWTH_FLOOR: f64 = 1e-9;

fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    if d == 0 {
        return Vec::new();
    }
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = norm(&dir).max(1e-300);
    let radius = 10f64.powf(rng.random_range(D2_LOG_RADIUS.0..D2_LOG_RADIUS.1));
    dir.into_iter().map(|c| c * radius / n).collect()
}

fn draw_d2_samples(kind: SchemeKind, p: &SchemeParams, count: usize, seed: u64) -> Vec<D2Sample> {
    let spec = noise_spec(kind, p);
    let mut rng = CounterRng::with_window(seed, 0, 8 * (3 * p.dim + spec.w1_dim + spec.w2_dim));
    (0..count as u64)
        .map(|j| {
            let r = rng.at(j);
            D2Sample {
                x: random_vector(r, p.dim),
                v: random_vector(r, p.dim),
                z: random_vector(r, p.dim),
                w1: random_vector(r, spec.w1_dim),
                w2: random_vector(r, spec.w2_dim),
            }
        })
        .collect()
}

/// Required `C_U` for each of the three conditions at one sample.
fn d2_requirements(
    scheme: &GeneralScheme,
    potential: &dyn Potential,
    l: f64,
    cand: &LyapunovParams,
    theta: f64,
    s: &D2Sample,
) -> [f64; 3] {
    let d = s.x.len();
    let gamma = scheme.gamma();
    let gd = gamma.powf(scheme.delta());
    let gdu = gamma.powf(cand.delta_u);
    let zscale = gd * scheme.noise_scale();
    let v_arg: Vec<f64> = s.v.iter().map(|c| gd * c).collect();
    let z_arg: Vec<f64> = s.z.iter().map(|c| zscale * c).collect();
    let args = DriftArgs { x: &s.x, v: &v_arg, z: &z_arg, w1: &s.w1, w2: &s.w2 };
    let (mut f, mut g, mut grad) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    scheme.eval_f(&args, &mut f);
    scheme.eval_g(&args, &mut g);
    potential.gradient(&s.x, &mut grad);

    let grad_term = norm_sq(&grad) / (l * l);
    let xn = norm(&s.x);
    let script = grad_term
        + norm_sq(&s.v)
        + scheme.noise_scale().powi(2) * norm_sq(&s.z)
        + norm_sq(&s.w1)
        + norm_sq(&s.w2)
        + xn;
    let base = 1.0 + gdu * script;

    let shifted: Vec<f64> = g.iter().zip(&grad).map(|(gi, di)| gi + cand.alpha_u * di).collect();
    let magnitude = (norm_sq(&f) + norm_sq(&shifted)) / base;
    let position = (dot(&s.x, &f) - gd * theta * dot(&s.x, &s.v)) / (base + gdu * xn * norm(&s.w1));
    let velocity = (dot(&s.x, &g) + cand.zeta_u * (grad_term + xn)) / base;
    [magnitude, position, velocity]
}

/// Fits the smallest `C_U` making the drift conditions hold on random samples at
/// each timestep of the grid, and flags it when it does not stay bounded as the
/// timestep shrinks. `cand.c_u` and `cand.vartheta` are ignored: `C_U` is fitted
/// and `vartheta` is taken from the scheme at each timestep.
pub fn verify_d2(
    kind: SchemeKind,
    p: &SchemeParams,
    cand: &LyapunovParams,
    gamma_grid: &[f64],
    sample_count: usize,
    seed: u64,
) -> Result<D2Report> {
    p.validate()?;
    let check = LyapunovParams { c_u: 0.0, vartheta: 0.0, ..*cand };
    check.validate()?;
    ensure(!gamma_grid.is_empty(), || "gamma grid is empty".into())?;
    ensure(sample_count > 0, || "sample_count must be positive".into())?;
    for &g in gamma_grid {
        ensure_positive("gamma", g)?;
    }
    let potential = Arc::clone(p.force.require_potential()?);
    let l = p.force.lipschitz();
    ensure_positive("L", l)?;

    let samples = draw_d2_samples(kind, p, sample_count, seed);
    let origin_samples: Vec<Vec<f64>> = samples.iter().take(64).map(|s| s.x.clone()).collect();
    p.force.check_potential(&origin_samples)?;

    let mut report = D2Report {
        kind,
        alpha_u: cand.alpha_u,
        zeta_u: cand.zeta_u,
        delta_u: cand.delta_u,
        vartheta_bar: cand.vartheta_bar,
        fits: Vec::new(),
        c_u: 0.0,
        growth: 1.0,
        growth_limit: 1.0,
        tail_growth: f64::INFINITY,
        cabac: None,
        passed: true,
        violation: None,
    };

    let mut sorted: Vec<f64> = gamma_grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &gamma in &sorted {
        let scheme = as_general_scheme(kind, &p.with_gamma(gamma))?;
        let theta = vartheta(kind, p.kappa, gamma);
        if theta.abs() > cand.vartheta_bar * (1.0 + 1e-12) {
            fail(&mut report, D2Violation {
                inequality: D2Inequality::VarthetaBound,
                gamma,
                detail: format!("|vartheta| = {} exceeds {}", theta.abs(), cand.vartheta_bar),
                witness: None,
            });
        }
        let reqs: Vec<[f64; 3]> = samples
            .par_iter()
            .map(|s| d2_requirements(&scheme, potential.as_ref(), l, cand, theta, s))
            .collect();
        let mut fit = D2GammaFit { gamma, vartheta: theta, c_u: 0.0, binding: D2Inequality::Magnitude, binding_sample: 0 };
        for (j, r) in reqs.iter().enumerate() {
            for (which, &val) in r.iter().enumerate() {
                if !val.is_finite() {
                    return Err(Error::Overflow { component: format!("drift condition at sample {j}") });
                }
                if val > fit.c_u {
                    fit.c_u = val;
                    fit.binding = [D2Inequality::Magnitude, D2Inequality::PositionInner, D2Inequality::VelocityInner][which];
                    fit.binding_sample = j;
                }
            }
        }
        report.c_u = report.c_u.max(fit.c_u);
        report.fits.push(fit);
    }

    let (first, last) = (report.fits[0].clone(), report.fits[report.fits.len() - 1].clone());
    report.growth = (first.c_u + GROWTH_FLOOR) / (last.c_u + GROWTH_FLOOR);
    report.growth_limit = (last.gamma / first.gamma).powf(0.5 * cand.delta_u);
    if report.growth > report.growth_limit {
        let v = D2Violation {
            inequality: D2Inequality::NonUniform,
            gamma: first.gamma,
            detail: format!(
                "C_U = {} at gamma = {} against {} at gamma = {} (binding: {:?})",
                first.c_u, first.gamma, last.c_u, last.gamma, first.binding
            ),
            witness: Some(samples[first.binding_sample].clone()),
        };
        fail(&mut report, v);
    }

    let mut grad = vec![0.0; p.dim];
    let mut tail_witness = None;
    for s in &samples {
        let xn = norm(&s.x);
        if xn < TAIL_RADIUS {
            continue;
        }
        potential.gradient(&s.x, &mut grad);
        let ratio = dot(&grad, &s.x) / (xn + norm_sq(&grad));
        if ratio < report.tail_growth {
            report.tail_growth = ratio;
            tail_witness = Some(s.clone());
        }
    }
    if report.tail_growth <= 1e-12 {
        let v = D2Violation {
            inequality: D2Inequality::TailGrowth,
            gamma: first.gamma,
            detail: format!("<grad U(x), x> / (|x| + |grad U(x)|^2) = {} far from the origin", report.tail_growth),
            witness: tail_witness,
        };
        fail(&mut report, v);
    }

    if kind == SchemeKind::SplitCabac {
        let check = cabac_check(p, &sorted, &samples)?;
        if !check.passed {
            let v = D2Violation {
                inequality: D2Inequality::Magnitude,
                gamma: first.gamma,
                detail: format!("CABAC coefficient cross-check failed: {check:?}"),
                witness: None,
            };
            fail(&mut report, v);
        }
        report.cabac = Some(check);
    }
    Ok(report)
}

fn cabac_check(p: &SchemeParams, grid: &[f64], samples: &[D2Sample]) -> Result<CabacCheck> {
    let potential = p.force.require_potential()?;
    let d = p.dim;
    let mut out = CabacCheck {
        c_bar: 0.0,
        g_bar: 0.0,
        g1_slope: 0.0,
        g1_slope_bound: 0.5 * p.kappa,
        embedding_gap: 0.0,
        passed: true,
    };
    let (mut g_scheme, mut g_coef, mut y) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for &gamma in grid {
        let co = cabac_coefficients(gamma, p.kappa, p.sigma)?;
        out.c_bar = co.c.iter().fold(out.c_bar, |m, c| m.max(c.abs()));
        out.g_bar = co.g.iter().fold(out.g_bar, |m, c| m.max(c.abs()));
        out.g1_slope = out.g1_slope.max((co.g[0] - 1.0).abs() / gamma);

        let scheme = as_general_scheme(SchemeKind::SplitCabac, &p.with_gamma(gamma))?;
        let w_scale = gamma.powf(1.5) * co.g[3];
        for s in samples.iter().take(256) {
            let args = DriftArgs { x: &s.x, v: &s.v, z: &s.z, w1: &s.w1, w2: &s.w2 };
            scheme.eval_g(&args, &mut g_scheme);
            for i in 0..d {
                y[i] = s.x[i] + co.g[1] * s.v[i] + co.g[2] * s.z[i] + w_scale * s.w1[i];
            }
            potential.gradient(&y, &mut g_coef);
            let scale = 1.0 + norm(&g_coef);
            for i in 0..d {
                let gap = (g_scheme[i] + co.g[0] * g_coef[i]).abs() / scale;
                out.embedding_gap = out.embedding_gap.max(gap);
            }
        }
    }
    let coefficient_cap = (0.5 * p.kappa).max(1.0).max(p.sigma);
    out.passed = out.c_bar.is_finite()
        && out.c_bar <= coefficient_cap
        && out.g_bar <= coefficient_cap
        && out.g1_slope <= out.g1_slope_bound * (1.0 + 1e-9)
        && out.embedding_gap <= 1e-12;
    Ok(out)
}

/// Monte-Carlo estimate of `E[exp(h(X1, V1))] / exp(h(x, v))` for one state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub log_ratio: f64,
    pub ratio: f64,
    pub std_error: f64,
}

impl RatioEstimate {
    pub fn relative_error(&self) -> f64 {
        self.std_error / self.ratio
    }
}

/// Averages `exp(h(X1, V1) - h(x, v))` over `mc` one-step transitions drawn from
/// stream `stream`, in the log domain.
pub fn mc_one_step_ratio<H>(scheme: &GeneralScheme, state: &State, log_weight: H, mc: usize, seed: u64, stream: u64) -> Result<RatioEstimate>
where
    H: Fn(&State) -> f64,
{
    ensure(mc >= 2, || "need at least two Monte-Carlo samples".into())?;
    let h0 = log_weight(state);
    let spec = *scheme.noise_spec();
    let mut rng = CounterRng::new(seed, stream, &spec);
    let mut noise = spec.zeros();
    let mut ws = scheme.workspace();
    let mut next = State::zeros(scheme.dim());
    let mut logs = Vec::with_capacity(mc);
    for j in 0..mc as u64 {
        rng.fill_noise(j, &mut noise);
        scheme.step_into(state, &noise, &mut ws, &mut next)?;
        logs.push(log_weight(&next) - h0);
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = mc as f64;
    let shifted: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let mean = shifted.iter().sum::<f64>() / n;
    let var = shifted.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let log_ratio = top + mean.ln();
    let scale = top.exp();
    Ok(RatioEstimate { log_ratio, ratio: scale * mean, std_error: scale * (var / n).sqrt() })
}

/// One grid state of a drift estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftPoint {
    pub state: State,
    pub radius: f64,
    pub estimate: RatioEstimate,
    /// Upper one-sided 95% bound on the ratio.
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub kind: SchemeKind,
    pub gamma: f64,
    pub varpi: f64,
    pub points: Vec<DriftPoint>,
    /// Radius beyond which every state contracts with 95% confidence.
    pub k_hat: f64,
    /// `lambda` with `lambda^gamma` the largest ratio beyond `k_hat`; `None` if no state lies there.
    pub lambda_hat: Option<f64>,
    /// Additive constant covering the states inside `k_hat`.
    pub b_hat: f64,
    pub warnings: Vec<String>,
}

const Z95: f64 = 1.645;

/// States on rays through the `(x_1, v_1)` plane with `|x| + |v|` equal to each radius.
pub fn polar_grid(dim: usize, radii: &[f64], angles: usize) -> Vec<State> {
    let mut out = Vec::new();
    for &r in radii {
        if r == 0.0 {
            out.push(State::zeros(dim));
            continue;
        }
        for a in 0..angles {
            let theta = 2.0 * std::f64::consts::PI * a as f64 / angles as f64;
            let (c, s) = (theta.cos(), theta.sin());
            let scale = r / (c.abs() + s.abs());
            let mut state = State::zeros(dim);
            state.x[0] = scale * c;
            state.v[0] = scale * s;
            out.push(state);
        }
    }
    out
}

/// Default grid: radii `0 .. 30` on eight rays.
pub fn default_drift_grid(dim: usize) -> Vec<State> {
    polar_grid(dim, &[0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0], 8)
}

/// Estimates the one-step drift of `exp(varpi phi_gamma)` at each grid state and
/// fits `(lambda, K, b)` of the drift inequality.
pub fn estimate_drift(
    kind: SchemeKind,
    p: &SchemeParams,
    params: &LyapunovParams,
    grid: &[State],
    mc: usize,
    seed: u64,
) -> Result<DriftReport> {
    ensure_positive("varpi", params.varpi)?;
    ensure(!grid.is_empty(), || "drift grid is empty".into())?;
    let scheme = as_general_scheme(kind, p)?;
    let lyap = LyapunovFunction::for_scheme(kind, p, params.alpha_u)?;
    let varpi = params.varpi;
    let estimates: Vec<RatioEstimate> = grid
        .par_iter()
        .enumerate()
        .map(|(i, s)| mc_one_step_ratio(&scheme, s, |t| varpi * lyap.phi(&t.x, &t.v), mc, seed, i as u64))
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let points: Vec<DriftPoint> = grid
        .iter()
        .zip(estimates)
        .map(|(s, e)| {
            if e.relative_error() > 0.1 {
                warnings.push(format!("standard error above 10% of the ratio at radius {}", s.radius()));
            }
            DriftPoint { state: s.clone(), radius: s.radius(), upper: e.ratio + Z95 * e.std_error, estimate: e }
        })
        .collect();

    let k_hat = points.iter().filter(|p| p.upper >= 1.0).map(|p| p.radius).fold(0.0, f64::max);
    let outside: Vec<&DriftPoint> = points.iter().filter(|q| q.radius > k_hat).collect();
    let lambda_gamma = outside.iter().map(|q| q.estimate.ratio).fold(f64::NEG_INFINITY, f64::max);
    let gamma = p.gamma;
    let lambda_hat = (!outside.is_empty()).then(|| lambda_gamma.powf(1.0 / gamma));
    let floor = if outside.is_empty() { 0.0 } else { lambda_gamma };
    let b_hat = points
        .iter()
        .filter(|q| q.radius <= k_hat)
        .map(|q| {
            let w = lyap.w_bar(varpi, &q.state.x, &q.state.v).value();
            ((q.estimate.ratio - floor) * w / gamma).max(0.0)
        })
        .fold(0.0, f64::max);
    Ok(DriftReport { kind, gamma, varpi, points, k_hat, lambda_hat, b_hat, warnings })
}

/// Largest relative spread of `log ratio / gamma` across the reports, taken
/// state by state over grid states with radius at least `min_radius`.
/// The reports must share one grid.
pub fn drift_rate_spread(reports: &[DriftReport], min_radius: f64) -> Result<f64> {
    ensure(reports.len() >= 2, || "need reports at two timesteps at least".into())?;
    let n = reports[0].points.len();
    ensure(reports.iter().all(|r| r.points.len() == n), || "reports use different grids".into())?;
    let mut worst: f64 = 0.0;
    for i in (0..n).filter(|&i| reports[0].points[i].radius >= min_radius) {
        let rates: Vec<f64> = reports.iter().map(|r| r.points[i].estimate.log_ratio / r.gamma).collect();
        let hi = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = rates.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = rates.iter().map(|r| r.abs()).fold(0.0, f64::max);
        if scale > 0.0 {
            worst = worst.max((hi - lo) / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{ForceModel, Quadratic};
    use approx::assert_relative_eq;

    fn quadratic() -> Arc<dyn Potential> {
        Arc::new(Quadratic { curvature: 1.0 })
    }

    #[test]
    fn w_gamma_hand_value() {
        let f = LyapunovFunction::new(1.0, 0.1, 0.9, 0.0, 1.0, 1.0, quadratic()).unwrap();
        assert_relative_eq!(f.cross_coefficient(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.w_gamma(&[1.0], &[1.0]), 3.5, epsilon = 1e-12);
        assert_eq!(f.w_gamma(&[0.0], &[0.0]), 0.0);
        assert_relative_eq!(f.w_bar(0.3, &[0.0], &[0.0]).value(), 0.3f64.exp(), epsilon = 1e-15);
    }

    #[test]
    fn w_bar_switches_to_log_domain() {
        let f = LyapunovFunction::new(1.0, 0.1, 0.9, 0.0, 1.0, 1.0, quadratic()).unwrap();
        let w = f.w_bar(1.0, &[1e3], &[0.0]);
        assert!(matches!(w, Weight::LogDomain(_)));
        assert_relative_eq!(w.ln(), f.phi(&[1e3], &[0.0]), epsilon = 1e-12);
    }

    #[test]
    fn script_f_hand_value() {
        let pot = Quadratic { curvature: 1.0 };
        assert_eq!(script_f(&pot, 1.0, &[0.0], &[0.0], &[0.0], &[]).unwrap(), 0.0);
        assert_relative_eq!(script_f(&pot, 1.0, &[2.0], &[1.0], &[0.0], &[0.0]).unwrap(), 7.0);
        assert!(script_f(&pot, 0.0, &[2.0], &[1.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn derived_constants_hand_values() {
        let c1 = derived_constants(1.0, 0.5, 1.0, 0.0, 1.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(c1.c_w, 1.0 / 12.0);
        assert_relative_eq!(c1.frak_c_phi, 3f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(c1.gamma_bar_w, 1.0 / 24.0, epsilon = 1e-15);
        let c2 = derived_constants(2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(c2.c_w, 0.125);
    }

    #[test]
    fn for_scheme_requires_potential() {
        let p = SchemeParams::new(1.0, 1.0, 0.1, 1, ForceModel::zero()).unwrap();
        assert!(LyapunovFunction::for_scheme(SchemeKind::EulerMaruyama, &p, 1.0).is_err());
    }

    #[test]
    fn em_passes_d2_on_quadratic() {
        let p = SchemeParams::new(1.0, 1.0, 0.01, 2, ForceModel::linear(1.0)).unwrap();
        let cand = LyapunovParams::for_scheme(SchemeKind::EulerMaruyama, 1.0, 0.01, 0.1);
        let r = verify_d2(SchemeKind::EulerMaruyama, &p, &cand, &[0.001, 0.01, 0.1], 2000, 3).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn polar_grid_radii() {
        let g = polar_grid(2, &[0.0, 2.0], 8);
        assert_eq!(g.len(), 9);
        for s in &g[1..] {
            assert_relative_eq!(s.radius(), 2.0, epsilon = 1e-12);
        }
    }
}
