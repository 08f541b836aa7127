//! The generic one-step map shared by every scheme, chain simulation, and the
//! closed-form expression of a chain in terms of its noise sequence.
//!
//! A scheme is described by `(tau, sigma_gamma, D, delta, f, g)` and advances a
//! state by
//!
//! ```text
//! x' = x + gamma v + gamma f(x, gamma^delta v, gamma^delta zs, w) + gamma^delta D zs
//! v' = tau v + gamma g(x, gamma^delta v, gamma^delta zs, w) + zs
//! ```
//!
//! with `zs = sqrt(gamma) sigma_gamma z` and `z` standard Gaussian.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_dim, ensure_positive, Error, Result};
use crate::gaussian::{transition_matrix_power, weight_vectors};
use crate::rng::{CounterRng, NoiseDraw, NoiseSpec};

/// Magnitude above which a chain is declared diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Position and velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl State {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        ensure(!x.is_empty(), || "state dimension must be at least 1".into())?;
        ensure_dim("v", v.len(), x.len())?;
        let state = Self { x, v };
        state.check_finite()?;
        Ok(state)
    }

    pub fn zeros(dim: usize) -> Self {
        Self { x: vec![0.0; dim], v: vec![0.0; dim] }
    }

    pub fn scalar(x: f64, v: f64) -> Self {
        Self { x: vec![x], v: vec![v] }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// `|x| + |v|`.
    pub fn radius(&self) -> f64 {
        norm(&self.x) + norm(&self.v)
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = self
            .x
            .iter()
            .position(|a| !a.is_finite())
            .map(|i| format!("x[{i}]"))
            .or_else(|| self.v.iter().position(|a| !a.is_finite()).map(|i| format!("v[{i}]")));
        match bad {
            Some(component) => Err(Error::Overflow { component }),
            None => Ok(()),
        }
    }

    fn largest_component(&self) -> Option<(String, f64)> {
        let xs = self.x.iter().enumerate().map(|(i, a)| (format!("x[{i}]"), a.abs()));
        let vs = self.v.iter().enumerate().map(|(i, a)| (format!("v[{i}]"), a.abs()));
        xs.chain(vs).max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    a.iter().map(|t| t * t).sum::<f64>().sqrt()
}

/// Arguments handed to the drift corrections `f` and `g`, already scaled.
pub struct DriftArgs<'a> {
    pub x: &'a [f64],
    /// `gamma^delta v`
    pub v: &'a [f64],
    /// `gamma^delta sqrt(gamma) sigma_gamma z`
    pub z: &'a [f64],
    pub w1: &'a [f64],
    pub w2: &'a [f64],
}

/// `f` or `g`: writes its value into the first buffer; the second buffer is scratch of length `d`.
pub type DriftFn = Arc<dyn Fn(&DriftArgs<'_>, &mut [f64], &mut [f64]) + Send + Sync>;

pub fn zero_drift() -> DriftFn {
    Arc::new(|_: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| out.fill(0.0))
}

/// The matrix multiplying the scaled noise in the position update.
#[derive(Clone, Debug, PartialEq)]
pub enum Diffusion {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

impl Diffusion {
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Scalar(c) => {
                for (o, zi) in out.iter_mut().zip(z) {
                    *o = c * zi;
                }
            }
            Diffusion::Matrix(m) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..z.len()).map(|j| m[(i, j)] * z[j]).sum();
                }
            }
        }
    }

    pub fn operator_norm(&self) -> f64 {
        match self {
            Diffusion::Scalar(c) => c.abs(),
            Diffusion::Matrix(m) => m.clone().singular_values().max(),
        }
    }

    fn check(&self, dim: usize) -> Result<()> {
        match self {
            Diffusion::Scalar(c) => ensure(c.is_finite(), || "diffusion scalar must be finite".into()),
            Diffusion::Matrix(m) => {
                ensure_dim("diffusion matrix rows", m.nrows(), dim)?;
                ensure_dim("diffusion matrix columns", m.ncols(), dim)?;
                ensure(m.iter().all(|a| a.is_finite()), || "diffusion matrix must be finite".into())
            }
        }
    }
}

/// Scratch buffers for allocation-free stepping.
#[derive(Clone, Debug)]
pub struct StepWorkspace {
    scaled_noise: Vec<f64>,
    bufs: Buffers,
}

#[derive(Clone, Debug)]
struct Buffers {
    v_arg: Vec<f64>,
    z_arg: Vec<f64>,
    f_out: Vec<f64>,
    g_out: Vec<f64>,
    dz: Vec<f64>,
    scratch: Vec<f64>,
}

impl StepWorkspace {
    pub fn new(dim: usize) -> Self {
        let zeros = vec![0.0; dim];
        Self {
            scaled_noise: zeros.clone(),
            bufs: Buffers {
                v_arg: zeros.clone(),
                z_arg: zeros.clone(),
                f_out: zeros.clone(),
                g_out: zeros.clone(),
                dz: zeros.clone(),
                scratch: zeros,
            },
        }
    }
}

/// One instance of the generic recursion at a fixed timestep.
#[derive(Clone)]
pub struct GeneralScheme {
    gamma: f64,
    tau: f64,
    sigma_gamma: f64,
    delta: f64,
    diffusion: Diffusion,
    f: DriftFn,
    g: DriftFn,
    noise: NoiseSpec,
}

impl fmt::Debug for GeneralScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralScheme")
            .field("gamma", &self.gamma)
            .field("tau", &self.tau)
            .field("sigma_gamma", &self.sigma_gamma)
            .field("delta", &self.delta)
            .field("diffusion", &self.diffusion)
            .field("noise", &self.noise)
            .finish_non_exhaustive()
    }
}

impl GeneralScheme {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gamma: f64,
        tau: f64,
        sigma_gamma: f64,
        delta: f64,
        diffusion: Diffusion,
        noise: NoiseSpec,
        f: DriftFn,
        g: DriftFn,
    ) -> Result<Self> {
        ensure_positive("gamma", gamma)?;
        ensure(tau > 0.0 && tau < 1.0, || format!("tau must lie in (0, 1), got {tau}"))?;
        ensure_positive("sigma_gamma", sigma_gamma)?;
        ensure_positive("delta", delta)?;
        ensure(noise.dim >= 1, || "noise dimension must be at least 1".into())?;
        diffusion.check(noise.dim)?;
        Ok(Self { gamma, tau, sigma_gamma, delta, diffusion, f, g, noise })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sigma_gamma(&self) -> f64 {
        self.sigma_gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn noise_spec(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn dim(&self) -> usize {
        self.noise.dim
    }

    /// `sqrt(gamma) sigma_gamma`
    pub fn noise_scale(&self) -> f64 {
        self.gamma.sqrt() * self.sigma_gamma
    }

    pub fn workspace(&self) -> StepWorkspace {
        StepWorkspace::new(self.dim())
    }

    /// Evaluates `f` at already-scaled arguments.
    pub fn eval_f(&self, args: &DriftArgs<'_>, out: &mut [f64]) {
        let mut scratch = vec![0.0; self.dim()];
        (self.f)(args, out, &mut scratch)
    }

    /// Evaluates `g` at already-scaled arguments.
    pub fn eval_g(&self, args: &DriftArgs<'_>, out: &mut [f64]) {
        let mut scratch = vec![0.0; self.dim()];
        (self.g)(args, out, &mut scratch)
    }

    fn check_inputs(&self, s: &State, noise: &NoiseDraw) -> Result<()> {
        let d = self.dim();
        ensure_dim("x", s.x.len(), d)?;
        ensure_dim("v", s.v.len(), d)?;
        ensure_dim("z", noise.z.len(), d)?;
        ensure_dim("w1", noise.w1.len(), self.noise.w1_dim)?;
        ensure_dim("w2", noise.w2.len(), self.noise.w2_dim)
    }

    /// One step from standard Gaussian noise.
    pub fn step(&self, s: &State, noise: &NoiseDraw) -> Result<State> {
        let mut out = State::zeros(self.dim());
        self.step_into(s, noise, &mut self.workspace(), &mut out)?;
        Ok(out)
    }

    pub fn step_into(&self, s: &State, noise: &NoiseDraw, ws: &mut StepWorkspace, out: &mut State) -> Result<()> {
        self.check_inputs(s, noise)?;
        let scale = self.noise_scale();
        let StepWorkspace { scaled_noise, bufs } = ws;
        for (zs, z) in scaled_noise.iter_mut().zip(&noise.z) {
            *zs = scale * z;
        }
        self.apply(s, scaled_noise, &noise.w1, &noise.w2, bufs, out)
    }

    /// The map with the noise already multiplied by `sqrt(gamma) sigma_gamma`.
    pub fn transition(&self, s: &State, scaled_z: &[f64], w1: &[f64], w2: &[f64]) -> Result<State> {
        let d = self.dim();
        ensure_dim("x", s.x.len(), d)?;
        ensure_dim("v", s.v.len(), d)?;
        ensure_dim("z", scaled_z.len(), d)?;
        ensure_dim("w1", w1.len(), self.noise.w1_dim)?;
        ensure_dim("w2", w2.len(), self.noise.w2_dim)?;
        let mut out = State::zeros(d);
        self.apply(s, scaled_z, w1, w2, &mut self.workspace().bufs, &mut out)?;
        Ok(out)
    }

    fn apply(&self, s: &State, zs: &[f64], w1: &[f64], w2: &[f64], b: &mut Buffers, out: &mut State) -> Result<()> {
        let gd = self.gamma.powf(self.delta);
        for i in 0..self.dim() {
            b.v_arg[i] = gd * s.v[i];
            b.z_arg[i] = gd * zs[i];
        }
        let args = DriftArgs { x: &s.x, v: &b.v_arg, z: &b.z_arg, w1, w2 };
        (self.f)(&args, &mut b.f_out, &mut b.scratch);
        (self.g)(&args, &mut b.g_out, &mut b.scratch);
        self.diffusion.apply(zs, &mut b.dz);
        let gamma = self.gamma;
        for i in 0..self.dim() {
            out.x[i] = s.x[i] + gamma * s.v[i] + gamma * b.f_out[i] + gd * b.dz[i];
            out.v[i] = self.tau * s.v[i] + gamma * b.g_out[i] + zs[i];
        }
        out.check_finite()
    }
}

/// Simulation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub steps: u64,
    pub seed: u64,
    pub record_every: u64,
    pub ensemble: usize,
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.steps >= 1, || "steps must be at least 1".into())?;
        ensure(self.ensemble >= 1, || "ensemble must be at least 1".into())?;
        ensure(self.record_every >= 1, || "record_every must be at least 1".into())
    }
}

/// Recorded states of one chain, as `(step, state)` after that many steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<(u64, State)>,
    pub final_state: State,
}

/// Runs `steps` steps of one chain, numbering them from `first_step`.
///
/// The observer sees the state after each step together with its index
/// (counted from 1 relative to `first_step`).
pub fn run_chain(
    scheme: &GeneralScheme,
    start: &State,
    first_step: u64,
    steps: u64,
    rng: &mut CounterRng,
    mut observer: impl FnMut(u64, &State),
) -> Result<State> {
    let mut ws = scheme.workspace();
    let mut noise = scheme.noise_spec().zeros();
    let mut current = start.clone();
    let mut next = State::zeros(scheme.dim());
    for n in 1..=steps {
        let step = first_step + n - 1;
        rng.fill_noise(step, &mut noise);
        scheme.step_into(&current, &noise, &mut ws, &mut next).map_err(|e| match e {
            Error::Overflow { component } => Error::Diverged { step: n, component },
            other => other,
        })?;
        if let Some((component, size)) = next.largest_component() {
            if size > DIVERGENCE_THRESHOLD {
                return Err(Error::Diverged { step: n, component });
            }
        }
        std::mem::swap(&mut current, &mut next);
        observer(n, &current);
    }
    Ok(current)
}

/// Simulates `cfg.ensemble` independent chains; chain `c` uses substream `c`.
pub fn simulate_chain(scheme: &GeneralScheme, s0: &State, cfg: &TrajectoryConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    ensure_dim("initial state", s0.dim(), scheme.dim())?;
    s0.check_finite()?;
    (0..cfg.ensemble)
        .into_par_iter()
        .map(|chain| {
            let mut rng = CounterRng::new(cfg.seed, chain as u64, scheme.noise_spec());
            let mut records = Vec::new();
            let final_state = run_chain(scheme, s0, 0, cfg.steps, &mut rng, |n, s| {
                if n % cfg.record_every == 0 {
                    records.push((n, s.clone()));
                }
            })?;
            Ok(Trajectory { records, final_state })
        })
        .collect()
}

/// Evaluates the state after `noises.len()` steps through the closed form that
/// separates the initial condition, the drift corrections and the noise.
///
/// The drift corrections need the intermediate states, which are obtained by
/// forward iteration; everything else uses the weight vectors and the power of
/// the linear part.
pub fn aggregate_closed_form(scheme: &GeneralScheme, s0: &State, noises: &[NoiseDraw]) -> Result<State> {
    ensure(!noises.is_empty(), || "need at least one noise draw".into())?;
    let d = scheme.dim();
    ensure_dim("initial state", s0.dim(), d)?;
    let k = noises.len() - 1;
    let gamma = scheme.gamma();
    let gd = gamma.powf(scheme.delta());
    let scale = scheme.noise_scale();

    let weights = weight_vectors(k, gamma, scheme.tau())?;
    let linear = transition_matrix_power(k, gamma, scheme.tau(), 1)?;
    let (m_xv, m_vv) = (linear[(0, 1)], linear[(1, 1)]);

    let mut x_out: Vec<f64> = (0..d).map(|j| s0.x[j] + m_xv * s0.v[j]).collect();
    let mut v_out: Vec<f64> = (0..d).map(|j| m_vv * s0.v[j]).collect();

    let mut bufs = scheme.workspace().bufs;
    let mut zs = vec![0.0; d];
    let mut current = s0.clone();
    let mut next = State::zeros(d);
    for (i, noise) in noises.iter().enumerate() {
        scheme.check_inputs(&current, noise)?;
        for j in 0..d {
            zs[j] = scale * noise.z[j];
            bufs.v_arg[j] = gd * current.v[j];
            bufs.z_arg[j] = gd * zs[j];
        }
        let args = DriftArgs { x: &current.x, v: &bufs.v_arg, z: &bufs.z_arg, w1: &noise.w1, w2: &noise.w2 };
        (scheme.f)(&args, &mut bufs.f_out, &mut bufs.scratch);
        (scheme.g)(&args, &mut bufs.g_out, &mut bufs.scratch);
        scheme.diffusion.apply(&zs, &mut bufs.dz);
        let (g1, g2) = (weights.g1[i], weights.g2[i]);
        for j in 0..d {
            let kick = gamma * bufs.g_out[j] + zs[j];
            x_out[j] += g1 * kick + gamma * bufs.f_out[j] + gd * bufs.dz[j];
            v_out[j] += g2 * kick;
        }
        if i < k {
            scheme.apply(&current, &zs, &noise.w1, &noise.w2, &mut bufs, &mut next)?;
            std::mem::swap(&mut current, &mut next);
        }
    }
    let out = State { x: x_out, v: v_out };
    out.check_finite()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::ForceModel;

    fn em(gamma: f64, kappa: f64, sigma: f64, force: ForceModel) -> GeneralScheme {
        let g: DriftFn = Arc::new(move |a: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| force.eval(a.x, out));
        GeneralScheme::new(
            gamma,
            1.0 - kappa * gamma,
            sigma,
            1.0,
            Diffusion::Scalar(0.0),
            NoiseSpec::gaussian(1),
            zero_drift(),
            g,
        )
        .unwrap()
    }

    #[test]
    fn euler_maruyama_hand_value() {
        let scheme = em(0.1, 1.0, 1.0, ForceModel::linear(1.0));
        let out = scheme.step(&State::scalar(1.0, 2.0), &NoiseDraw::from_z(vec![0.5])).unwrap();
        assert!((out.x[0] - 1.2).abs() < 1e-15);
        // 0.9*2 - 0.1 + sqrt(0.1)*0.5
        let expected = 1.8 - 0.1 + 0.1f64.sqrt() * 0.5;
        assert!((out.v[0] - expected).abs() < 1e-15);
        assert!((out.v[0] - 1.858_113_9).abs() < 1e-7);
    }

    #[test]
    fn noiseless_driftless_step_is_free_flight() {
        let scheme = em(0.3, 1.0, 1.0, ForceModel::zero());
        let out = scheme.step(&State::scalar(0.5, -1.0), &NoiseDraw::from_z(vec![0.0])).unwrap();
        assert_eq!(out.x[0], 0.5 - 0.3);
        assert_eq!(out.v[0], 0.7 * -1.0);
    }

    #[test]
    fn overflow_names_component() {
        let bad: DriftFn = Arc::new(|_: &DriftArgs<'_>, out: &mut [f64], _: &mut [f64]| out.fill(f64::INFINITY));
        let scheme = GeneralScheme::new(
            0.1,
            0.9,
            1.0,
            1.0,
            Diffusion::Scalar(0.0),
            NoiseSpec::gaussian(1),
            bad,
            zero_drift(),
        )
        .unwrap();
        let err = scheme.step(&State::scalar(0.0, 0.0), &NoiseDraw::from_z(vec![0.0])).unwrap_err();
        assert_eq!(err, Error::Overflow { component: "x[0]".into() });
    }

    #[test]
    fn divergence_reports_step() {
        let scheme = em(0.5, 1.0, 1.0, ForceModel::linear(-40.0));
        let cfg = TrajectoryConfig { steps: 10_000, seed: 1, record_every: 1, ensemble: 1 };
        match simulate_chain(&scheme, &State::scalar(1.0, 0.0), &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step > 1 && step < 10_000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_step_simulation_matches_step() {
        let scheme = em(0.1, 1.0, 1.0, ForceModel::linear(1.0));
        let s0 = State::scalar(0.3, -0.2);
        let cfg = TrajectoryConfig { steps: 1, seed: 9, record_every: 1, ensemble: 3 };
        let runs = simulate_chain(&scheme, &s0, &cfg).unwrap();
        for (c, run) in runs.iter().enumerate() {
            let noise = CounterRng::new(9, c as u64, scheme.noise_spec()).noise(0, scheme.noise_spec());
            assert_eq!(run.final_state, scheme.step(&s0, &noise).unwrap());
            assert_eq!(run.records.len(), 1);
        }
    }

    #[test]
    fn closed_form_matches_iteration_for_one_step() {
        let scheme = em(0.1, 1.0, 1.0, ForceModel::linear(1.0));
        let s0 = State::scalar(1.0, 2.0);
        let noise = NoiseDraw::from_z(vec![0.5]);
        let a = aggregate_closed_form(&scheme, &s0, std::slice::from_ref(&noise)).unwrap();
        let b = scheme.step(&s0, &noise).unwrap();
        assert!((a.x[0] - b.x[0]).abs() < 1e-14 && (a.v[0] - b.v[0]).abs() < 1e-14);
    }
}
