//! Experiment configuration file.
//!
//! A config is a JSON object:
//!
//! ```json
//! {
//!   "experiment": "simulate",
//!   "scheme": { "kind": "em", "kappa": 1.0, "sigma": 1.0, "gamma": 0.1, "dim": 1 },
//!   "potential": { "kind": "quadratic", "curvature": 1.0 },
//!   "seed": 42,
//!   "monte_carlo": { "steps": 100 },
//!   "output": "out"
//! }
//! ```
//!
//! `scheme.gamma_grid` replaces `scheme.gamma` for experiments that sweep the
//! timestep. Omitted fields of `monte_carlo` and `probe` take the defaults
//! below; the resolved config with every field filled is stored in `meta.json`
//! and can be fed back unchanged.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::potential::{ForceModel, PotentialSpec};
use crate::schemes::{GradientEstimator, SchemeKind, SchemeParams};
use crate::State;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    CovarianceCheck,
    DriftCheck,
    TvDecay,
    Minorization,
    Poisson,
    OrderCheck,
    StabilityCheck,
}

impl ExperimentKind {
    pub const TAGS: [&'static str; 8] = [
        "simulate",
        "covariance-check",
        "drift-check",
        "tv-decay",
        "minorization",
        "poisson",
        "order-check",
        "stability-check",
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub kind: SchemeKind,
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_grid: Option<Vec<f64>>,
    #[serde(default = "one_usize")]
    pub dim: usize,
    /// Standard deviation of the additive gradient noise of `sg-em`.
    #[serde(default)]
    pub estimator_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    /// Chains or draws per state, kernel or evaluation point.
    pub samples: usize,
    pub steps: u64,
    pub ensemble: usize,
    pub record_every: u64,
    pub trials: usize,
    pub pairs: usize,
    pub bins: usize,
    pub truncation_k: u64,
    pub batches: usize,
    pub reference_steps: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub epochs: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            steps: 100,
            ensemble: 1,
            record_every: 1,
            trials: 1000,
            pairs: 4,
            bins: 64,
            truncation_k: 200,
            batches: 20,
            reference_steps: 1_000_000,
            burn_in: 10_000,
            thin: 1,
            epochs: 40,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    X1,
    V1,
}

impl Observable {
    pub fn eval(self, s: &State) -> f64 {
        match self {
            Observable::X1 => s.x[0],
            Observable::V1 => s.v[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub t0: f64,
    pub m_radius: f64,
    pub varpi: f64,
    pub alpha_u: f64,
    /// Drift checks require contraction at every grid state at least this far out.
    pub contraction_radius: f64,
    /// Physical time covered by the convergence epochs.
    pub horizon: f64,
    /// Physical time averaged over per chain in the order check.
    pub time: f64,
    pub burn_in_time: f64,
    pub stability_k: usize,
    pub lambda: f64,
    /// Initial state as `[x..., v...]`; the origin when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    /// Evaluation states as `[x..., v...]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_points: Option<Vec<Vec<f64>>>,
    pub observable: Observable,
    /// Accepted range of the bias ratio; scheme default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio_range: Option<(f64, f64)>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            t0: 0.5,
            m_radius: 1.0,
            varpi: 0.1,
            alpha_u: 1.0,
            contraction_radius: 10.0,
            horizon: 10.0,
            time: 1000.0,
            burn_in_time: 50.0,
            stability_k: 10,
            lambda: 0.5,
            init: None,
            eval_points: None,
            observable: Observable::X1,
            ratio_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub scheme: SchemeConfig,
    #[serde(default = "default_potential")]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_potential() -> PotentialSpec {
    PotentialSpec::Quadratic { curvature: 1.0 }
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn positive(name: &str, value: f64) -> Result<(), String> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be positive and finite, got {value}"))
    }
}

fn at_least(name: &str, value: u64, min: u64) -> Result<(), String> {
    if value >= min {
        Ok(())
    } else {
        Err(format!("{name} must be at least {min}, got {value}"))
    }
}

impl ExperimentConfig {
    /// Parses a config, or the `config` member of a `meta.json` written by a previous run.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
        if value.get("csv_schema_version").is_some() {
            value = value.get("config").cloned().ok_or("meta file has no config member")?;
        }
        match value.get("experiment") {
            Some(serde_json::Value::String(tag)) if !ExperimentKind::TAGS.contains(&tag.as_str()) => {
                return Err(format!("unknown experiment tag '{tag}' (expected one of {})", ExperimentKind::TAGS.join(", ")));
            }
            None => return Err("missing field 'experiment'".into()),
            _ => {}
        }
        serde_json::from_value(value).map_err(|e| format!("invalid config: {e}"))
    }

    /// Timesteps to run, from `gamma_grid` or the single `gamma`.
    pub fn gammas(&self) -> Vec<f64> {
        match (&self.scheme.gamma_grid, self.scheme.gamma) {
            (Some(grid), _) => grid.clone(),
            (None, Some(g)) => vec![g],
            (None, None) => Vec::new(),
        }
    }

    pub fn state_from(&self, name: &str, coords: &[f64]) -> Result<State, String> {
        let d = self.scheme.dim;
        if coords.len() != 2 * d {
            return Err(format!("{name} must have {} entries ([x..., v...]), got {}", 2 * d, coords.len()));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(format!("{name} has a non-finite entry {c}"));
        }
        Ok(State { x: coords[..d].to_vec(), v: coords[d..].to_vec() })
    }

    pub fn initial_state(&self) -> Result<State, String> {
        match &self.probe.init {
            Some(c) => self.state_from("probe.init", c),
            None => Ok(State::zeros(self.scheme.dim)),
        }
    }

    pub fn scheme_params(&self, gamma: f64) -> Result<SchemeParams, String> {
        let s = &self.scheme;
        let potential = self.potential.build().map_err(|e| e.to_string())?;
        let force = ForceModel::from_potential(potential);
        let mut p = SchemeParams::new(s.kappa, s.sigma, gamma, s.dim, force.clone()).map_err(|e| e.to_string())?;
        if s.kind == SchemeKind::SgEulerMaruyama {
            p = p.with_estimator(GradientEstimator::additive_gaussian(force, s.estimator_noise, s.dim));
        }
        Ok(p)
    }

    /// Checks every numeric field, naming the offending one.
    pub fn validate(&self) -> Result<(), String> {
        let s = &self.scheme;
        positive("scheme.kappa", s.kappa)?;
        positive("scheme.sigma", s.sigma)?;
        at_least("scheme.dim", s.dim as u64, 1)?;
        if !(s.estimator_noise.is_finite() && s.estimator_noise >= 0.0) {
            return Err(format!("scheme.estimator_noise must be nonnegative, got {}", s.estimator_noise));
        }
        match (&s.gamma, &s.gamma_grid) {
            (Some(_), Some(_)) => return Err("scheme.gamma and scheme.gamma_grid are exclusive".into()),
            (None, None) => return Err("scheme.gamma or scheme.gamma_grid is required".into()),
            (Some(g), None) => positive("scheme.gamma", *g)?,
            (None, Some(grid)) => {
                if grid.is_empty() {
                    return Err("scheme.gamma_grid must not be empty".into());
                }
                for (i, g) in grid.iter().enumerate() {
                    positive(&format!("scheme.gamma_grid[{i}]"), *g)?;
                }
            }
        }
        self.potential.validate().map_err(|e| e.to_string())?;

        let mc = &self.monte_carlo;
        at_least("monte_carlo.samples", mc.samples as u64, 2)?;
        at_least("monte_carlo.steps", mc.steps, 1)?;
        at_least("monte_carlo.ensemble", mc.ensemble as u64, 1)?;
        at_least("monte_carlo.record_every", mc.record_every, 1)?;
        at_least("monte_carlo.trials", mc.trials as u64, 1)?;
        at_least("monte_carlo.pairs", mc.pairs as u64, 1)?;
        at_least("monte_carlo.bins", mc.bins as u64, 1)?;
        at_least("monte_carlo.batches", mc.batches as u64, 2)?;
        at_least("monte_carlo.thin", mc.thin, 1)?;
        at_least("monte_carlo.reference_steps", mc.reference_steps, mc.thin)?;
        at_least("monte_carlo.epochs", mc.epochs as u64, 10)?;

        let pr = &self.probe;
        positive("probe.t0", pr.t0)?;
        positive("probe.m_radius", pr.m_radius)?;
        positive("probe.varpi", pr.varpi)?;
        positive("probe.alpha_u", pr.alpha_u)?;
        positive("probe.horizon", pr.horizon)?;
        positive("probe.time", pr.time)?;
        positive("probe.lambda", pr.lambda)?;
        at_least("probe.stability_k", pr.stability_k as u64, 1)?;
        if !(pr.contraction_radius.is_finite() && pr.contraction_radius >= 0.0) {
            return Err(format!("probe.contraction_radius must be nonnegative, got {}", pr.contraction_radius));
        }
        if !(pr.burn_in_time.is_finite() && pr.burn_in_time >= 0.0) {
            return Err(format!("probe.burn_in_time must be nonnegative, got {}", pr.burn_in_time));
        }
        if let Some((lo, hi)) = pr.ratio_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(format!("probe.ratio_range must satisfy lo <= hi, got ({lo}, {hi})"));
            }
        }
        self.initial_state()?;
        if let Some(points) = &pr.eval_points {
            if points.is_empty() {
                return Err("probe.eval_points must not be empty".into());
            }
            for (i, c) in points.iter().enumerate() {
                self.state_from(&format!("probe.eval_points[{i}]"), c)?;
            }
        }

        let gammas = self.gammas();
        match self.experiment {
            ExperimentKind::CovarianceCheck => {
                if gammas.len() < 2 {
                    return Err("scheme.gamma_grid needs at least two entries for covariance-check".into());
                }
                if let Some(g) = gammas.iter().find(|g| **g >= pr.t0) {
                    return Err(format!("scheme.gamma_grid entries must be below probe.t0 = {}, got {g}", pr.t0));
                }
            }
            ExperimentKind::OrderCheck if !matches!(self.potential, PotentialSpec::Quadratic { .. }) => {
                return Err("potential must be quadratic for order-check".into());
            }
            _ => {}
        }
        Ok(())
    }
}
