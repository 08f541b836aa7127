//! Monte-Carlo probes of kernel overlap, geometric convergence, weak-order bias
//! and the Poisson equation.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_positive, Error, Result};
use crate::framework::{norm, run_chain, GeneralScheme, State};
use crate::rng::{derive_seed, CounterRng};
use crate::schemes::{as_general_scheme, SchemeKind, SchemeParams};

/// Points of `R^dim` stored row after row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut out = Self::new(dim);
        for r in rows {
            ensure(r.len() == dim, || format!("point of length {} in a set of dimension {dim}", r.len()))?;
            out.data.extend_from_slice(r);
        }
        Ok(out)
    }

    /// Concatenated `(x, v)` of each state.
    pub fn from_states(states: &[State]) -> Self {
        let dim = states.first().map_or(0, |s| 2 * s.dim());
        let mut out = Self::new(dim);
        for s in states {
            out.push_state(s);
        }
        out
    }

    pub fn push_state(&mut self, s: &State) {
        self.data.extend_from_slice(&s.x);
        self.data.extend_from_slice(&s.v);
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Keeps only the listed coordinates.
    pub fn project(&self, axes: &[usize]) -> Self {
        let mut out = Self::new(axes.len());
        for p in self.points() {
            out.data.extend(axes.iter().map(|&a| p[a]));
        }
        out
    }
}

/// Histogram layout for the total-variation estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Binning {
    /// Explicit range and bin count per axis; mass outside lands in the boundary cells.
    Fixed { ranges: Vec<(f64, f64)>, bins: Vec<usize> },
    /// Per-axis range spanning both sample sets, with the same bin count on every axis.
    Auto { bins: usize },
}

impl Default for Binning {
    fn default() -> Self {
        Self::Auto { bins: 64 }
    }
}

impl Binning {
    /// Fixed binning spanning the given points.
    pub fn spanning(sets: &[&PointSet], bins: usize) -> Result<Self> {
        ensure(bins >= 1, || "need at least one bin per axis".into())?;
        let dim = sets.first().map_or(0, |s| s.dim);
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); dim];
        for s in sets {
            ensure(s.dim == dim, || "point sets differ in dimension".into())?;
            for p in s.points() {
                for (r, &c) in ranges.iter_mut().zip(p) {
                    r.0 = r.0.min(c);
                    r.1 = r.1.max(c);
                }
            }
        }
        Ok(Self::Fixed { ranges, bins: vec![bins; dim] })
    }

    fn resolve(&self, a: &PointSet, b: &PointSet) -> Result<Self> {
        match self {
            Self::Auto { bins } => Self::spanning(&[a, b], *bins),
            Self::Fixed { ranges, bins } => {
                ensure(ranges.len() == a.dim && bins.len() == a.dim, || {
                    format!("binning has {} axes, points have {}", ranges.len(), a.dim)
                })?;
                ensure(bins.iter().all(|&n| n >= 1), || "need at least one bin per axis".into())?;
                ensure(ranges.iter().all(|r| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1), || {
                    "bin ranges must be finite with lo <= hi".into()
                })?;
                Ok(self.clone())
            }
        }
    }

    fn cell(ranges: &[(f64, f64)], bins: &[usize], p: &[f64]) -> u64 {
        let mut index = 0u64;
        for ((&(lo, hi), &n), &c) in ranges.iter().zip(bins).zip(p) {
            let slot = if hi > lo {
                let t = ((c - lo) / (hi - lo) * n as f64).floor();
                t.clamp(0.0, (n - 1) as f64) as u64
            } else {
                0
            };
            index = index * n as u64 + slot;
        }
        index
    }
}

/// Histogram estimate of the total-variation distance (between 0 and 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    pub std_error: f64,
    pub binning: Binning,
}

/// `sum over cells |p_a - p_b|` on a shared histogram.
pub fn estimate_tv(a: &PointSet, b: &PointSet, binning: &Binning) -> Result<TvEstimate> {
    ensure(!a.is_empty() && !b.is_empty(), || "both sample sets must be nonempty".into())?;
    ensure(a.dim == b.dim, || format!("sample sets have dimensions {} and {}", a.dim, b.dim))?;
    let resolved = binning.resolve(a, b)?;
    let Binning::Fixed { ranges, bins } = &resolved else {
        return Err(Error::Internal("binning did not resolve to fixed".into()));
    };
    let mut counts: HashMap<u64, (u64, u64)> = HashMap::new();
    for p in a.points() {
        counts.entry(Binning::cell(ranges, bins, p)).or_default().0 += 1;
    }
    for p in b.points() {
        counts.entry(Binning::cell(ranges, bins, p)).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as u64, b.len() as u64);
    let mut cells: Vec<(u64, (u64, u64))> = counts.into_iter().collect();
    cells.sort_unstable_by_key(|c| c.0);
    // Integer numerator keeps disjoint samples at exactly 2.
    let mut numerator: u128 = 0;
    let mut var = 0.0;
    for (_, (ca, cb)) in cells {
        numerator += (u128::from(ca) * u128::from(nb)).abs_diff(u128::from(cb) * u128::from(na));
        let (pa, pb) = (ca as f64 / na as f64, cb as f64 / nb as f64);
        var += pa * (1.0 - pa) / na as f64 + pb * (1.0 - pb) / nb as f64;
    }
    let value = numerator as f64 / (u128::from(na) * u128::from(nb)) as f64;
    Ok(TvEstimate { value, std_error: var.sqrt(), binning: resolved })
}

/// `ceil(t / gamma)` tolerant to rounding of exact multiples.
fn ceil_steps(t: f64, gamma: f64) -> u64 {
    (t / gamma - 1e-9).ceil().max(0.0) as u64
}

const CHAIN_BLOCK: usize = 256;

/// Runs `n` chains from `start` and collects their states after each checkpoint
/// (in steps, ascending). Chain `c` draws from substream `stream_base + c`.
pub fn ensemble_snapshots(
    scheme: &GeneralScheme,
    start: &State,
    checkpoints: &[u64],
    n: usize,
    seed: u64,
    stream_base: u64,
) -> Result<Vec<PointSet>> {
    ensure(n >= 1, || "ensemble must have at least one chain".into())?;
    ensure(!checkpoints.is_empty() && checkpoints[0] >= 1, || "checkpoints must be positive".into())?;
    ensure(checkpoints.windows(2).all(|w| w[0] < w[1]), || "checkpoints must increase".into())?;
    let last = *checkpoints.last().unwrap_or(&0);
    let dim = 2 * scheme.dim();
    let blocks: Vec<Vec<PointSet>> = (0..n.div_ceil(CHAIN_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let mut local = vec![PointSet::new(dim); checkpoints.len()];
            for c in blk * CHAIN_BLOCK..((blk + 1) * CHAIN_BLOCK).min(n) {
                let mut rng = CounterRng::new(seed, stream_base + c as u64, scheme.noise_spec());
                let mut next = 0;
                run_chain(scheme, start, 0, last, &mut rng, |step, s| {
                    if next < checkpoints.len() && step == checkpoints[next] {
                        local[next].push_state(s);
                        next += 1;
                    }
                })
                .map_err(|e| match e {
                    Error::Diverged { step, component } => Error::Diverged { step, component: format!("chain {c}: {component}") },
                    other => other,
                })?;
            }
            Ok(local)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![PointSet::new(dim); checkpoints.len()];
    for block in blocks {
        for (o, b) in out.iter_mut().zip(block) {
            o.data.extend(b.data);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorizationConfig {
    pub t0: f64,
    /// Radius of the ball the initial conditions are drawn from.
    pub m_radius: f64,
    pub pairs: usize,
    /// Chains per kernel.
    pub mc: usize,
    pub bins: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorizationEstimate {
    pub epsilon: f64,
    pub t0: f64,
    pub m_radius: f64,
    pub gamma: f64,
    pub steps: u64,
    pub pair_count: usize,
    /// Estimated total variation for each pair.
    pub pair_tv: Vec<TvEstimate>,
    pub worst_pair: (State, State),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinorizationReport {
    pub estimates: Vec<MinorizationEstimate>,
    /// Largest over smallest `epsilon` across the grid; infinite when one vanishes.
    pub spread: f64,
    pub passed: bool,
}

/// Initial-condition pairs in the closed ball of radius `m`: antipodal pairs on
/// its boundary in the `(x_1, v_1)` plane, then uniform random pairs.
pub fn minorization_pairs(dim: usize, m: f64, pairs: usize, seed: u64) -> Vec<(State, State)> {
    let antipodal = pairs.div_ceil(2);
    let mut out = Vec::with_capacity(pairs);
    for i in 0..antipodal {
        let theta = std::f64::consts::PI * i as f64 / antipodal as f64;
        let mut p = State::zeros(dim);
        p.x[0] = m * theta.cos();
        p.v[0] = m * theta.sin();
        let q = State { x: p.x.iter().map(|c| -c).collect(), v: p.v.iter().map(|c| -c).collect() };
        out.push((p, q));
    }
    let mut rng = CounterRng::with_window(derive_seed(seed, "minorization-pairs"), 0, 64 * dim);
    let mut ball_point = |step: u64| {
        let r = rng.at(step);
        let dir: Vec<f64> = (0..2 * dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let radius = m * r.random::<f64>().powf(1.0 / (2 * dim) as f64);
        let n = norm(&dir).max(1e-300);
        let c: Vec<f64> = dir.iter().map(|t| t * radius / n).collect();
        State { x: c[..dim].to_vec(), v: c[dim..].to_vec() }
    };
    for j in antipodal..pairs {
        let p = ball_point(2 * j as u64);
        let q = ball_point(2 * j as u64 + 1);
        out.push((p, q));
    }
    out
}

/// Estimates the overlap of the `ceil(t0 / gamma) + 1`-step kernels started
/// from pairs of initial conditions, `epsilon = 1 - max_pair TV / 2`, at each
/// timestep of the grid.
pub fn minorization_probe(kind: SchemeKind, p: &SchemeParams, cfg: &MinorizationConfig, gamma_grid: &[f64]) -> Result<MinorizationReport> {
    ensure_positive("t0", cfg.t0)?;
    ensure_positive("m_radius", cfg.m_radius)?;
    ensure(cfg.pairs >= 1 && cfg.mc >= 2, || "need at least one pair and two chains per kernel".into())?;
    ensure(!gamma_grid.is_empty(), || "gamma grid is empty".into())?;
    let pairs = minorization_pairs(p.dim, cfg.m_radius, cfg.pairs, cfg.seed);
    let binning = Binning::Auto { bins: cfg.bins };
    let mut estimates = Vec::new();
    for (gi, &gamma) in gamma_grid.iter().enumerate() {
        ensure_positive("gamma", gamma)?;
        let scheme = as_general_scheme(kind, &p.with_gamma(gamma))?;
        let steps = ceil_steps(cfg.t0, gamma) + 1;
        let mut pair_tv = Vec::with_capacity(pairs.len());
        for (pi, (a, b)) in pairs.iter().enumerate() {
            let base = ((gi * pairs.len() + pi) * 2) as u64 * cfg.mc as u64;
            let run = |s: &State, offset: u64| {
                ensemble_snapshots(&scheme, s, &[steps], cfg.mc, cfg.seed, base + offset).map_err(|e| match e {
                    Error::Diverged { step, component } => {
                        Error::Diverged { step, component: format!("pair {pi} ({a:?}, {b:?}) {component}") }
                    }
                    other => other,
                })
            };
            let ea = run(a, 0)?.remove(0);
            let eb = run(b, cfg.mc as u64)?.remove(0);
            pair_tv.push(estimate_tv(&ea, &eb, &binning)?);
        }
        let (worst, max_tv) = pair_tv
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, t)| if t.value > acc.1 { (i, t.value) } else { acc });
        estimates.push(MinorizationEstimate {
            epsilon: (1.0 - max_tv / 2.0).clamp(0.0, 1.0),
            t0: cfg.t0,
            m_radius: cfg.m_radius,
            gamma,
            steps,
            pair_count: pairs.len(),
            pair_tv,
            worst_pair: pairs[worst].clone(),
        });
    }
    let max_eps = estimates.iter().map(|e| e.epsilon).fold(0.0, f64::max);
    let min_eps = estimates.iter().map(|e| e.epsilon).fold(f64::INFINITY, f64::min);
    let spread = if min_eps > 0.0 { max_eps / min_eps } else { f64::INFINITY };
    let passed = min_eps > 0.0 && spread < 2.0;
    Ok(MinorizationReport { estimates, spread, passed })
}

/// Least-squares fit of `log TV = log A + t log rho`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    /// Rate per unit of physical time.
    pub rho: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    /// Physical time spanned by the epochs used in the fit.
    pub horizon: f64,
    pub used: usize,
    pub noise_floor: f64,
    /// `(time, TV)` at every recorded epoch.
    pub series: Vec<(f64, f64)>,
}

/// Fits `values = A rho^times` by least squares on the logarithms.
pub fn fit_log_linear(times: &[f64], values: &[f64]) -> Result<(f64, f64, f64)> {
    ensure(times.len() == values.len(), || "times and values differ in length".into())?;
    if times.len() < 2 {
        return Err(Error::InsufficientSignal(format!("{} points to fit", times.len())));
    }
    ensure(values.iter().all(|v| *v > 0.0), || "values must be positive".into())?;
    let n = times.len() as f64;
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let tm = times.iter().sum::<f64>() / n;
    let lm = logs.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    let sxy: f64 = times.iter().zip(&logs).map(|(t, l)| (t - tm) * (l - lm)).sum();
    ensure(sxx > 0.0, || "times must not all coincide".into())?;
    let slope = sxy / sxx;
    let intercept = lm - slope * tm;
    let ss_tot: f64 = logs.iter().map(|l| (l - lm).powi(2)).sum();
    let ss_res: f64 = times.iter().zip(&logs).map(|(t, l)| (l - intercept - slope * t).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    Ok((slope.exp(), intercept.exp(), r2))
}

/// Selects the pre-plateau epochs with `3 floor < TV < 1` and fits them.
/// The floor is the mean TV over the last quarter of the epochs.
pub fn fit_tv_series(series: &[(f64, f64)]) -> Result<RateEstimate> {
    ensure(series.len() >= 10, || format!("need at least 10 epochs, got {}", series.len()))?;
    let tail = (series.len() / 4).max(2);
    let noise_floor = series[series.len() - tail..].iter().map(|s| s.1).sum::<f64>() / tail as f64;
    let cutoff = series.iter().position(|s| s.1 <= 3.0 * noise_floor).unwrap_or(series.len());
    let used: Vec<(f64, f64)> = series[..cutoff].iter().copied().filter(|s| s.1 < 1.0).collect();
    if used.len() < 4 {
        return Err(Error::InsufficientSignal(format!(
            "{} epochs between the noise floor ({noise_floor:.3e}) and TV = 1",
            used.len()
        )));
    }
    let times: Vec<f64> = used.iter().map(|s| s.0).collect();
    let values: Vec<f64> = used.iter().map(|s| s.1).collect();
    let (rho, prefactor, r_squared) = fit_log_linear(&times, &values)?;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InsufficientSignal(format!("fitted rate {rho} shows no decay")));
    }
    Ok(RateEstimate {
        rho,
        prefactor,
        r_squared,
        horizon: times[times.len() - 1] - times[0],
        used: used.len(),
        noise_floor,
        series: series.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateConfig {
    /// Physical time of the last epoch.
    pub horizon: f64,
    pub epochs: usize,
    pub ensemble: usize,
    pub reference_steps: u64,
    pub burn_in: u64,
    /// Keep every `thin`-th state of the reference run.
    pub thin: u64,
    pub bins: usize,
    pub seed: u64,
}

/// Total variation between the law of the chain started at `init` and a long
/// stationary run, at evenly spaced epochs, with the geometric rate fitted.
pub fn fit_geometric_rate(kind: SchemeKind, p: &SchemeParams, init: &State, cfg: &RateConfig) -> Result<RateEstimate> {
    ensure_positive("horizon", cfg.horizon)?;
    ensure(cfg.epochs >= 10, || "need at least 10 epochs".into())?;
    ensure(cfg.thin >= 1 && cfg.reference_steps >= cfg.thin, || "reference run too short".into())?;
    let scheme = as_general_scheme(kind, p)?;
    let gamma = p.gamma;
    let mut checkpoints: Vec<u64> = (1..=cfg.epochs)
        .map(|j| ceil_steps(cfg.horizon * j as f64 / cfg.epochs as f64, gamma).max(1))
        .collect();
    checkpoints.dedup();
    ensure(checkpoints.len() >= 10, || "timestep too coarse for 10 distinct epochs".into())?;

    let reference_seed = derive_seed(cfg.seed, "stationary-reference");
    let mut rng = CounterRng::new(reference_seed, 0, scheme.noise_spec());
    let warm = run_chain(&scheme, init, 0, cfg.burn_in, &mut rng, |_, _| {})?;
    let mut reference = PointSet::new(2 * p.dim);
    run_chain(&scheme, &warm, cfg.burn_in, cfg.reference_steps, &mut rng, |n, s| {
        if n % cfg.thin == 0 {
            reference.push_state(s);
        }
    })?;
    let binning = Binning::spanning(&[&reference], cfg.bins)?;

    let snaps = ensemble_snapshots(&scheme, init, &checkpoints, cfg.ensemble, cfg.seed, 0)?;
    let series: Vec<(f64, f64)> = checkpoints
        .iter()
        .zip(&snaps)
        .map(|(&k, snap)| Ok((k as f64 * gamma, estimate_tv(snap, &reference, &binning)?.value)))
        .collect::<Result<_>>()?;
    fit_tv_series(&series)
}

/// Stationary second moment of one coordinate block at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub gamma: f64,
    pub value: f64,
    pub std_error: f64,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBias {
    /// `"x2"` or `"v2"`: per-coordinate mean of the squared position or velocity.
    pub moment: String,
    pub target: f64,
    pub coarse: MomentEstimate,
    pub fine: MomentEstimate,
    /// Bias at the coarse step over bias at the fine step.
    pub ratio: f64,
    /// Both biases exceed three standard errors.
    pub conclusive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    /// Physical time simulated per chain after burn-in.
    pub time: f64,
    pub burn_in_time: f64,
    pub chains: usize,
    /// Batches per chain for the batch-means standard error.
    pub batches: usize,
    pub seed: u64,
}

fn stationary_second_moments(scheme: &GeneralScheme, cfg: &BiasConfig, stream_base: u64) -> Result<[(f64, f64); 2]> {
    let gamma = scheme.gamma();
    let burn = ceil_steps(cfg.burn_in_time, gamma);
    let per_batch = (ceil_steps(cfg.time, gamma) / cfg.batches as u64).max(1);
    let d = scheme.dim() as f64;
    let batch_means: Vec<Vec<[f64; 2]>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = CounterRng::new(cfg.seed, stream_base + c as u64, scheme.noise_spec());
            let mut state = run_chain(scheme, &State::zeros(scheme.dim()), 0, burn, &mut rng, |_, _| {})?;
            let mut first = burn;
            let mut out = Vec::with_capacity(cfg.batches);
            for _ in 0..cfg.batches {
                let mut acc = [0.0; 2];
                state = run_chain(scheme, &state, first, per_batch, &mut rng, |_, s| {
                    acc[0] += s.x.iter().map(|t| t * t).sum::<f64>();
                    acc[1] += s.v.iter().map(|t| t * t).sum::<f64>();
                })?;
                first += per_batch;
                out.push([acc[0] / (per_batch as f64 * d), acc[1] / (per_batch as f64 * d)]);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let all: Vec<[f64; 2]> = batch_means.into_iter().flatten().collect();
    let n = all.len() as f64;
    let mut out = [(0.0, 0.0); 2];
    for (m, slot) in out.iter_mut().enumerate() {
        let mean = all.iter().map(|b| b[m]).sum::<f64>() / n;
        let var = all.iter().map(|b| (b[m] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        *slot = (mean, (var / n).sqrt());
    }
    Ok(out)
}

/// Checks that the force is `b(x) = -c x` and returns `c`.
fn linear_curvature(p: &SchemeParams) -> Result<f64> {
    let c = p.force.lipschitz();
    let mut b = vec![0.0; p.dim];
    for probe in [0.5, -1.5, 3.0] {
        let x: Vec<f64> = (0..p.dim).map(|i| probe * (i as f64 + 1.0)).collect();
        p.force.eval(&x, &mut b);
        for (bi, xi) in b.iter().zip(&x) {
            ensure((bi + c * xi).abs() <= 1e-12 * (1.0 + (c * xi).abs()), || {
                "the moment probe needs a linear force b(x) = -c x".into()
            })?;
        }
    }
    Ok(c)
}

/// Stationary `E[x^2]`, `E[v^2]` biases against the continuous targets
/// `sigma^2 / (2 kappa c)` and `sigma^2 / (2 kappa)` at `gamma` and `gamma / 2`.
/// The position moment is skipped when the force vanishes.
pub fn stationary_moment_bias(kind: SchemeKind, p: &SchemeParams, gamma: f64, cfg: &BiasConfig) -> Result<Vec<MomentBias>> {
    ensure_positive("gamma", gamma)?;
    ensure_positive("time", cfg.time)?;
    ensure(cfg.chains >= 1 && cfg.batches >= 2, || "need at least one chain and two batches".into())?;
    let curvature = linear_curvature(p)?;
    let v_target = p.sigma * p.sigma / (2.0 * p.kappa);
    let coarse = stationary_second_moments(&as_general_scheme(kind, &p.with_gamma(gamma))?, cfg, 0)?;
    let fine = stationary_second_moments(&as_general_scheme(kind, &p.with_gamma(0.5 * gamma))?, cfg, cfg.chains as u64)?;
    let mut out = Vec::new();
    let targets = [
        ("x2", (curvature > 0.0).then(|| v_target / curvature)),
        ("v2", Some(v_target)),
    ];
    for (m, (name, target)) in targets.into_iter().enumerate() {
        let Some(target) = target else { continue };
        let est = |g: f64, (value, se): (f64, f64)| MomentEstimate { gamma: g, value, std_error: se, bias: value - target };
        let c = est(gamma, coarse[m]);
        let f = est(0.5 * gamma, fine[m]);
        let conclusive = c.bias.abs() > 3.0 * c.std_error && f.bias.abs() > 3.0 * f.std_error;
        out.push(MomentBias { moment: name.into(), target, ratio: c.bias / f.bias, conclusive, coarse: c, fine: f });
    }
    Ok(out)
}

/// Every conclusive ratio lies in `[lo, hi]` and at least one moment is conclusive.
pub fn order_passes(biases: &[MomentBias], lo: f64, hi: f64) -> bool {
    let conclusive: Vec<&MomentBias> = biases.iter().filter(|b| b.conclusive).collect();
    !conclusive.is_empty() && conclusive.iter().all(|b| b.ratio >= lo && b.ratio <= hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonPoint {
    pub state: State,
    pub psi: f64,
    pub psi_se: f64,
    /// `(psi - R psi) / gamma - phi` at the point.
    pub residual: f64,
    pub residual_se: f64,
    /// `gamma |R^K phi|`, the last term kept.
    pub tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonReport {
    pub gamma: f64,
    pub truncation_k: u64,
    pub points: Vec<PoissonPoint>,
    pub warnings: Vec<String>,
}

impl PoissonReport {
    /// Every residual within `z` standard errors of zero.
    pub fn residuals_within(&self, z: f64) -> bool {
        self.points.iter().all(|p| p.residual.abs() <= z * p.residual_se.max(1e-300))
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `psi(p) = gamma sum_{k=0}^{K} (R^k phi)(p)` by ensemble Monte Carlo, with the
/// residual of `(Id - R) psi / gamma = phi` from the tail sums
/// `gamma sum_{k=1}^{K+1} phi(X_k)` of the same chains.
pub fn solve_poisson<F>(
    kind: SchemeKind,
    p: &SchemeParams,
    phi: F,
    truncation_k: u64,
    eval_points: &[State],
    mc: usize,
    seed: u64,
) -> Result<PoissonReport>
where
    F: Fn(&State) -> f64 + Sync,
{
    ensure(mc >= 2, || "need at least two chains".into())?;
    let scheme = as_general_scheme(kind, p)?;
    let gamma = p.gamma;
    let mut points = Vec::with_capacity(eval_points.len());
    let mut warnings = Vec::new();
    for (pi, start) in eval_points.iter().enumerate() {
        let phi0 = phi(start);
        let per_chain: Vec<(f64, f64, f64)> = (0..mc)
            .into_par_iter()
            .map(|c| {
                let mut rng = CounterRng::new(seed, (pi * mc + c) as u64, scheme.noise_spec());
                let (mut head, mut tail_sum, mut last) = (phi0, 0.0, if truncation_k == 0 { phi0 } else { 0.0 });
                run_chain(&scheme, start, 0, truncation_k + 1, &mut rng, |n, s| {
                    let value = phi(s);
                    tail_sum += value;
                    if n <= truncation_k {
                        head += value;
                    }
                    if n == truncation_k {
                        last = value;
                    }
                })?;
                let (s, t) = (gamma * head, gamma * tail_sum);
                Ok((s, (s - t) / gamma - phi0, last))
            })
            .collect::<Result<_>>()?;
        let (psi, psi_se) = mean_se(&per_chain.iter().map(|c| c.0).collect::<Vec<_>>());
        let (residual, residual_se) = mean_se(&per_chain.iter().map(|c| c.1).collect::<Vec<_>>());
        let (last, last_se) = mean_se(&per_chain.iter().map(|c| c.2).collect::<Vec<_>>());
        let tail = gamma * last.abs();
        if tail > 0.05 * psi.abs() && tail > 3.0 * gamma * last_se {
            warnings.push(format!("truncation tail {tail:.3e} above 5% of psi = {psi:.3e} at point {pi}; increase K"));
        }
        points.push(PoissonPoint { state: start.clone(), psi, psi_se, residual, residual_se, tail });
    }
    Ok(PoissonReport { gamma, truncation_k, points, warnings })
}

/// Long-run average of `f` along one chain, with a batch-means standard error.
pub fn stationary_mean<F>(scheme: &GeneralScheme, f: F, burn_in: u64, steps: u64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&State) -> f64,
{
    ensure(steps >= 20, || "need at least 20 steps".into())?;
    let mut rng = CounterRng::new(seed, 0, scheme.noise_spec());
    let warm = run_chain(scheme, &State::zeros(scheme.dim()), 0, burn_in, &mut rng, |_, _| {})?;
    let batches = 20u64;
    let per = steps / batches;
    let mut sums = vec![0.0; batches as usize];
    run_chain(scheme, &warm, burn_in, per * batches, &mut rng, |n, s| {
        sums[((n - 1) / per) as usize] += f(s);
    })?;
    let means: Vec<f64> = sums.iter().map(|s| s / per as f64).collect();
    Ok(mean_se(&means))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn set(values: &[f64]) -> PointSet {
        PointSet { dim: 1, data: values.to_vec() }
    }

    #[test]
    fn tv_extremes() {
        let a = set(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(estimate_tv(&a, &a, &Binning::Auto { bins: 4 }).unwrap().value, 0.0);
        let b = set(&[10.0, 11.0]);
        assert_relative_eq!(estimate_tv(&a, &b, &Binning::Auto { bins: 8 }).unwrap().value, 2.0);
        assert!(estimate_tv(&a, &PointSet::new(1), &Binning::default()).is_err());
    }

    #[test]
    fn fixed_binning_lumps_outliers() {
        let a = set(&[-100.0, 0.5]);
        let b = set(&[-0.9, 0.6]);
        let bins = Binning::Fixed { ranges: vec![(-1.0, 1.0)], bins: vec![2] };
        assert_eq!(estimate_tv(&a, &b, &bins).unwrap().value, 0.0);
    }

    #[test]
    fn synthetic_exponential_fit() {
        let series: Vec<(f64, f64)> = (0..40).map(|j| {
            let t = 0.25 * j as f64;
            (t, 2.0 * (-t).exp())
        }).collect();
        let times: Vec<f64> = series.iter().map(|s| s.0).collect();
        let values: Vec<f64> = series.iter().map(|s| s.1).collect();
        let (rho, a, r2) = fit_log_linear(&times, &values).unwrap();
        assert_relative_eq!(rho, (-1f64).exp(), epsilon = 1e-6);
        assert_relative_eq!(a, 2.0, epsilon = 1e-6);
        assert_relative_eq!(r2, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn too_few_epochs_is_insufficient() {
        let series: Vec<(f64, f64)> = (0..12).map(|j| (j as f64, if j < 2 { 0.5 } else { 0.01 })).collect();
        assert!(matches!(fit_tv_series(&series), Err(Error::InsufficientSignal(_))));
    }

    #[test]
    fn pairs_stay_in_ball() {
        for (a, b) in minorization_pairs(2, 1.5, 7, 3) {
            for s in [a, b] {
                let r = (s.x.iter().chain(&s.v).map(|c| c * c).sum::<f64>()).sqrt();
                assert!(r <= 1.5 + 1e-12);
            }
        }
    }
}
