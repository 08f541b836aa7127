//! Lipschitz constants of the k-step map in the initial condition and the noise,
//! with a paired-trajectory check of the resulting bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, ensure_positive, Result};
use crate::framework::{norm, GeneralScheme, State};
use crate::rng::CounterRng;
use crate::schemes::{as_general_scheme, effective_lipschitz, SchemeKind, SchemeParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    /// One-step growth factor in the norm `|x| + lambda |v|`.
    pub l_gamma: f64,
    /// One-step sensitivity to the noise.
    pub m_gamma: f64,
    pub l_x: f64,
    pub l_v: f64,
    pub l_xi: f64,
    /// Lipschitz constant of the map from the aggregated noise, minus the identity.
    pub c_total: f64,
}

/// Evaluates the stability constants for `k` steps at timestep `gamma`.
/// `m_kg` is the sup norm of the projection coefficients for `k + 1` steps.
#[allow(clippy::too_many_arguments)]
pub fn stability_constants(
    k: usize,
    gamma: f64,
    lambda: f64,
    delta: f64,
    l: f64,
    diffusion: f64,
    tau: f64,
    m_kg: f64,
) -> Result<StabilityConstants> {
    ensure_positive("gamma", gamma)?;
    ensure_positive("lambda", lambda)?;
    ensure_positive("delta", delta)?;
    ensure(k >= 1, || "k must be at least 1".into())?;
    ensure(l >= 0.0 && diffusion >= 0.0 && m_kg >= 0.0, || {
        "L, D and m must be nonnegative".into()
    })?;
    let kf = k as f64;
    let gd = gamma.powf(delta);
    let l_gamma = 1.0 + gamma * (1.0 / lambda + (1.0 + lambda) * (gd / lambda).max(1.0) * l);
    let m_gamma = lambda + gd * diffusion + gamma * gd * (1.0 + lambda) * l;
    let lk = l_gamma.powf(kf);
    let vel_growth = (1.0 + gamma * gd * l).powf(kf);
    let l_x = gamma * l * m_gamma * lk + gamma * (1.0 + gd * l) * (kf * gamma * m_gamma * l * vel_growth * lk + vel_growth);
    let l_v = (kf - 1.0) * gamma * m_gamma * vel_growth * lk * l + vel_growth;
    let kg = kf * gamma;
    let l_xi = gd * (1.0 + kg * kg * m_kg) * (2.0 + diffusion + (1.0 + gd * l).powf(kf) + gamma * l)
        + gamma * gd * (1.0 + kg * m_kg)
        + kf * gamma * gamma * m_kg * (kf * m_gamma * lk + l_x + gd * (1.0 + kf * l_v));
    let c_total = gd * diffusion * (1.0 + m_kg * kg + (1.0 - tau) / gamma * (1.0 + m_kg * kg * kg)) + (2.0 + kg) * l * l_xi;
    Ok(StabilityConstants { l_gamma, m_gamma, l_x, l_v, l_xi, c_total })
}

/// Lipschitz constant that the scheme's corrections satisfy at its timestep.
pub fn scheme_lipschitz(kind: SchemeKind, p: &SchemeParams) -> f64 {
    let l = if kind == SchemeKind::SgEulerMaruyama { p.estimator_or_exact().lipschitz() } else { p.force.lipschitz() };
    effective_lipschitz(kind, p.kappa, p.gamma, l)
}

/// The paired runs achieving the largest ratio for one inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionWitness {
    pub trial: usize,
    pub step: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub start: State,
    pub perturbed_start: State,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub kind: SchemeKind,
    pub gamma: f64,
    pub k: usize,
    pub lambda: f64,
    pub lipschitz: f64,
    pub constants: StabilityConstants,
    /// Largest lhs/rhs of the growth bound over all trials and steps.
    pub worst_growth: f64,
    /// Largest lhs/rhs of the summed position bound (same start).
    pub worst_position_sum: f64,
    /// Largest lhs/rhs of the summed velocity bound (same start).
    pub worst_velocity_sum: f64,
    pub passed: bool,
    pub witness: Option<ContractionWitness>,
}

const PERTURBATION: f64 = 0.1;

/// `lhs / rhs`, with `0 / 0` read as 0.
pub fn bound_ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else {
        lhs / rhs
    }
}

struct Pair {
    start: State,
    perturbed: State,
    a: Vec<State>,
    b: Vec<State>,
    dz: Vec<f64>,
}

fn paired_run(scheme: &GeneralScheme, k: usize, seed: u64, trial: usize, same_start: bool) -> Result<Pair> {
    let d = scheme.dim();
    let spec = *scheme.noise_spec();
    let mut rng = CounterRng::with_window(seed, trial as u64, 8 * (spec.total() + 2 * d));
    let mut init = vec![0.0; 2 * d];
    rng.normals(0, &mut init);
    let start = State::new(init[..d].to_vec(), init[d..].to_vec())?;
    let mut offset = vec![0.0; 2 * d];
    if !same_start {
        rng.symmetric_uniforms(1, &mut offset);
    }
    let perturbed = State::new(
        start.x.iter().zip(&offset[..d]).map(|(a, o)| a + PERTURBATION * o).collect(),
        start.v.iter().zip(&offset[d..]).map(|(a, o)| a + PERTURBATION * o).collect(),
    )?;
    let scale = scheme.noise_scale();
    let (mut a, mut b) = (start.clone(), perturbed.clone());
    let (mut traj_a, mut traj_b, mut dz) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
    let mut noise = spec.zeros();
    let mut shift = vec![0.0; d];
    for i in 0..k as u64 {
        rng.fill_noise(2 + 2 * i, &mut noise);
        rng.symmetric_uniforms(3 + 2 * i, &mut shift);
        let za: Vec<f64> = noise.z.iter().map(|z| scale * z).collect();
        let zb: Vec<f64> = za.iter().zip(&shift).map(|(z, s)| z + PERTURBATION * s).collect();
        a = scheme.transition(&a, &za, &noise.w1, &noise.w2)?;
        b = scheme.transition(&b, &zb, &noise.w1, &noise.w2)?;
        dz.push(PERTURBATION * norm(&shift));
        traj_a.push(a.clone());
        traj_b.push(b.clone());
    }
    Ok(Pair { start, perturbed, a: traj_a, b: traj_b, dz })
}

fn gap(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Runs `trials` paired trajectories of `k` steps from perturbed starts with
/// perturbed noise (shared `w`), and as many from a common start, and compares
/// them with the growth bound and the two summed bounds.
pub fn verify_contraction(kind: SchemeKind, p: &SchemeParams, k: usize, lambda: f64, trials: usize, seed: u64) -> Result<ContractionReport> {
    ensure(k >= 1, || "k must be at least 1".into())?;
    ensure_positive("lambda", lambda)?;
    let scheme = as_general_scheme(kind, p)?;
    let gamma = p.gamma;
    let l = scheme_lipschitz(kind, p);
    let diffusion = scheme.diffusion().operator_norm();
    let delta = scheme.delta();
    let constants = stability_constants(k, gamma, lambda, delta, l, diffusion, scheme.tau(), 0.0)?;
    let (lg, mg) = (constants.l_gamma, constants.m_gamma);
    let gd = gamma.powf(delta);
    let kf = k as f64;

    // (ratio, step, lhs, rhs) for each trial, for the growth bound
    let growth: Vec<(f64, usize, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let pair = paired_run(&scheme, k, seed, t, false)?;
            let init = gap(&pair.start.x, &pair.perturbed.x) + lambda * gap(&pair.start.v, &pair.perturbed.v);
            let mut noise_term = 0.0;
            let mut worst = (0.0, 0, 0.0, 0.0);
            for j in 0..k {
                noise_term = noise_term * lg + pair.dz[j];
                let lhs = gap(&pair.a[j].x, &pair.b[j].x) + lambda * gap(&pair.a[j].v, &pair.b[j].v);
                let rhs = lg.powi(j as i32 + 1) * init + mg * noise_term;
                let r = bound_ratio(lhs, rhs);
                if r > worst.0 {
                    worst = (r, j + 1, lhs, rhs);
                }
            }
            Ok(worst)
        })
        .collect::<Result<_>>()?;

    let vel_growth = (1.0 + gamma * gd * l).powf(kf);
    let sums: Vec<(f64, f64, f64, f64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let pair = paired_run(&scheme, k, seed, trials + t, true)?;
            let dx: f64 = pair.a.iter().zip(&pair.b).map(|(a, b)| gap(&a.x, &b.x)).sum();
            let dv: f64 = pair.a.iter().zip(&pair.b).map(|(a, b)| gap(&a.v, &b.v)).sum();
            let last = pair.dz[k - 1];
            let earlier: f64 = pair.dz[..k - 1].iter().sum();
            let rhs_x = gd * (diffusion + gamma * l) * last + (kf * mg * lg.powf(kf) + constants.l_x) * earlier;
            let rhs_v = vel_growth * last + kf * constants.l_v * earlier;
            Ok((bound_ratio(dx, rhs_x), dx, rhs_x, bound_ratio(dv, rhs_v), dv, rhs_v))
        })
        .collect::<Result<_>>()?;

    let (best_t, best) = growth
        .iter()
        .enumerate()
        .fold((0, (0.0, 0, 0.0, 0.0)), |acc, (t, w)| if w.0 > acc.1 .0 { (t, *w) } else { acc });
    let worst_position_sum = sums.iter().map(|s| s.0).fold(0.0, f64::max);
    let worst_velocity_sum = sums.iter().map(|s| s.3).fold(0.0, f64::max);
    let passed = best.0 <= 1.0 && worst_position_sum <= 1.0 && worst_velocity_sum <= 1.0;
    let witness = if best.1 > 0 {
        let pair = paired_run(&scheme, k, seed, best_t, false)?;
        Some(ContractionWitness {
            trial: best_t,
            step: best.1,
            lhs: best.2,
            rhs: best.3,
            start: pair.start,
            perturbed_start: pair.perturbed,
        })
    } else {
        None
    };
    Ok(ContractionReport {
        kind,
        gamma,
        k,
        lambda,
        lipschitz: l,
        constants,
        worst_growth: best.0,
        worst_position_sum,
        worst_velocity_sum,
        passed,
        witness,
    })
}
