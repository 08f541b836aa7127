use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use langevin_kit::potential::{DriftField, ForceModel};
use langevin_kit::rng::{CounterRng, NoiseDraw};
use langevin_kit::schemes::{as_general_scheme, check_a1_a2, native_step, GradientEstimator, SchemeKind, SchemeParams};
use langevin_kit::State;

fn driftless(kind: SchemeKind, gamma: f64) -> SchemeParams {
    let p = SchemeParams::new(1.0, 1.0, gamma, 1, ForceModel::zero()).unwrap();
    if kind == SchemeKind::SgEulerMaruyama {
        p.with_estimator(GradientEstimator::additive_gaussian(ForceModel::zero(), 0.0, 1))
    } else {
        p
    }
}

#[test]
fn euler_maruyama_friction_factor() {
    let p = SchemeParams::new(1.0, 1.0, 0.1, 1, ForceModel::linear(1.0)).unwrap();
    let scheme = as_general_scheme(SchemeKind::EulerMaruyama, &p).unwrap();
    assert!((scheme.tau() - 0.9).abs() < 1e-15);
    assert_eq!(scheme.sigma_gamma(), 1.0);
}

#[test]
fn driftless_velocity_marginals() {
    let (gamma, v0, n) = (0.2, 1.5, 1_000_000u64);
    for kind in SchemeKind::ALL {
        let p = driftless(kind, gamma);
        let scheme = as_general_scheme(kind, &p).unwrap();
        let s0 = State::scalar(-0.3, v0);
        let mean = scheme.tau() * v0;
        let var = gamma * scheme.sigma_gamma().powi(2);
        let mut rng = CounterRng::new(31, 0, scheme.noise_spec());
        let mut noise = scheme.noise_spec().zeros();
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..n {
            rng.fill_noise(i, &mut noise);
            let dv = native_step(kind, &p, &s0, &noise).unwrap().v[0] - mean;
            s1 += dv;
            s2 += dv * dv;
        }
        let nf = n as f64;
        let (m_hat, v_hat) = (s1 / nf, s2 / nf);
        assert!(m_hat.abs() < 4.0 * (var / nf).sqrt(), "{kind}: mean offset {m_hat}");
        assert!((v_hat - var).abs() < 4.0 * (2.0 * var * var / nf).sqrt(), "{kind}: variance {v_hat} vs {var}");
    }
}

#[test]
fn exact_friction_schemes_decay_velocity_exponentially() {
    for kind in SchemeKind::ALL.into_iter().filter(|k| k.exact_friction()) {
        let scheme = as_general_scheme(kind, &driftless(kind, 0.3)).unwrap();
        assert!((scheme.tau() - (-0.3f64).exp()).abs() < 1e-14, "{kind}");
    }
}

#[test]
fn unbiased_gradient_noise_averages_out() {
    let (gamma, scale, n) = (0.1, 0.7, 100_000);
    let force = ForceModel::linear(1.0);
    let p = SchemeParams::new(1.0, 1.0, gamma, 1, force.clone()).unwrap().with_estimator(GradientEstimator::additive_gaussian(force, scale, 1));
    let s0 = State::scalar(0.8, -0.4);
    let z = vec![0.6];
    let em = native_step(SchemeKind::EulerMaruyama, &p, &s0, &NoiseDraw::from_z(z.clone())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sv = 0.0;
    for _ in 0..n {
        let noise = NoiseDraw { z: z.clone(), w1: vec![], w2: vec![rng.sample(StandardNormal)] };
        let s = native_step(SchemeKind::SgEulerMaruyama, &p, &s0, &noise).unwrap();
        assert_eq!(s.x, em.x, "position does not see the gradient noise");
        sv += s.v[0];
    }
    let nf = n as f64;
    let se = gamma * scale / nf.sqrt();
    assert!((sv / nf - em.v[0]).abs() < 3.0 * se, "{} vs {}", sv / nf, em.v[0]);
}

#[test]
fn euler_maruyama_consistency_constant() {
    let p = SchemeParams::new(1.7, 1.0, 0.1, 1, ForceModel::linear(1.0)).unwrap();
    let report = check_a1_a2(SchemeKind::EulerMaruyama, &p, 2000, 3).unwrap();
    assert!(report.passed(), "{report:?}");
    // The smallest scanned steps lose a few digits in 1 - kappa gamma - exp(-kappa gamma).
    assert!(report.a1.fitted_c_kappa <= 0.5 * 1.7 * 1.7 * (1.0 + 1e-3), "{}", report.a1.fitted_c_kappa);
    assert!(report.a1.fitted_c_kappa > 0.45 * 1.7 * 1.7, "the declared constant is sharp as gamma shrinks");
}

#[test]
fn forceless_euler_maruyama_has_constant_corrections() {
    let p = SchemeParams::new(1.0, 1.0, 0.1, 2, ForceModel::zero()).unwrap();
    let report = check_a1_a2(SchemeKind::EulerMaruyama, &p, 2000, 4).unwrap();
    assert!(report.passed());
    assert_eq!(report.a2.worst_ratio, 0.0);
}

#[test]
fn split_cab_lipschitz_probe() {
    let drift: DriftField = Arc::new(|x: &[f64], out: &mut [f64]| {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = -xi - 0.8 * (1.5 * xi).sin();
        }
    });
    let p = SchemeParams::new(1.0, 1.0, 0.1, 2, ForceModel::custom(drift, 2.2)).unwrap();
    let report = check_a1_a2(SchemeKind::SplitCab, &p, 25_000, 6).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.a2.worst_ratio <= 1.01);
    assert!(report.a2.worst_ratio > 0.1, "the probe should come near the bound: {}", report.a2.worst_ratio);
}

#[test]
fn every_scheme_passes_its_assumption_checks() {
    for kind in SchemeKind::ALL {
        let force = ForceModel::linear(1.0);
        let mut p = SchemeParams::new(1.0, 1.0, 0.1, 1, force.clone()).unwrap();
        if kind == SchemeKind::SgEulerMaruyama {
            p = p.with_estimator(GradientEstimator::additive_gaussian(force, 0.3, 1));
        }
        let report = check_a1_a2(kind, &p, 2000, 8).unwrap();
        assert!(report.passed(), "{kind}: {report:?}");
    }
}
