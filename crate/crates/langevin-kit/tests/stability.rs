use proptest::prelude::*;

use langevin_kit::potential::ForceModel;
use langevin_kit::schemes::{SchemeKind, SchemeParams};
use langevin_kit::stability::{bound_ratio, stability_constants, verify_contraction, StabilityConstants};

fn constants(k: usize, gamma: f64, lambda: f64, l: f64, d: f64) -> StabilityConstants {
    stability_constants(k, gamma, lambda, 1.0, l, d, (-gamma).exp(), 2.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn constants_are_nonnegative(k in 1usize..200, gamma in 1e-4..0.5f64, lambda in 0.05..5.0f64, l in 0.0..4.0f64, d in 0.0..1.0f64) {
        let c = constants(k, gamma, lambda, l, d);
        prop_assert!(c.l_gamma >= 1.0);
        for value in [c.m_gamma, c.l_x, c.l_v, c.l_xi, c.c_total] {
            prop_assert!(value >= 0.0 && value.is_finite());
        }
    }

    #[test]
    fn growth_factor_is_monotone(k in 1usize..50, gamma in 1e-4..0.4f64, lambda in 0.05..5.0f64, l in 0.0..4.0f64, bump in 1.0..2.0f64) {
        let base = constants(k, gamma, lambda, l, 0.5);
        prop_assert!(constants(k, gamma * bump, lambda, l, 0.5).l_gamma >= base.l_gamma);
        prop_assert!(constants(k, gamma, lambda, l * bump + 0.01, 0.5).l_gamma >= base.l_gamma);
        // 1/lambda + (1 + lambda) L only decreases in lambda while lambda^2 L <= 1.
        if lambda * lambda * l <= 1.0 {
            prop_assert!(constants(k, gamma, lambda / bump, l, 0.5).l_gamma >= base.l_gamma);
        }
        prop_assert!(constants(k, gamma, lambda, l * bump + 0.01, 0.5).m_gamma >= base.m_gamma);
        prop_assert!(constants(k, gamma, lambda, l, 0.5 * bump).m_gamma >= base.m_gamma);
        prop_assert!(constants(k + 1, gamma, lambda, l, 0.5).l_x >= base.l_x);
    }
}

#[test]
fn coinciding_runs_have_zero_ratio() {
    assert_eq!(bound_ratio(0.0, 0.0), 0.0);
    assert_eq!(bound_ratio(0.0, 3.0), 0.0);
    assert_eq!(bound_ratio(1.0, 4.0), 0.25);
}

#[test]
fn euler_maruyama_paired_runs() {
    let p = SchemeParams::new(1.0, 1.0, 0.05, 1, ForceModel::linear(1.0)).unwrap();
    let report = verify_contraction(SchemeKind::EulerMaruyama, &p, 20, 1.0, 10_000, 17).unwrap();
    assert!(report.passed, "{:?}", report.witness);
    for ratio in [report.worst_growth, report.worst_position_sum, report.worst_velocity_sum] {
        assert!(ratio > 0.0 && ratio <= 1.0, "{ratio}");
    }
}

#[test]
fn contraction_report_is_reproducible() {
    let p = SchemeParams::new(0.7, 1.3, 0.02, 2, ForceModel::linear(2.0)).unwrap();
    let a = verify_contraction(SchemeKind::SplitAbcba, &p, 15, 0.5, 300, 3).unwrap();
    let b = verify_contraction(SchemeKind::SplitAbcba, &p, 15, 0.5, 300, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.passed);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(stability_constants(0, 0.1, 1.0, 1.0, 1.0, 0.0, 0.9, 0.0).is_err());
    assert!(stability_constants(1, 0.1, 0.0, 1.0, 1.0, 0.0, 0.9, 0.0).is_err());
    assert!(stability_constants(1, -0.1, 1.0, 1.0, 1.0, 0.0, 0.9, 0.0).is_err());
    let p = SchemeParams::new(1.0, 1.0, 0.05, 1, ForceModel::linear(1.0)).unwrap();
    assert!(verify_contraction(SchemeKind::EulerMaruyama, &p, 0, 1.0, 10, 1).is_err());
}
