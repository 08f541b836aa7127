use std::sync::Arc;

use nalgebra::{Matrix2, Matrix4, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use langevin_kit::framework::{aggregate_closed_form, run_chain, simulate_chain, TrajectoryConfig};
use langevin_kit::gaussian::{discrete_covariance, transition_matrix_power};
use langevin_kit::potential::{DriftField, ForceModel};
use langevin_kit::rng::{CounterRng, NoiseDraw, NoiseSpec};
use langevin_kit::schemes::{as_general_scheme, consistency_constants, GradientEstimator, SchemeKind, SchemeParams};
use langevin_kit::State;

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw(rng: &mut ChaCha8Rng, spec: &NoiseSpec) -> NoiseDraw {
    NoiseDraw { z: normals(rng, spec.dim), w1: normals(rng, spec.w1_dim), w2: normals(rng, spec.w2_dim) }
}

fn params(kind: SchemeKind, gamma: f64, dim: usize, force: ForceModel) -> SchemeParams {
    let p = SchemeParams::new(1.0, 1.0, gamma, dim, force.clone()).unwrap();
    if kind == SchemeKind::SgEulerMaruyama {
        p.with_estimator(GradientEstimator::additive_gaussian(force, 0.5, dim))
    } else {
        p
    }
}

fn gap(a: &State, b: &State) -> f64 {
    a.x.iter().chain(&a.v).zip(b.x.iter().chain(&b.v)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn scale(a: &State) -> f64 {
    a.x.iter().chain(&a.v).map(|c| c.abs()).fold(1.0, f64::max)
}

fn kind_strategy() -> impl Strategy<Value = SchemeKind> {
    (0..SchemeKind::ALL.len()).prop_map(|i| SchemeKind::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_seed_same_trajectory(kind in kind_strategy(), seed in any::<u64>(), steps in 1u64..200, x0 in -3.0..3.0f64) {
        let gamma = 0.5 * consistency_constants(kind, 1.0, 1.0).gamma_bar.min(0.2);
        let scheme = as_general_scheme(kind, &params(kind, gamma, 2, ForceModel::linear(1.0))).unwrap();
        let cfg = TrajectoryConfig { steps, seed, record_every: 7, ensemble: 3 };
        let s0 = State::new(vec![x0, -x0], vec![0.5, 0.0]).unwrap();
        let a = simulate_chain(&scheme, &s0, &cfg).unwrap();
        let b = simulate_chain(&scheme, &s0, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_ne!(&a[0].final_state, &a[1].final_state);
    }

    #[test]
    fn ensemble_members_do_not_depend_on_ensemble_size(seed in any::<u64>(), small in 1usize..4) {
        let scheme = as_general_scheme(SchemeKind::SplitCabac, &params(SchemeKind::SplitCabac, 0.1, 1, ForceModel::linear(1.0))).unwrap();
        let s0 = State::scalar(1.0, 0.0);
        let few = simulate_chain(&scheme, &s0, &TrajectoryConfig { steps: 30, seed, record_every: 1, ensemble: small }).unwrap();
        let many = simulate_chain(&scheme, &s0, &TrajectoryConfig { steps: 30, seed, record_every: 1, ensemble: 6 }).unwrap();
        prop_assert_eq!(&few[..], &many[..small]);
    }

    #[test]
    fn closed_form_matches_iteration(kind in kind_strategy(), seed in any::<u64>(), k in 1usize..=100, a in 0.2..2.0f64, c in 0.0..1.0f64) {
        let drift: DriftField = Arc::new(move |x: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = -a * xi - c * (2.0 * xi).cos();
            }
        });
        let gamma = 0.5 * consistency_constants(kind, 1.0, 1.0).gamma_bar.min(0.3);
        let scheme = as_general_scheme(kind, &params(kind, gamma, 2, ForceModel::custom(drift, a + 2.0 * c))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = State::new(normals(&mut rng, 2), normals(&mut rng, 2)).unwrap();
        let noises: Vec<NoiseDraw> = (0..k).map(|_| draw(&mut rng, scheme.noise_spec())).collect();
        let mut iterated = s0.clone();
        for n in &noises {
            iterated = scheme.step(&iterated, n).unwrap();
        }
        let closed = aggregate_closed_form(&scheme, &s0, &noises).unwrap();
        prop_assert!(gap(&iterated, &closed) <= 1e-10 * scale(&iterated));
    }

    /// With a linear force every step is affine in the noise, so the final
    /// state commutes with affine combinations of noise sequences.
    #[test]
    fn linear_force_is_affine_in_noise(kind in kind_strategy(), seed in any::<u64>(), t in -1.5..2.5f64) {
        let scheme = as_general_scheme(kind, &params(kind, 0.1, 2, ForceModel::linear(1.3))).unwrap();
        let spec = *scheme.noise_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = State::new(normals(&mut rng, 2), normals(&mut rng, 2)).unwrap();
        let steps = 12;
        let a: Vec<NoiseDraw> = (0..steps).map(|_| draw(&mut rng, &spec)).collect();
        let b: Vec<NoiseDraw> = (0..steps).map(|_| draw(&mut rng, &spec)).collect();
        let mix = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, w)| t * u + (1.0 - t) * w).collect() };
        let mixed: Vec<NoiseDraw> = a
            .iter()
            .zip(&b)
            .map(|(p, q)| NoiseDraw { z: mix(&p.z, &q.z), w1: mix(&p.w1, &q.w1), w2: mix(&p.w2, &q.w2) })
            .collect();
        let run = |ns: &[NoiseDraw]| ns.iter().fold(s0.clone(), |s, n| scheme.step(&s, n).unwrap());
        let (fa, fb, fm) = (run(&a), run(&b), run(&mixed));
        let combined = State { x: mix(&fa.x, &fb.x), v: mix(&fa.v, &fb.v) };
        prop_assert!(gap(&fm, &combined) <= 1e-11 * scale(&fm));
    }
}

/// Stationary covariance of `s' = A s + B z` from `(I - A (x) A) vec S = vec(B B^T)`.
fn stationary_covariance(a: Matrix2<f64>, b: [f64; 2]) -> Matrix2<f64> {
    let kron = Matrix4::from_fn(|r, c| a[(r / 2, c / 2)] * a[(r % 2, c % 2)]);
    let rhs = Vector4::new(b[0] * b[0], b[0] * b[1], b[1] * b[0], b[1] * b[1]);
    let vec = (Matrix4::identity() - kron).lu().solve(&rhs).unwrap();
    Matrix2::new(vec[0], vec[1], vec[2], vec[3])
}

#[test]
fn euler_maruyama_stationary_position_variance() {
    let (kappa, sigma, gamma) = (1.0, 1.0, 0.01);
    let p = SchemeParams::new(kappa, sigma, gamma, 1, ForceModel::linear(1.0)).unwrap();
    let scheme = as_general_scheme(SchemeKind::EulerMaruyama, &p).unwrap();
    // x' = x + gamma v, v' = (1 - kappa gamma) v - gamma x + sqrt(gamma) sigma z
    let a = Matrix2::new(1.0, gamma, -gamma, 1.0 - kappa * gamma);
    let exact = stationary_covariance(a, [0.0, gamma.sqrt() * sigma])[(0, 0)];

    let mut rng = CounterRng::new(77, 0, scheme.noise_spec());
    let burned = run_chain(&scheme, &State::zeros(1), 0, 100_000, &mut rng, |_, _| {}).unwrap();
    let (samples, batches) = (1_000_000u64, 50u64);
    let per_batch = samples / batches;
    let mut sums = vec![0.0; batches as usize];
    run_chain(&scheme, &burned, 100_000, samples, &mut rng, |n, s| {
        sums[((n - 1) / per_batch) as usize] += s.x[0] * s.x[0];
    })
    .unwrap();
    let means: Vec<f64> = sums.iter().map(|s| s / per_batch as f64).collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let se = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / ((batches - 1) * batches) as f64).sqrt();
    // The chain is started at the origin, whose mean is already stationary.
    assert!((mean - exact).abs() < 3.0 * se, "Var(x) {mean} vs {exact} (se {se})");
    assert!((exact - 0.5).abs() < 0.01, "gamma-biased variance {exact} should sit near sigma^2 / (2 kappa)");
}

#[test]
fn driftless_aggregate_is_gaussian() {
    let (kappa, sigma, gamma, k) = (1.0, 1.0, 0.05, 20);
    let p = SchemeParams::new(kappa, sigma, gamma, 1, ForceModel::zero()).unwrap();
    let scheme = as_general_scheme(SchemeKind::EulerMaruyama, &p).unwrap();
    let s0 = State::scalar(0.7, -1.2);
    let m = transition_matrix_power(k, gamma, scheme.tau(), 1).unwrap();
    let mean = [m[(0, 0)] * s0.x[0] + m[(0, 1)] * s0.v[0], m[(1, 1)] * s0.v[0]];
    let c = discrete_covariance(k, gamma, scheme.tau()).unwrap().c.scaled(scheme.sigma_gamma().powi(2));

    let n = 1_000_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let (mut sx, mut sv, mut sxx, mut sxv, mut svv) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..n {
        let noises: Vec<NoiseDraw> = (0..=k).map(|_| NoiseDraw::from_z(vec![rng.sample(StandardNormal)])).collect();
        let s = aggregate_closed_form(&scheme, &s0, &noises).unwrap();
        let (dx, dv) = (s.x[0] - mean[0], s.v[0] - mean[1]);
        sx += dx;
        sv += dv;
        sxx += dx * dx;
        sxv += dx * dv;
        svv += dv * dv;
    }
    let nf = n as f64;
    let within = |est: f64, truth: f64, se: f64, what: &str| assert!((est - truth).abs() < 3.0 * se, "{what}: {est} vs {truth} (se {se})");
    within(sx / nf, 0.0, (c.s1 / nf).sqrt(), "mean x");
    within(sv / nf, 0.0, (c.s3 / nf).sqrt(), "mean v");
    // Gaussian fourth moments give Var(XY) = s_xx s_yy + s_xy^2.
    within(sxx / nf, c.s1, (2.0 * c.s1 * c.s1 / nf).sqrt(), "Var x");
    within(sxv / nf, c.s2, ((c.s1 * c.s3 + c.s2 * c.s2) / nf).sqrt(), "Cov x v");
    within(svv / nf, c.s3, (2.0 * c.s3 * c.s3 / nf).sqrt(), "Var v");
}
