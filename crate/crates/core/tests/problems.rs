use std::f64::consts::PI;

use cfm_core::metrics::{
    normalize_like, self_distance_baseline, sinkhorn_distance, CloudPair, SinkhornConfig,
};
use cfm_core::problems::*;
use cfm_core::Split;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn toy_measurement_variance() {
    let spec = Toy1dSpec::default();
    let d = toy1d_generate(
        &spec,
        1_000_000,
        Split::Train,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let y = d.y.column(0);
    let mean = y.sum() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
    let expected = 1.0 / 3.0 + 0.0625;
    assert!((var - expected).abs() < 0.01 * expected, "var {var}");
    assert!(d.x.iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn toy_posterior_normalizes_and_matches_quadrature_moments() {
    let spec = Toy1dSpec::default();
    for y_hat in [-1.0, 0.0, 0.6, 1.0] {
        let mass = simpson(|x| toy1d_posterior_pdf(&spec, x, y_hat), -1.0, 1.0, 20_000);
        assert!((mass - 1.0).abs() < 1e-8, "y_hat {y_hat}: mass {mass}");
        let mean = simpson(
            |x| x * toy1d_posterior_pdf(&spec, x, y_hat),
            -1.0,
            1.0,
            20_000,
        );
        let second = simpson(
            |x| x * x * toy1d_posterior_pdf(&spec, x, y_hat),
            -1.0,
            1.0,
            20_000,
        );
        let (m, s) = toy1d_posterior_moments(&spec, y_hat);
        assert!((m - mean).abs() < 1e-9, "y_hat {y_hat}: mean {m} vs {mean}");
        assert!((s - (second - mean * mean).sqrt()).abs() < 1e-9);
    }
    let (m, s) = toy1d_posterior_moments(&spec, 0.6);
    assert!(m < 0.6);
    assert!(s > 0.2 && s < 0.25, "std {s}");
}

#[test]
fn spiral_envelope_and_moments() {
    let spec = SpiralSpec::default();
    let n = 1_000_000;
    let d = spiral_generate(&spec, n, Split::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    // Replay the same draws to recover W and the noise terms.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..n {
        let h: f64 = rng.random();
        let w = 1.5 * PI * (1.0 + 2.0 * h);
        let c3: f64 = rng.sample(StandardNormal);
        let _c4: f64 = rng.sample(StandardNormal);
        assert!((1.5 * PI..=4.5 * PI).contains(&w));
        assert!(d.x[[i, 0]].abs() <= 0.1 * (w + c3.abs()) + 1e-12);
    }
    // E[W sin W] = 2 / (3 pi) and E[W cos W] = 2 for W ~ U(1.5 pi, 4.5 pi).
    let ex = 0.1 * 2.0 / (3.0 * PI);
    let ey = 0.1 * 2.0;
    for (col, exact) in [(d.x.column(0), ex), (d.y.column(0), ey)] {
        let mean = col.sum() / n as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(
            (mean - exact).abs() < 3.0 * sd / (n as f64).sqrt(),
            "mean {mean} vs {exact}"
        );
    }
}

#[test]
fn spiral_reference_at_zero_is_multimodal() {
    let pool = spiral_generate(
        &SpiralSpec::default(),
        100_000,
        Split::Test,
        &mut ChaCha8Rng::seed_from_u64(3),
    )
    .unwrap();
    let x = spiral_reference_conditional(&pool, 0.0, 0.1).unwrap();
    assert!(x.nrows() > 1000);
    let pos = x.iter().filter(|v| **v > 0.0).count();
    assert!(pos > x.nrows() / 10 && pos < 9 * x.nrows() / 10);
}

#[test]
fn observation_noise_variance() {
    let spec = Lorenz63Spec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 1_000_000;
    let obs: Vec<f64> = (0..n)
        .map(|_| lorenz_observe(&spec, &[1.0, 2.0, 3.0], Some(&mut rng)))
        .collect();
    let mean = obs.iter().sum::<f64>() / n as f64;
    let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((var - 0.25).abs() < 0.0025, "var {var}");
}

#[test]
fn noiseless_trajectory_is_bit_reproducible() {
    let spec = Lorenz63Spec::default();
    let run = || {
        let mut s = spec.x0;
        for _ in 0..1000 {
            s = lorenz_euler_step::<ChaCha8Rng>(&spec, &s, None).unwrap();
        }
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
}

#[test]
fn seeded_noise_is_reproducible() {
    let spec = Lorenz63Spec::default();
    let step = |seed| {
        lorenz_euler_step(
            &spec,
            &[1.0, 1.0, 1.0],
            Some(&mut ChaCha8Rng::seed_from_u64(seed)),
        )
        .unwrap()
    };
    assert_eq!(step(7), step(7));
    assert_ne!(step(7), step(8));
}

#[test]
fn sir_posterior_weights_are_uniform_simplex() {
    let spec = Lorenz63Spec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let init = Array2::from_shape_simple_fn((3000, 3), || rng.sample(StandardNormal));
    let steps = sir_filter(&spec, &[1.0, 2.0], init, 10).unwrap();
    for s in &steps {
        assert!((s.importance_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.importance_weights.iter().all(|w| *w >= 0.0));
        assert!(s.posterior.weights.iter().all(|w| *w == 1.0 / 3000.0));
        assert!((s.posterior.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.effective_sample_size <= 3000.0 + 1e-9);
    }
}

/// Mean prior-to-posterior Sinkhorn distance after one cycle and the prior's
/// self-distance baseline, both on prior-normalized coordinates.
fn prior_posterior_gap(obs_noise_std: f64) -> (f64, f64) {
    let spec = Lorenz63Spec {
        obs_noise_std,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let init = Array2::from_shape_simple_fn((4000, 3), || rng.sample(StandardNormal));
    let steps = sir_filter(&spec, &[0.5], init, 12).unwrap();
    let prior = normalize_like(
        steps[0].prior.particles.view(),
        steps[0].prior.particles.view(),
    );
    let post = normalize_like(
        steps[0].posterior.particles.view(),
        steps[0].prior.particles.view(),
    );
    let cfg = SinkhornConfig::default();
    let repeats = 3;
    let mut d = 0.0;
    for _ in 0..repeats {
        let ia = rand::seq::index::sample(&mut rng, 4000, 1000).into_vec();
        let ib = rand::seq::index::sample(&mut rng, 4000, 1000).into_vec();
        let a = prior.select(ndarray::Axis(0), &ia);
        let b = post.select(ndarray::Axis(0), &ib);
        d += sinkhorn_distance(CloudPair::new(a.view(), b.view()).unwrap(), &cfg)
            .unwrap()
            .value
            / repeats as f64;
    }
    let baseline = self_distance_baseline(prior.view(), 1000, repeats, &cfg, &mut rng)
        .unwrap()
        .value;
    (d, baseline)
}

#[test]
fn flat_likelihood_leaves_prior_unchanged() {
    // Resampling duplicates a few particles even under near-uniform weights,
    // which lifts the distance slightly above the baseline.
    let (d, baseline) = prior_posterior_gap(50.0);
    assert!(d < 1.15 * baseline, "distance {d}, baseline {baseline}");
    let (d, baseline) = prior_posterior_gap(0.5);
    assert!(
        d > 2.0 * baseline,
        "informative observation: distance {d}, baseline {baseline}"
    );
}

#[test]
fn third_cycle_posterior_is_bimodal() {
    let p = build_da_problem(&Lorenz63Spec::default(), &DaConfig::default(), 2024).unwrap();
    assert_eq!(p.train.len(), 1000);
    assert_eq!(p.test.len(), 500);
    assert_eq!(p.reference.nrows(), 100_000);
    let pos = p.reference.column(0).iter().filter(|v| **v > 0.0).count() as f64 / 1e5;
    assert!(pos > 0.1 && pos < 0.9, "positive fraction {pos}");
    // Training measurements are noisy copies of the third state component.
    let resid: Vec<f64> = (0..1000)
        .map(|i| p.train.y[[i, 0]] - p.train.x[[i, 2]])
        .collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / 1000.0;
    assert!((var - 0.25).abs() < 0.06, "residual variance {var}");
}
