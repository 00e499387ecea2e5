use cfm_core::metrics::*;
use ndarray::{array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cloud(n: usize, d: usize, seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn sinkhorn(a: &Array2<f64>, b: &Array2<f64>, cfg: &SinkhornConfig) -> SinkhornResult {
    sinkhorn_distance(CloudPair::new(a.view(), b.view()).unwrap(), cfg).unwrap()
}

fn with_eps(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        epsilon,
        ..Default::default()
    }
}

#[test]
fn self_transport_is_cheapest() {
    let a = cloud(100, 2, 1, 0.5);
    let shifted = &a + &array![[0.3, 0.0]];
    let cfg = SinkhornConfig::default();
    let same = sinkhorn(&a, &a, &cfg);
    let moved = sinkhorn(&a, &shifted, &cfg);
    // Near-diagonal plans converge slowly at this epsilon; the value settles long before the marginals.
    assert!(
        same.value <= cfg.epsilon * (100f64).ln(),
        "self distance {}",
        same.value
    );
    assert!(same.value < moved.value);
}

#[test]
fn symmetric_in_its_arguments() {
    let a = cloud(80, 2, 2, 1.0);
    let b = cloud(60, 2, 3, 0.7);
    let cfg = SinkhornConfig {
        epsilon: 0.05,
        convergence_tol: 1e-14,
        max_iters: 20_000,
    };
    let ab = sinkhorn(&a, &b, &cfg).value;
    let ba = sinkhorn(&b, &a, &cfg).value;
    assert!((ab - ba).abs() < 1e-10, "{ab} vs {ba}");
}

#[test]
fn invariant_to_common_translation() {
    let a = cloud(70, 3, 4, 1.0);
    let b = cloud(90, 3, 5, 1.0);
    let v = array![[2.0, -1.0, 0.5]];
    let cfg = with_eps(0.05);
    let d0 = sinkhorn(&a, &b, &cfg).value;
    let d1 = sinkhorn(&(&a + &v), &(&b + &v), &cfg).value;
    assert!((d0 - d1).abs() < 1e-8, "{d0} vs {d1}");
}

#[test]
fn translate_cost_approaches_squared_shift() {
    let a = cloud(60, 2, 6, 1.0);
    let v = array![[0.4, -0.3]];
    let b = &a + &v;
    let target = 0.25;
    let mut prev = f64::INFINITY;
    for eps in [0.1, 0.01, 0.001] {
        let d = sinkhorn(&a, &b, &with_eps(eps)).value;
        assert!(
            d >= target - 1e-9,
            "eps {eps}: {d} below the unregularized optimum"
        );
        assert!(d <= prev, "eps {eps}: {d} > {prev}");
        prev = d;
    }
    assert!((prev - target).abs() < 1e-3, "eps 0.001: {prev}");
}

#[test]
fn finite_on_wide_clouds_with_small_epsilon() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Array2::from_shape_simple_fn((50, 2), || rng.random_range(-10.0..10.0));
    let b = Array2::from_shape_simple_fn((40, 2), || rng.random_range(-10.0..10.0));
    let r = sinkhorn(&a, &b, &with_eps(1e-3));
    assert!(r.value.is_finite());
    assert!(r.value > 0.0);
}

/// Textbook log-domain Sinkhorn at fixed epsilon, no scaling or absorption.
fn log_domain_oracle(a: &Array2<f64>, b: &Array2<f64>, eps: f64, tol: f64) -> f64 {
    let (m, n) = (a.nrows(), b.nrows());
    let c = Array2::from_shape_fn((m, n), |(i, j)| {
        (&a.row(i) - &b.row(j)).mapv(|v| v * v).sum()
    });
    let lse = |t: &mut dyn Iterator<Item = f64>| {
        let t: Vec<f64> = t.collect();
        let mx = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        mx + t.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let (mut f, mut g) = (vec![0.0; m], vec![0.0; n]);
    let plan = |f: &[f64], g: &[f64]| {
        Array2::from_shape_fn((m, n), |(i, j)| ((f[i] + g[j] - c[[i, j]]) / eps).exp())
    };
    for _ in 0..200_000 {
        for i in 0..m {
            f[i] = -eps * ((m as f64).ln() + lse(&mut (0..n).map(|j| (g[j] - c[[i, j]]) / eps)));
        }
        for j in 0..n {
            g[j] = -eps * ((n as f64).ln() + lse(&mut (0..m).map(|i| (f[i] - c[[i, j]]) / eps)));
        }
        let p = plan(&f, &g);
        if p.sum_axis(Axis(1))
            .iter()
            .all(|r| (r - 1.0 / m as f64).abs() < tol)
        {
            return (&p * &c).sum();
        }
    }
    panic!("oracle did not converge");
}

#[test]
fn matches_log_domain_oracle() {
    let mut dup = cloud(30, 2, 21, 0.5);
    for i in 0..10 {
        let row = dup.row(i).to_owned();
        dup.row_mut(29 - i).assign(&row);
    }
    let cases = [
        (cloud(25, 2, 20, 1.0), cloud(40, 2, 22, 0.6), 0.05),
        (dup.clone(), cloud(45, 2, 23, 0.5), 0.01),
        (
            dup.clone(),
            dup.select(Axis(0), &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2, 3, 4]),
            0.1,
        ),
    ];
    for (k, (a, b, eps)) in cases.iter().enumerate() {
        let cfg = SinkhornConfig {
            epsilon: *eps,
            max_iters: 200_000,
            convergence_tol: 1e-12,
        };
        let r = sinkhorn(a, b, &cfg);
        assert!(r.converged, "case {k}: {r:?}");
        let want = log_domain_oracle(a, b, *eps, 1e-12);
        assert!(
            (r.value - want).abs() <= 1e-7 * want.max(1e-3),
            "case {k}: {} vs oracle {want}",
            r.value
        );
    }
}

#[test]
fn non_convergence_is_reported() {
    let a = cloud(50, 1, 8, 1.0);
    let b = cloud(50, 1, 9, 1.0);
    let cfg = SinkhornConfig {
        epsilon: 1e-3,
        max_iters: 2,
        convergence_tol: 1e-15,
    };
    let r = sinkhorn(&a, &b, &cfg);
    assert!(!r.converged);
    assert_eq!(r.iterations, 2);
}

#[test]
fn baseline_examples() {
    let twin = array![[0.5, 0.5], [0.5, 0.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SinkhornConfig::default();
    assert!(
        self_distance_baseline(twin.view(), 1, 3, &cfg, &mut rng)
            .unwrap()
            .value
            .abs()
            < 1e-15
    );
    let c = cloud(200, 2, 10, 1.0);
    assert!(
        self_distance_baseline(c.view(), 50, 2, &cfg, &mut rng)
            .unwrap()
            .value
            >= 0.0
    );
    assert!(self_distance_baseline(c.view(), 101, 1, &cfg, &mut rng).is_err());
}

#[test]
fn kde_integrates_to_one() {
    let s: Vec<f64> = cloud(500, 1, 11, 1.0).iter().copied().collect();
    let grid = linspace(-10.0, 10.0, 4001);
    let r = kde_1d(&s, &grid, Bandwidth::Silverman).unwrap();
    let h = grid[1] - grid[0];
    let integral: f64 = r.density.windows(2).map(|w| 0.5 * (w[0] + w[1]) * h).sum();
    assert!((integral - 1.0).abs() < 1e-3, "{integral}");
}

#[test]
fn kde_consistent_for_standard_normal() {
    let s: Vec<f64> = cloud(1_000_000, 1, 12, 1.0).iter().copied().collect();
    let r = kde_1d(&s, &[0.0], Bandwidth::Silverman).unwrap();
    let exact = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    assert!((r.density[0] - exact).abs() < 0.02 * exact);
}

#[test]
fn kde_ignores_sample_order() {
    let s: Vec<f64> = cloud(300, 1, 13, 1.0).iter().copied().collect();
    let mut rev = s.clone();
    rev.reverse();
    let grid = linspace(-3.0, 3.0, 61);
    let a = kde_1d(&s, &grid, Bandwidth::Silverman).unwrap();
    let b = kde_1d(&rev, &grid, Bandwidth::Silverman).unwrap();
    assert!((a.bandwidth - b.bandwidth).abs() <= 1e-12 * a.bandwidth);
    for (p, q) in a.density.iter().zip(&b.density) {
        assert!((p - q).abs() <= 1e-12 * p.abs().max(1e-300));
    }
}

#[test]
fn stats_ignore_row_order() {
    let c = cloud(40, 3, 14, 2.0);
    let perm: Vec<usize> = (0..40).rev().collect();
    let (m1, s1) = ensemble_stats(c.view()).unwrap();
    let (m2, s2) = ensemble_stats(c.select(Axis(0), &perm).view()).unwrap();
    for k in 0..3 {
        assert!((m1[k] - m2[k]).abs() < 1e-14);
        assert!((s1[k] - s2[k]).abs() < 1e-14);
    }
}

proptest::proptest! {
    #[test]
    fn rmse_is_homogeneous(
        pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..20),
        c in -10.0f64..10.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let base = rmse(&a, &b).unwrap();
        let ca: Vec<f64> = a.iter().map(|v| c * v).collect();
        let cb: Vec<f64> = b.iter().map(|v| c * v).collect();
        let scaled = rmse(&ca, &cb).unwrap();
        proptest::prop_assert!((scaled - c.abs() * base).abs() <= 1e-9 * (1.0 + scaled));
        proptest::prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    }
}
