//! Dormand–Prince 5(4) integration of the probability-flow ODE and the
//! posterior-sampling driver built on it.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::net::{Mlp, Scratch};
use crate::train::Normalizer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub t_end: f64,
    pub max_steps: usize,
    /// Initial trial step.
    pub h_init: f64,
    /// Forces constant steps of this size with no error control (order studies).
    #[serde(default)]
    pub fixed_step: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-3,
            atol: 1e-6,
            t_end: 1.0,
            max_steps: 10_000,
            h_init: 1e-2,
            fixed_step: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rtol > 0.0
            && self.atol > 0.0
            && self.t_end > 0.0
            && self.t_end <= 1.0
            && self.max_steps >= 1
            && self.h_init > 0.0
            && self.fixed_step.is_none_or(|h| h > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid solver config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeSolveResult {
    pub x_final: Vec<f64>,
    /// Accepted steps.
    pub n_steps: usize,
    pub rejected_steps: usize,
    /// Sum of Euclidean norms of the accepted displacements.
    pub path_length: f64,
}

// Dormand–Prince coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
// Fifth-order weights (also row 7 of the tableau, so the last stage is FSAL).
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Fifth minus embedded fourth order.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y5: Vec<f64>,
}

impl Stages {
    fn new(d: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; d]),
            tmp: vec![0.0; d],
            y5: vec![0.0; d],
        }
    }
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite velocity at t = {t}")))
    }
}

/// One Dormand–Prince step from `(t, y)` with `k[0] = f(t, y)` already filled.
/// Leaves the fifth-order solution in `s.y5` and `f(t + h, y5)` in `k[6]`.
fn dp_step<F>(field: &mut F, t: f64, y: &[f64], h: f64, s: &mut Stages) -> Result<()>
where
    F: FnMut(&[f64], f64, &mut [f64]),
{
    let d = y.len();
    let rows: [(f64, &[f64]); 5] = [
        (C2, &[A21]),
        (C3, &[A31, A32]),
        (C4, &[A41, A42, A43]),
        (C5, &[A51, A52, A53, A54]),
        (1.0, &[A61, A62, A63, A64, A65]),
    ];
    for (stage, (c, a)) in rows.iter().enumerate() {
        for i in 0..d {
            let mut acc = 0.0;
            for (j, aij) in a.iter().enumerate() {
                acc += aij * s.k[j][i];
            }
            s.tmp[i] = y[i] + h * acc;
        }
        let tc = t + c * h;
        let (done, rest) = s.k.split_at_mut(stage + 1);
        let _ = done;
        field(&s.tmp, tc, &mut rest[0]);
        check_finite(&rest[0], tc)?;
    }
    for i in 0..d {
        s.y5[i] = y[i]
            + h * (B1 * s.k[0][i]
                + B3 * s.k[2][i]
                + B4 * s.k[3][i]
                + B5 * s.k[4][i]
                + B6 * s.k[5][i]);
    }
    let (head, tail) = s.k.split_at_mut(6);
    let _ = head;
    field(&s.y5, t + h, &mut tail[0]);
    check_finite(&tail[0], t + h)
}

fn error_norm(y: &[f64], s: &Stages, h: f64, rtol: f64, atol: f64) -> f64 {
    let d = y.len();
    let mut acc = 0.0;
    for i in 0..d {
        let e = h
            * (E1 * s.k[0][i]
                + E3 * s.k[2][i]
                + E4 * s.k[3][i]
                + E5 * s.k[4][i]
                + E6 * s.k[5][i]
                + E7 * s.k[6][i]);
        let scale = atol + rtol * y[i].abs().max(s.y5[i].abs());
        acc += (e / scale) * (e / scale);
    }
    (acc / d as f64).sqrt()
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `cfg.t_end`.
///
/// Steps are accepted when the RMS of the scaled embedded error is at most 1;
/// the next step is `h * min(5, max(0.2, 0.9 err^(-1/5)))`.
pub fn rk45_integrate<F>(mut field: F, x0: &[f64], cfg: &SolverConfig) -> Result<OdeSolveResult>
where
    F: FnMut(&[f64], f64, &mut [f64]),
{
    cfg.validate()?;
    let d = x0.len();
    if d == 0 {
        return Err(Error::InvalidArgument("empty initial state".into()));
    }
    let mut y = x0.to_vec();
    let mut t = 0.0;
    let mut s = Stages::new(d);
    field(&y, t, &mut s.k[0]);
    check_finite(&s.k[0], t)?;

    let mut n_steps = 0;
    let mut rejected = 0;
    let mut path = 0.0;
    let mut h = cfg.fixed_step.unwrap_or(cfg.h_init);
    let t_end = cfg.t_end;

    while t < t_end {
        if n_steps + rejected >= cfg.max_steps {
            return Err(Error::NonConvergence {
                max_steps: cfg.max_steps,
                t_reached: t,
                partial: y,
            });
        }
        let last = t + h >= t_end * (1.0 - 1e-12);
        let h_try = if last { t_end - t } else { h };
        dp_step(&mut field, t, &y, h_try, &mut s)?;

        let accept = match cfg.fixed_step {
            Some(_) => true,
            None => {
                let err = error_norm(&y, &s, h_try, cfg.rtol, cfg.atol);
                let factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
                };
                if err <= 1.0 {
                    h = h_try * factor;
                    true
                } else {
                    h = h_try * factor.min(1.0);
                    rejected += 1;
                    false
                }
            }
        };
        if accept {
            let step_len: f64 = y
                .iter()
                .zip(&s.y5)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt();
            path += step_len;
            y.copy_from_slice(&s.y5);
            t = if last { t_end } else { t + h_try };
            n_steps += 1;
            let (first, rest) = s.k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
        }
    }
    Ok(OdeSolveResult {
        x_final: y,
        n_steps,
        rejected_steps: rejected,
        path_length: path,
    })
}

/// Where the ODE initial states come from at sampling time.
#[derive(Debug, Clone, Copy)]
pub enum InitialStates<'a> {
    /// Standard normal in normalized coordinates.
    Gaussian,
    /// Rows drawn without replacement from a pool of prior samples in physical units.
    PriorPool(ArrayView2<'a, f64>),
}

/// Generated conditional samples for one measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEnsemble {
    /// `M x d` samples in physical units.
    pub samples: Array2<f64>,
    pub y_condition: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased standard deviation; zeros when `M = 1`.
    pub std: Vec<f64>,
    pub avg_n_steps: f64,
    pub avg_rejected_steps: f64,
    /// Mean path length in normalized coordinates.
    pub avg_path_length: f64,
    /// `(sample index, error)` for trajectories that failed and were dropped.
    pub failures: Vec<(usize, String)>,
}

/// Per-column mean and unbiased standard deviation with a fixed summation order.
pub(crate) fn column_stats(samples: ArrayView2<f64>) -> (Vec<f64>, Vec<f64>) {
    let m = samples.nrows() as f64;
    let mean: Vec<f64> = samples.columns().into_iter().map(|c| c.sum() / m).collect();
    let std = if samples.nrows() < 2 {
        vec![0.0; samples.ncols()]
    } else {
        samples
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, mu)| (c.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m - 1.0)).sqrt())
            .collect()
    };
    (mean, std)
}

/// Draws `m` samples of `x | y = y_hat` by transporting initial states through
/// the learned probability-flow ODE.
///
/// Initial states are drawn up front from a generator seeded with `seed`, so
/// the trajectories are independent of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn sample_posterior(
    mlp: &Mlp,
    params: &[f64],
    normalizer: &Normalizer,
    y_hat: &[f64],
    source: InitialStates<'_>,
    m: usize,
    cfg: &SolverConfig,
    seed: u64,
) -> Result<PosteriorEnsemble> {
    let net = mlp.config();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "number of samples must be positive".into(),
        ));
    }
    check_dim(net.cond_dim, y_hat.len(), "measurement")?;
    check_dim(net.param_count(), params.len(), "parameter count")?;
    cfg.validate()?;
    let d = net.state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Array2<f64> = match source {
        InitialStates::Gaussian => {
            Array2::from_shape_simple_fn((m, d), || StandardNormal.sample(&mut rng))
        }
        InitialStates::PriorPool(pool) => {
            check_dim(d, pool.ncols(), "prior pool dimension")?;
            if pool.nrows() < m {
                return Err(Error::InvalidArgument(format!(
                    "prior pool has {} rows, {m} samples requested",
                    pool.nrows()
                )));
            }
            let idx = rand::seq::index::sample(&mut rng, pool.nrows(), m).into_vec();
            normalizer.apply_x_rows(pool.select(ndarray::Axis(0), &idx).view())
        }
    };
    let y_norm = normalizer.apply_y(y_hat);

    let results: Vec<Result<OdeSolveResult>> = (0..m)
        .into_par_iter()
        .map_init(Scratch::default, |scratch, i| {
            let x0 = starts.row(i).to_vec();
            rk45_integrate(
                |xi, t, out| {
                    mlp.forward_one(params, xi, &y_norm, t, scratch, out)
                        .expect("dimensions validated");
                },
                &x0,
                cfg,
            )
        })
        .collect();

    let mut rows = Vec::with_capacity(m * d);
    let mut failures = Vec::new();
    let (mut steps, mut rej, mut path) = (0.0, 0.0, 0.0);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(sol) => {
                rows.extend(normalizer.invert_x(&sol.x_final));
                steps += sol.n_steps as f64;
                rej += sol.rejected_steps as f64;
                path += sol.path_length;
            }
            Err(e) => failures.push((i, e.to_string())),
        }
    }
    let ok = m - failures.len();
    if ok == 0 {
        return Err(Error::Numeric(format!(
            "all {m} trajectories failed; first: {}",
            failures[0].1
        )));
    }
    if !failures.is_empty() {
        log::warn!(
            "{} of {m} trajectories failed and were dropped",
            failures.len()
        );
    }
    let samples = Array2::from_shape_vec((ok, d), rows).expect("row-major samples");
    let (mean, std) = column_stats(samples.view());
    let n = ok as f64;
    Ok(PosteriorEnsemble {
        samples,
        y_condition: y_hat.to_vec(),
        mean,
        std,
        avg_n_steps: steps / n,
        avg_rejected_steps: rej / n,
        avg_path_length: path / n,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, MlpConfig, ParameterArray};
    use approx::assert_abs_diff_eq;

    #[test]
    fn constant_field_is_exact() {
        let r = rk45_integrate(|_, _, out| out[0] = 1.0, &[0.0], &SolverConfig::default()).unwrap();
        assert_abs_diff_eq!(r.x_final[0], 1.0, epsilon = 1e-14);
        // Trial steps 0.01, 0.05, 0.25, then the clipped remainder.
        assert_eq!(r.n_steps, 4, "{r:?}");
        assert_abs_diff_eq!(r.path_length, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn exponential_decay_within_tolerance() {
        let cfg = SolverConfig::default();
        let r = rk45_integrate(|x, _, out| out[0] = -x[0], &[1.0], &cfg).unwrap();
        assert!((r.x_final[0] - (-1.0f64).exp()).abs() <= 10.0 * cfg.rtol);
    }

    #[test]
    fn tighter_tolerance_never_worse() {
        let exact = (-1.0f64).exp();
        let mut prev: Option<(f64, usize)> = None;
        for rtol in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7] {
            let cfg = SolverConfig {
                rtol,
                atol: rtol * 1e-3,
                ..Default::default()
            };
            let r = rk45_integrate(|x, _, out| out[0] = -x[0], &[1.0], &cfg).unwrap();
            let err = (r.x_final[0] - exact).abs();
            if let Some((pe, ps)) = prev {
                assert!(err <= pe, "rtol {rtol}: {err} > {pe}");
                assert!(r.n_steps >= ps);
            }
            prev = Some((err, r.n_steps));
        }
    }

    #[test]
    fn max_steps_reports_partial_state() {
        let cfg = SolverConfig {
            max_steps: 2,
            fixed_step: Some(0.1),
            ..Default::default()
        };
        match rk45_integrate(|_, _, out| out[0] = 1.0, &[0.0], &cfg) {
            Err(Error::NonConvergence {
                t_reached, partial, ..
            }) => {
                assert_abs_diff_eq!(t_reached, 0.2, epsilon = 1e-12);
                assert_abs_diff_eq!(partial[0], 0.2, epsilon = 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_field_is_numeric_error() {
        let r = rk45_integrate(
            |_, t, out| out[0] = if t > 0.5 { f64::NAN } else { 1.0 },
            &[0.0],
            &SolverConfig::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn periodic_forcing_order() {
        // dx/dt = cos(2πt): exact displacement over [0, 1] is zero.
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h| {
                let cfg = SolverConfig {
                    fixed_step: Some(h),
                    ..Default::default()
                };
                let r = rk45_integrate(
                    |_, t, out| out[0] = (2.0 * std::f64::consts::PI * t).cos(),
                    &[0.0],
                    &cfg,
                )
                .unwrap();
                r.x_final[0].abs()
            })
            .collect();
        // Either already at roundoff or shrinking at least as fast as h^5.
        for w in errs.windows(2) {
            assert!(w[1] < 1e-13 || w[0] / w[1] >= 20.0, "{errs:?}");
        }
    }

    #[test]
    fn zero_model_is_identity_flow() {
        let cfg = MlpConfig {
            state_dim: 2,
            cond_dim: 1,
            hidden_width: 4,
            hidden_layers: 1,
            activation: Activation::Relu,
        };
        let mlp = Mlp::new(cfg).unwrap();
        let params = ParameterArray::zeros(&cfg);
        let norm = Normalizer {
            x_min: vec![0.0, -2.0],
            x_max: vec![4.0, 2.0],
            y_min: vec![0.0],
            y_max: vec![1.0],
            warnings: vec![],
        };
        let pool = ndarray::array![[1.0, 0.5]];
        let e = sample_posterior(
            &mlp,
            &params.values,
            &norm,
            &[0.3],
            InitialStates::PriorPool(pool.view()),
            1,
            &SolverConfig::default(),
            4,
        )
        .unwrap();
        assert_abs_diff_eq!(e.samples[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.samples[[0, 1]], 0.5, epsilon = 1e-12);
        assert!(sample_posterior(
            &mlp,
            &params.values,
            &norm,
            &[0.3],
            InitialStates::PriorPool(pool.view()),
            2,
            &SolverConfig::default(),
            4
        )
        .is_err());
        assert!(sample_posterior(
            &mlp,
            &params.values,
            &norm,
            &[0.3],
            InitialStates::Gaussian,
            0,
            &SolverConfig::default(),
            4
        )
        .is_err());
    }

    proptest::proptest! {
        #[test]
        fn path_length_bounds_displacement(x0 in -3.0f64..3.0, a in -2.0f64..2.0, w in 0.5f64..6.0) {
            let r = rk45_integrate(|x, t, out| out[0] = a * x[0] + (w * t).sin(), &[x0], &SolverConfig::default()).unwrap();
            proptest::prop_assert!(r.path_length + 1e-12 >= (r.x_final[0] - x0).abs());
            let again = rk45_integrate(|x, t, out| out[0] = a * x[0] + (w * t).sin(), &[x0], &SolverConfig::default()).unwrap();
            proptest::prop_assert_eq!(r, again);
        }
    }
}
