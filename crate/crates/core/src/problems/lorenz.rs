use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{PairedDataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz63Spec {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    /// Per-component standard deviation of the isotropic process noise.
    pub process_noise_std: f64,
    pub obs_noise_std: f64,
    pub steps_per_observation: usize,
    /// Initial state of the truth trajectory.
    pub x0: [f64; 3],
}

impl Default for Lorenz63Spec {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            process_noise_std: 0.01,
            obs_noise_std: 0.5,
            steps_per_observation: 10,
            x0: [-1.27323174, -0.00702107, 0.74486393],
        }
    }
}

impl Lorenz63Spec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.process_noise_std >= 0.0
            && self.obs_noise_std > 0.0
            && self.steps_per_observation >= 1
            && [
                self.sigma,
                self.rho,
                self.beta,
                self.dt,
                self.process_noise_std,
                self.obs_noise_std,
            ]
            .iter()
            .chain(self.x0.iter())
            .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid Lorenz-63 spec {self:?}"
            )))
        }
    }
}

pub fn lorenz_drift(spec: &Lorenz63Spec, s: &[f64; 3]) -> [f64; 3] {
    [
        spec.sigma * (s[1] - s[0]),
        s[0] * (spec.rho - s[2]) - s[1],
        s[0] * s[1] - spec.beta * s[2],
    ]
}

/// One forward-Euler step; `noise = None` gives the deterministic map.
pub fn lorenz_euler_step<R: Rng + ?Sized>(
    spec: &Lorenz63Spec,
    state: &[f64; 3],
    noise: Option<&mut R>,
) -> Result<[f64; 3]> {
    let f = lorenz_drift(spec, state);
    let mut next = [0.0; 3];
    for k in 0..3 {
        next[k] = state[k] + spec.dt * f[k];
    }
    if let Some(rng) = noise {
        for v in next.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.process_noise_std * e;
        }
    }
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::Numeric(format!(
            "Lorenz step from {state:?} is not finite"
        )))
    }
}

/// `x3 + N(0, obs_noise_std^2)`, or exactly `x3` when `noise` is `None`.
pub fn lorenz_observe<R: Rng + ?Sized>(
    spec: &Lorenz63Spec,
    state: &[f64; 3],
    noise: Option<&mut R>,
) -> f64 {
    match noise {
        Some(rng) => {
            let e: f64 = rng.sample(StandardNormal);
            state[2] + spec.obs_noise_std * e
        }
        None => state[2],
    }
}

/// Weighted particle approximation of a distribution on R^3.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    /// `P x 3`.
    pub particles: Array2<f64>,
    pub weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn uniform(particles: Array2<f64>) -> Result<Self> {
        let p = particles.nrows();
        if p == 0 || particles.ncols() != 3 {
            return Err(Error::InvalidArgument(format!(
                "particle array must be P x 3 with P >= 1, got {:?}",
                particles.dim()
            )));
        }
        Ok(Self {
            particles,
            weights: vec![1.0 / p as f64; p],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One assimilation cycle of the SIR filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SirStep {
    pub observation: f64,
    /// Propagated particles with uniform weights.
    pub prior: ParticleEnsemble,
    /// Normalized likelihood weights of the prior particles.
    pub importance_weights: Vec<f64>,
    pub effective_sample_size: f64,
    /// Resampled particles with uniform weights.
    pub posterior: ParticleEnsemble,
}

/// Indices drawn by systematic resampling at offset `u0 ∈ [0, 1)`: point
/// `(u0 + i) / P` selects the particle whose cumulative-weight interval
/// `[c_{j-1}, c_j)` contains it.
///
/// With equal weights every index is returned exactly once.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let p = weights.len();
    let mut idx = Vec::with_capacity(p);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..p {
        let u = (u0 + i as f64) / p as f64;
        while u >= cum && j + 1 < p {
            j += 1;
            cum += weights[j];
        }
        idx.push(j);
    }
    idx
}

/// Particles per independently seeded propagation chunk.
const CHUNK: usize = 4096;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Generator streams derived from the filter seed.
const STREAM_INIT: u64 = 1;
const STREAM_RESAMPLE: u64 = 2;
const STREAM_TRUTH: u64 = 3;
const STREAM_PAIRS: u64 = 4;
const STREAM_PROPAGATE: u64 = 1 << 32;

fn propagate(
    spec: &Lorenz63Spec,
    particles: &mut Array2<f64>,
    seed: u64,
    cycle: usize,
) -> Result<()> {
    let chunks: Vec<_> = particles.axis_chunks_iter_mut(Axis(0), CHUNK).collect();
    chunks
        .into_par_iter()
        .enumerate()
        .try_for_each(|(c, mut chunk)| {
            let mut rng = stream_rng(seed, STREAM_PROPAGATE + ((cycle as u64) << 20) + c as u64);
            for mut row in chunk.rows_mut() {
                let mut s = [row[0], row[1], row[2]];
                for _ in 0..spec.steps_per_observation {
                    s = lorenz_euler_step(spec, &s, Some(&mut rng))?;
                }
                row.assign(&ndarray::aview1(&s));
            }
            Ok(())
        })
}

/// Runs the SIR filter from `initial` (uniformly weighted) through one cycle
/// per observation: propagate `steps_per_observation` noisy Euler steps,
/// weight by the Gaussian observation likelihood, resample systematically.
///
/// Propagation noise comes from per-chunk generators derived from `seed`, so
/// results do not depend on the thread count.
pub fn sir_filter(
    spec: &Lorenz63Spec,
    observations: &[f64],
    initial: Array2<f64>,
    seed: u64,
) -> Result<Vec<SirStep>> {
    spec.validate()?;
    let mut current = ParticleEnsemble::uniform(initial)?;
    let mut resample_rng = stream_rng(seed, STREAM_RESAMPLE);
    let mut out = Vec::with_capacity(observations.len());
    for (cycle, &obs) in observations.iter().enumerate() {
        let mut particles = current.particles;
        propagate(spec, &mut particles, seed, cycle)?;
        let prior = ParticleEnsemble::uniform(particles)?;

        let inv = 1.0 / spec.obs_noise_std;
        let logw: Vec<f64> = prior
            .particles
            .column(2)
            .iter()
            .map(|x3| -0.5 * ((obs - x3) * inv).powi(2))
            .collect();
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::DegenerateFilter { step: cycle + 1 });
        }
        w.iter_mut().for_each(|v| *v /= total);
        let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();

        let u0: f64 = resample_rng.random();
        let idx = systematic_resample(&w, u0);
        let posterior = ParticleEnsemble::uniform(prior.particles.select(Axis(0), &idx))?;
        out.push(SirStep {
            observation: obs,
            prior,
            importance_weights: w,
            effective_sample_size: ess,
            posterior: posterior.clone(),
        });
        current = posterior;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaConfig {
    pub particles: usize,
    /// Assimilation cycle whose prior/posterior define the inverse problem.
    pub cycles: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            particles: 100_000,
            cycles: 3,
            n_train: 1000,
            n_test: 500,
        }
    }
}

/// The one-step data-assimilation inverse problem and its SIR reference.
#[derive(Debug, Clone)]
pub struct DaProblem {
    pub train: PairedDataset,
    pub test: PairedDataset,
    /// SIR posterior particles at the final cycle.
    pub reference: Array2<f64>,
    /// Prior particles at the final cycle not used for training or testing.
    pub prior_pool: Array2<f64>,
    pub y_hat: f64,
    pub observations: Vec<f64>,
    pub truth: Vec<[f64; 3]>,
}

/// Simulates a truth trajectory from `spec.x0` with its observations, runs the
/// SIR filter from an `N(0, I)` ensemble, and pairs `n_train + n_test`
/// sub-sampled final-cycle prior particles with their own synthetic observations.
pub fn build_da_problem(spec: &Lorenz63Spec, cfg: &DaConfig, seed: u64) -> Result<DaProblem> {
    spec.validate()?;
    if cfg.cycles == 0 || cfg.n_train == 0 || cfg.n_test == 0 {
        return Err(Error::InvalidArgument(format!("invalid DA config {cfg:?}")));
    }
    let n_pairs = cfg.n_train + cfg.n_test;
    if cfg.particles < n_pairs {
        return Err(Error::InvalidArgument(format!(
            "{} particles cannot supply {n_pairs} training and test pairs",
            cfg.particles
        )));
    }

    let mut truth_rng = stream_rng(seed, STREAM_TRUTH);
    let mut state = spec.x0;
    let mut truth = Vec::with_capacity(cfg.cycles);
    let mut observations = Vec::with_capacity(cfg.cycles);
    for _ in 0..cfg.cycles {
        for _ in 0..spec.steps_per_observation {
            state = lorenz_euler_step(spec, &state, Some(&mut truth_rng))?;
        }
        truth.push(state);
        observations.push(lorenz_observe(spec, &state, Some(&mut truth_rng)));
    }

    let mut init_rng = stream_rng(seed, STREAM_INIT);
    let initial =
        Array2::from_shape_simple_fn((cfg.particles, 3), || StandardNormal.sample(&mut init_rng));
    let mut steps = sir_filter(spec, &observations, initial, seed)?;
    let last = steps.pop().expect("at least one cycle");

    let mut pair_rng = stream_rng(seed, STREAM_PAIRS);
    let mut order =
        rand::seq::index::sample(&mut pair_rng, cfg.particles, cfg.particles).into_vec();
    let rest = order.split_off(n_pairs);
    let x = last.prior.particles.select(Axis(0), &order);
    let obs_noise = Normal::new(0.0, spec.obs_noise_std).expect("positive std");
    let y = Array2::from_shape_fn((n_pairs, 1), |(i, _)| {
        x[[i, 2]] + obs_noise.sample(&mut pair_rng)
    });
    let joint = PairedDataset::new(x, y, Split::Train)?;
    let (train, test) = joint.split_at(cfg.n_train)?;

    let prior_pool = last.prior.particles.select(Axis(0), &rest);
    Ok(DaProblem {
        train,
        test,
        reference: last.posterior.particles,
        prior_pool,
        y_hat: last.observation,
        observations,
        truth,
    })
}
