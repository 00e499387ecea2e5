//! Entropic optimal-transport distance, kernel density estimates and
//! ensemble summary statistics.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// Bound on the max-norm of the row-marginal violation.
    pub convergence_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            max_iters: 5000,
            convergence_tol: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.convergence_tol > 0.0 && self.max_iters >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid Sinkhorn config {self:?}"
            )))
        }
    }
}

/// Two uniformly weighted point clouds of equal dimension.
#[derive(Debug, Clone, Copy)]
pub struct CloudPair<'a> {
    pub a: ArrayView2<'a, f64>,
    pub b: ArrayView2<'a, f64>,
}

impl<'a> CloudPair<'a> {
    pub fn new(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>) -> Result<Self> {
        if a.nrows() == 0 || b.nrows() == 0 {
            return Err(Error::InvalidArgument(
                "point clouds must be nonempty".into(),
            ));
        }
        if a.ncols() != b.ncols() {
            return Err(Error::DimensionMismatch {
                expected: a.ncols(),
                actual: b.ncols(),
                context: "point cloud dimension",
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "point clouds contain non-finite values".into(),
            ));
        }
        Ok(Self { a, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// Transport cost `<P, C>` of the regularized plan.
    pub value: f64,
    /// Scaling iterations at the target epsilon.
    pub iterations: usize,
    pub converged: bool,
    pub marginal_error: f64,
}

/// Cost-matrix entries above which the dense kernel is refused.
pub const MAX_KERNEL_ENTRIES: usize = 200_000_000;

/// Scalings outside `[1/BIG, BIG]` are folded into the log-potentials.
const BIG: f64 = 1e100;

/// Kernel rows are assembled in parallel blocks of this many rows.
const ROW_BLOCK: usize = 64;

struct Solver<'a> {
    a: ArrayView2<'a, f64>,
    b: ArrayView2<'a, f64>,
    m: usize,
    n: usize,
    /// Log-potentials absorbed into the kernel.
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    /// `exp((f_i + g_j - C_ij) / eps)`, row-major.
    k: Vec<f64>,
    eps: f64,
}

/// Dot product with eight independent partial sums combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(p, q)| p * q)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Keeps scalings finite and nonzero so their logs can be absorbed.
fn in_range(s: f64) -> bool {
    s > 1e-280 && s < 1e280
}

fn sq_dist(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> f64 {
    x.iter().zip(y.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

impl<'a> Solver<'a> {
    fn new(a: ArrayView2<'a, f64>, b: ArrayView2<'a, f64>) -> Self {
        let (m, n) = (a.nrows(), b.nrows());
        Self {
            a,
            b,
            m,
            n,
            f: vec![0.0; m],
            g: vec![0.0; n],
            u: vec![1.0; m],
            v: vec![1.0; n],
            k: vec![0.0; m * n],
            eps: 1.0,
        }
    }

    fn absorb(&mut self) {
        for (f, u) in self.f.iter_mut().zip(self.u.iter_mut()) {
            *f += self.eps * u.ln();
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(self.v.iter_mut()) {
            *g += self.eps * v.ln();
            *v = 1.0;
        }
    }

    fn rebuild_kernel(&mut self) {
        let (a, b, f, g, eps, n) = (self.a, self.b, &self.f, &self.g, self.eps, self.n);
        self.k
            .par_chunks_mut(n * ROW_BLOCK)
            .enumerate()
            .for_each(|(blk, rows)| {
                for (r, row) in rows.chunks_exact_mut(n).enumerate() {
                    let i = blk * ROW_BLOCK + r;
                    let ai = a.row(i);
                    for (j, kij) in row.iter_mut().enumerate() {
                        *kij = ((f[i] + g[j] - sq_dist(ai, b.row(j))) / eps).exp();
                    }
                }
            });
    }

    /// Exact log-domain update of `f` given `g`, or of `g` given `f`.
    fn log_update(&mut self, rows: bool) {
        let (a, b, eps) = (self.a, self.b, self.eps);
        let (this, other, len_this, len_other) = if rows {
            (a, b, self.m, self.n)
        } else {
            (b, a, self.n, self.m)
        };
        let pot_other = if rows { &self.g } else { &self.f };
        let log_w = -(len_this as f64).ln();
        let new: Vec<f64> = (0..len_this)
            .into_par_iter()
            .map(|i| {
                let pi = this.row(i);
                let terms: Vec<f64> = (0..len_other)
                    .map(|j| (pot_other[j] - sq_dist(pi, other.row(j))) / eps)
                    .collect();
                let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
                eps * (log_w - lse)
            })
            .collect();
        if rows {
            self.f = new;
        } else {
            self.g = new;
        }
        self.rebuild_kernel();
    }

    fn row_error(&self, kv: &[f64]) -> f64 {
        let wa = 1.0 / self.m as f64;
        self.u
            .iter()
            .zip(kv)
            .map(|(u, s)| (u * s - wa).abs())
            .fold(0.0, f64::max)
    }

    /// `K v`, row by row.
    fn kv(&self) -> Vec<f64> {
        let (k, v, n) = (&self.k, &self.v, self.n);
        k.par_chunks(n).map(|row| dot(row, v)).collect()
    }

    /// `K^T u` with a fixed accumulation order.
    fn ktu(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, ui) in self.k.chunks_exact(self.n).zip(&self.u) {
            for (o, kij) in out.iter_mut().zip(row) {
                *o += ui * kij;
            }
        }
        out
    }

    fn needs_absorb(&self) -> bool {
        self.u
            .iter()
            .chain(self.v.iter())
            .any(|s| !(s.is_finite() && *s < BIG && *s > 1.0 / BIG))
    }

    /// Runs scaling iterations at the current epsilon. Returns `(iterations, marginal error)`.
    fn iterate(&mut self, max_iters: usize, tol: f64) -> (usize, f64) {
        let wa = 1.0 / self.m as f64;
        let wb = 1.0 / self.n as f64;
        for it in 0..max_iters {
            let mut ktu = match self.fused_pass() {
                Some((err, new_u, ktu)) => {
                    if it > 0 && err < tol {
                        return (it, err);
                    }
                    self.u = new_u;
                    ktu
                }
                None => {
                    self.absorb();
                    self.log_update(true);
                    let kv = self.kv();
                    for (u, s) in self.u.iter_mut().zip(&kv) {
                        *u = wa / s;
                    }
                    self.ktu()
                }
            };
            if !ktu.iter().all(|s| in_range(*s)) {
                self.absorb();
                self.log_update(false);
                ktu = self.ktu();
            }
            for (v, s) in self.v.iter_mut().zip(&ktu) {
                *v = wb / s;
            }
            if self.needs_absorb() {
                self.absorb();
                self.rebuild_kernel();
            }
        }
        (max_iters, self.row_error(&self.kv()))
    }

    /// One sweep over the kernel computing `s = K v`, the row-marginal error
    /// of the current plan, the updated `u = a / s` and `K^T u`. Streaming the
    /// kernel once per iteration instead of twice halves the memory traffic,
    /// which dominates for large clouds. `None` if some `s` is out of range.
    fn fused_pass(&self) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let wa = 1.0 / self.m as f64;
        let mut err: f64 = 0.0;
        let mut new_u = Vec::with_capacity(self.m);
        let mut ktu = vec![0.0; self.n];
        for (row, u_old) in self.k.chunks_exact(self.n).zip(&self.u) {
            let s = dot(row, &self.v);
            if !in_range(s) {
                return None;
            }
            err = err.max((u_old * s - wa).abs());
            let ui = wa / s;
            new_u.push(ui);
            for (o, kij) in ktu.iter_mut().zip(row) {
                *o += ui * kij;
            }
        }
        Some((err, new_u, ktu))
    }

    fn set_eps(&mut self, eps: f64) {
        self.absorb();
        self.eps = eps;
        self.rebuild_kernel();
    }

    fn transport_cost(&self) -> f64 {
        let (a, b, n) = (self.a, self.b, self.n);
        let per_row: Vec<f64> = self
            .k
            .par_chunks(n)
            .enumerate()
            .map(|(i, row)| {
                let ai = a.row(i);
                let mut acc = 0.0;
                for (j, kij) in row.iter().enumerate() {
                    acc += kij * self.v[j] * sq_dist(ai, b.row(j));
                }
                acc * self.u[i]
            })
            .collect();
        per_row.iter().sum()
    }
}

/// Entropy-regularized transport cost between uniformly weighted clouds under
/// the squared Euclidean cost.
///
/// Uses matrix scaling with log-potential absorption and epsilon scaling from
/// the cost magnitude down to `cfg.epsilon`, so small epsilons stay finite.
/// Non-convergence is reported in the result and logged, not raised.
pub fn sinkhorn_distance(pair: CloudPair<'_>, cfg: &SinkhornConfig) -> Result<SinkhornResult> {
    cfg.validate()?;
    let (m, n) = (pair.a.nrows(), pair.b.nrows());
    if m.saturating_mul(n) > MAX_KERNEL_ENTRIES {
        return Err(Error::InvalidArgument(format!(
            "{m} x {n} cost matrix exceeds {MAX_KERNEL_ENTRIES} entries; subsample the clouds"
        )));
    }
    let mut s = Solver::new(pair.a, pair.b);
    // Squared diameter of the joint bounding box bounds every cost entry.
    let c_max: f64 = (0..pair.a.ncols())
        .map(|j| {
            let (lo, hi) = pair
                .a
                .column(j)
                .iter()
                .chain(pair.b.column(j).iter())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            (hi - lo) * (hi - lo)
        })
        .sum();
    let mut eps = c_max.max(cfg.epsilon);
    s.eps = eps;
    s.rebuild_kernel();
    // Coarse stages only need a rough warm start.
    while eps > cfg.epsilon {
        s.iterate(50, 1e-2 / m as f64);
        eps = (eps * 0.25).max(cfg.epsilon);
        s.set_eps(eps);
    }
    let (iterations, marginal_error) = s.iterate(cfg.max_iters, cfg.convergence_tol);
    let converged = marginal_error < cfg.convergence_tol;
    if !converged {
        log::warn!(
            "Sinkhorn did not converge in {iterations} iterations (marginal error {marginal_error:.3e})"
        );
    }
    let value = s.transport_cost();
    if !value.is_finite() {
        return Err(Error::Numeric(
            "Sinkhorn transport cost is not finite".into(),
        ));
    }
    Ok(SinkhornResult {
        value,
        iterations,
        converged,
        marginal_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    /// Repeats whose Sinkhorn run stopped at the iteration cap.
    pub unconverged: usize,
}

/// Mean Sinkhorn distance between `repeats` pairs of disjoint random subsets
/// of `reference`, each of `subset_size` rows.
pub fn self_distance_baseline<R: Rng + ?Sized>(
    reference: ArrayView2<f64>,
    subset_size: usize,
    repeats: usize,
    cfg: &SinkhornConfig,
    rng: &mut R,
) -> Result<Baseline> {
    let m = reference.nrows();
    if subset_size == 0 || repeats == 0 {
        return Err(Error::InvalidArgument(
            "subset size and repeats must be positive".into(),
        ));
    }
    if 2 * subset_size > m {
        return Err(Error::InvalidArgument(format!(
            "two disjoint subsets of {subset_size} rows need at least {} rows, reference has {m}",
            2 * subset_size
        )));
    }
    let (mut total, mut unconverged) = (0.0, 0);
    for _ in 0..repeats {
        let idx = rand::seq::index::sample(rng, m, 2 * subset_size).into_vec();
        let a = reference.select(Axis(0), &idx[..subset_size]);
        let b = reference.select(Axis(0), &idx[subset_size..]);
        let res = sinkhorn_distance(CloudPair::new(a.view(), b.view())?, cfg)?;
        total += res.value;
        unconverged += usize::from(!res.converged);
    }
    Ok(Baseline {
        value: total / repeats as f64,
        unconverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// `1.06 * std * n^(-1/5)`.
    Silverman,
}

/// Bandwidth used when the automatic rule yields zero.
pub const FALLBACK_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeResult {
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub warning: Option<String>,
}

/// Gaussian kernel density estimate of `samples` at `eval_points`.
pub fn kde_1d(samples: &[f64], eval_points: &[f64], bandwidth: Bandwidth) -> Result<KdeResult> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "KDE needs at least one sample".into(),
        ));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("KDE samples must be finite".into()));
    }
    let mut warning = None;
    let h = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        Bandwidth::Silverman => {
            let sd = if n > 1 {
                let mean = samples.iter().sum::<f64>() / n as f64;
                (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let h = 1.06 * sd * (n as f64).powf(-0.2);
            if h > 0.0 {
                h
            } else {
                let msg =
                    format!("degenerate samples; using fallback bandwidth {FALLBACK_BANDWIDTH}");
                log::warn!("{msg}");
                warning = Some(msg);
                FALLBACK_BANDWIDTH
            }
        }
    };
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = eval_points
        .par_iter()
        .map(|&x| {
            samples
                .iter()
                .map(|s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(KdeResult {
        density,
        bandwidth: h,
        warning,
    })
}

/// Local maxima of a sampled density that reach `min_fraction` of its peak.
pub fn count_modes(density: &[f64], min_fraction: f64) -> usize {
    let peak = density.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return 0;
    }
    let floor = min_fraction * peak;
    let n = density.len();
    let mut modes = 0;
    let mut i = 0;
    while i < n {
        // Treat runs of equal values as one plateau.
        let mut j = i;
        while j + 1 < n && density[j + 1] == density[i] {
            j += 1;
        }
        let left_lower = i == 0 || density[i - 1] < density[i];
        let right_lower = j == n - 1 || density[j + 1] < density[j];
        if left_lower && right_lower && density[i] >= floor {
            modes += 1;
        }
        i = j + 1;
    }
    modes
}

/// Evenly spaced grid of `n` points spanning `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Per-dimension mean and unbiased standard deviation.
pub fn ensemble_stats(samples: ArrayView2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "standard deviation needs at least 2 samples, got {}",
            samples.nrows()
        )));
    }
    Ok(crate::ode::column_stats(samples))
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::error::check_dim(a.len(), b.len(), "rmse operands")?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("rmse of empty arrays".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Applies per-column affine maps so that each coordinate of `range_of`
/// spans `[-1, 1]`; used to put clouds on a common normalized scale.
pub fn normalize_like(points: ArrayView2<f64>, range_of: ArrayView2<f64>) -> Array2<f64> {
    let mut out = points.to_owned();
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let (lo, hi) = range_of
            .column(j)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        col.mapv_inplace(|v| {
            if hi > lo {
                2.0 * (v - lo) / (hi - lo) - 1.0
            } else {
                0.0
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn dist(a: &Array2<f64>, b: &Array2<f64>, eps: f64) -> SinkhornResult {
        let cfg = SinkhornConfig {
            epsilon: eps,
            ..Default::default()
        };
        sinkhorn_distance(CloudPair::new(a.view(), b.view()).unwrap(), &cfg).unwrap()
    }

    #[test]
    fn single_points() {
        let a = array![[0.0, 0.0]];
        let b = array![[0.6, 0.8]];
        for eps in [1.0, 0.01, 1e-4] {
            assert_abs_diff_eq!(dist(&a, &b, eps).value, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_clouds_rejected() {
        let a = Array2::<f64>::zeros((0, 2));
        let b = array![[0.0, 1.0]];
        assert!(CloudPair::new(a.view(), b.view()).is_err());
        let c = array![[0.0]];
        assert!(CloudPair::new(c.view(), b.view()).is_err());
    }

    #[test]
    fn kde_single_sample_peak() {
        let r = kde_1d(&[0.3], &[0.3], Bandwidth::Fixed(0.2)).unwrap();
        assert_abs_diff_eq!(
            r.density[0],
            1.0 / (0.2 * (2.0 * std::f64::consts::PI).sqrt()),
            epsilon = 1e-14
        );
    }

    #[test]
    fn kde_degenerate_fallback() {
        let r = kde_1d(&[2.0, 2.0, 2.0], &[2.0], Bandwidth::Silverman).unwrap();
        assert_eq!(r.bandwidth, FALLBACK_BANDWIDTH);
        assert!(r.warning.is_some());
    }

    #[test]
    fn stats_examples() {
        let (m, s) = ensemble_stats(array![[-1.0], [1.0]].view()).unwrap();
        assert_abs_diff_eq!(m[0], 0.0);
        assert_abs_diff_eq!(s[0], 2f64.sqrt(), epsilon = 1e-15);
        let (_, s) = ensemble_stats(array![[3.0], [3.0], [3.0]].view()).unwrap();
        assert_eq!(s[0], 0.0);
        assert!(ensemble_stats(array![[1.0]].view()).is_err());
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0], &[3.0]).unwrap(), 3.0);
        assert!(rmse(&[0.0], &[3.0, 1.0]).is_err());
    }

    #[test]
    fn modes_of_bimodal_profile() {
        let grid = linspace(-3.0, 3.0, 301);
        let d: Vec<f64> = grid
            .iter()
            .map(|x| {
                (-(x - 1.5f64).powi(2) * 4.0).exp() + 0.5 * (-(x + 1.5f64).powi(2) * 4.0).exp()
            })
            .collect();
        assert_eq!(count_modes(&d, 0.1), 2);
        assert_eq!(count_modes(&d, 0.6), 1);
        assert_eq!(count_modes(&[1.0, 1.0, 1.0], 0.1), 1);
    }
}
