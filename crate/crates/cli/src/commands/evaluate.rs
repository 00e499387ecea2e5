use cfm_core::io::{read_dataset_csv, write_matrix_csv};
use cfm_core::metrics::linspace;
use cfm_core::problems::{
    spiral_reference_conditional, toy1d_posterior_moments, toy1d_posterior_pdf, Toy1dSpec,
};
use cfm_core::{
    count_modes, ensemble_stats, kde_1d, self_distance_baseline, sinkhorn_distance, Bandwidth,
    CloudPair, Normalizer, SourceKind, Split,
};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{load_data, load_points, DataMetadata, REFERENCE_CSV, REFERENCE_POOL_CSV};
use super::sample::{EnsembleSummary, INDEX_JSON};
use crate::config::{ExperimentConfig, Problem};
use crate::error::{CliError, CliResult};
use crate::experiment::{derived_seed, streams, Experiment};

pub const EVAL_DIR: &str = "eval";
pub const METRICS_JSONL: &str = "eval/metrics.jsonl";

/// One line of `eval/metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricRecord {
    Ensemble(EnsembleMetrics),
    Summary(RunSummary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetrics {
    pub index: usize,
    pub y_hat: Vec<f64>,
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub avg_n_steps: f64,
    pub avg_rejected_steps: f64,
    pub avg_path_length: f64,
    pub failures: usize,
    /// KDE local maxima above `evaluate.mode_fraction` of the peak, per dimension.
    pub kde_modes: Vec<usize>,
    pub kde_bandwidth: Vec<f64>,
    pub kde_files: Vec<String>,
    pub reference: Option<ReferenceComparison>,
    /// Closed-form posterior moments, when the problem has them.
    pub exact_mean: Option<f64>,
    pub exact_std: Option<f64>,
}

/// Comparison against reference posterior samples, in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceComparison {
    pub n_reference: usize,
    pub sinkhorn: f64,
    pub sinkhorn_iterations: usize,
    pub sinkhorn_converged: bool,
    pub marginal_error: f64,
    /// Mean distance between disjoint reference subsets of `baseline_subset` rows.
    pub baseline: Option<f64>,
    pub baseline_subset: usize,
    /// Baseline repeats that stopped at `sinkhorn.max_iterations`.
    pub baseline_unconverged: usize,
    pub reference_mean: Vec<f64>,
    pub reference_std: Vec<f64>,
    pub reference_kde_modes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: Problem,
    pub source: SourceKind,
    pub ensembles: usize,
    pub mean_sinkhorn: Option<f64>,
    pub mean_baseline: Option<f64>,
    pub mean_n_steps: f64,
    pub mean_path_length: f64,
    /// Published Sinkhorn distance for this benchmark and source; computed with
    /// unknown regularization settings, so indicative only.
    pub benchmark_target: Option<f64>,
}

pub fn benchmark_target(problem: Problem, source: SourceKind) -> Option<f64> {
    match (problem, source) {
        (Problem::Spiral, SourceKind::Gaussian) => Some(0.051),
        (Problem::Spiral, SourceKind::PriorScrambled) => Some(0.056),
        (Problem::LorenzDa, SourceKind::Gaussian) => Some(0.045),
        (Problem::LorenzDa, SourceKind::PriorScrambled) => Some(0.062),
        _ => None,
    }
}

pub fn kde_rel(index: usize, dim: usize) -> String {
    format!("{EVAL_DIR}/kde_{index:02}_x{}.csv", dim + 1)
}

/// Reference posterior samples (physical units) for `y_hat`, if the problem has any.
fn reference_for(
    exp: &Experiment,
    meta: &DataMetadata,
    y_hat: &[f64],
) -> CliResult<Option<Array2<f64>>> {
    if meta.has_reference && meta.y_hat.as_deref() == Some(y_hat) {
        return Ok(Some(load_points(exp, REFERENCE_CSV)?));
    }
    if meta.has_reference_pool && y_hat.len() == 1 {
        let pool = read_dataset_csv(&exp.path(REFERENCE_POOL_CSV), Split::Test)?;
        return match spiral_reference_conditional(&pool, y_hat[0], exp.cfg.data.band) {
            Ok(r) => Ok(Some(r)),
            Err(cfm_core::Error::EmptyResult(msg)) => {
                log::warn!("evaluate: no reference for y_hat {y_hat:?}: {msg}");
                Ok(None)
            }
            Err(e) => Err(e.into()),
        };
    }
    Ok(None)
}

fn subsample(points: Array2<f64>, max_rows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    if points.nrows() <= max_rows {
        return points;
    }
    let mut idx = rand::seq::index::sample(rng, points.nrows(), max_rows).into_vec();
    idx.sort_unstable();
    points.select(Axis(0), &idx)
}

fn compare(
    cfg: &ExperimentConfig,
    normalizer: &Normalizer,
    generated: &Array2<f64>,
    reference: Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> CliResult<ReferenceComparison> {
    let reference = subsample(reference, cfg.evaluate.max_reference, rng);
    let (reference_mean, reference_std) = if reference.nrows() >= 2 {
        ensemble_stats(reference.view())?
    } else {
        (reference.row(0).to_vec(), vec![0.0; reference.ncols()])
    };
    let g = normalizer.apply_x_rows(generated.view());
    let r = normalizer.apply_x_rows(reference.view());
    let sk = cfg.sinkhorn_config();
    let res = sinkhorn_distance(CloudPair::new(g.view(), r.view())?, &sk)?;
    if !res.converged {
        log::warn!(
            "evaluate: Sinkhorn stopped after {} iterations with marginal error {:.2e}",
            res.iterations,
            res.marginal_error
        );
    }
    let subset = generated.nrows().min(r.nrows() / 2);
    let baseline = if subset >= 1 {
        Some(self_distance_baseline(
            r.view(),
            subset,
            cfg.evaluate.baseline_repeats,
            &sk,
            rng,
        )?)
    } else {
        None
    };
    let baseline_unconverged = baseline.map_or(0, |b| b.unconverged);
    if baseline_unconverged > 0 {
        log::warn!(
            "evaluate: {baseline_unconverged} baseline Sinkhorn runs stopped at the iteration cap"
        );
    }
    Ok(ReferenceComparison {
        n_reference: reference.nrows(),
        sinkhorn: res.value,
        sinkhorn_iterations: res.iterations,
        sinkhorn_converged: res.converged,
        marginal_error: res.marginal_error,
        baseline: baseline.map(|b| b.value),
        baseline_subset: subset,
        baseline_unconverged,
        reference_mean,
        reference_std,
        reference_kde_modes: Vec::new(),
    })
}

/// Scores every ensemble listed in `samples/index.json` and writes
/// `eval/metrics.jsonl` plus one KDE table per ensemble and dimension.
pub fn evaluate(exp: &Experiment) -> CliResult<Vec<MetricRecord>> {
    let cfg = &exp.cfg;
    let data = load_data(exp)?;
    let index: Vec<EnsembleSummary> = exp.read_json(INDEX_JSON)?;
    let dir = exp.path(EVAL_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    exp.subdir(EVAL_DIR)?;
    let toy = (cfg.problem == Problem::Toy1d).then_some(Toy1dSpec {
        noise_std: cfg.data.noise_std,
    });
    let mut records = Vec::with_capacity(index.len() + 1);
    for ens in &index {
        let generated = load_points(exp, &ens.samples_file)?;
        if generated.ncols() != data.meta.x_dim {
            return Err(cfm_core::Error::DimensionMismatch {
                expected: data.meta.x_dim,
                actual: generated.ncols(),
                context: "ensemble columns",
            }
            .into());
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, streams::EVALUATE, ens.index as u64));
        let mut reference = match reference_for(exp, &data.meta, &ens.y_hat)? {
            Some(r) => {
                if r.ncols() != generated.ncols() {
                    return Err(CliError::Usage(format!(
                        "{REFERENCE_CSV} has {} columns but {} has {}",
                        r.ncols(),
                        ens.samples_file,
                        generated.ncols()
                    )));
                }
                Some((
                    compare(cfg, &data.normalizer, &generated, r.clone(), &mut rng)?,
                    r,
                ))
            }
            None => None,
        };
        let exact = toy.map(|spec| (spec, toy1d_posterior_moments(&spec, ens.y_hat[0])));

        let mut kde_modes = Vec::new();
        let mut kde_bandwidth = Vec::new();
        let mut kde_files = Vec::new();
        for j in 0..generated.ncols() {
            let gen_col = generated.column(j).to_vec();
            let ref_col = reference.as_ref().map(|(_, r)| r.column(j).to_vec());
            let mut lo = gen_col.iter().copied().fold(f64::INFINITY, f64::min);
            let mut hi = gen_col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if let Some(rc) = &ref_col {
                lo = rc.iter().copied().fold(lo, f64::min);
                hi = rc.iter().copied().fold(hi, f64::max);
            }
            if exact.is_some() {
                lo = lo.min(-1.0);
                hi = hi.max(1.0);
            }
            let pad = 0.1 * (hi - lo).max(1e-3);
            let grid = linspace(lo - pad, hi + pad, cfg.evaluate.kde_points);
            let g = kde_1d(&gen_col, &grid, Bandwidth::Silverman)?;
            if let Some(w) = &g.warning {
                log::warn!("evaluate: {w}");
            }
            kde_modes.push(count_modes(&g.density, cfg.evaluate.mode_fraction));
            kde_bandwidth.push(g.bandwidth);
            let mut header = vec!["x".to_string(), "generated".to_string()];
            let mut columns = vec![grid.clone(), g.density];
            if let (Some(rc), Some((cmp, _))) = (&ref_col, reference.as_mut()) {
                let r = kde_1d(rc, &grid, Bandwidth::Silverman)?;
                cmp.reference_kde_modes
                    .push(count_modes(&r.density, cfg.evaluate.mode_fraction));
                header.push("reference".into());
                columns.push(r.density);
            }
            if let Some((spec, _)) = &exact {
                header.push("exact".into());
                columns.push(
                    grid.iter()
                        .map(|&x| toy1d_posterior_pdf(spec, x, ens.y_hat[0]))
                        .collect(),
                );
            }
            let table = Array2::from_shape_fn((grid.len(), columns.len()), |(i, c)| columns[c][i]);
            let rel = kde_rel(ens.index, j);
            write_matrix_csv(&exp.path(&rel), &header, table.view())?;
            kde_files.push(rel);
        }
        records.push(MetricRecord::Ensemble(EnsembleMetrics {
            index: ens.index,
            y_hat: ens.y_hat.clone(),
            n_samples: ens.n_samples,
            mean: ens.mean.clone(),
            std: ens.std.clone(),
            avg_n_steps: ens.avg_n_steps,
            avg_rejected_steps: ens.avg_rejected_steps,
            avg_path_length: ens.avg_path_length,
            failures: ens.failures.len(),
            kde_modes,
            kde_bandwidth,
            kde_files,
            reference: reference.map(|(c, _)| c),
            exact_mean: exact.map(|(_, m)| m.0),
            exact_std: exact.map(|(_, m)| m.1),
        }));
    }
    let ensembles: Vec<&EnsembleMetrics> = records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Ensemble(e) => Some(e),
            MetricRecord::Summary(_) => None,
        })
        .collect();
    let n = ensembles.len().max(1) as f64;
    let mean_of =
        |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    let summary = RunSummary {
        problem: cfg.problem,
        source: cfg.source,
        ensembles: ensembles.len(),
        mean_sinkhorn: mean_of(
            ensembles
                .iter()
                .filter_map(|e| e.reference.as_ref().map(|r| r.sinkhorn))
                .collect(),
        ),
        mean_baseline: mean_of(
            ensembles
                .iter()
                .filter_map(|e| e.reference.as_ref().and_then(|r| r.baseline))
                .collect(),
        ),
        mean_n_steps: ensembles.iter().map(|e| e.avg_n_steps).sum::<f64>() / n,
        mean_path_length: ensembles.iter().map(|e| e.avg_path_length).sum::<f64>() / n,
        benchmark_target: benchmark_target(cfg.problem, cfg.source),
    };
    records.push(MetricRecord::Summary(summary));
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("metric records serialize"));
        text.push('\n');
    }
    exp.write_text(METRICS_JSONL, &text)?;
    Ok(records)
}

/// Parses `eval/metrics.jsonl`.
pub fn read_metrics(exp: &Experiment) -> CliResult<Vec<MetricRecord>> {
    let path = exp.path(METRICS_JSONL);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(cfm_core::Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}
