use cfm_core::io::{column_names, write_annotated_csv};
use cfm_core::{sample_posterior, InitialStates, Mlp, SourceKind};
use serde::{Deserialize, Serialize};

use super::generate::{load_data, load_points, PRIOR_POOL_CSV};
use super::train::load_checkpoint;
use crate::config::CheckpointRef;
use crate::error::{CliError, CliResult};
use crate::experiment::{derived_seed, streams, Experiment};

pub const SAMPLES_DIR: &str = "samples";
pub const INDEX_JSON: &str = "samples/index.json";

/// Summary of one generated ensemble, stored next to its CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub index: usize,
    pub y_hat: Vec<f64>,
    pub samples_file: String,
    pub checkpoint_iteration: u64,
    pub sampled_with_ema: bool,
    pub source: SourceKind,
    pub n_samples: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub avg_n_steps: f64,
    pub avg_rejected_steps: f64,
    /// In normalized coordinates.
    pub avg_path_length: f64,
    pub failures: Vec<(usize, String)>,
}

pub fn ensemble_rel(index: usize) -> String {
    format!("{SAMPLES_DIR}/ensemble_{index:02}.csv")
}

/// The measurements to condition on, one row of `y_dim` values each.
pub fn measurement_rows(
    configured: &[f64],
    realized: Option<&Vec<f64>>,
    y_dim: usize,
) -> CliResult<Vec<Vec<f64>>> {
    let flat = if configured.is_empty() {
        realized.cloned().ok_or_else(|| {
            CliError::Usage(
                "sample.y_hat is empty and the problem has no realized measurement".into(),
            )
        })?
    } else {
        configured.to_vec()
    };
    if flat.len() % y_dim != 0 {
        return Err(CliError::Usage(format!(
            "sample.y_hat holds {} values, not a multiple of the measurement dimension {y_dim}",
            flat.len()
        )));
    }
    Ok(flat.chunks(y_dim).map(<[f64]>::to_vec).collect())
}

/// Draws `sample.samples` posterior samples for every configured measurement.
pub fn sample(exp: &Experiment, which: CheckpointRef) -> CliResult<Vec<EnsembleSummary>> {
    let cfg = &exp.cfg;
    let data = load_data(exp)?;
    let ckpt = load_checkpoint(exp, which)?;
    let mlp = Mlp::new(ckpt.mlp)?;
    let rows = measurement_rows(&cfg.sample.y_hat, data.meta.y_hat.as_ref(), data.meta.y_dim)?;
    let pool = match cfg.source {
        SourceKind::Gaussian => None,
        SourceKind::PriorScrambled => {
            if !data.meta.has_prior_pool {
                return Err(CliError::Usage(
                    "the prior source needs a prior pool; set data.prior_pool_csv".into(),
                ));
            }
            Some(load_points(exp, PRIOR_POOL_CSV)?)
        }
    };
    let dir = exp.path(SAMPLES_DIR);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    exp.subdir(SAMPLES_DIR)?;
    let solver = cfg.solver_config();
    let mut index = Vec::with_capacity(rows.len());
    for (k, y_hat) in rows.into_iter().enumerate() {
        let source = match &pool {
            None => InitialStates::Gaussian,
            Some(p) => InitialStates::PriorPool(p.view()),
        };
        let ens = sample_posterior(
            &mlp,
            ckpt.sampling_params(),
            &data.normalizer,
            &y_hat,
            source,
            cfg.sample.samples,
            &solver,
            derived_seed(cfg.seed, streams::SAMPLE, k as u64),
        )?;
        if !ens.failures.is_empty() {
            log::warn!(
                "sample: {} of {} trajectories failed for y_hat {y_hat:?}",
                ens.failures.len(),
                cfg.sample.samples
            );
        }
        let rel = ensemble_rel(k);
        let comment = format!(
            "y_hat={y_hat:?} avg_n_steps={} avg_path_length={} checkpoint_iteration={}",
            ens.avg_n_steps, ens.avg_path_length, ckpt.iteration
        );
        write_annotated_csv(
            &exp.path(&rel),
            &comment,
            &column_names("x", ens.samples.ncols()),
            ens.samples.view(),
        )?;
        let summary = EnsembleSummary {
            index: k,
            y_hat,
            samples_file: rel.clone(),
            checkpoint_iteration: ckpt.iteration,
            sampled_with_ema: ckpt.sample_with_ema,
            source: cfg.source,
            n_samples: ens.samples.nrows(),
            mean: ens.mean,
            std: ens.std,
            avg_n_steps: ens.avg_n_steps,
            avg_rejected_steps: ens.avg_rejected_steps,
            avg_path_length: ens.avg_path_length,
            failures: ens.failures,
        };
        exp.write_json(&rel.replace(".csv", ".json"), &summary)?;
        log::info!(
            "sample: y_hat {:?}: mean {:?}, std {:?}, {:.1} steps",
            summary.y_hat,
            summary.mean,
            summary.std,
            summary.avg_n_steps
        );
        index.push(summary);
    }
    exp.write_json(INDEX_JSON, &index)?;
    Ok(index)
}
