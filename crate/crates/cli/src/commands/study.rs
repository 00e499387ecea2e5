use cfm_core::io::write_matrix_csv;
use cfm_core::metrics::linspace;
use cfm_core::problems::{toy1d_posterior_moments, toy1d_posterior_pdf, Toy1dSpec};
use cfm_core::{
    kde_1d, moving_average, sample_posterior, Bandwidth, Checkpoint, InitialStates, Mlp, SourceKind,
};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate, load_data, load_points, METADATA_JSON, PRIOR_POOL_CSV};
use super::train::{
    checkpoint_rel, iteration_name, read_loss_history, train, SelectedCheckpoints, LOSS_CSV,
    SELECTED_JSON,
};
use crate::config::Problem;
use crate::error::{CliError, CliResult};
use crate::experiment::{derived_seed, stream_rng, streams, Experiment};

pub const STUDY_DIR: &str = "study";
pub const REPORT_JSON: &str = "study/report.json";
pub const KDE_CSV: &str = "study/kde_y_hat.csv";
pub const SWEEP_CSV: &str = "study/sweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCheckpoint {
    /// `ma_minimum` or `iter_<n>`.
    pub label: String,
    pub iteration: u64,
    pub mean: f64,
    pub std: f64,
    pub avg_n_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub y_hat: f64,
    pub exact_mean: f64,
    pub exact_std: f64,
    pub ma_minimum_iteration: usize,
    pub test_loss_ma_at_minimum: Option<f64>,
    /// Moving average at five times the minimizing iteration, if the run got there.
    pub test_loss_ma_at_5x: Option<f64>,
    pub checkpoints: Vec<StudyCheckpoint>,
    /// Measurements of the sweep, drawn uniformly from [-1, 1] and sorted.
    pub sweep_y_hat: Vec<f64>,
    /// For each earlier checkpoint, the fraction of sweep measurements at which
    /// the last checkpoint's posterior std is no larger.
    pub last_std_not_larger_fraction: Vec<(String, f64)>,
}

fn training_covers(exp: &Experiment, wanted: &[usize]) -> bool {
    let Ok(selected) = exp.read_json::<SelectedCheckpoints>(SELECTED_JSON) else {
        return false;
    };
    wanted.iter().all(|&it| {
        it <= selected.final_iteration
            && (it == selected.final_iteration
                || exp.path(&checkpoint_rel(&iteration_name(it))).exists())
    })
}

/// Trains the toy problem (unless a run covering the schedule exists), then
/// samples the posterior at `study.y_hat` and over a sweep of measurements at
/// the moving-average minimum and every scheduled checkpoint.
pub fn overfit_study(exp: &Experiment) -> CliResult<StudyReport> {
    let cfg = &exp.cfg;
    if cfg.problem != Problem::Toy1d {
        return Err(CliError::Usage(format!(
            "overfit-study needs problem = \"toy1d\", not \"{}\"",
            cfg.problem
        )));
    }
    let st = &cfg.study;
    let t = &cfg.train;
    let last = *st.checkpoints.iter().max().expect("validated non-empty");
    let retained = |it: usize| {
        (t.checkpoint_every > 0 && it.is_multiple_of(t.checkpoint_every))
            || t.keep_iterations.contains(&it)
    };
    if t.max_iterations < last
        || !st
            .checkpoints
            .iter()
            .all(|&c| c == t.max_iterations || retained(c))
    {
        return Err(CliError::Usage(
            "study.checkpoints must be retained by training: list them in train.keep_iterations and keep train.max_iterations at or above the largest".into(),
        ));
    }
    if !exp.path(METADATA_JSON).exists() {
        generate(exp)?;
    }
    if !training_covers(exp, &st.checkpoints) {
        train(exp, false)?;
    }
    let data = load_data(exp)?;
    let selected: SelectedCheckpoints = exp.read_json(SELECTED_JSON)?;
    let best = selected
        .ma_minimum
        .clone()
        .ok_or_else(|| CliError::Usage("training recorded no test-loss evaluations".into()))?;

    let mut labelled: Vec<(String, Checkpoint)> = vec![(
        "ma_minimum".into(),
        Checkpoint::read(&exp.path(&checkpoint_rel(&best.checkpoint)))?,
    )];
    let mut schedule = st.checkpoints.clone();
    schedule.sort_unstable();
    schedule.dedup();
    for &it in &schedule {
        let name = if it == selected.final_iteration
            && !exp.path(&checkpoint_rel(&iteration_name(it))).exists()
        {
            "final".to_string()
        } else {
            iteration_name(it)
        };
        labelled.push((
            iteration_name(it),
            Checkpoint::read(&exp.path(&checkpoint_rel(&name)))?,
        ));
    }

    let spec = Toy1dSpec {
        noise_std: cfg.data.noise_std,
    };
    let solver = cfg.solver_config();
    let pool = match cfg.source {
        SourceKind::Gaussian => None,
        SourceKind::PriorScrambled => Some(load_points(exp, PRIOR_POOL_CSV)?),
    };
    let draw = |ckpt: &Checkpoint, y: f64, m: usize, seed: u64| {
        let mlp = Mlp::new(ckpt.mlp)?;
        let source = match &pool {
            None => InitialStates::Gaussian,
            Some(p) => InitialStates::PriorPool(p.view()),
        };
        sample_posterior(
            &mlp,
            ckpt.sampling_params(),
            &data.normalizer,
            &[y],
            source,
            m,
            &solver,
            seed,
        )
    };
    exp.subdir(STUDY_DIR)?;

    let grid = linspace(-1.5, 1.5, cfg.evaluate.kde_points);
    let mut header = vec!["x".to_string(), "exact".to_string()];
    let mut columns = vec![
        grid.clone(),
        grid.iter()
            .map(|&x| toy1d_posterior_pdf(&spec, x, st.y_hat))
            .collect(),
    ];
    let mut at_y_hat = Vec::new();
    let seed = derived_seed(cfg.seed, streams::STUDY, 0);
    for (label, ckpt) in &labelled {
        let ens = draw(ckpt, st.y_hat, st.samples, seed)?;
        let col = ens.samples.column(0).to_vec();
        columns.push(kde_1d(&col, &grid, Bandwidth::Silverman)?.density);
        header.push(label.clone());
        log::info!(
            "overfit-study: {label}: std {:.4} at y_hat {}",
            ens.std[0],
            st.y_hat
        );
        at_y_hat.push(StudyCheckpoint {
            label: label.clone(),
            iteration: ckpt.iteration,
            mean: ens.mean[0],
            std: ens.std[0],
            avg_n_steps: ens.avg_n_steps,
        });
    }
    let table = Array2::from_shape_fn((grid.len(), columns.len()), |(i, c)| columns[c][i]);
    write_matrix_csv(&exp.path(KDE_CSV), &header, table.view())?;

    let mut rng = stream_rng(cfg.seed, streams::STUDY);
    let mut sweep: Vec<f64> = (0..st.sweep_points)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    sweep.sort_by(f64::total_cmp);
    let mut header = vec![
        "y_hat".to_string(),
        "exact_mean".to_string(),
        "exact_std".to_string(),
    ];
    let mut columns: Vec<Vec<f64>> = vec![sweep.clone(), Vec::new(), Vec::new()];
    for &y in &sweep {
        let (m, s) = toy1d_posterior_moments(&spec, y);
        columns[1].push(m);
        columns[2].push(s);
    }
    let mut stds = Vec::new();
    for (label, ckpt) in &labelled {
        let (mut means, mut sds) = (Vec::new(), Vec::new());
        for (i, &y) in sweep.iter().enumerate() {
            let ens = draw(
                ckpt,
                y,
                st.sweep_samples,
                derived_seed(cfg.seed, streams::STUDY, 1 + i as u64),
            )?;
            means.push(ens.mean[0]);
            sds.push(ens.std[0]);
        }
        header.push(format!("mean_{label}"));
        header.push(format!("std_{label}"));
        columns.push(means);
        columns.push(sds.clone());
        stds.push((label.clone(), sds));
    }
    let table = Array2::from_shape_fn((sweep.len(), columns.len()), |(i, c)| columns[c][i]);
    write_matrix_csv(&exp.path(SWEEP_CSV), &header, table.view())?;

    let (_, last_std) = stds.last().expect("at least one scheduled checkpoint");
    let last_std_not_larger_fraction = stds[..stds.len() - 1]
        .iter()
        .map(|(label, s)| {
            let hits = last_std.iter().zip(s).filter(|(a, b)| a <= b).count();
            (label.clone(), hits as f64 / sweep.len() as f64)
        })
        .collect();

    let history = read_loss_history(&exp.path(LOSS_CSV), selected.final_iteration, t.ma_window)?;
    let ma = moving_average(&history.test_losses(), t.ma_window);
    let ma_at = |it: usize| history.evals.iter().position(|e| e.0 == it).map(|k| ma[k]);
    let (exact_mean, exact_std) = toy1d_posterior_moments(&spec, st.y_hat);
    let report = StudyReport {
        y_hat: st.y_hat,
        exact_mean,
        exact_std,
        ma_minimum_iteration: best.iteration,
        test_loss_ma_at_minimum: ma_at(best.iteration),
        test_loss_ma_at_5x: ma_at(5 * best.iteration),
        checkpoints: at_y_hat,
        sweep_y_hat: sweep,
        last_std_not_larger_fraction,
    };
    exp.write_json(REPORT_JSON, &report)?;
    Ok(report)
}
