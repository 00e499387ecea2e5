use std::path::Path;

use cfm_core::io::{
    column_names, read_dataset_csv, read_matrix_csv, write_dataset_csv, write_matrix_csv,
};
use cfm_core::problems::{
    build_da_problem, spiral_generate, toy1d_generate, DaConfig, Lorenz63Spec, SpiralSpec,
    Toy1dSpec,
};
use cfm_core::{Normalizer, PairedDataset, Split};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Problem;
use crate::error::CliResult;
use crate::experiment::{derived_seed, stream_rng, streams, Experiment};

/// Facts about the generated data that later stages depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMetadata {
    pub problem: Problem,
    pub n_train: usize,
    pub n_test: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    /// Realized measurement the reference posterior conditions on.
    pub y_hat: Option<Vec<f64>>,
    /// `data/reference.csv`: reference posterior samples for `y_hat`.
    pub has_reference: bool,
    /// `data/reference_pool.csv`: joint draws for band-filtered references.
    pub has_reference_pool: bool,
    /// `data/prior_pool.csv`: prior draws disjoint from train and test.
    pub has_prior_pool: bool,
    pub observations: Vec<f64>,
    pub truth: Vec<[f64; 3]>,
    pub normalizer_warnings: Vec<String>,
}

pub const TRAIN_CSV: &str = "data/train.csv";
pub const TEST_CSV: &str = "data/test.csv";
pub const NORMALIZER_JSON: &str = "data/normalizer.json";
pub const METADATA_JSON: &str = "data/metadata.json";
pub const REFERENCE_CSV: &str = "data/reference.csv";
pub const REFERENCE_POOL_CSV: &str = "data/reference_pool.csv";
pub const PRIOR_POOL_CSV: &str = "data/prior_pool.csv";

fn write_points(exp: &Experiment, rel: &str, points: &Array2<f64>) -> CliResult<()> {
    write_matrix_csv(
        &exp.path(rel),
        &column_names("x", points.ncols()),
        points.view(),
    )?;
    Ok(())
}

fn read_points(path: &Path) -> CliResult<Array2<f64>> {
    Ok(read_matrix_csv(path)?.1)
}

pub fn generate(exp: &Experiment) -> CliResult<DataMetadata> {
    let cfg = &exp.cfg;
    let d = &cfg.data;
    exp.subdir("data")?;
    let mut y_hat = None;
    let (mut has_reference, mut has_reference_pool, mut has_prior_pool) = (false, false, false);
    let (mut observations, mut truth) = (Vec::new(), Vec::new());
    let (train, test) = match cfg.problem {
        Problem::Toy1d => {
            let spec = Toy1dSpec {
                noise_std: d.noise_std,
            };
            let train = toy1d_generate(
                &spec,
                d.n_train,
                Split::Train,
                &mut stream_rng(cfg.seed, streams::TRAIN_DATA),
            )?;
            let test = toy1d_generate(
                &spec,
                d.n_test,
                Split::Test,
                &mut stream_rng(cfg.seed, streams::TEST_DATA),
            )?;
            let prior = toy1d_generate(
                &spec,
                d.prior_pool,
                Split::Test,
                &mut stream_rng(cfg.seed, streams::PRIOR_POOL),
            )?;
            write_points(exp, PRIOR_POOL_CSV, &prior.x)?;
            has_prior_pool = true;
            (train, test)
        }
        Problem::Spiral => {
            let spec = SpiralSpec::default();
            let train = spiral_generate(
                &spec,
                d.n_train,
                Split::Train,
                &mut stream_rng(cfg.seed, streams::TRAIN_DATA),
            )?;
            let test = spiral_generate(
                &spec,
                d.n_test,
                Split::Test,
                &mut stream_rng(cfg.seed, streams::TEST_DATA),
            )?;
            let pool = spiral_generate(
                &spec,
                d.reference_pool,
                Split::Test,
                &mut stream_rng(cfg.seed, streams::REFERENCE_POOL),
            )?;
            write_dataset_csv(&exp.path(REFERENCE_POOL_CSV), &pool)?;
            let prior = spiral_generate(
                &spec,
                d.prior_pool,
                Split::Test,
                &mut stream_rng(cfg.seed, streams::PRIOR_POOL),
            )?;
            write_points(exp, PRIOR_POOL_CSV, &prior.x)?;
            has_reference_pool = true;
            has_prior_pool = true;
            (train, test)
        }
        Problem::LorenzDa => {
            let spec = Lorenz63Spec {
                obs_noise_std: d.obs_noise_std,
                process_noise_std: d.process_noise_std,
                ..Lorenz63Spec::default()
            };
            let da = DaConfig {
                particles: d.particles,
                cycles: d.cycles,
                n_train: d.n_train,
                n_test: d.n_test,
            };
            let problem =
                build_da_problem(&spec, &da, derived_seed(cfg.seed, streams::PROBLEM, 0))?;
            write_points(exp, REFERENCE_CSV, &problem.reference)?;
            write_points(exp, PRIOR_POOL_CSV, &problem.prior_pool)?;
            y_hat = Some(vec![problem.y_hat]);
            has_reference = true;
            has_prior_pool = true;
            observations = problem.observations;
            truth = problem.truth;
            (problem.train, problem.test)
        }
        Problem::ExternalCsv => {
            let train = read_dataset_csv(Path::new(&d.train_csv), Split::Train)?;
            let test = read_dataset_csv(Path::new(&d.test_csv), Split::Test)?;
            if !d.reference_csv.is_empty() {
                write_points(
                    exp,
                    REFERENCE_CSV,
                    &read_points(Path::new(&d.reference_csv))?,
                )?;
                // An external reference conditions on the first configured measurement.
                y_hat = cfg.sample.y_hat.first().map(|&v| vec![v]);
                has_reference = true;
            }
            if !d.prior_pool_csv.is_empty() {
                write_points(
                    exp,
                    PRIOR_POOL_CSV,
                    &read_points(Path::new(&d.prior_pool_csv))?,
                )?;
                has_prior_pool = true;
            }
            (train, test)
        }
    };
    write_dataset_csv(&exp.path(TRAIN_CSV), &train)?;
    write_dataset_csv(&exp.path(TEST_CSV), &test)?;
    let normalizer = Normalizer::fit(&train);
    for w in &normalizer.warnings {
        log::warn!("normalizer: {w}");
    }
    exp.write_json(NORMALIZER_JSON, &normalizer)?;
    let meta = DataMetadata {
        problem: cfg.problem,
        n_train: train.len(),
        n_test: test.len(),
        x_dim: train.x_dim(),
        y_dim: train.y_dim(),
        y_hat,
        has_reference,
        has_reference_pool,
        has_prior_pool,
        observations,
        truth,
        normalizer_warnings: normalizer.warnings.clone(),
    };
    exp.write_json(METADATA_JSON, &meta)?;
    log::info!(
        "generate: {} training and {} test pairs",
        meta.n_train,
        meta.n_test
    );
    Ok(meta)
}

/// The datasets and normalizer written by [`generate`].
pub struct LoadedData {
    pub meta: DataMetadata,
    pub train: PairedDataset,
    pub test: PairedDataset,
    pub normalizer: Normalizer,
}

pub fn load_data(exp: &Experiment) -> CliResult<LoadedData> {
    let meta: DataMetadata = exp.read_json(METADATA_JSON)?;
    Ok(LoadedData {
        train: read_dataset_csv(&exp.path(TRAIN_CSV), Split::Train)?,
        test: read_dataset_csv(&exp.path(TEST_CSV), Split::Test)?,
        normalizer: exp.read_json(NORMALIZER_JSON)?,
        meta,
    })
}

pub fn load_points(exp: &Experiment, rel: &str) -> CliResult<Array2<f64>> {
    read_points(&exp.path(rel))
}
