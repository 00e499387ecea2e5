//! Datasets, min-max normalization, source sampling and the flow-matching
//! training loop with test-loss monitoring and checkpoint selection.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{check_dim, Error, Result};
use crate::net::{adam_step, EmaState, FlowBatch, Mlp, MlpConfig, OptimState, ParameterArray};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Row-aligned joint samples `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub split: Split,
}

impl PairedDataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>, split: Split) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset has no rows".into()));
        }
        check_dim(x.nrows(), y.nrows(), "dataset rows")?;
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite dataset entry".into()));
        }
        Ok(Self { x, y, split })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn y_dim(&self) -> usize {
        self.y.ncols()
    }

    /// Splits off the first `n_first` rows; the rest become the test split.
    pub fn split_at(self, n_first: usize) -> Result<(Self, Self)> {
        if n_first == 0 || n_first >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} rows at {n_first}",
                self.len()
            )));
        }
        let (xa, xb) = self.x.view().split_at(Axis(0), n_first);
        let (ya, yb) = self.y.view().split_at(Axis(0), n_first);
        Ok((
            Self::new(xa.to_owned(), ya.to_owned(), Split::Train)?,
            Self::new(xb.to_owned(), yb.to_owned(), Split::Test)?,
        ))
    }
}

/// Per-dimension affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
    /// Constant columns, which are mapped to 0.
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn column_ranges(a: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    a.axis_iter(Axis(1))
        .map(|c| {
            c.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                })
        })
        .unzip()
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (v - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

fn from_unit(u: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + 0.5 * (u + 1.0) * (hi - lo)
    } else {
        lo
    }
}

impl Normalizer {
    pub fn fit(train: &PairedDataset) -> Self {
        let (x_min, x_max) = column_ranges(&train.x);
        let (y_min, y_max) = column_ranges(&train.y);
        let mut warnings = Vec::new();
        for (name, lo, hi) in [("x", &x_min, &x_max), ("y", &y_min, &y_max)] {
            for (j, (a, b)) in lo.iter().zip(hi.iter()).enumerate() {
                if a == b {
                    warnings.push(format!("{name}[{j}] is constant ({a}); mapped to 0"));
                }
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
            warnings,
        }
    }

    pub fn apply_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| to_unit(v, self.x_min[j], self.x_max[j]))
            .collect()
    }

    pub fn invert_x(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &v)| from_unit(v, self.x_min[j], self.x_max[j]))
            .collect()
    }

    pub fn apply_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(j, &v)| to_unit(v, self.y_min[j], self.y_max[j]))
            .collect()
    }

    pub fn invert_y(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &v)| from_unit(v, self.y_min[j], self.y_max[j]))
            .collect()
    }

    pub fn apply_x_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(i, j)| {
            to_unit(x[[i, j]], self.x_min[j], self.x_max[j])
        })
    }

    pub fn invert_x_rows(&self, u: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(u.dim(), |(i, j)| {
            from_unit(u[[i, j]], self.x_min[j], self.x_max[j])
        })
    }

    pub fn apply(&self, data: &PairedDataset) -> Result<PairedDataset> {
        check_dim(self.x_min.len(), data.x_dim(), "normalizer x dimension")?;
        check_dim(self.y_min.len(), data.y_dim(), "normalizer y dimension")?;
        let y = Array2::from_shape_fn(data.y.dim(), |(i, j)| {
            to_unit(data.y[[i, j]], self.y_min[j], self.y_max[j])
        });
        PairedDataset::new(self.apply_x_rows(data.x.view()), y, data.split)
    }
}

/// Distribution of the ODE initial states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Standard normal of dimension `d`.
    Gaussian,
    /// The prior, realized by reusing the minibatch `x` rows shifted by one position.
    PriorScrambled,
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(SourceKind::Gaussian),
            "prior_scrambled" | "prior" => Ok(SourceKind::PriorScrambled),
            other => Err(Error::InvalidArgument(format!(
                "unknown source kind `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceKind::Gaussian => "gaussian",
            SourceKind::PriorScrambled => "prior_scrambled",
        })
    }
}

/// Source samples paired with the minibatch targets `batch_x`.
///
/// The scrambled prior uses a cyclic shift by one row, a derangement: no
/// target is paired with itself, so `x - z` never vanishes for distinct rows.
pub fn sample_source_batch<R: Rng + ?Sized>(
    kind: SourceKind,
    batch_x: ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let (b, d) = batch_x.dim();
    match kind {
        SourceKind::Gaussian => Ok(Array2::from_shape_simple_fn((b, d), || {
            rng.sample(StandardNormal)
        })),
        SourceKind::PriorScrambled => {
            if b < 2 {
                return Err(Error::InvalidArgument(
                    "scrambled prior source needs at least 2 rows".into(),
                ));
            }
            Ok(Array2::from_shape_fn((b, d), |(i, j)| {
                batch_x[[(i + 1) % b, j]]
            }))
        }
    }
}

/// Trailing mean over the last `min(window, i + 1)` entries.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    for i in 0..series.len() {
        let lo = (i + 1).saturating_sub(window);
        let slice = &series[lo..=i];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub ema_decay: f64,
    /// Iterations between test-loss evaluations.
    pub test_eval_stride: usize,
    /// Moving-average window, counted in evaluations.
    pub ma_window: usize,
    pub seed: u64,
    /// Evaluate the test loss (and sample) with EMA weights rather than raw weights.
    pub use_ema: bool,
    /// Retain a snapshot every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Additional iterations at which a snapshot is retained.
    pub keep_iterations: Vec<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.batch_size >= 1
            && self.max_iterations >= 1
            && self.test_eval_stride >= 1
            && self.ma_window >= 1
            && self.ema_decay > 0.0
            && self.ema_decay < 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid training config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-iteration training loss and per-evaluation test loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    /// `(iteration, test loss)`, iterations strictly increasing.
    pub evals: Vec<(usize, f64)>,
    pub ma_window: usize,
}

impl LossHistory {
    pub fn new(ma_window: usize) -> Self {
        Self {
            ma_window,
            ..Default::default()
        }
    }

    pub fn test_losses(&self) -> Vec<f64> {
        self.evals.iter().map(|e| e.1).collect()
    }

    pub fn moving_average(&self) -> Vec<f64> {
        moving_average(&self.test_losses(), self.ma_window)
    }

    /// First evaluation index whose moving average covers a full window, or 0
    /// when the run is shorter than one window.
    fn first_eligible(&self) -> usize {
        if self.evals.len() >= self.ma_window {
            self.ma_window - 1
        } else {
            0
        }
    }

    /// Keeps only records up to and including `iteration`.
    pub fn truncate(&mut self, iteration: usize) {
        self.train.truncate(iteration);
        self.evals.retain(|e| e.0 <= iteration);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStrategy {
    MaMinimum,
    /// Earliest evaluation whose relative MA decrease over the trailing
    /// `window` evaluations falls below `tol`.
    MaSaturation {
        tol: f64,
        window: usize,
    },
    Fixed(usize),
}

impl Default for CheckpointStrategy {
    fn default() -> Self {
        CheckpointStrategy::MaSaturation {
            tol: 1e-3,
            window: 10,
        }
    }
}

pub fn select_checkpoint(history: &LossHistory, strategy: CheckpointStrategy) -> Result<usize> {
    if history.evals.is_empty() {
        return Err(Error::InvalidArgument(
            "loss history has no evaluations".into(),
        ));
    }
    let ma = history.moving_average();
    let first = history.first_eligible();
    match strategy {
        CheckpointStrategy::MaMinimum => {
            let mut best = first;
            for i in first..ma.len() {
                if ma[i] < ma[best] {
                    best = i;
                }
            }
            Ok(history.evals[best].0)
        }
        CheckpointStrategy::MaSaturation { tol, window } => {
            let start = first.max(window);
            for i in start..ma.len() {
                let prev = ma[i - window];
                let rel = (prev - ma[i]) / prev.abs().max(f64::MIN_POSITIVE);
                if rel < tol {
                    return Ok(history.evals[i].0);
                }
            }
            Ok(history.evals.last().expect("nonempty").0)
        }
        CheckpointStrategy::Fixed(it) => {
            if history.evals.iter().any(|e| e.0 == it) {
                Ok(it)
            } else {
                Err(Error::NotFound(format!(
                    "no checkpoint stored at iteration {it}"
                )))
            }
        }
    }
}

/// Mutable training state: raw parameters, Adam moments, EMA shadow, generator.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterArray,
    pub opt: OptimState,
    pub ema: EmaState,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
}

/// What happened in one call to [`Trainer::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    /// The moving average reached a new eligible minimum at this step.
    pub new_ma_minimum: bool,
}

/// Result of a complete in-memory training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: LossHistory,
    /// Retained snapshots keyed by iteration.
    pub checkpoints: BTreeMap<usize, Checkpoint>,
    /// Snapshot at the moving-average minimum.
    pub ma_minimum: Option<Checkpoint>,
}

/// Stepwise driver of conditional flow-matching training on normalized data.
pub struct Trainer<'a> {
    mlp: Mlp,
    train: &'a PairedDataset,
    cfg: TrainConfig,
    kind: SourceKind,
    test_batch: FlowBatch,
    state: TrainState,
    history: LossHistory,
    best_ma: Option<(usize, f64)>,
}

/// Stream of the generator reserved for the fixed test-loss draws.
const TEST_STREAM: u64 = 1;

impl<'a> Trainer<'a> {
    pub fn new(
        train: &'a PairedDataset,
        test: &PairedDataset,
        cfg: TrainConfig,
        mlp_cfg: MlpConfig,
        kind: SourceKind,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = mlp_cfg.init_params(&mut rng);
        let opt = OptimState::new(params.len(), cfg.lr);
        let ema = EmaState::new(&params.values, cfg.ema_decay)?;
        let state = TrainState {
            params,
            opt,
            ema,
            iteration: 0,
            rng,
        };
        Self::assemble(train, test, cfg, mlp_cfg, kind, state, None)
    }

    /// Continues a run from a snapshot and the history recorded up to it.
    pub fn resume(
        train: &'a PairedDataset,
        test: &PairedDataset,
        cfg: TrainConfig,
        kind: SourceKind,
        checkpoint: &Checkpoint,
        mut history: LossHistory,
    ) -> Result<Self> {
        cfg.validate()?;
        let iteration = checkpoint.iteration as usize;
        history.truncate(iteration);
        if history.train.len() != iteration {
            return Err(Error::InvalidArgument(format!(
                "history holds {} iterations, checkpoint is at {iteration}",
                history.train.len()
            )));
        }
        let state = TrainState {
            params: checkpoint.params.clone(),
            opt: checkpoint.opt.clone(),
            ema: checkpoint.ema.clone(),
            iteration,
            rng: checkpoint.rng.restore(),
        };
        Self::assemble(train, test, cfg, checkpoint.mlp, kind, state, Some(history))
    }

    fn assemble(
        train: &'a PairedDataset,
        test: &PairedDataset,
        cfg: TrainConfig,
        mlp_cfg: MlpConfig,
        kind: SourceKind,
        state: TrainState,
        history: Option<LossHistory>,
    ) -> Result<Self> {
        let mlp = Mlp::new(mlp_cfg)?;
        check_dim(mlp_cfg.state_dim, train.x_dim(), "training x dimension")?;
        check_dim(mlp_cfg.cond_dim, train.y_dim(), "training y dimension")?;
        check_dim(mlp_cfg.state_dim, test.x_dim(), "test x dimension")?;
        check_dim(mlp_cfg.cond_dim, test.y_dim(), "test y dimension")?;
        if kind == SourceKind::PriorScrambled && cfg.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "scrambled prior source needs batch_size >= 2".into(),
            ));
        }
        let test_batch = fixed_test_batch(test, kind, cfg.seed)?;
        let history = history.unwrap_or_else(|| LossHistory::new(cfg.ma_window));
        let mut trainer = Self {
            mlp,
            train,
            cfg,
            kind,
            test_batch,
            state,
            history,
            best_ma: None,
        };
        trainer.recompute_best();
        Ok(trainer)
    }

    fn recompute_best(&mut self) {
        self.best_ma = None;
        let ma = self.history.moving_average();
        let first = self.history.first_eligible();
        for (i, v) in ma.iter().enumerate().skip(first) {
            if self.best_ma.is_none_or(|(_, b)| *v < b) {
                self.best_ma = Some((self.history.evals[i].0, *v));
            }
        }
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Iteration of the current moving-average minimum, if any.
    pub fn ma_minimum(&self) -> Option<usize> {
        self.best_ma.map(|b| b.0)
    }

    pub fn snapshot(&self) -> Checkpoint {
        Checkpoint {
            mlp: *self.mlp.config(),
            params: self.state.params.clone(),
            opt: self.state.opt.clone(),
            ema: self.state.ema.clone(),
            iteration: self.state.iteration as u64,
            rng: RngState::capture(&self.state.rng),
            sample_with_ema: self.cfg.use_ema,
        }
    }

    fn eval_params(&self) -> &[f64] {
        if self.cfg.use_ema {
            &self.state.ema.shadow
        } else {
            &self.state.params.values
        }
    }

    pub fn test_loss(&self) -> Result<f64> {
        self.mlp.loss(self.eval_params(), &self.test_batch)
    }

    /// One optimizer step: minibatch with replacement, fresh source draws, one
    /// uniform `t` per row.
    pub fn step(&mut self) -> Result<StepReport> {
        let b = self.cfg.batch_size;
        let n = self.train.len();
        let rng = &mut self.state.rng;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let x = self.train.x.select(Axis(0), &idx);
        let y = self.train.y.select(Axis(0), &idx);
        let z = sample_source_batch(self.kind, x.view(), rng)?;
        let t = Array1::from_shape_simple_fn(b, || rng.random::<f64>());
        let batch = FlowBatch { z, x, y, t };
        let (loss, grad) = self.mlp.loss_and_grad(&self.state.params.values, &batch)?;
        adam_step(&mut self.state.params.values, &mut self.state.opt, &grad)?;
        self.state.ema.update(&self.state.params.values)?;
        self.state.iteration += 1;
        self.history.train.push(loss);

        let it = self.state.iteration;
        let mut report = StepReport {
            iteration: it,
            train_loss: loss,
            test_loss: None,
            new_ma_minimum: false,
        };
        if it.is_multiple_of(self.cfg.test_eval_stride) {
            let test = self.test_loss()?;
            self.history.evals.push((it, test));
            report.test_loss = Some(test);
            let k = self.history.evals.len();
            let w = self.cfg.ma_window.min(k);
            let ma = self.history.evals[k - w..].iter().map(|e| e.1).sum::<f64>() / w as f64;
            // Minima over partial windows stop counting once the first full window exists.
            let first_full = k == self.cfg.ma_window;
            if first_full || self.best_ma.is_none_or(|(_, best)| ma < best) {
                self.best_ma = Some((it, ma));
                report.new_ma_minimum = true;
            }
        }
        Ok(report)
    }

    fn should_retain(&self, it: usize) -> bool {
        (self.cfg.checkpoint_every > 0 && it.is_multiple_of(self.cfg.checkpoint_every))
            || self.cfg.keep_iterations.contains(&it)
    }

    /// Runs to `max_iterations`, retaining snapshots per the config and at the MA minimum.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut checkpoints = BTreeMap::new();
        let mut ma_minimum = None;
        while self.state.iteration < self.cfg.max_iterations {
            let report = self.step()?;
            if report.new_ma_minimum {
                ma_minimum = Some(self.snapshot());
            }
            if self.should_retain(report.iteration) {
                checkpoints.insert(report.iteration, self.snapshot());
            }
        }
        Ok(TrainOutcome {
            state: self.state,
            history: self.history,
            checkpoints,
            ma_minimum,
        })
    }
}

/// Test-loss batch with source and time draws frozen for the whole run, so
/// successive evaluations differ only through the weights.
fn fixed_test_batch(test: &PairedDataset, kind: SourceKind, seed: u64) -> Result<FlowBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TEST_STREAM);
    let z = match kind {
        SourceKind::PriorScrambled if test.len() < 2 => {
            return Err(Error::InvalidArgument(
                "scrambled prior source needs at least 2 test rows".into(),
            ))
        }
        _ => sample_source_batch(kind, test.x.view(), &mut rng)?,
    };
    let t = Array1::from_shape_simple_fn(test.len(), || rng.random::<f64>());
    Ok(FlowBatch {
        z,
        x: test.x.clone(),
        y: test.y.clone(),
        t,
    })
}

/// Trains a conditional flow-matching model on normalized datasets.
pub fn train_cfm(
    train: &PairedDataset,
    test: &PairedDataset,
    cfg: TrainConfig,
    mlp: MlpConfig,
    kind: SourceKind,
) -> Result<TrainOutcome> {
    Trainer::new(train, test, cfg, mlp, kind)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn history(values: &[f64], window: usize) -> LossHistory {
        LossHistory {
            train: vec![],
            evals: values
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) * 100, v))
                .collect(),
            ma_window: window,
        }
    }

    #[test]
    fn moving_average_examples() {
        assert_eq!(moving_average(&[1.0, 1.0, 1.0], 2), vec![1.0, 1.0, 1.0]);
        assert_eq!(moving_average(&[0.0, 2.0], 2), vec![0.0, 1.0]);
        assert_eq!(moving_average(&[3.0], 500), vec![3.0]);
        assert!(moving_average(&[], 3).is_empty());
    }

    #[test]
    fn checkpoint_selection() {
        let dec = history(&[5.0, 4.0, 3.0, 2.0, 1.0], 1);
        assert_eq!(
            select_checkpoint(&dec, CheckpointStrategy::MaMinimum).unwrap(),
            500
        );
        let v = history(&[5.0, 3.0, 1.0, 3.0, 5.0], 1);
        assert_eq!(
            select_checkpoint(&v, CheckpointStrategy::MaMinimum).unwrap(),
            300
        );
        assert_eq!(
            select_checkpoint(&v, CheckpointStrategy::Fixed(200)).unwrap(),
            200
        );
        assert!(matches!(
            select_checkpoint(&v, CheckpointStrategy::Fixed(250)),
            Err(Error::NotFound(_))
        ));
        assert!(select_checkpoint(&LossHistory::new(3), CheckpointStrategy::MaMinimum).is_err());
    }

    #[test]
    fn saturation_picks_first_flat_stretch() {
        let mut vals: Vec<f64> = (0..30).map(|i| 10.0 - i as f64 * 0.3).collect();
        vals.extend(std::iter::repeat_n(1.0, 30));
        let h = history(&vals, 1);
        let it = select_checkpoint(
            &h,
            CheckpointStrategy::MaSaturation {
                tol: 1e-3,
                window: 10,
            },
        )
        .unwrap();
        // The MA is flat from evaluation index 30 onward; ten evaluations later the decrease is 0.
        assert_eq!(it, (40 + 1) * 100);
    }

    #[test]
    fn normalizer_maps_range_to_unit_interval() {
        let d = PairedDataset::new(
            array![[0.0], [10.0], [4.0]],
            array![[1.0], [1.0], [1.0]],
            Split::Train,
        )
        .unwrap();
        let n = Normalizer::fit(&d);
        assert_eq!(n.apply_x(&[5.0]), vec![0.0]);
        assert_eq!(n.apply_x(&[10.0]), vec![1.0]);
        assert_eq!(n.apply_x(&[0.0]), vec![-1.0]);
        // Constant y column.
        assert_eq!(n.apply_y(&[1.0]), vec![0.0]);
        assert_eq!(n.invert_y(&[0.3]), vec![1.0]);
        assert_eq!(n.warnings.len(), 1);
    }

    #[test]
    fn scrambled_source_is_cyclic_shift() {
        let x = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]];
        let z = sample_source_batch(
            SourceKind::PriorScrambled,
            x.view(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(z, array![[2.0, 20.0], [3.0, 30.0], [1.0, 10.0]]);
        let one = array![[1.0]];
        assert!(sample_source_batch(
            SourceKind::PriorScrambled,
            one.view(),
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    #[test]
    fn gaussian_source_reproducible() {
        let x = Array2::<f64>::zeros((4, 2));
        let a = sample_source_batch(
            SourceKind::Gaussian,
            x.view(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = sample_source_batch(
            SourceKind::Gaussian,
            x.view(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (4, 2));
    }

    proptest::proptest! {
        #[test]
        fn normalizer_round_trip(
            rows in proptest::collection::vec((-50.0f64..50.0, -5.0f64..5.0), 2..20),
            u in 0.0f64..1.0,
        ) {
            let x = Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i].0);
            let y = Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i].1);
            let d = PairedDataset::new(x, y, Split::Train).unwrap();
            let n = Normalizer::fit(&d);
            proptest::prop_assume!(n.x_max[0] > n.x_min[0]);
            let v = n.x_min[0] + u * (n.x_max[0] - n.x_min[0]);
            let back = n.invert_x(&n.apply_x(&[v]))[0];
            proptest::prop_assert!((back - v).abs() <= 1e-12 * v.abs().max(1.0));
        }

        #[test]
        fn scramble_is_a_derangement_preserving_rows(vals in proptest::collection::btree_set(-1000i32..1000, 2..30)) {
            let v: Vec<f64> = vals.iter().map(|&i| i as f64).collect();
            let x = Array2::from_shape_vec((v.len(), 1), v.clone()).unwrap();
            let z = sample_source_batch(SourceKind::PriorScrambled, x.view(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            for i in 0..v.len() {
                proptest::prop_assert!(z[[i, 0]] != x[[i, 0]]);
            }
            let mut a: Vec<f64> = z.iter().copied().collect();
            a.sort_by(f64::total_cmp);
            proptest::prop_assert_eq!(a, v);
        }
    }

    #[test]
    fn history_ma_uses_window() {
        let h = history(&[4.0, 2.0, 0.0], 2);
        let ma = h.moving_average();
        assert_abs_diff_eq!(ma[2], 1.0);
    }
}
