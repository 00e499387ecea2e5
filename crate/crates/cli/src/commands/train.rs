use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cfm_core::{
    select_checkpoint, Checkpoint, CheckpointStrategy, LossHistory, PairedDataset, Trainer,
};
use serde::{Deserialize, Serialize};

use super::generate::{load_data, LoadedData};
use crate::config::CheckpointRef;
use crate::error::{CliError, CliResult};
use crate::experiment::Experiment;

pub const LOSS_CSV: &str = "train/loss.csv";
pub const CHECKPOINT_DIR: &str = "train/checkpoints";
pub const SELECTED_JSON: &str = "train/selected.json";
const LOSS_HEADER: &str = "iteration,train_loss,test_loss,test_loss_ma";

pub fn checkpoint_rel(name: &str) -> String {
    format!("{CHECKPOINT_DIR}/{name}.ckpt")
}

pub fn iteration_name(it: usize) -> String {
    format!("iter_{it:08}")
}

/// A checkpoint chosen by one selection strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Iteration the strategy picked.
    pub iteration: usize,
    /// Stored checkpoint closest to it (at or after when possible).
    pub checkpoint: String,
    pub checkpoint_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedCheckpoints {
    pub final_iteration: usize,
    pub ma_minimum: Option<Selection>,
    pub ma_saturation: Option<Selection>,
    /// Iterations with a stored `iter_*` checkpoint.
    pub retained: Vec<usize>,
    pub sample_with_ema: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_iteration: usize,
    pub resumed_from: Option<usize>,
    pub final_train_loss: f64,
    pub last_test_loss: Option<f64>,
    pub selected: SelectedCheckpoints,
}

/// Normalized copies of the generated datasets.
pub fn normalized(data: &LoadedData) -> CliResult<(PairedDataset, PairedDataset)> {
    Ok((
        data.normalizer.apply(&data.train)?,
        data.normalizer.apply(&data.test)?,
    ))
}

/// Trains on the generated data. With `resume`, continues from the latest
/// stored checkpoint and reproduces the uninterrupted run bit for bit.
pub fn train(exp: &Experiment, resume: bool) -> CliResult<TrainSummary> {
    let cfg = &exp.cfg;
    let data = load_data(exp)?;
    let (train, test) = normalized(&data)?;
    let mlp = cfg.mlp_config(data.meta.x_dim, data.meta.y_dim);
    let tcfg = cfg.train_config();

    let start = if resume {
        latest_checkpoint(exp)?
    } else {
        None
    };
    let (mut trainer, mut best, resumed_from) = match start {
        Some(ckpt) => {
            let it = ckpt.iteration as usize;
            let history = read_loss_history(&exp.path(LOSS_CSV), it, tcfg.ma_window)?;
            let trainer = Trainer::resume(&train, &test, tcfg.clone(), cfg.source, &ckpt, history)?;
            let best = match Checkpoint::read(&exp.path(&checkpoint_rel("ma_minimum"))) {
                Ok(b) if Some(b.iteration as usize) == trainer.ma_minimum() => Some(b),
                _ => {
                    if trainer.ma_minimum().is_some() {
                        log::warn!(
                            "train: moving-average minimum snapshot unavailable after resume"
                        );
                    }
                    None
                }
            };
            log::info!("train: resuming at iteration {it}");
            (trainer, best, Some(it))
        }
        None => {
            let dir = exp.path("train");
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
            }
            (
                Trainer::new(&train, &test, tcfg.clone(), mlp, cfg.source)?,
                None,
                None,
            )
        }
    };
    exp.subdir(CHECKPOINT_DIR)?;
    let mut log = LossLog::open(exp, trainer.history())?;

    let retain = |it: usize| {
        (tcfg.checkpoint_every > 0 && it.is_multiple_of(tcfg.checkpoint_every))
            || tcfg.keep_iterations.contains(&it)
    };
    let mut best_dirty = false;
    let mut last_test = trainer.history().evals.last().map(|e| e.1);
    while trainer.state().iteration < tcfg.max_iterations {
        let report = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                log.flush()?;
                return Err(e.into());
            }
        };
        let it = report.iteration;
        let ma = report
            .test_loss
            .map(|_| trailing_mean(&trainer.history().evals, tcfg.ma_window));
        log.row(it, report.train_loss, report.test_loss, ma)?;
        if report.test_loss.is_some() {
            last_test = report.test_loss;
        }
        if report.new_ma_minimum {
            best = Some(trainer.snapshot());
            best_dirty = true;
        }
        if retain(it) {
            trainer
                .snapshot()
                .write(&exp.path(&checkpoint_rel(&iteration_name(it))))?;
            if best_dirty {
                write_best(exp, &best)?;
                best_dirty = false;
            }
            log.flush()?;
        }
        if it % 1000 == 0 {
            log::debug!("train: iteration {it}, loss {:.6}", report.train_loss);
        }
    }
    log.flush()?;
    let final_ckpt = trainer.snapshot();
    final_ckpt.write(&exp.path(&checkpoint_rel("final")))?;
    write_best(exp, &best)?;

    let history = trainer.history();
    let final_iteration = trainer.state().iteration;
    let retained = retained_iterations(exp)?;
    let select = |strategy| -> CliResult<Option<Selection>> {
        if history.evals.is_empty() {
            return Ok(None);
        }
        let iteration = select_checkpoint(history, strategy)?;
        Ok(Some(nearest_stored(
            iteration,
            &retained,
            final_iteration,
            best.as_ref(),
        )))
    };
    let selected = SelectedCheckpoints {
        final_iteration,
        ma_minimum: select(CheckpointStrategy::MaMinimum)?,
        ma_saturation: select(cfg.saturation_strategy())?,
        retained,
        sample_with_ema: tcfg.use_ema,
    };
    exp.write_json(SELECTED_JSON, &selected)?;
    log::info!("train: finished at iteration {final_iteration}");
    Ok(TrainSummary {
        final_iteration,
        resumed_from,
        final_train_loss: history.train.last().copied().unwrap_or(f64::NAN),
        last_test_loss: last_test,
        selected,
    })
}

fn write_best(exp: &Experiment, best: &Option<Checkpoint>) -> CliResult<()> {
    if let Some(b) = best {
        b.write(&exp.path(&checkpoint_rel("ma_minimum")))?;
    }
    Ok(())
}

fn trailing_mean(evals: &[(usize, f64)], window: usize) -> f64 {
    let w = window.min(evals.len());
    evals[evals.len() - w..].iter().map(|e| e.1).sum::<f64>() / w as f64
}

/// Stored checkpoint for `iteration`: the MA-minimum snapshot if it matches,
/// else the first retained checkpoint at or after it, else the final one.
fn nearest_stored(
    iteration: usize,
    retained: &[usize],
    final_iteration: usize,
    best: Option<&Checkpoint>,
) -> Selection {
    let (checkpoint, checkpoint_iteration) =
        if best.is_some_and(|b| b.iteration as usize == iteration) {
            ("ma_minimum".to_string(), iteration)
        } else {
            match retained.iter().copied().find(|&r| r >= iteration) {
                Some(r) => (iteration_name(r), r),
                None => ("final".to_string(), final_iteration),
            }
        };
    Selection {
        iteration,
        checkpoint,
        checkpoint_iteration,
    }
}

fn retained_iterations(exp: &Experiment) -> CliResult<Vec<usize>> {
    let dir = exp.path(CHECKPOINT_DIR);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))? {
        let name = entry.map_err(|e| CliError::io(&dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(it) = name
            .strip_prefix("iter_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse().ok())
        {
            out.push(it);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// The stored checkpoint with the highest iteration, if any.
fn latest_checkpoint(exp: &Experiment) -> CliResult<Option<Checkpoint>> {
    let dir = exp.path(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<Checkpoint> = None;
    let mut names: Vec<String> = retained_iterations(exp)?
        .into_iter()
        .map(iteration_name)
        .collect();
    names.push("final".into());
    for name in names {
        let path = exp.path(&checkpoint_rel(&name));
        if !path.exists() {
            continue;
        }
        let c = Checkpoint::read(&path)?;
        if best.as_ref().is_none_or(|b| c.iteration > b.iteration) {
            best = Some(c);
        }
    }
    Ok(best)
}

/// Loads the checkpoint a `sample` or study run refers to.
pub fn load_checkpoint(exp: &Experiment, which: CheckpointRef) -> CliResult<Checkpoint> {
    let selected: SelectedCheckpoints = exp.read_json(SELECTED_JSON)?;
    let name = match which {
        CheckpointRef::Final => "final".to_string(),
        CheckpointRef::MaMinimum => {
            selected
                .ma_minimum
                .ok_or_else(|| CliError::Usage("run has no moving-average minimum".into()))?
                .checkpoint
        }
        CheckpointRef::MaSaturation => {
            selected
                .ma_saturation
                .ok_or_else(|| CliError::Usage("run has no saturation checkpoint".into()))?
                .checkpoint
        }
        CheckpointRef::Iteration(it) if it == selected.final_iteration => "final".to_string(),
        CheckpointRef::Iteration(it) => iteration_name(it),
    };
    Ok(Checkpoint::read(&exp.path(&checkpoint_rel(&name)))?)
}

/// Incremental writer for `train/loss.csv`.
struct LossLog {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl LossLog {
    /// Rewrites the file with the rows already in `history`, then appends.
    fn open(exp: &Experiment, history: &LossHistory) -> CliResult<Self> {
        let path = exp.path(LOSS_CSV);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        writeln!(log.out, "{LOSS_HEADER}").map_err(|e| CliError::io(&log.path, e))?;
        let mut k = 0;
        for (i, &loss) in history.train.iter().enumerate() {
            let it = i + 1;
            let (test, ma) = match history.evals.get(k) {
                Some(&(e_it, v)) if e_it == it => {
                    k += 1;
                    (
                        Some(v),
                        Some(trailing_mean(&history.evals[..k], history.ma_window)),
                    )
                }
                _ => (None, None),
            };
            log.row(it, loss, test, ma)?;
        }
        Ok(log)
    }

    fn row(&mut self, it: usize, train: f64, test: Option<f64>, ma: Option<f64>) -> CliResult<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(self.out, "{it},{train},{},{}", opt(test), opt(ma))
            .map_err(|e| CliError::io(&self.path, e))
    }

    fn flush(&mut self) -> CliResult<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Rebuilds the loss history of the first `iterations` iterations from `loss.csv`.
pub fn read_loss_history(
    path: &Path,
    iterations: usize,
    ma_window: usize,
) -> CliResult<LossHistory> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: usize, reason: &str| {
        CliError::Core(cfm_core::Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {line}: {reason}"),
        })
    };
    let mut history = LossHistory::new(ma_window);
    for (n, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad(n + 1, "expected 4 fields"));
        }
        let it: usize = fields[0].parse().map_err(|_| bad(n + 1, "bad iteration"))?;
        if it > iterations {
            break;
        }
        if it != history.train.len() + 1 {
            return Err(bad(n + 1, "iterations are not consecutive"));
        }
        history.train.push(
            fields[1]
                .parse()
                .map_err(|_| bad(n + 1, "bad train loss"))?,
        );
        if !fields[2].is_empty() {
            let v = fields[2].parse().map_err(|_| bad(n + 1, "bad test loss"))?;
            history.evals.push((it, v));
        }
    }
    Ok(history)
}
