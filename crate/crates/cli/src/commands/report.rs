use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::evaluate::read_metrics;
use super::evaluate::{MetricRecord, METRICS_JSONL};
use super::study::{StudyReport, REPORT_JSON};
use super::train::{SelectedCheckpoints, SELECTED_JSON};
use crate::error::CliResult;
use crate::experiment::Experiment;
use crate::manifest::RunManifest;

pub const RUN_REPORT_JSON: &str = "report.json";
pub const RUN_REPORT_TXT: &str = "report.txt";

/// Everything the earlier stages left behind, collected in one place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub problem: String,
    pub seed: u64,
    pub source: String,
    pub stages: Vec<(String, bool)>,
    /// Manifest discrepancies found before this report was written.
    pub integrity_problems: Vec<String>,
    pub selected: Option<SelectedCheckpoints>,
    pub metrics: Vec<MetricRecord>,
    pub study: Option<StudyReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "problem {} seed {} source {}",
            self.problem, self.seed, self.source
        );
        for (cmd, ok) in &self.stages {
            let _ = writeln!(
                s,
                "stage {cmd}: {}",
                if *ok { "complete" } else { "failed" }
            );
        }
        if self.integrity_problems.is_empty() {
            let _ = writeln!(s, "manifest: all files verified");
        } else {
            for p in &self.integrity_problems {
                let _ = writeln!(s, "manifest: {p}");
            }
        }
        if let Some(sel) = &self.selected {
            let _ = writeln!(s, "training: {} iterations", sel.final_iteration);
            for (name, pick) in [
                ("ma_minimum", &sel.ma_minimum),
                ("ma_saturation", &sel.ma_saturation),
            ] {
                if let Some(p) = pick {
                    let _ = writeln!(
                        s,
                        "  {name}: iteration {} (checkpoint {})",
                        p.iteration, p.checkpoint
                    );
                }
            }
        }
        for m in &self.metrics {
            match m {
                MetricRecord::Ensemble(e) => {
                    let _ = write!(
                        s,
                        "ensemble {:02} y_hat {:?}: mean {:?} std {:?} steps {:.1} modes {:?}",
                        e.index, e.y_hat, e.mean, e.std, e.avg_n_steps, e.kde_modes
                    );
                    if let Some(r) = &e.reference {
                        let _ = write!(
                            s,
                            " sinkhorn {:.4} baseline {}",
                            r.sinkhorn,
                            fmt_opt(r.baseline)
                        );
                    }
                    s.push('\n');
                }
                MetricRecord::Summary(r) => {
                    let _ = writeln!(
                        s,
                        "summary: mean sinkhorn {} mean baseline {} mean steps {:.2} target {}",
                        fmt_opt(r.mean_sinkhorn),
                        fmt_opt(r.mean_baseline),
                        r.mean_n_steps,
                        fmt_opt(r.benchmark_target)
                    );
                }
            }
        }
        if let Some(st) = &self.study {
            let _ = writeln!(
                s,
                "study at y_hat {}: exact mean {:.4} std {:.4}, moving-average minimum at iteration {}",
                st.y_hat, st.exact_mean, st.exact_std, st.ma_minimum_iteration
            );
            for c in &st.checkpoints {
                let _ = writeln!(
                    s,
                    "  {} (iteration {}): mean {:.4} std {:.4}",
                    c.label, c.iteration, c.mean, c.std
                );
            }
        }
        s
    }
}

/// Verifies the manifest and summarizes the run into `report.json` and `report.txt`.
pub fn report(exp: &Experiment) -> CliResult<RunReport> {
    let manifest = RunManifest::read(&exp.dir)?;
    let integrity_problems = manifest.verify(&exp.dir)?;
    let selected = exp
        .path(SELECTED_JSON)
        .exists()
        .then(|| exp.read_json(SELECTED_JSON))
        .transpose()?;
    let metrics = if exp.path(METRICS_JSONL).exists() {
        read_metrics(exp)?
    } else {
        Vec::new()
    };
    let study = exp
        .path(REPORT_JSON)
        .exists()
        .then(|| exp.read_json(REPORT_JSON))
        .transpose()?;
    let rep = RunReport {
        problem: exp.cfg.problem.to_string(),
        seed: exp.cfg.seed,
        source: format!("{:?}", exp.cfg.source),
        stages: manifest
            .stages
            .iter()
            .map(|s| (s.command.clone(), s.complete))
            .collect(),
        integrity_problems,
        selected,
        metrics,
        study,
    };
    exp.write_json(RUN_REPORT_JSON, &rep)?;
    exp.write_text(RUN_REPORT_TXT, &rep.to_text())?;
    Ok(rep)
}
