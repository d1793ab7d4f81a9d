//! Grids of config variants trained under identical seeds.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::train::{Item, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Experts,
    Loss,
    Feedback,
    /// Full model against feedback-free variants with both loss kinds.
    Components,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Experts, Axis::Loss, Axis::Feedback, Axis::Components];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Experts => "experts",
            Axis::Loss => "loss",
            Axis::Feedback => "feedback",
            Axis::Components => "components",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown axis {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub overrides: Vec<String>,
}

fn cell(label: &str, overrides: &[&str]) -> Cell {
    Cell {
        label: label.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

/// The variants of one axis, each as overrides on the base config.
pub fn cells(axis: Axis) -> Vec<Cell> {
    match axis {
        Axis::Experts => [
            ("a", "identity", "identity"),
            ("b", "linear", "linear"),
            ("c", "cnn", "cnn"),
            ("d", "transformer", "transformer"),
            ("e", "transformer", "identity"),
            ("f", "cnn", "identity"),
        ]
        .iter()
        .map(|(tag, mr, hd)| Cell {
            label: format!("({tag}) {mr}/{hd}"),
            overrides: vec![format!("experts.mr={mr}"), format!("experts.hd={hd}")],
        })
        .collect(),
        Axis::Loss => crate::joint_loss::LossType::ALL
            .iter()
            .map(|t| Cell {
                label: t.to_string(),
                overrides: vec![format!("loss.type={t}")],
            })
            .collect(),
        Axis::Feedback => crate::feedback::FeedbackMode::ALL
            .iter()
            .map(|m| Cell {
                label: m.to_string(),
                overrides: vec![format!("feedback.mode={m}")],
            })
            .collect(),
        Axis::Components => vec![
            cell("full", &[]),
            cell("no feedback, task_dependent", &["feedback.mode=none", "loss.type=task_dependent"]),
            cell("no feedback, sum", &["feedback.mode=none", "loss.type=sum"]),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub results: Vec<CellResult>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.results {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    /// Median over seeds of `f` for one cell.
    pub fn median_of(&self, label: &str, f: impl Fn(&EvalReport) -> f64) -> f64 {
        median(
            self.results
                .iter()
                .filter(|r| r.label == label)
                .map(|r| f(&r.eval))
                .collect(),
        )
    }

    /// Markdown table of per-cell medians over seeds.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| {} | R1@0.5 | R1@0.7 | mAP@0.5 | mAP@0.75 | mAP avg | HD mAP | HIT@1 |", self.axis);
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        for label in self.labels() {
            let m = |f: fn(&EvalReport) -> f64| 100.0 * self.median_of(&label, f);
            let _ = writeln!(
                s,
                "| {label} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
                m(|e| e.mr.r1_050),
                m(|e| e.mr.r1_070),
                m(|e| e.mr.map_050),
                m(|e| e.mr.map_075),
                m(|e| e.mr.map_avg),
                m(|e| e.hd.map),
                m(|e| e.hd.hit1),
            );
        }
        s
    }
}

/// Trains one config and evaluates its averaged weights on `val`.
pub fn train_and_evaluate(config: &RunConfig, train: &[Item], val: &[Item]) -> Result<EvalReport> {
    let mut trainer = Trainer::for_items(config.clone(), train, DType::F32)?;
    // evaluation only at the end
    trainer.config.eval_every = trainer.config.epochs;
    trainer.fit(train, &[], None)?;
    trainer.evaluate(val)
}

/// Runs every cell of `axis` for every seed. `on_result` sees each result as
/// it completes.
pub fn ablate(
    base: &RunConfig,
    axis: Axis,
    seeds: &[u64],
    train: &[Item],
    val: &[Item],
    mut on_result: impl FnMut(&CellResult),
) -> Result<AblationReport> {
    let mut results = Vec::new();
    for c in cells(axis) {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.apply_overrides(&c.overrides)?;
            cfg.seed = seed;
            let eval = train_and_evaluate(&cfg, train, val)?;
            let r = CellResult {
                label: c.label.clone(),
                overrides: c.overrides.clone(),
                seed,
                eval,
            };
            on_result(&r);
            results.push(r);
        }
    }
    Ok(AblationReport { axis, results })
}
