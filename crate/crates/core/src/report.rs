//! Run outputs: metrics.csv, summary.json, timing.csv, the ablation table and
//! per-step plot series.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::average_incremental_accuracy;
use crate::mixaug::AugMode;
use crate::trainer::{median_epoch_seconds, Phase, StepReport};

pub const METRICS_HEADER: [&str; 10] = [
    "step",
    "phase",
    "epoch",
    "loss",
    "lr",
    "top1_big",
    "top5_big",
    "top1_compact",
    "top5_compact",
    "epoch_time_s",
];

fn csv_err(path: &str, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// One row per training epoch and one `eval` row per step. Epoch times are
/// written only when `with_time` is set, since they break byte identity
/// between otherwise identical runs.
pub fn metrics_csv(reports: &[StepReport], with_time: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(|e| csv_err("metrics.csv", e))?;
    for r in reports {
        for e in &r.epochs {
            let time = if with_time { e.seconds.to_string() } else { String::new() };
            let row = [
                r.step.to_string(),
                e.phase.as_str().to_string(),
                e.epoch.to_string(),
                e.loss.to_string(),
                e.lr.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                time,
            ];
            w.write_record(&row).map_err(|e| csv_err("metrics.csv", e))?;
        }
        let row = [
            r.step.to_string(),
            "eval".into(),
            String::new(),
            String::new(),
            String::new(),
            r.big.top1.to_string(),
            r.big.top5.to_string(),
            r.compact.top1.to_string(),
            r.compact.top5.to_string(),
            String::new(),
        ];
        w.write_record(&row).map_err(|e| csv_err("metrics.csv", e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("metrics.csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("metrics.csv", e.to_string()))
}

/// Per-step accuracies of one model, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
    pub avg_top1: f64,
    pub last_top1: f64,
    pub avg_top5: f64,
    pub last_top5: f64,
}

impl Series {
    pub fn new(top1: Vec<f64>, top5: Vec<f64>) -> Result<Self> {
        Ok(Self {
            avg_top1: average_incremental_accuracy(&top1)?,
            avg_top5: average_incremental_accuracy(&top5)?,
            last_top1: top1[top1.len() - 1],
            last_top5: top5[top5.len() - 1],
            top1,
            top5,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub classes_seen: usize,
    pub compact_params: usize,
    pub compact_extractor_params: usize,
    pub big_params: Option<usize>,
    pub gamma_expand: Option<f64>,
    pub gamma_compress: Option<f64>,
    pub previous_top1: Option<f64>,
    pub memory_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub dataset_seed: u64,
    pub compress_aug: String,
    pub big: Series,
    pub compact: Series,
    pub steps: Vec<StepSummary>,
    /// Median compression-epoch time of each incremental step divided by the
    /// first incremental step's; present only when epoch times are recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized_epoch_times: Option<Vec<f64>>,
}

impl RunSummary {
    pub fn new(reports: &[StepReport], seed: u64, dataset_seed: u64, aug: AugMode, with_time: bool) -> Result<Self> {
        let medians: Vec<f64> = reports
            .iter()
            .filter_map(|r| median_epoch_seconds(&r.epochs, Phase::Compress).ok())
            .collect();
        let normalized_epoch_times = (with_time && !medians.is_empty()).then(|| medians.iter().map(|m| m / medians[0]).collect());
        let col = |f: fn(&StepReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            seed,
            dataset_seed,
            compress_aug: aug.to_string(),
            big: Series::new(col(|r| r.big.top1), col(|r| r.big.top5))?,
            compact: Series::new(col(|r| r.compact.top1), col(|r| r.compact.top5))?,
            steps: reports
                .iter()
                .map(|r| StepSummary {
                    step: r.step,
                    classes_seen: r.classes_seen,
                    compact_params: r.compact_params,
                    compact_extractor_params: r.compact_extractor_params,
                    big_params: r.big_params,
                    gamma_expand: r.gamma_expand,
                    gamma_compress: r.gamma_compress,
                    previous_top1: r.previous_top1,
                    memory_size: r.memory_counts.iter().sum(),
                })
                .collect(),
            normalized_epoch_times,
        })
    }
}

/// Wall time of every epoch.
pub fn timing_csv(reports: &[StepReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "phase", "epoch", "seconds"])
        .map_err(|e| csv_err("timing.csv", e))?;
    for r in reports {
        for e in &r.epochs {
            w.write_record([
                r.step.to_string(),
                e.phase.as_str().into(),
                e.epoch.to_string(),
                e.seconds.to_string(),
            ])
            .map_err(|e| csv_err("timing.csv", e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::format("timing.csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("timing.csv", e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write metrics.csv, summary.json and timing.csv into `dir`.
pub fn write_run(dir: &Path, summary: &RunSummary, reports: &[StepReport], with_time: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("metrics.csv"), &metrics_csv(reports, with_time)?)?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::format("summary.json", e.to_string()))?;
    write(&dir.join("summary.json"), &(json + "\n"))?;
    write(&dir.join("timing.csv"), &timing_csv(reports)?)
}

/// Eval rows of a metrics.csv: `(step, top1_big, top5_big, top1_compact, top5_compact)`.
pub fn read_eval_rows(text: &str, origin: &str) -> Result<Vec<(usize, [f64; 4])>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| csv_err(origin, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::format(
            origin,
            format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(origin, e))?;
        if &rec[1] != "eval" {
            continue;
        }
        let line = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| Error::format(origin, format!("line {line}: column {} is not a number", METRICS_HEADER[k])))
        };
        let step = rec[0]
            .parse::<usize>()
            .map_err(|_| Error::format(origin, format!("line {line}: bad step")))?;
        out.push((step, [num(5)?, num(6)?, num(7)?, num(8)?]));
    }
    if out.is_empty() {
        return Err(Error::format(origin, "no eval rows"));
    }
    Ok(out)
}

/// Per-step accuracy series for plotting, one row per step.
pub fn plotdata(metrics: &str, origin: &str) -> Result<String> {
    let rows = read_eval_rows(metrics, origin)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "top1_big", "top5_big", "top1_compact", "top5_compact"])
        .map_err(|e| csv_err("plotdata", e))?;
    for (step, v) in rows {
        w.write_record([
            step.to_string(),
            v[0].to_string(),
            v[1].to_string(),
            v[2].to_string(),
            v[3].to_string(),
        ])
        .map_err(|e| csv_err("plotdata", e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("plotdata", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("plotdata", e.to_string()))
}

/// Compact-model Avg and Last top-1 of one (seed, mode) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub mode: AugMode,
    pub avg: f64,
    pub last: f64,
    /// Median compression epoch time in seconds, warm-up excluded.
    pub compress_epoch_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub modes: Vec<AugMode>,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, seed: u64, mode: AugMode) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.seed == seed && c.mode == mode)
    }

    /// Seed-mean `(avg, last)` of one mode.
    pub fn mean(&self, mode: AugMode) -> Option<(f64, f64)> {
        let cells: Vec<_> = self.cells.iter().filter(|c| c.mode == mode).collect();
        if cells.is_empty() {
            return None;
        }
        let n = cells.len() as f64;
        Some((
            cells.iter().map(|c| c.avg).sum::<f64>() / n,
            cells.iter().map(|c| c.last).sum::<f64>() / n,
        ))
    }

    /// One row per seed plus a mean row; an Avg and a Last column per mode.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["seed".to_string()];
        for m in &self.modes {
            header.push(format!("{m}_avg"));
            header.push(format!("{m}_last"));
        }
        w.write_record(&header).map_err(|e| csv_err("ablation.csv", e))?;
        let fmt = |v: f64| format!("{v:.2}");
        for &s in &self.seeds {
            let mut row = vec![s.to_string()];
            for &m in &self.modes {
                match self.cell(s, m) {
                    Some(c) => row.extend([fmt(c.avg), fmt(c.last)]),
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row).map_err(|e| csv_err("ablation.csv", e))?;
        }
        let mut row = vec!["mean".to_string()];
        for &m in &self.modes {
            match self.mean(m) {
                Some((a, l)) => row.extend([fmt(a), fmt(l)]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row).map_err(|e| csv_err("ablation.csv", e))?;
        let bytes = w.into_inner().map_err(|e| Error::format("ablation.csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("ablation.csv", e.to_string()))
    }

    /// Markdown rendering of the same table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| seed |");
        for m in &self.modes {
            s += &format!(" {m} Avg | {m} Last |");
        }
        s += "\n|---|";
        s += &"---|---|".repeat(self.modes.len());
        s += "\n";
        let cell = |v: Option<(f64, f64)>| match v {
            Some((a, l)) => format!(" {a:.2} | {l:.2} |"),
            None => " | |".into(),
        };
        for &seed in &self.seeds {
            s += &format!("| {seed} |");
            for &m in &self.modes {
                s += &cell(self.cell(seed, m).map(|c| (c.avg, c.last)));
            }
            s += "\n";
        }
        s += "| mean |";
        for &m in &self.modes {
            s += &cell(self.mean(m));
        }
        s + "\n"
    }
}
