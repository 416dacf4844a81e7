use std::io::Write;
use std::path::Path;

use serde_json::json;

use crate::bank::BankStrategy;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::loss::LossRecord;

use super::config::{config_hash, ExperimentConfig};
use super::detector::DetectorState;
use super::pipeline::Batch;

/// Metrics after one epoch (epoch 0 is the initial bank).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub run: String,
    pub strategy: BankStrategy,
    pub epsilon: f64,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: u32,
    pub pl_count: usize,
    /// Pseudo labels above `report_conf` against target GT.
    pub pl_precision: f64,
    pub pl_recall: f64,
    pub pl_f1: f64,
    /// All pseudo labels, ranked by confidence.
    pub pl_map50: f64,
    /// Simple share of the epoch's pseudo-label records.
    pub simple_prop: f64,
    /// Same, restricted to true-positive pseudo labels.
    pub simple_prop_tp: f64,
    pub simple_count_tp: usize,
    /// FP rate of pseudo labels at or below `tau`, and above it.
    pub fp_low: Option<f64>,
    pub fp_high: Option<f64>,
    pub fp_bins: Vec<Option<f64>>,
    pub teacher_ap50: f64,
    pub state: DetectorState,
    pub bank_size: usize,
    /// Only on the final row.
    pub student_ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub epoch: u32,
    pub batch: Batch,
    pub pseudo: bool,
    pub weight: f64,
    pub is_simple: bool,
    pub record: LossRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub rows: Vec<EpochRow>,
    /// Filled when `dump_loss_records` is set.
    pub records: Vec<RecordRow>,
    /// Serialized bank per epoch when `dump_banks` is set.
    pub banks: Vec<(u32, Vec<u8>)>,
    pub teacher: DetectorState,
    pub student: DetectorState,
}

impl ExperimentReport {
    pub fn final_row(&self) -> &EpochRow {
        self.rows.last().expect("report has the initial row")
    }
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

const HEADER: &[&str] = &[
    "run",
    "strategy",
    "epsilon",
    "seed",
    "config_hash",
    "epoch",
    "pl_count",
    "pl_precision",
    "pl_recall",
    "pl_f1",
    "pl_map50",
    "simple_prop",
    "simple_prop_tp",
    "simple_count_tp",
    "fp_low",
    "fp_high",
];

const TAIL: &[&str] =
    &["teacher_ap50", "loc_noise_sigma", "miss_rate", "fp_rate", "conf_calibration", "bank_size", "student_ap50"];

/// One CSV row per run per epoch. All runs must share the bin count.
pub fn write_report_csv<W: Write>(out: W, reports: &[ExperimentReport]) -> Result<()> {
    let bins = reports.first().map_or(0, |r| r.config.fp_bins);
    if reports.iter().any(|r| r.config.fp_bins != bins) {
        return Err(Error::validation("all runs in one report must use the same fp_bins"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = HEADER.iter().map(|s| s.to_string()).collect();
    header.extend((0..bins).map(|b| format!("fp_bin_{b:02}")));
    header.extend(TAIL.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for rep in reports {
        for r in &rep.rows {
            let mut rec = vec![
                r.run.clone(),
                r.strategy.to_string(),
                f(r.epsilon),
                r.seed.to_string(),
                r.config_hash.clone(),
                r.epoch.to_string(),
                r.pl_count.to_string(),
                f(r.pl_precision),
                f(r.pl_recall),
                f(r.pl_f1),
                f(r.pl_map50),
                f(r.simple_prop),
                f(r.simple_prop_tp),
                r.simple_count_tp.to_string(),
                opt(r.fp_low),
                opt(r.fp_high),
            ];
            rec.extend(r.fp_bins.iter().map(|b| opt(*b)));
            rec.extend([
                f(r.teacher_ap50),
                f(r.state.loc_noise_sigma),
                f(r.state.miss_rate),
                f(r.state.fp_rate),
                f(r.state.conf_calibration),
                r.bank_size.to_string(),
                opt(r.student_ap50),
            ]);
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn report_csv_bytes(reports: &[ExperimentReport]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_report_csv(&mut buf, reports)?;
    Ok(buf)
}

pub fn write_records_csv<W: Write>(out: W, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run",
        "epoch",
        "batch",
        "origin",
        "image_id",
        "label_idx",
        "cls_loss",
        "loc_loss",
        "confidence",
        "weight",
        "is_tp",
        "is_simple",
    ])?;
    for rep in reports {
        for r in &rep.records {
            w.write_record([
                rep.config.name.clone(),
                r.epoch.to_string(),
                r.batch.name().to_string(),
                if r.pseudo { "pseudo_label" } else { "ground_truth" }.to_string(),
                r.record.image_id.clone(),
                r.record.label_idx.to_string(),
                f(r.record.cls_loss),
                f(r.record.loc_loss),
                f(r.record.confidence),
                f(r.weight),
                r.record.is_true_positive.to_string(),
                r.is_simple.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Resolved configs, hashes and final metrics. No timestamps, so identical
/// runs give identical bytes.
pub fn metrics_json(reports: &[ExperimentReport]) -> serde_json::Value {
    let configs: Vec<ExperimentConfig> = reports.iter().map(|r| r.config.clone()).collect();
    let runs: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            let last = r.final_row();
            let mut config = r.config.clone();
            config.output_dir = None;
            json!({
                "name": r.config.name,
                "strategy": r.config.strategy,
                "epsilon": r.config.epsilon,
                "config_hash": r.config_hash,
                "config": config,
                "final": {
                    "epoch": last.epoch,
                    "pl_f1": last.pl_f1,
                    "pl_map50": last.pl_map50,
                    "simple_prop": last.simple_prop,
                    "simple_prop_tp": last.simple_prop_tp,
                    "teacher_ap50": last.teacher_ap50,
                    "student_ap50": last.student_ap50,
                },
                "teacher": r.teacher,
                "student": r.student,
            })
        })
        .collect();
    json!({ "config_hash": config_hash(&configs), "runs": runs })
}

/// Writes report.csv, metrics.json and the optional dumps into `dir`.
pub fn write_outputs(dir: &Path, reports: &[ExperimentReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.csv"), &report_csv_bytes(reports)?)?;
    let mut json = serde_json::to_vec_pretty(&metrics_json(reports)).map_err(|e| Error::validation(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&dir.join("metrics.json"), &json)?;
    if reports.iter().any(|r| !r.records.is_empty()) {
        let mut buf = Vec::new();
        write_records_csv(&mut buf, reports)?;
        write_atomic(&dir.join("loss_records.csv"), &buf)?;
    }
    for rep in reports {
        for (epoch, bytes) in &rep.banks {
            let name = format!("bank_{}_epoch{epoch:03}.jsonl", rep.config.name);
            write_atomic(&dir.join(name), bytes)?;
        }
    }
    Ok(())
}
