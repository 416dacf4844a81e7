use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::json;

use plcurate::bank::{init_bank, BankStrategy, BankThresholds, MemoryBank};
use plcurate::fusion::{nms, soft_nms, wbf, FusionConfig};
use plcurate::io::{read_label_sets_file, write_atomic, write_label_sets_file};
use plcurate::loss::{LossRecord, SimpleCriterion, Weighting};
use plcurate::metrics::{fp_by_confidence, mean_ap, precision_recall, simple_proportion};
use plcurate::sim::{parse_configs, preset, run_suite, write_outputs};
use plcurate::{LabelKind, LabelSet};

use crate::{
    BankExportArgs, BankInitArgs, BankUpdateArgs, CliError, CliResult, EvalArgs, FuseArgs, FuseMethod, SimulateArgs,
};

fn in_file(path: &Path, e: impl Into<CliError>) -> CliError {
    match e.into() {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn read_sets(path: &Path, kind: LabelKind) -> CliResult<Vec<LabelSet>> {
    read_label_sets_file(path, kind).map_err(|e| in_file(path, e))
}

fn read_bank(path: &Path) -> CliResult<MemoryBank> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    MemoryBank::read_from(BufReader::new(file)).map_err(|e| in_file(path, e))
}

fn write_bank(path: &Path, bank: &MemoryBank) -> CliResult {
    write_atomic(path, &bank.to_bytes()).map_err(|e| in_file(path, e))
}

fn check_strategy(bank: &MemoryBank, flag: Option<crate::StrategyArg>, path: &Path) -> CliResult {
    if let Some(s) = flag {
        let s = BankStrategy::from(s);
        if s != bank.strategy() {
            return Err(invalid(format!(
                "{}: bank file uses strategy {}, but --strategy {} was given",
                path.display(),
                bank.strategy(),
                s
            )));
        }
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> CliResult {
    let mut cfgs = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            parse_configs(&text).map_err(|e| in_file(path, e))?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => preset("default")?,
    };
    if cfgs.is_empty() {
        return Err(invalid("config lists no runs"));
    }
    if let Some(seed) = a.seed {
        for c in &mut cfgs {
            c.seed = seed;
        }
    }
    let dir: PathBuf =
        a.output_dir.clone().or_else(|| cfgs[0].output_dir.clone()).unwrap_or_else(|| PathBuf::from("plcurate-out"));
    let reports = run_suite(&cfgs)?;
    write_outputs(&dir, &reports).map_err(|e| in_file(&dir, e))?;
    for r in &reports {
        let last = r.final_row();
        println!(
            "{}: epoch {} pseudo-label mAP50 {:.4} simple proportion {:.4} (TP {:.4}) student AP50 {:.4}",
            r.config.name,
            last.epoch,
            last.pl_map50,
            last.simple_prop,
            last.simple_prop_tp,
            last.student_ap50.unwrap_or(f64::NAN)
        );
    }
    log::info!("wrote {} run(s) to {}", reports.len(), dir.display());
    Ok(())
}

fn by_id(sets: Vec<LabelSet>) -> BTreeMap<String, LabelSet> {
    sets.into_iter().map(|s| (s.image_id.clone(), s)).collect()
}

pub fn fuse(a: &FuseArgs) -> CliResult {
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(invalid(format!("--iou must be in (0, 1], got {}", a.iou)));
    }
    let sources: Vec<BTreeMap<String, LabelSet>> =
        a.inputs.iter().map(|p| read_sets(p, LabelKind::Prediction).map(by_id)).collect::<CliResult<_>>()?;
    let ids: BTreeSet<&String> = sources.iter().flat_map(|s| s.keys()).collect();
    let wbf_cfg = FusionConfig::new(a.iou, a.rescale, sources.len())?;
    let fused: Vec<LabelSet> = ids
        .into_par_iter()
        .map(|id| {
            let per: Vec<LabelSet> = sources
                .iter()
                .map(|s| s.get(id).cloned().unwrap_or_else(|| LabelSet::empty(id.as_str(), LabelKind::Prediction)))
                .collect();
            let pooled = || {
                let dets = per.iter().flat_map(|s| s.detections().iter().copied()).collect();
                LabelSet::new(id.as_str(), LabelKind::Prediction, dets)
            };
            match a.method {
                FuseMethod::Wbf => wbf(&per, &wbf_cfg),
                FuseMethod::Nms => Ok(nms(&pooled(), a.iou)),
                FuseMethod::SoftNms => soft_nms(&pooled(), a.iou, a.sigma, a.score_floor),
            }
        })
        .collect::<plcurate::Result<_>>()?;
    write_label_sets_file(&a.output, &fused).map_err(|e| in_file(&a.output, e))?;
    let n: usize = fused.iter().map(LabelSet::len).sum();
    log::info!("fused {} image(s) into {n} detection(s)", fused.len());
    Ok(())
}

pub fn bank_init(a: &BankInitArgs) -> CliResult {
    let mut th = BankThresholds::default();
    let overrides = [
        (&mut th.init_conf, a.init_conf),
        (&mut th.fuse_conf, a.fuse_conf),
        (&mut th.iou_match, a.iou_match),
        (&mut th.direct_conf, a.direct_conf),
        (&mut th.mevc_positive, a.mevc_positive),
        (&mut th.mevc_ignore, a.mevc_ignore),
    ];
    for (slot, v) in overrides {
        if let Some(v) = v {
            *slot = v;
        }
    }
    let preds = read_sets(&a.detections, LabelKind::Prediction)?;
    let bank = init_bank(&preds, th, a.strategy.into())?.with_rescale(a.rescale);
    write_bank(&a.bank, &bank)?;
    println!("bank {}: {} image(s), {} entries", bank.strategy(), bank.image_count(), bank.len());
    Ok(())
}

pub fn bank_update(a: &BankUpdateArgs) -> CliResult {
    let bank = read_bank(&a.bank)?;
    check_strategy(&bank, a.strategy, &a.bank)?;
    let preds = read_sets(&a.detections, LabelKind::Prediction)?;
    let bank = bank.update(&preds)?;
    write_bank(a.output.as_deref().unwrap_or(&a.bank), &bank)?;
    println!(
        "bank {} round {}: {} image(s), {} entries",
        bank.strategy(),
        bank.round(),
        bank.image_count(),
        bank.len()
    );
    Ok(())
}

pub fn bank_export(a: &BankExportArgs) -> CliResult {
    let bank = read_bank(&a.bank)?;
    check_strategy(&bank, a.strategy, &a.bank)?;
    if let Some(m) = a.min_score {
        if !(0.0..=1.0).contains(&m) {
            return Err(invalid(format!("--min-score must be in [0, 1], got {m}")));
        }
    }
    let labels = bank.snapshot_above(a.positive_only, a.min_score);
    write_label_sets_file(&a.output, &labels).map_err(|e| in_file(&a.output, e))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RecordRow {
    image_id: String,
    label_idx: usize,
    cls_loss: f64,
    loc_loss: f64,
    confidence: f64,
    is_tp: bool,
}

fn read_records(path: &Path) -> CliResult<Vec<LossRecord>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<RecordRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::Io(format!("{}: {e}", path.display())),
            _ => invalid(format!("{}: line {line}: {e}", path.display())),
        })?;
        let rec = LossRecord::new(row.image_id, row.label_idx, row.cls_loss, row.loc_loss, row.confidence, row.is_tp)
            .map_err(|e| invalid(format!("{}: line {line}: {e}", path.display())))?;
        out.push(rec);
    }
    Ok(out)
}

fn bin_edges(a: &EvalArgs) -> CliResult<Vec<f64>> {
    match &a.bin_edges {
        Some(e) => Ok(e.clone()),
        None if a.bins == 0 => Err(invalid("--bins must be at least 1")),
        None => Ok((0..=a.bins).map(|i| i as f64 / a.bins as f64).collect()),
    }
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let dets = read_sets(&a.detections, LabelKind::Prediction)?;
    let gts = read_sets(&a.gt, LabelKind::GroundTruth)?;
    if gts.is_empty() {
        return Err(invalid(format!("{}: ground-truth file has no boxes", a.gt.display())));
    }
    let det_ids: BTreeSet<String> = dets.iter().map(|s| s.image_id.clone()).collect();
    let gt_ids: BTreeSet<String> = gts.iter().map(|s| s.image_id.clone()).collect();
    let dets_only: Vec<&str> = det_ids.difference(&gt_ids).map(String::as_str).collect();
    let gt_only: Vec<&str> = gt_ids.difference(&det_ids).map(String::as_str).collect();
    let warning = !dets_only.is_empty() || (!gt_only.is_empty() && !a.keep_gt_only);
    if !dets_only.is_empty() {
        log::warn!("ignoring {} image(s) without ground truth: {}", dets_only.len(), dets_only.join(", "));
    }
    if !gt_only.is_empty() {
        if a.keep_gt_only {
            log::info!("{} ground-truth image(s) have no detections", gt_only.len());
        } else {
            log::warn!(
                "ignoring {} ground-truth image(s) absent from the detections (pass --keep-gt-only to count them as misses): {}",
                gt_only.len(),
                gt_only.join(", ")
            );
        }
    }
    let dets: Vec<LabelSet> = dets.into_iter().filter(|s| gt_ids.contains(&s.image_id)).collect();
    let gts: Vec<LabelSet> =
        if a.keep_gt_only { gts } else { gts.into_iter().filter(|s| det_ids.contains(&s.image_id)).collect() };

    let seen = dets.iter().chain(&gts).flat_map(|s| s.detections()).map(|d| d.class_id).max();
    let classes = a.classes.unwrap_or(seen.map_or(1, |m| m + 1));
    for s in dets.iter().chain(&gts) {
        s.validate_classes(classes)?;
    }
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(invalid(format!("--iou must be in (0, 1], got {}", a.iou)));
    }

    let map = mean_ap(&dets, &gts, classes, a.iou)?;
    let pr = precision_recall(&dets, &gts, a.iou, a.min_score);
    let hist = fp_by_confidence(&dets, &gts, &bin_edges(a)?)?;
    let (fp_low, fp_high) = match hist.split_rates(a.tau) {
        Ok(split) => split,
        Err(e) => {
            log::warn!("no low/high FP split: {e}");
            (None, None)
        }
    };

    let mut out = json!({
        "map": map.map,
        "iou_threshold": a.iou,
        "classes": classes,
        "per_class_ap": map.per_class,
        "precision": pr.precision,
        "recall": pr.recall,
        "f1": pr.f1,
        "tp": pr.tp,
        "fp": pr.fp,
        "n_gt": pr.n_gt,
        "min_score": a.min_score,
        "fp_histogram": {
            "edges": hist.edges,
            "fp": hist.fp,
            "total": hist.total,
            "rate": hist.rates(),
        },
        "tau": a.tau,
        "fp_rate_low": fp_low,
        "fp_rate_high": fp_high,
        "warning": warning,
        "missing": {
            "detections_only": dets_only,
            "ground_truth_only": gt_only,
        },
    });
    if let Some(path) = &a.loss_records {
        let records = read_records(path)?;
        let crit = SimpleCriterion::new(a.simple_threshold, Weighting::Adaptive { tau: a.tau });
        out["simple_proportion"] = json!({
            "threshold": a.simple_threshold,
            "all": simple_proportion(&records, &crit, false),
            "tp_only": simple_proportion(&records, &crit, true),
        });
    }

    let mut text = serde_json::to_vec_pretty(&out).map_err(|e| CliError::Io(e.to_string()))?;
    text.push(b'\n');
    match &a.output {
        Some(p) => write_atomic(p, &text).map_err(|e| in_file(p, e))?,
        None => std::io::stdout().write_all(&text).map_err(|e| CliError::Io(e.to_string()))?,
    }
    if let Some(p) = &a.bins_csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(["bin_lo", "bin_hi", "fp", "total", "rate"]).map_err(csv_err)?;
        for (b, rate) in hist.rates().iter().enumerate() {
            w.write_record([
                hist.edges[b].to_string(),
                hist.edges[b + 1].to_string(),
                hist.fp[b].to_string(),
                hist.total[b].to_string(),
                format!("{rate:.6}"),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        write_atomic(p, &bytes).map_err(|e| in_file(p, e))?;
    }
    Ok(())
}
