use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn plcurate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plcurate"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PLCURATE_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn det(img: &str, cls: u32, b: [f64; 4], score: f64) -> String {
    format!(r#"{{"image_id":"{img}","class_id":{cls},"bbox":[{},{},{},{}],"score":{score}}}"#, b[0], b[1], b[2], b[3])
        + "\n"
}

fn gt(img: &str, cls: u32, b: [f64; 4]) -> String {
    format!(r#"{{"image_id":"{img}","class_id":{cls},"bbox":[{},{},{},{}]}}"#, b[0], b[1], b[2], b[3]) + "\n"
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn scores(p: &Path) -> Vec<f64> {
    let mut s: Vec<f64> = lines(p).iter().map(|v| v["score"].as_f64().unwrap()).collect();
    s.sort_by(f64::total_cmp);
    s
}

const SMALL: &str = r#"{"name": "tiny", "epochs": 2,
  "data": {"source_images": 10, "target_images": 20, "heldout_images": 20},
  "augment": {"mosaics_per_epoch": 4}}"#;

#[test]
fn simulate_writes_report_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", SMALL);
    let o = plcurate(&["simulate", "--config", "c.json", "--output-dir", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3);
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("out/metrics.json")).unwrap()).unwrap();
    assert!(m.is_object());
    assert!(String::from_utf8_lossy(&o.stdout).contains("tiny"));
}

#[test]
fn simulate_is_repeatable_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", SMALL);
    let run = |out: &str, seed: &str| {
        let o = plcurate(&["simulate", "--config", "c.json", "--seed", seed, "--output-dir", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read(dir.path().join(out).join("report.csv")).unwrap()
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn simulate_rejects_zero_update_interval() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "c.json", r#"{"update_interval": 0}"#);
    let o = plcurate(&["simulate", "--config", "c.json", "--output-dir", "out"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("update_interval"), "{}", stderr(&o));
}

#[test]
fn simulate_epsilon_sweep_gives_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"name": "sweep", "epochs": 1, "epsilon_sweep": [0.0, 0.01, 0.05, 0.1],
      "data": {"source_images": 10, "target_images": 20, "heldout_images": 20},
      "augment": {"mosaics_per_epoch": 4}}"#;
    write(dir.path(), "c.json", cfg);
    let o = plcurate(&["simulate", "--config", "c.json", "--output-dir", "out"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
}

#[test]
fn simulate_missing_config_and_unknown_preset() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&plcurate(&["simulate", "--config", "nope.json"], dir.path())), 3);
    assert_eq!(code(&plcurate(&["simulate", "--preset", "nope", "--output-dir", "o"], dir.path())), 2);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_plcurate"))
        .args(["simulate", "--preset", "default"])
        .current_dir(dir.path())
        .env("PLCURATE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn nms_keeps_the_higher_of_two_overlapping_boxes() {
    let dir = tempfile::tempdir().unwrap();
    // intersection 0.4 x 0.24 over union 0.4 x 0.4: IoU 0.6
    let text = det("a", 0, [0.1, 0.1, 0.5, 0.5], 0.9) + &det("a", 0, [0.1, 0.1, 0.5, 0.34], 0.8);
    write(dir.path(), "d.jsonl", &text);
    let o = plcurate(&["fuse", "d.jsonl", "--method", "nms", "-o", "out.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(scores(&dir.path().join("out.jsonl")), vec![0.9]);

    let o = plcurate(&["fuse", "d.jsonl", "--method", "nms", "--iou", "0.7", "-o", "loose.jsonl"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(scores(&dir.path().join("loose.jsonl")), vec![0.8, 0.9]);

    let o = plcurate(&["fuse", "d.jsonl", "--method", "soft-nms", "-o", "soft.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = scores(&dir.path().join("soft.jsonl"));
    assert_eq!(s.len(), 2);
    assert!(s[0] < 0.8 && s[1] == 0.9);
}

#[test]
fn wbf_of_one_input_without_overlaps_is_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let text = det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.9)
        + &det("a", 0, [0.5, 0.5, 0.7, 0.7], 0.4)
        + &det("b", 1, [0.1, 0.1, 0.3, 0.3], 0.7);
    let input = write(dir.path(), "d.jsonl", &text);
    let o = plcurate(&["fuse", "d.jsonl", "--method", "wbf", "-o", "out.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ids = |p: &Path| lines(p).iter().map(|v| v["image_id"].to_string()).collect::<Vec<_>>();
    assert_eq!(ids(&input), ids(&dir.path().join("out.jsonl")));
    let num = |v: &Value| -> Vec<f64> {
        let mut out: Vec<f64> = v["bbox"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        out.push(v["score"].as_f64().unwrap());
        out
    };
    let mut xs: Vec<Vec<f64>> = lines(&input).iter().map(num).collect();
    let mut ys: Vec<Vec<f64>> = lines(&dir.path().join("out.jsonl")).iter().map(num).collect();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    assert_eq!(xs.len(), ys.len());
    for (x, y) in xs.iter().zip(&ys) {
        for (u, v) in x.iter().zip(y) {
            assert!((u - v).abs() < 1e-12, "{x:?} vs {y:?}");
        }
    }
}

#[test]
fn wbf_averages_across_two_files() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.jsonl", &det("a", 0, [0.1, 0.1, 0.5, 0.5], 0.9));
    write(dir.path(), "b.jsonl", &det("a", 0, [0.1, 0.1, 0.5, 0.54], 0.7));
    let o = plcurate(&["fuse", "a.jsonl", "b.jsonl", "--method", "wbf", "-o", "out.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = lines(&dir.path().join("out.jsonl"));
    assert_eq!(out.len(), 1);
    assert!((out[0]["score"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    let y2 = out[0]["bbox"][3].as_f64().unwrap();
    assert!((y2 - (0.9 * 0.5 + 0.7 * 0.54) / 1.6).abs() < 1e-12);
}

#[test]
fn fuse_reports_missing_and_malformed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = plcurate(&["fuse", "nope.jsonl", "--method", "nms", "-o", "x.jsonl"], dir.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("nope.jsonl"));

    let text = det("a", 0, [0.1, 0.1, 0.2, 0.2], 0.5) + "{\"image_id\": \"a\", \"bbox\": oops}\n";
    write(dir.path(), "bad.jsonl", &text);
    let o = plcurate(&["fuse", "bad.jsonl", "--method", "wbf", "-o", "x.jsonl"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(!dir.path().join("x.jsonl").exists());

    write(dir.path(), "score.jsonl", &det("a", 0, [0.1, 0.1, 0.2, 0.2], 1.5));
    assert_eq!(code(&plcurate(&["fuse", "score.jsonl", "--method", "nms", "-o", "x.jsonl"], dir.path())), 2);
}

#[test]
fn bank_init_keeps_only_scores_above_the_cut() {
    let dir = tempfile::tempdir().unwrap();
    let text = det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.6)
        + &det("a", 0, [0.5, 0.5, 0.7, 0.7], 0.61)
        + &det("b", 0, [0.1, 0.1, 0.3, 0.3], 0.9);
    write(dir.path(), "d.jsonl", &text);
    let o = plcurate(&["bank", "init", "--detections", "d.jsonl", "--bank", "bank.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = plcurate(&["bank", "export", "--bank", "bank.jsonl", "-o", "pl.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(scores(&dir.path().join("pl.jsonl")), vec![0.61, 0.9]);

    let o =
        plcurate(&["bank", "init", "--detections", "d.jsonl", "--bank", "b2.jsonl", "--init-conf", "1.2"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn direct_update_replaces_with_filtered_latest() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d0.jsonl", &det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.9));
    let d1 = det("a", 0, [0.5, 0.5, 0.7, 0.7], 0.3)
        + &det("a", 1, [0.1, 0.1, 0.3, 0.3], 0.5)
        + &det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.41);
    write(dir.path(), "d1.jsonl", &d1);
    let args = ["bank", "init", "--detections", "d0.jsonl", "--bank", "bank.jsonl", "--strategy", "direct"];
    assert_eq!(code(&plcurate(&args, dir.path())), 0);
    let o = plcurate(&["bank", "update", "--bank", "bank.jsonl", "--detections", "d1.jsonl"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = plcurate(&["bank", "export", "--bank", "bank.jsonl", "-o", "pl.jsonl"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(scores(&dir.path().join("pl.jsonl")), vec![0.41, 0.5]);
}

#[test]
fn mevc_export_positive_only_drops_ignore_entries() {
    let dir = tempfile::tempdir().unwrap();
    let d0 = det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.9) + &det("a", 0, [0.5, 0.5, 0.7, 0.7], 0.7);
    write(dir.path(), "d0.jsonl", &d0);
    // the second box is not seen again, so it drops to ignore
    write(dir.path(), "d1.jsonl", &det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.95));
    assert_eq!(
        code(&plcurate(
            &["bank", "init", "--detections", "d0.jsonl", "--bank", "bank.jsonl", "--strategy", "mevc"],
            dir.path()
        )),
        0
    );
    let o = plcurate(
        &["bank", "update", "--bank", "bank.jsonl", "--detections", "d1.jsonl", "-o", "bank1.jsonl"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&plcurate(&["bank", "export", "--bank", "bank1.jsonl", "-o", "all.jsonl"], dir.path())), 0);
    assert_eq!(scores(&dir.path().join("all.jsonl")), vec![0.7, 0.95]);
    let o = plcurate(&["bank", "export", "--bank", "bank1.jsonl", "--positive-only", "-o", "pos.jsonl"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(scores(&dir.path().join("pos.jsonl")), vec![0.95]);
    // -o left the original untouched
    assert_eq!(code(&plcurate(&["bank", "export", "--bank", "bank.jsonl", "-o", "orig.jsonl"], dir.path())), 0);
    assert_eq!(scores(&dir.path().join("orig.jsonl")), vec![0.7, 0.9]);
}

#[test]
fn bank_strategy_mismatch_and_missing_bank() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.jsonl", &det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.9));
    assert_eq!(code(&plcurate(&["bank", "init", "--detections", "d.jsonl", "--bank", "bank.jsonl"], dir.path())), 0);
    let before = fs::read(dir.path().join("bank.jsonl")).unwrap();
    let o = plcurate(
        &["bank", "update", "--bank", "bank.jsonl", "--detections", "d.jsonl", "--strategy", "mevc"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("strategy"));
    assert_eq!(fs::read(dir.path().join("bank.jsonl")).unwrap(), before);
    let o = plcurate(&["bank", "export", "--bank", "bank.jsonl", "--strategy", "direct", "-o", "x.jsonl"], dir.path());
    assert_eq!(code(&o), 2);
    let o = plcurate(&["bank", "update", "--bank", "missing.jsonl", "--detections", "d.jsonl"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn bank_update_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d0 = det("a", 0, [0.0, 0.0, 0.2, 0.2], 0.9) + &det("b", 1, [0.3, 0.3, 0.6, 0.6], 0.8);
    let d1 = det("a", 0, [0.01, 0.0, 0.21, 0.2], 0.7)
        + &det("b", 1, [0.3, 0.3, 0.6, 0.62], 0.5)
        + &det("c", 0, [0.1, 0.1, 0.2, 0.2], 0.3);
    write(dir.path(), "d0.jsonl", &d0);
    write(dir.path(), "d1.jsonl", &d1);
    assert_eq!(
        code(&plcurate(&["bank", "init", "--detections", "d0.jsonl", "--bank", "bank.jsonl", "--rescale"], dir.path())),
        0
    );
    for out in ["x.jsonl", "y.jsonl"] {
        let o =
            plcurate(&["bank", "update", "--bank", "bank.jsonl", "--detections", "d1.jsonl", "-o", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(dir.path().join("x.jsonl")).unwrap(), fs::read(dir.path().join("y.jsonl")).unwrap());
}

fn eval_json(dir: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["eval", "--detections", "d.jsonl", "--gt", "gt.jsonl"];
    args.extend_from_slice(extra);
    let o = plcurate(&args, dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn eval_perfect_detections_give_map_one() {
    let dir = tempfile::tempdir().unwrap();
    let boxes = [("a", 0, [0.0, 0.0, 0.2, 0.2]), ("a", 1, [0.4, 0.4, 0.8, 0.9]), ("b", 0, [0.1, 0.5, 0.3, 0.7])];
    let g: String = boxes.iter().map(|(i, c, b)| gt(i, *c, *b)).collect();
    let d: String = boxes.iter().map(|(i, c, b)| det(i, *c, *b, 0.8)).collect();
    write(dir.path(), "gt.jsonl", &g);
    write(dir.path(), "d.jsonl", &d);
    let m = eval_json(dir.path(), &[]);
    assert_eq!(m["map"], 1.0);
    assert_eq!(m["recall"], 1.0);
    assert_eq!(m["precision"], 1.0);
    assert_eq!(m["classes"], 2);
    assert_eq!(m["warning"], false);
}

#[test]
fn eval_one_tp_above_one_fp_has_ap_one() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "gt.jsonl", &gt("a", 0, [0.1, 0.1, 0.4, 0.4]));
    let d = det("a", 0, [0.1, 0.1, 0.4, 0.4], 0.9) + &det("a", 0, [0.6, 0.6, 0.9, 0.9], 0.2);
    write(dir.path(), "d.jsonl", &d);
    let m = eval_json(dir.path(), &["--bin-edges", "0,0.3,1", "--bins-csv", "bins.csv"]);
    assert_eq!(m["map"], 1.0);
    assert_eq!(m["precision"], 0.5);
    assert_eq!(m["fp_rate_low"], 1.0);
    assert_eq!(m["fp_rate_high"], 0.0);
    let csv = fs::read_to_string(dir.path().join("bins.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,0.3,1,1,"));
}

#[test]
fn eval_simple_proportion_from_loss_records() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "gt.jsonl", &gt("a", 0, [0.1, 0.1, 0.4, 0.4]));
    write(dir.path(), "d.jsonl", &det("a", 0, [0.1, 0.1, 0.4, 0.4], 0.9));
    // low-confidence loc loss is damped: 0.1 + 0.2 * 2.0 = 0.5 is not simple
    let recs = "run,image_id,label_idx,cls_loss,loc_loss,confidence,is_tp,extra\n\
                r,a,0,0.05,0.1,0.9,true,x\n\
                r,a,1,0.1,2.0,0.2,true,x\n\
                r,a,2,0.01,0.01,0.9,false,x\n\
                r,a,3,0.5,0.5,0.9,true,x\n";
    write(dir.path(), "loss.csv", recs);
    let m = eval_json(dir.path(), &["--loss-records", "loss.csv"]);
    let sp = &m["simple_proportion"];
    assert_eq!(sp["all"]["value"], 0.5);
    assert_eq!(sp["all"]["count"], 4);
    assert!((sp["tp_only"]["value"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);

    write(dir.path(), "bad.csv", "image_id,label_idx,cls_loss,loc_loss,confidence,is_tp\na,0,x,0.1,0.9,true\n");
    let o = plcurate(&["eval", "--detections", "d.jsonl", "--gt", "gt.jsonl", "--loss-records", "bad.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn eval_rejects_empty_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "gt.jsonl", "");
    write(dir.path(), "d.jsonl", &det("a", 0, [0.1, 0.1, 0.4, 0.4], 0.9));
    let o = plcurate(&["eval", "--detections", "d.jsonl", "--gt", "gt.jsonl"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_id_mismatch_warns_and_uses_the_intersection() {
    let dir = tempfile::tempdir().unwrap();
    let g = gt("a", 0, [0.1, 0.1, 0.4, 0.4]) + &gt("b", 0, [0.1, 0.1, 0.4, 0.4]);
    let d = det("a", 0, [0.1, 0.1, 0.4, 0.4], 0.9) + &det("c", 0, [0.1, 0.1, 0.4, 0.4], 0.9);
    write(dir.path(), "gt.jsonl", &g);
    write(dir.path(), "d.jsonl", &d);
    let o = plcurate(&["eval", "--detections", "d.jsonl", "--gt", "gt.jsonl", "-o", "m.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains('b') && err.contains('c'), "{err}");
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(m["warning"], true);
    assert_eq!(m["missing"]["ground_truth_only"], serde_json::json!(["b"]));
    assert_eq!(m["missing"]["detections_only"], serde_json::json!(["c"]));
    assert_eq!(m["map"], 1.0);

    let m = eval_json(dir.path(), &["--keep-gt-only"]);
    assert_eq!(m["recall"], 0.5);
}

#[test]
fn eval_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let g = gt("a", 0, [0.1, 0.1, 0.4, 0.4]) + &gt("a", 2, [0.5, 0.5, 0.9, 0.8]);
    let d = det("a", 0, [0.12, 0.1, 0.4, 0.41], 0.7)
        + &det("a", 2, [0.5, 0.55, 0.9, 0.8], 0.35)
        + &det("a", 1, [0.0, 0.0, 0.1, 0.1], 0.6);
    write(dir.path(), "gt.jsonl", &g);
    write(dir.path(), "d.jsonl", &d);
    for out in ["x.json", "y.json"] {
        let o = plcurate(&["eval", "--detections", "d.jsonl", "--gt", "gt.jsonl", "-o", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(dir.path().join("x.json")).unwrap(), fs::read(dir.path().join("y.json")).unwrap());
}
