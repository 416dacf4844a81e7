use rayon::prelude::*;

use crate::augment::{domain_mix, fgsm_perturb, toy_model_loss, toy_model_loss_grad, ImageTensor, ToyModelParams};
use crate::bank::{init_bank, BankStrategy, MemoryBank};
use crate::error::Result;
use crate::fusion::iou;
use crate::loss::{classify_simple, surrogate_losses, unmatched_losses, LossRecord, SimpleCriterion};
use crate::metrics::{fp_by_confidence, map50, match_tp_fp, precision_recall};
use crate::types::{Detection, Domain, LabelKind, LabelSet, Seed};

use super::config::ExperimentConfig;
use super::detector::{simulate_detections, DetectorState};
use super::dynamics::train_step;
use super::report::{EpochRow, ExperimentReport, RecordRow};
use super::scene::{generate_scene, ObjectTraits, Scene};

// RNG stream purposes
const SOURCE_SCENE: u64 = 1;
const TARGET_SCENE: u64 = 2;
const HELDOUT_SCENE: u64 = 3;
const INIT_PRED: u64 = 4;
const TRAIN_PRED: u64 = 5;
const MOSAIC: u64 = 6;
const ADV_PRED: u64 = 8;
const UPDATE_PRED: u64 = 9;
const EVAL_PRED: u64 = 10;
const STUDENT_EVAL: u64 = 11;
const TOY: u64 = 12;
const STUDENT_PRED: u64 = 13;

/// Which part of an epoch's batch a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batch {
    Clean,
    Mix,
    Adversarial,
}

impl Batch {
    pub fn name(&self) -> &'static str {
        match self {
            Batch::Clean => "clean",
            Batch::Mix => "mix",
            Batch::Adversarial => "adversarial",
        }
    }
}

/// A loss record plus where its label came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub record: LossRecord,
    /// Target pseudo label (true) or transformed source ground truth (false).
    pub pseudo: bool,
    pub batch: Batch,
}

/// The three datasets of a run, fixed by the seed.
#[derive(Debug, Clone)]
pub struct World {
    pub source: Vec<Scene>,
    pub target: Vec<Scene>,
    pub heldout: Vec<Scene>,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let seed = Seed(cfg.seed);
    let make = |purpose: u64, n: usize, domain: Domain, prefix: &str| -> Result<Vec<Scene>> {
        let scene_cfg = super::config::SceneConfig { domain, ..cfg.data.scene.clone() };
        (0..n)
            .into_par_iter()
            .map(|i| generate_scene(format!("{prefix}{i:05}"), &mut seed.stream(purpose, i as u64, 0), &scene_cfg))
            .collect()
    };
    Ok(World {
        source: make(SOURCE_SCENE, cfg.data.source_images, Domain::Source, "src")?,
        target: make(TARGET_SCENE, cfg.data.target_images, Domain::Target, "tgt")?,
        heldout: make(HELDOUT_SCENE, cfg.data.heldout_images, Domain::Target, "val")?,
    })
}

fn predict(cfg: &ExperimentConfig, scenes: &[Scene], state: &DetectorState, purpose: u64, epoch: u64) -> Vec<LabelSet> {
    let seed = Seed(cfg.seed);
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed.stream(purpose, epoch, i as u64);
            simulate_detections(s, state, &cfg.detector, &cfg.data.scene, &mut rng)
        })
        .collect()
}

/// Loss of each label against the best-overlapping same-class prediction.
/// TP flags come from matching the labels to ground truth at IoU 0.5.
pub fn label_records(
    labels: &LabelSet,
    preds: &LabelSet,
    gt: &LabelSet,
    background_prob: f64,
) -> Result<Vec<LossRecord>> {
    let matched = match_tp_fp(labels, gt, 0.5)?;
    labels
        .detections()
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let best = preds
                .detections()
                .iter()
                .filter(|p| p.class_id == label.class_id)
                .map(|p| (iou(&p.bbox, &label.bbox), p))
                .filter(|(o, _)| *o > 0.0)
                .max_by(|a, b| a.0.total_cmp(&b.0));
            let terms = match best {
                Some((_, p)) => surrogate_losses(p, label, p.score.max(1e-12))?,
                None => unmatched_losses(label, background_prob)?,
            };
            Ok(terms.into_record(labels.image_id.clone(), i, matched.is_tp(i)))
        })
        .collect()
}

struct MixedScene {
    scene: Scene,
    labels: LabelSet,
    pseudo: Vec<bool>,
}

fn build_mosaics(cfg: &ExperimentConfig, world: &World, snapshot: &[LabelSet], epoch: u64) -> Result<Vec<MixedScene>> {
    if !cfg.augment.domain_mix || cfg.augment.mosaics_per_epoch == 0 {
        return Ok(Vec::new());
    }
    let source: Vec<(ImageTensor, LabelSet)> =
        world.source.iter().map(|s| (s.rendered.clone().expect("rendered"), s.gt.clone())).collect();
    let target: Vec<(ImageTensor, LabelSet)> =
        world.target.iter().zip(snapshot).map(|(s, l)| (s.rendered.clone().expect("rendered"), l.clone())).collect();
    let n = cfg.data.scene.render_size;
    let seed = Seed(cfg.seed);
    let min_visible = cfg.augment.mosaic.min_visible;
    (0..cfg.augment.mosaics_per_epoch)
        .into_par_iter()
        .map(|m| {
            let mut rng = seed.stream(MOSAIC, epoch, m as u64);
            let mixed = domain_mix(&source, &target, &mut rng, (n, n), &cfg.augment.mosaic)?;
            let id = format!("mix{epoch:03}-{m:03}");
            let mut objects: Vec<(Detection, ObjectTraits)> = Vec::new();
            for (q, tile) in mixed.layout.tiles.iter().enumerate() {
                let scene = match tile.domain {
                    Domain::Source => &world.source[tile.sample],
                    Domain::Target => &world.target[tile.sample],
                };
                for (d, t) in scene.objects() {
                    if let Some(bbox) = mixed.layout.transform_box(q, &d.bbox, min_visible) {
                        let traits =
                            ObjectTraits { difficulty: (t.difficulty + cfg.augment.mosaic_difficulty).min(1.0), ..*t };
                        objects.push((Detection { bbox, ..*d }, traits));
                    }
                }
            }
            let pseudo = mixed.labels.iter().map(|l| l.origin == LabelKind::PseudoLabel).collect();
            let labels = mixed.label_set(id.clone());
            let scene = Scene::from_objects(id, Domain::Target, objects, Some(mixed.image));
            Ok(MixedScene { scene, labels, pseudo })
        })
        .collect()
}

/// Toy-loss increase caused by FGSM on `img`.
fn fgsm_gain(img: &ImageTensor, toy: &ToyModelParams, eps: f64) -> Result<f64> {
    let (before, grad) = toy_model_loss_grad(img, toy)?;
    let adv = fgsm_perturb(img, &grad, eps)?;
    Ok((toy_model_loss(&adv, toy)? - before).max(0.0))
}

fn attacked(cfg: &ExperimentConfig, state: &DetectorState, gain: f64) -> DetectorState {
    let a = cfg.augment.adv_sensitivity * gain;
    cfg.dynamics.clamp(&DetectorState {
        loc_noise_sigma: state.loc_noise_sigma * (1.0 + a),
        fp_rate: state.fp_rate * (1.0 + a),
        conf_calibration: state.conf_calibration / (1.0 + a),
        ..*state
    })
}

fn only_records(recs: &[SimRecord]) -> Vec<LossRecord> {
    recs.iter().map(|r| r.record.clone()).collect()
}

fn simple_share(recs: &[SimRecord], crit: &SimpleCriterion, tp_only: bool) -> (f64, usize) {
    let pool: Vec<&SimRecord> = recs.iter().filter(|r| r.pseudo && (!tp_only || r.record.is_true_positive)).collect();
    if pool.is_empty() {
        return (0.0, 0);
    }
    let simple = pool.iter().filter(|r| classify_simple(&r.record, crit)).count();
    (simple as f64 / pool.len() as f64, pool.len())
}

fn heldout_ap(cfg: &ExperimentConfig, world: &World, state: &DetectorState, purpose: u64, epoch: u64) -> Result<f64> {
    let preds = predict(cfg, &world.heldout, state, purpose, epoch);
    let gts: Vec<LabelSet> = world.heldout.iter().map(|s| s.gt.clone()).collect();
    Ok(map50(&preds, &gts, cfg.data.scene.class_count)?.map)
}

/// Labels the teacher trains on. The triplet bank only trains on positives.
/// `train_min_conf` optionally drops entries whose confidence has decayed.
fn training_snapshot(cfg: &ExperimentConfig, bank: &MemoryBank) -> Vec<LabelSet> {
    let positive_only = bank.strategy() == BankStrategy::Mevc;
    match cfg.train_min_conf {
        Some(c) => bank.snapshot_above(positive_only, Some(c)),
        None => bank.snapshot(positive_only),
    }
}

#[allow(clippy::too_many_arguments)]
fn make_row(
    cfg: &ExperimentConfig,
    hash: &str,
    world: &World,
    epoch: u32,
    bank: &MemoryBank,
    records: &[SimRecord],
    state: &DetectorState,
) -> Result<EpochRow> {
    let labels = training_snapshot(cfg, bank);
    let gts: Vec<LabelSet> = world.target.iter().map(|s| s.gt.clone()).collect();
    let pr = precision_recall(&labels, &gts, cfg.thresholds.iou_match, cfg.report_conf);
    let map = map50(&labels, &gts, cfg.data.scene.class_count)?.map;
    let edges: Vec<f64> = (0..=cfg.fp_bins).map(|i| i as f64 / cfg.fp_bins as f64).collect();
    let hist = fp_by_confidence(&labels, &gts, &edges)?;
    let (fp_low, fp_high) = hist.split_rates(cfg.tau)?;
    let crit = cfg.simple_criterion();
    let (simple_prop, _) = simple_share(records, &crit, false);
    let (simple_prop_tp, simple_count_tp) = simple_share(records, &crit, true);
    Ok(EpochRow {
        run: cfg.name.clone(),
        strategy: cfg.strategy,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        config_hash: hash.to_string(),
        epoch,
        pl_count: labels.iter().map(LabelSet::len).sum(),
        pl_precision: pr.precision,
        pl_recall: pr.recall,
        pl_f1: pr.f1,
        pl_map50: map,
        simple_prop,
        simple_prop_tp,
        simple_count_tp,
        fp_low,
        fp_high,
        fp_bins: (0..cfg.fp_bins).map(|b| (!hist.is_empty_bin(b)).then(|| hist.rates()[b])).collect(),
        teacher_ap50: heldout_ap(cfg, world, state, EVAL_PRED, u64::from(epoch))?,
        state: *state,
        bank_size: bank.len(),
        student_ap50: None,
    })
}

fn dump_rows(epoch: u32, recs: &[SimRecord], crit: &SimpleCriterion) -> Vec<RecordRow> {
    recs.iter()
        .map(|r| RecordRow {
            epoch,
            batch: r.batch,
            pseudo: r.pseudo,
            weight: crit.weighting.weight(r.record.confidence),
            is_simple: classify_simple(&r.record, crit),
            record: r.record.clone(),
        })
        .collect()
}

/// Student trained once on the final labels: it inherits their localization
/// error, recall and false-positive load. Score calibration interpolates
/// between the untrained target start and the teacher by label precision.
pub fn distill_student(
    cfg: &ExperimentConfig,
    world: &World,
    labels: &[LabelSet],
    teacher: &DetectorState,
) -> Result<DetectorState> {
    let filtered: Vec<LabelSet> = labels.iter().map(|l| l.filter_above(cfg.student_conf)).collect();
    let gts: Vec<LabelSet> = world.target.iter().map(|s| s.gt.clone()).collect();
    let (mut tp, mut fp, mut n_gt, mut sq, mut coords) = (0usize, 0usize, 0usize, 0.0f64, 0usize);
    for (l, g) in filtered.iter().zip(&gts) {
        let m = match_tp_fp(l, g, cfg.thresholds.iou_match)?;
        n_gt += g.len();
        for (i, gi) in m.det_matches.iter().enumerate() {
            match gi {
                Some(gi) => {
                    tp += 1;
                    let a = l.detections()[i].bbox.to_array();
                    let b = g.detections()[*gi].bbox.to_array();
                    sq += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    coords += 4;
                }
                None => fp += 1,
            }
        }
    }
    let start = cfg.target_start();
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
    let rms = if coords > 0 { (sq / coords as f64).sqrt() } else { start.loc_noise_sigma };
    let mut student = cfg.dynamics.clamp(&DetectorState {
        loc_noise_sigma: rms,
        miss_rate: 1.0 - recall,
        fp_rate: fp as f64 / world.target.len() as f64,
        conf_calibration: start.conf_calibration + precision * (teacher.conf_calibration - start.conf_calibration),
        domain: Domain::Target,
    });
    let crit = cfg.simple_criterion();
    for e in 0..cfg.student_epochs {
        let preds = predict(cfg, &world.target, &student, STUDENT_PRED, u64::from(e));
        let mut recs = Vec::new();
        for ((l, p), g) in filtered.iter().zip(&preds).zip(&gts) {
            recs.extend(label_records(l, p, g, cfg.detector.background_prob)?);
        }
        student = train_step(&student, &recs, &cfg.dynamics, &crit);
    }
    Ok(student)
}

/// One training image with its supervision.
struct Item<'a> {
    scene: &'a Scene,
    labels: &'a LabelSet,
    /// Per label: target pseudo label (true) or source ground truth.
    pseudo: Option<&'a [bool]>,
}

fn target_items<'a>(world: &'a World, snapshot: &'a [LabelSet]) -> Vec<Item<'a>> {
    world.target.iter().zip(snapshot).map(|(scene, labels)| Item { scene, labels, pseudo: None }).collect()
}

/// Predicts on every item and scores its labels. `state_for` lets the
/// adversarial pass degrade the detector per image.
fn batch_records<F>(
    cfg: &ExperimentConfig,
    items: &[Item<'_>],
    purpose: u64,
    epoch: u64,
    batch: Batch,
    state_for: F,
) -> Result<Vec<SimRecord>>
where
    F: Fn(&Item<'_>) -> Result<DetectorState> + Sync,
{
    let seed = Seed(cfg.seed);
    let per: Vec<Vec<SimRecord>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let state = state_for(item)?;
            let mut rng = seed.stream(purpose, epoch, i as u64);
            let preds = simulate_detections(item.scene, &state, &cfg.detector, &cfg.data.scene, &mut rng);
            let recs = label_records(item.labels, &preds, &item.scene.gt, cfg.detector.background_prob)?;
            Ok(recs
                .into_iter()
                .enumerate()
                .map(|(j, record)| SimRecord {
                    record,
                    pseudo: item.pseudo.is_none_or(|p| p[j]),
                    // mosaics are the only items carrying origin flags
                    batch: if batch == Batch::Clean && item.pseudo.is_some() { Batch::Mix } else { batch },
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Runs source pretraining, the teacher's self-training loop with scheduled
/// bank updates, and student distillation. Emits one row per epoch plus the
/// initial row.
pub fn run_self_training(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let world = build_world(cfg)?;
    let seed = Seed(cfg.seed);
    let crit = cfg.simple_criterion();

    // Step 1: the source teacher labels the target set.
    let mut state = cfg.target_start();
    let initial = predict(cfg, &world.target, &state, INIT_PRED, 0);
    let mut bank = init_bank(&initial, cfg.thresholds, cfg.strategy)?.with_rescale(cfg.rescale_confidence);

    let toy = if cfg.augment.adversarial {
        let len = cfg.data.scene.render_size.pow(2);
        Some(ToyModelParams::random(len, cfg.augment.toy_weight_scale, &mut seed.stream(TOY, 0, 0))?)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut dumped = Vec::new();
    let mut banks = Vec::new();
    let snapshot = training_snapshot(cfg, &bank);
    let initial_records =
        batch_records(cfg, &target_items(&world, &snapshot), TRAIN_PRED, 0, Batch::Clean, |_| Ok(state))?;
    rows.push(make_row(cfg, &hash, &world, 0, &bank, &initial_records, &state)?);
    if cfg.dump_banks {
        banks.push((0, bank.to_bytes()));
    }

    // Step 2: adapted teacher training.
    for epoch in 1..=cfg.epochs {
        let e = u64::from(epoch);
        let snapshot = training_snapshot(cfg, &bank);
        let mosaics = build_mosaics(cfg, &world, &snapshot, e)?;
        let mut items = target_items(&world, &snapshot);
        items.extend(mosaics.iter().map(|m| Item { scene: &m.scene, labels: &m.labels, pseudo: Some(&m.pseudo) }));

        let current = state;
        let mut recs = batch_records(cfg, &items, TRAIN_PRED, e, Batch::Clean, |_| Ok(current))?;
        state = train_step(&state, &only_records(&recs), &cfg.dynamics, &crit);

        // second update on FGSM-perturbed copies of the same batch
        if let Some(toy) = &toy {
            let current = state;
            let adv = batch_records(cfg, &items, ADV_PRED, e, Batch::Adversarial, |item| {
                let img = item.scene.rendered.as_ref().expect("training scenes are rendered");
                Ok(attacked(cfg, &current, fgsm_gain(img, toy, cfg.epsilon)?))
            })?;
            state = train_step(&state, &only_records(&adv), &cfg.dynamics, &crit);
            recs.extend(adv);
        }

        // updated once after the first epoch, then every `update_interval` epochs
        if (epoch - 1) % cfg.update_interval == 0 {
            let fresh = predict(cfg, &world.target, &state, UPDATE_PRED, e);
            bank = bank.update(&fresh)?;
        }
        rows.push(make_row(cfg, &hash, &world, epoch, &bank, &recs, &state)?);
        if cfg.dump_loss_records {
            dumped.extend(dump_rows(epoch, &recs, &crit));
        }
        if cfg.dump_banks {
            banks.push((epoch, bank.to_bytes()));
        }
    }

    // Step 3: adapted student.
    let student = distill_student(cfg, &world, &training_snapshot(cfg, &bank), &state)?;
    let student_ap = heldout_ap(cfg, &world, &student, STUDENT_EVAL, 0)?;
    if let Some(last) = rows.last_mut() {
        last.student_ap50 = Some(student_ap);
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        config_hash: hash,
        rows,
        records: dumped,
        banks,
        teacher: state,
        student,
    })
}

/// Runs every config (after epsilon expansion) in parallel, in input order.
pub fn run_suite(configs: &[ExperimentConfig]) -> Result<Vec<ExperimentReport>> {
    let expanded: Vec<ExperimentConfig> = configs.iter().flat_map(ExperimentConfig::expand).collect();
    expanded.par_iter().map(run_self_training).collect()
}
