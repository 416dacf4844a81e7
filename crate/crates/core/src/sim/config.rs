use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::MosaicConfig;
use crate::bank::{BankStrategy, BankThresholds};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, SimpleCriterion, Weighting};
use crate::types::Domain;

use super::detector::{DetectorParams, DetectorState};
use super::dynamics::TrainingDynamics;

/// Scene generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Inclusive range of objects per image.
    pub box_count: [usize; 2],
    /// Inclusive range of box width and height, normalized.
    pub box_size: [f64; 2],
    pub class_count: u32,
    /// Side of the rendered square image in pixels; 0 disables rendering.
    pub render_size: usize,
    pub domain: Domain,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { box_count: [2, 6], box_size: [0.08, 0.3], class_count: 3, render_size: 32, domain: Domain::Target }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.box_count;
        if lo > hi {
            return Err(Error::validation(format!("box_count range [{lo}, {hi}] is empty")));
        }
        let [smin, smax] = self.box_size;
        if !(smin.is_finite() && smax.is_finite()) || smin > smax {
            return Err(Error::validation(format!("box_size range [{smin}, {smax}] is empty")));
        }
        if smin < 0.01 || smax > 1.0 {
            return Err(Error::validation(format!("box_size range [{smin}, {smax}] must lie within [0.01, 1]")));
        }
        if self.class_count == 0 {
            return Err(Error::validation("class_count must be positive"));
        }
        Ok(())
    }
}

/// Sizes of the synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_images: usize,
    pub target_images: usize,
    /// Target images never used for training, only for detector AP50.
    pub heldout_images: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source_images: 100, target_images: 500, heldout_images: 500, scene: SceneConfig::default() }
    }
}

/// DomainMix and FGSM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub domain_mix: bool,
    pub adversarial: bool,
    pub mosaics_per_epoch: usize,
    /// Difficulty added to objects shrunk into a mosaic tile.
    pub mosaic_difficulty: f64,
    pub mosaic: MosaicConfig,
    /// Std of the toy objectness model weights.
    pub toy_weight_scale: f64,
    /// Detector degradation per unit of toy-loss increase.
    pub adv_sensitivity: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            domain_mix: true,
            adversarial: true,
            mosaics_per_epoch: 50,
            mosaic_difficulty: 0.1,
            mosaic: MosaicConfig::default(),
            toy_weight_scale: 0.05,
            adv_sensitivity: 1.0,
        }
    }
}

/// Everything one self-training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run label used in reports.
    pub name: String,
    pub seed: u64,
    pub strategy: BankStrategy,
    pub thresholds: BankThresholds,
    pub tau: f64,
    pub epsilon: f64,
    /// When non-empty, the run is repeated once per value with `epsilon` overridden.
    pub epsilon_sweep: Vec<f64>,
    pub simple_threshold: f64,
    pub adaptive_loss: bool,
    pub rescale_confidence: bool,
    pub epochs: u32,
    pub update_interval: u32,
    /// Confidence cut for pseudo-label precision/recall/F1 in the report.
    pub report_conf: f64,
    /// Labels above this confidence supervise the student.
    pub student_conf: f64,
    pub student_epochs: u32,
    /// Drop bank entries at or below this confidence from the teacher's
    /// training labels. Off by default: decayed entries stay and are weighted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_min_conf: Option<f64>,
    pub fp_bins: usize,
    pub data: DataConfig,
    pub detector: DetectorParams,
    pub source_state: DetectorState,
    pub domain_gap: DetectorState,
    pub dynamics: TrainingDynamics,
    pub augment: AugmentConfig,
    pub dump_loss_records: bool,
    pub dump_banks: bool,
    /// Not part of the config hash.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "curated".into(),
            seed: 20240607,
            strategy: BankStrategy::Wbf,
            thresholds: BankThresholds::default(),
            tau: 0.3,
            epsilon: 0.01,
            epsilon_sweep: Vec::new(),
            simple_threshold: 0.3,
            adaptive_loss: true,
            rescale_confidence: false,
            epochs: 30,
            update_interval: 1,
            report_conf: 0.3,
            student_conf: 0.3,
            student_epochs: 0,
            train_min_conf: None,
            fp_bins: 10,
            data: DataConfig::default(),
            detector: DetectorParams::default(),
            source_state: DetectorState::source_default(),
            domain_gap: DetectorState::gap_default(),
            dynamics: TrainingDynamics::default(),
            augment: AugmentConfig::default(),
            dump_loss_records: false,
            dump_banks: false,
            output_dir: None,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::validation(format!("{name}={v} outside [0, 1]")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.loss_weights().validate()?;
        unit("report_conf", self.report_conf)?;
        unit("student_conf", self.student_conf)?;
        if let Some(c) = self.train_min_conf {
            unit("train_min_conf", c)?;
        }
        for &e in std::iter::once(&self.epsilon).chain(&self.epsilon_sweep) {
            if !(e.is_finite() && e >= 0.0) {
                return Err(Error::validation(format!("epsilon={e} must be finite and >= 0")));
            }
        }
        if self.update_interval < 1 {
            return Err(Error::validation("update_interval must be at least 1"));
        }
        if self.fp_bins == 0 {
            return Err(Error::validation("fp_bins must be positive"));
        }
        if self.data.target_images == 0 || self.data.heldout_images == 0 {
            return Err(Error::validation("target_images and heldout_images must be positive"));
        }
        if self.augment.domain_mix && self.data.source_images == 0 {
            return Err(Error::validation("domain_mix needs source_images > 0"));
        }
        if (self.augment.domain_mix || self.augment.adversarial) && self.data.scene.render_size == 0 {
            return Err(Error::validation("augmentation needs render_size > 0"));
        }
        if !(self.augment.adv_sensitivity >= 0.0 && self.augment.toy_weight_scale > 0.0) {
            return Err(Error::validation("adv_sensitivity must be >= 0 and toy_weight_scale > 0"));
        }
        if !(0.0..=1.0).contains(&self.augment.mosaic_difficulty) {
            return Err(Error::validation("mosaic_difficulty outside [0, 1]"));
        }
        self.augment.mosaic.validate()?;
        self.data.scene.validate()?;
        self.detector.validate()?;
        self.dynamics.validate()?;
        self.dynamics.check_state(&self.source_state)?;
        self.dynamics.check_state(&self.target_start())?;
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { tau: self.tau, simple_threshold: self.simple_threshold }
    }

    pub fn weighting(&self) -> Weighting {
        if self.adaptive_loss {
            Weighting::Adaptive { tau: self.tau }
        } else {
            Weighting::Uniform
        }
    }

    pub fn simple_criterion(&self) -> SimpleCriterion {
        SimpleCriterion::new(self.simple_threshold, self.weighting())
    }

    /// The source teacher's state once it is applied to the target domain.
    pub fn target_start(&self) -> DetectorState {
        self.dynamics.clamp(&self.source_state.shifted(&self.domain_gap, Domain::Target))
    }

    /// One config per epsilon in `epsilon_sweep`, or just `self`.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        if self.epsilon_sweep.is_empty() {
            return vec![self.clone()];
        }
        self.epsilon_sweep
            .iter()
            .map(|&eps| ExperimentConfig {
                name: format!("{}-eps{eps}", self.name),
                epsilon: eps,
                epsilon_sweep: Vec::new(),
                ..self.clone()
            })
            .collect()
    }

    /// SHA-256 over the serialized config, excluding `output_dir`.
    pub fn hash(&self) -> String {
        config_hash(std::slice::from_ref(self))
    }
}

pub fn config_hash(configs: &[ExperimentConfig]) -> String {
    let stripped: Vec<ExperimentConfig> =
        configs.iter().map(|c| ExperimentConfig { output_dir: None, ..c.clone() }).collect();
    let bytes = serde_json::to_vec(&stripped).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Parses a config document: a single object or an array of objects.
/// Missing fields take their defaults; unknown fields are rejected.
pub fn parse_configs(text: &str) -> Result<Vec<ExperimentConfig>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_error)?;
    let configs: Vec<ExperimentConfig> = if value.is_array() {
        serde_json::from_str(text).map_err(json_error)?
    } else {
        vec![serde_json::from_str(text).map_err(json_error)?]
    };
    if configs.is_empty() {
        return Err(Error::validation("config array is empty"));
    }
    for c in &configs {
        c.validate()?;
    }
    Ok(configs)
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Parse { line: e.line(), message: e.to_string() }
}

pub const PRESETS: &[&str] = &["default", "comparison", "epsilon-sweep", "interval-10", "mevc", "direct"];

/// The full method as used in the comparison presets: WBF bank with
/// confidence rescaling, so boxes that stop being re-detected fade out.
fn curated() -> ExperimentConfig {
    ExperimentConfig { rescale_confidence: true, ..ExperimentConfig::default() }
}

fn baseline(strategy: BankStrategy) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: strategy.name().into(),
        strategy,
        adaptive_loss: false,
        ..ExperimentConfig::default()
    };
    c.augment.adversarial = false;
    c
}

/// Named run bundles. "comparison" compares the full method with the
/// triplet-bank and direct-coverage baselines on one seed.
pub fn preset(name: &str) -> Result<Vec<ExperimentConfig>> {
    let cfgs = match name {
        "default" => vec![ExperimentConfig::default()],
        "comparison" => vec![curated(), baseline(BankStrategy::Mevc), baseline(BankStrategy::Direct)],
        "epsilon-sweep" => vec![ExperimentConfig { epsilon_sweep: vec![0.0, 0.01, 0.05, 0.1], ..curated() }],
        "interval-10" => vec![ExperimentConfig { name: "curated-n10".into(), update_interval: 10, ..curated() }],
        "mevc" => vec![baseline(BankStrategy::Mevc)],
        "direct" => vec![baseline(BankStrategy::Direct)],
        other => return Err(Error::validation(format!("unknown preset {other:?}; available: {}", PRESETS.join(", ")))),
    };
    Ok(cfgs)
}
