use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, Detection, Domain, LabelKind, LabelSet};

use super::config::SceneConfig;
use super::scene::Scene;

/// Quality of a parametric detector on one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorState {
    /// Std of per-coordinate box jitter, normalized units.
    pub loc_noise_sigma: f64,
    pub miss_rate: f64,
    /// Expected spurious boxes per image.
    pub fp_rate: f64,
    /// Slope of the score logit; larger separates TP and FP scores further.
    pub conf_calibration: f64,
    pub domain: Domain,
}

impl Default for DetectorState {
    fn default() -> Self {
        Self::source_default()
    }
}

impl DetectorState {
    pub fn source_default() -> Self {
        Self { loc_noise_sigma: 0.01, miss_rate: 0.1, fp_rate: 0.3, conf_calibration: 7.0, domain: Domain::Source }
    }

    /// Degradation of the source teacher when it is run on target images.
    /// `conf_calibration` is subtracted, the rest added.
    pub fn gap_default() -> Self {
        Self { loc_noise_sigma: 0.02, miss_rate: 0.3, fp_rate: 1.2, conf_calibration: 4.0, domain: Domain::Target }
    }

    pub fn noiseless(domain: Domain) -> Self {
        Self { loc_noise_sigma: 0.0, miss_rate: 0.0, fp_rate: 0.0, conf_calibration: 8.0, domain }
    }

    pub fn shifted(&self, gap: &DetectorState, domain: Domain) -> Self {
        Self {
            loc_noise_sigma: self.loc_noise_sigma + gap.loc_noise_sigma,
            miss_rate: self.miss_rate + gap.miss_rate,
            fp_rate: self.fp_rate + gap.fp_rate,
            conf_calibration: self.conf_calibration - gap.conf_calibration,
            domain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.loc_noise_sigma.is_finite()
            && self.loc_noise_sigma >= 0.0
            && (0.0..=1.0).contains(&self.miss_rate)
            && self.fp_rate.is_finite()
            && self.fp_rate >= 0.0
            && self.conf_calibration.is_finite()
            && self.conf_calibration > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!("detector state out of bounds: {self:?}")))
        }
    }
}

/// Fixed shape of the detector model, independent of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// Share of localization and score noise that repeats across epochs
    /// for the same object (0 = fresh every time, 1 = fully persistent).
    pub persistence: f64,
    /// Std of the score logit noise.
    pub score_noise: f64,
    /// TP logit is `k * (tp_margin - difficulty)`.
    pub tp_margin: f64,
    /// FP logit is `k * (fp_margin - u)`, `u ~ U(0, 1)`.
    pub fp_margin: f64,
    /// Class probability assumed where no prediction covers a label.
    pub background_prob: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self { persistence: 0.5, score_noise: 0.5, tp_margin: 0.9, fp_margin: 0.0, background_prob: 0.05 }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(Error::validation("persistence outside [0, 1]"));
        }
        if !(self.score_noise.is_finite() && self.score_noise >= 0.0) {
            return Err(Error::validation("score_noise must be finite and >= 0"));
        }
        if !(self.tp_margin.is_finite() && self.fp_margin.is_finite()) {
            return Err(Error::validation("margins must be finite"));
        }
        if !(self.background_prob > 0.0 && self.background_prob <= 1.0) {
            return Err(Error::validation("background_prob outside (0, 1]"));
        }
        Ok(())
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Misses, jitters and scores every GT object, then appends Poisson-many
/// spurious boxes. TP scores sit above FP scores on average by construction.
pub fn simulate_detections<R: Rng>(
    scene: &Scene,
    state: &DetectorState,
    params: &DetectorParams,
    scene_cfg: &SceneConfig,
    rng: &mut R,
) -> LabelSet {
    let kept = params.persistence.sqrt();
    let fresh = (1.0 - params.persistence).sqrt();
    let k = state.conf_calibration;
    let mut out = Vec::new();
    for (gt, traits) in scene.objects() {
        // draw everything up front so the stream position does not depend on
        // which branch is taken
        let missed = rng.random::<f64>() < state.miss_rate;
        let jitter: [f64; 4] = std::array::from_fn(|i| kept * traits.loc_bias[i] + fresh * normal(rng));
        let score_noise = kept * traits.score_bias + fresh * normal(rng);
        if missed {
            continue;
        }
        let c = gt.bbox.to_array();
        let s = state.loc_noise_sigma;
        let Ok(bbox) =
            BBox::new(c[0] + s * jitter[0], c[1] + s * jitter[1], c[2] + s * jitter[2], c[3] + s * jitter[3])
        else {
            continue;
        };
        if bbox.area() <= 0.0 {
            continue;
        }
        let logit = k * (params.tp_margin - traits.difficulty) + params.score_noise * score_noise;
        out.push(Detection { bbox, class_id: gt.class_id, score: sigmoid(logit) });
    }
    let n_fp =
        if state.fp_rate > 0.0 { Poisson::new(state.fp_rate).map(|p| p.sample(rng) as usize).unwrap_or(0) } else { 0 };
    let [smin, smax] = scene_cfg.box_size;
    for _ in 0..n_fp {
        let w = rng.random_range(smin..=smax);
        let h = rng.random_range(smin..=smax);
        let x1 = rng.random_range(0.0..=1.0 - w);
        let y1 = rng.random_range(0.0..=1.0 - h);
        let class_id = rng.random_range(0..scene_cfg.class_count);
        let u: f64 = rng.random();
        let logit = k * (params.fp_margin - u) + params.score_noise * normal(rng);
        if let Ok(bbox) = BBox::new(x1, y1, x1 + w, y1 + h) {
            out.push(Detection { bbox, class_id, score: sigmoid(logit) });
        }
    }
    LabelSet::new(scene.image_id.clone(), LabelKind::Prediction, out)
}
