//! Adaptive weighted loss and simple-sample classification.
//!
//! Target-domain pseudo labels contribute `cls + w * loc`, where the weight
//! `w` is 1 for labels with confidence above `tau` and the confidence itself
//! otherwise. Only the localization term is weighted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::iou;
use crate::types::Detection;

/// Upper bound on the per-label classification loss.
pub const CLS_LOSS_CLIP: f64 = 10.0;

/// Per-pseudo-label loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub image_id: String,
    pub label_idx: usize,
    pub cls_loss: f64,
    pub loc_loss: f64,
    /// Confidence of the pseudo label.
    pub confidence: f64,
    pub is_true_positive: bool,
}

impl LossRecord {
    pub fn new(
        image_id: impl Into<String>,
        label_idx: usize,
        cls_loss: f64,
        loc_loss: f64,
        confidence: f64,
        is_true_positive: bool,
    ) -> Result<Self> {
        if !(cls_loss.is_finite() && cls_loss >= 0.0 && loc_loss.is_finite() && loc_loss >= 0.0) {
            return Err(Error::validation(format!(
                "losses must be finite and non-negative, got cls={cls_loss} loc={loc_loss}"
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::validation(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self { image_id: image_id.into(), label_idx, cls_loss, loc_loss, confidence, is_true_positive })
    }

    /// `cls + w * loc` under the given weighting.
    pub fn weighted_total(&self, weighting: Weighting) -> f64 {
        self.cls_loss + weighting.weight(self.confidence) * self.loc_loss
    }

    pub fn component(&self, component: LossComponent, weighting: Weighting) -> f64 {
        match component {
            LossComponent::Total => self.weighted_total(weighting),
            LossComponent::LocOnly => weighting.weight(self.confidence) * self.loc_loss,
            LossComponent::ClsOnly => self.cls_loss,
        }
    }
}

/// How localization terms are weighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Confidence-dependent weight with threshold `tau`.
    Adaptive { tau: f64 },
    /// Every label weighted 1.
    Uniform,
}

impl Weighting {
    pub fn weight(&self, confidence: f64) -> f64 {
        match *self {
            Weighting::Adaptive { tau } => {
                if confidence > tau {
                    1.0
                } else {
                    confidence
                }
            }
            Weighting::Uniform => 1.0,
        }
    }
}

/// Which part of the per-label loss decides simplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossComponent {
    #[default]
    Total,
    LocOnly,
    ClsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub tau: f64,
    pub simple_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { tau: 0.3, simple_threshold: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("simple_threshold", self.simple_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn unit(name: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::validation(format!("{name}={v} outside [0, 1]")))
    }
}

/// `1` when `c > tau`, else `c`.
pub fn label_weight(c: f64, tau: f64) -> Result<f64> {
    let c = unit("confidence", c)?;
    let tau = unit("tau", tau)?;
    Ok(Weighting::Adaptive { tau }.weight(c))
}

/// Neumaier-compensated sum; result does not depend on chunking within 1e-12.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `L_S + sum(cls_i) + sum(w_i * loc_i)` with adaptive weights at `tau`.
pub fn total_loss(source_loss: f64, records: &[LossRecord], tau: f64) -> Result<f64> {
    unit("tau", tau)?;
    total_loss_with(source_loss, records, Weighting::Adaptive { tau })
}

pub fn total_loss_with(source_loss: f64, records: &[LossRecord], weighting: Weighting) -> Result<f64> {
    if !(source_loss.is_finite() && source_loss >= 0.0) {
        return Err(Error::validation(format!("source loss {source_loss} must be finite and >= 0")));
    }
    let target =
        compensated_sum(records.iter().flat_map(|r| [r.cls_loss, weighting.weight(r.confidence) * r.loc_loss]));
    Ok(source_loss + target)
}

/// Loss terms of one pseudo label against the prediction matched to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub confidence: f64,
}

impl LossTerms {
    pub fn into_record(self, image_id: impl Into<String>, label_idx: usize, is_tp: bool) -> LossRecord {
        LossRecord {
            image_id: image_id.into(),
            label_idx,
            cls_loss: self.cls_loss,
            loc_loss: self.loc_loss,
            confidence: self.confidence,
            is_true_positive: is_tp,
        }
    }
}

fn cls_loss(class_prob: f64) -> Result<f64> {
    if !(class_prob > 0.0 && class_prob <= 1.0) {
        return Err(Error::validation(format!("class probability {class_prob} outside (0, 1]")));
    }
    Ok((-class_prob.ln()).clamp(0.0, CLS_LOSS_CLIP))
}

/// `loc = 1 - IoU(pred, pseudo)`, `cls = -ln(class_prob)` clipped at 10.
pub fn surrogate_losses(pred: &Detection, pseudo: &Detection, class_prob: f64) -> Result<LossTerms> {
    Ok(LossTerms {
        cls_loss: cls_loss(class_prob)?,
        loc_loss: 1.0 - iou(&pred.bbox, &pseudo.bbox),
        confidence: pseudo.score,
    })
}

/// Terms for a pseudo label with no overlapping prediction.
pub fn unmatched_losses(pseudo: &Detection, background_prob: f64) -> Result<LossTerms> {
    Ok(LossTerms { cls_loss: cls_loss(background_prob)?, loc_loss: 1.0, confidence: pseudo.score })
}

/// Rule deciding whether a record counts as a simple sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleCriterion {
    pub threshold: f64,
    pub weighting: Weighting,
    pub component: LossComponent,
}

impl SimpleCriterion {
    pub fn new(threshold: f64, weighting: Weighting) -> Self {
        Self { threshold, weighting, component: LossComponent::Total }
    }
}

/// Simple when the chosen loss component is at most the threshold.
pub fn classify_simple(record: &LossRecord, criterion: &SimpleCriterion) -> bool {
    record.component(criterion.component, criterion.weighting) <= criterion.threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::BBox;
    use proptest::prelude::*;

    fn rec(cls: f64, loc: f64, c: f64) -> LossRecord {
        LossRecord::new("img", 0, cls, loc, c, true).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(label_weight(0.8, 0.3).unwrap(), 1.0);
        assert_eq!(label_weight(0.3, 0.3).unwrap(), 0.3);
        assert_eq!(label_weight(0.1, 0.3).unwrap(), 0.1);
        assert!(label_weight(1.1, 0.3).is_err());
        assert!(label_weight(0.5, -0.1).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let v = total_loss(1.0, &[rec(0.5, 0.4, 0.2)], 0.3).unwrap();
        assert!((v - 1.58).abs() < 1e-12);
        assert_eq!(total_loss(2.5, &[], 0.3).unwrap(), 2.5);
        let recs = [rec(0.5, 0.4, 0.9), rec(0.1, 0.2, 0.5)];
        let v = total_loss(0.0, &recs, 0.3).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
        assert!(total_loss(-1.0, &recs, 0.3).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let b = BBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let d = Detection::new(b, 0, 0.7).unwrap();
        let t = surrogate_losses(&d, &d, 1.0).unwrap();
        assert_eq!((t.cls_loss, t.loc_loss), (0.0, 0.0));
        assert_eq!(t.confidence, 0.7);

        let far = Detection::new(BBox::new(0.6, 0.6, 0.9, 0.9).unwrap(), 0, 0.7).unwrap();
        assert_eq!(surrogate_losses(&d, &far, 1.0).unwrap().loc_loss, 1.0);

        let t = surrogate_losses(&d, &d, (-1.0f64).exp()).unwrap();
        assert!((t.cls_loss - 1.0).abs() < 1e-12);

        assert_eq!(surrogate_losses(&d, &d, 1e-30).unwrap().cls_loss, CLS_LOSS_CLIP);
        assert!(surrogate_losses(&d, &d, 0.0).is_err());
    }

    #[test]
    fn simple_examples() {
        let crit = SimpleCriterion::new(0.3, Weighting::Adaptive { tau: 0.3 });
        assert!(classify_simple(&rec(0.1, 0.1, 0.9), &crit));
        assert!(classify_simple(&rec(0.3, 0.0, 0.9), &crit));
        assert!(!classify_simple(&rec(0.5, 0.0, 0.9), &crit));
        // a low-confidence label's localization loss is discounted
        assert!(classify_simple(&rec(0.1, 0.5, 0.2), &crit));
        let loc_only = SimpleCriterion { component: LossComponent::LocOnly, ..crit };
        assert!(classify_simple(&rec(5.0, 0.1, 0.9), &loc_only));
    }

    #[test]
    fn record_validation() {
        assert!(LossRecord::new("a", 0, -0.1, 0.0, 0.5, true).is_err());
        assert!(LossRecord::new("a", 0, 0.1, f64::NAN, 0.5, true).is_err());
        assert!(LossRecord::new("a", 0, 0.1, 0.1, 1.5, true).is_err());
    }

    #[test]
    fn compensated_sum_is_accurate() {
        let v = [1e16, 1.0, -1e16];
        assert_eq!(compensated_sum(v), 1.0);
    }

    proptest! {
        #[test]
        fn weight_is_piecewise_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, tau in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (wl, wh) = (label_weight(lo, tau).unwrap(), label_weight(hi, tau).unwrap());
            if hi <= tau {
                prop_assert!(wl <= wh);
            }
            if lo > tau {
                prop_assert_eq!(wl, 1.0);
                prop_assert_eq!(wh, 1.0);
            }
        }

        #[test]
        fn total_loss_monotone(
            recs in proptest::collection::vec((0.0f64..5.0, 0.0f64..1.0, 0.0f64..=1.0), 1..20),
            bump in 0.0f64..1.0,
            which in 0usize..20,
            tau in 0.0f64..=1.0,
        ) {
            let records: Vec<LossRecord> = recs.iter().map(|&(c, l, p)| rec(c, l, p)).collect();
            let base = total_loss(0.5, &records, tau).unwrap();
            let i = which % records.len();
            let mut up = records.clone();
            up[i].cls_loss += bump;
            prop_assert!(total_loss(0.5, &up, tau).unwrap() >= base - 1e-12);
            let mut up = records.clone();
            up[i].loc_loss += bump;
            prop_assert!(total_loss(0.5, &up, tau).unwrap() >= base - 1e-12);
            // lowering tau only raises weights
            let lower = total_loss(0.5, &records, tau * 0.5).unwrap();
            prop_assert!(lower >= base - 1e-12);
        }

        #[test]
        fn tau_zero_is_unweighted(recs in proptest::collection::vec((0.0f64..5.0, 0.0f64..1.0, 0.001f64..=1.0), 0..20)) {
            let records: Vec<LossRecord> = recs.iter().map(|&(c, l, p)| rec(c, l, p)).collect();
            let a = total_loss(0.0, &records, 0.0).unwrap();
            let b = total_loss_with(0.0, &records, Weighting::Uniform).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
