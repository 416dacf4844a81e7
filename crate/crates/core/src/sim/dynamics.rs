//! How supervision changes the detector.
//!
//! This is where the simulator's causal assumption lives: a training step
//! improves the detector in proportion to the loss it receives from correct
//! labels, plus a bonus for the share of correct labels that are not simple.
//! Simple samples therefore contribute little by construction. Loss from
//! wrong labels counts against the step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{classify_simple, compensated_sum, LossRecord, SimpleCriterion};
use crate::types::Domain;

use super::detector::DetectorState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingDynamics {
    pub learn_gain: f64,
    pub hard_sample_bonus: f64,
    /// Weight of loss from false-positive labels, subtracted from the signal.
    pub noise_penalty: f64,
    /// Best reachable value of every parameter (a ceiling for `conf_calibration`).
    pub floor: DetectorState,
    /// Worst value a parameter may degrade to.
    pub worst: DetectorState,
}

impl Default for TrainingDynamics {
    fn default() -> Self {
        Self {
            learn_gain: 0.05,
            hard_sample_bonus: 0.5,
            noise_penalty: 0.2,
            floor: DetectorState {
                loc_noise_sigma: 0.008,
                miss_rate: 0.05,
                fp_rate: 0.1,
                conf_calibration: 9.0,
                domain: Domain::Target,
            },
            worst: DetectorState {
                loc_noise_sigma: 0.2,
                miss_rate: 1.0,
                fp_rate: 5.0,
                conf_calibration: 0.5,
                domain: Domain::Target,
            },
        }
    }
}

fn params(s: &DetectorState) -> [f64; 4] {
    [s.loc_noise_sigma, s.miss_rate, s.fp_rate, s.conf_calibration]
}

fn with_params(s: &DetectorState, p: [f64; 4]) -> DetectorState {
    DetectorState { loc_noise_sigma: p[0], miss_rate: p[1], fp_rate: p[2], conf_calibration: p[3], domain: s.domain }
}

fn clamp_between(v: f64, a: f64, b: f64) -> f64 {
    v.clamp(a.min(b), a.max(b))
}

impl TrainingDynamics {
    pub fn validate(&self) -> Result<()> {
        if !(self.learn_gain.is_finite() && self.learn_gain >= 0.0) {
            return Err(Error::validation("learn_gain must be finite and >= 0"));
        }
        if !(self.hard_sample_bonus.is_finite() && self.hard_sample_bonus >= 0.0) {
            return Err(Error::validation("hard_sample_bonus must be finite and >= 0"));
        }
        if !(self.noise_penalty.is_finite() && self.noise_penalty >= 0.0) {
            return Err(Error::validation("noise_penalty must be finite and >= 0"));
        }
        self.floor.validate()?;
        self.worst.validate()?;
        let (f, w) = (params(&self.floor), params(&self.worst));
        let ordered = f[0] <= w[0] && f[1] <= w[1] && f[2] <= w[2] && f[3] >= w[3];
        if !ordered {
            return Err(Error::validation("dynamics floor must be better than worst on every parameter"));
        }
        Ok(())
    }

    /// Rejects a state outside `[floor, worst]`.
    pub fn check_state(&self, s: &DetectorState) -> Result<()> {
        s.validate()?;
        let (f, w, p) = (params(&self.floor), params(&self.worst), params(s));
        for i in 0..4 {
            if p[i] != clamp_between(p[i], f[i], w[i]) {
                return Err(Error::validation(format!("detector state {s:?} outside dynamics bounds")));
            }
        }
        Ok(())
    }

    pub fn clamp(&self, s: &DetectorState) -> DetectorState {
        let (f, w, p) = (params(&self.floor), params(&self.worst), params(s));
        with_params(s, std::array::from_fn(|i| clamp_between(p[i], f[i], w[i])))
    }

    /// Mean signed loss plus the hard-sample bonus. Zero for no records.
    pub fn signal(&self, records: &[LossRecord], criterion: &SimpleCriterion) -> f64 {
        if records.is_empty() {
            return 0.0;
        }
        let n = records.len() as f64;
        let signed = compensated_sum(records.iter().map(|r| {
            let l = r.weighted_total(criterion.weighting);
            if r.is_true_positive {
                l
            } else {
                -self.noise_penalty * l
            }
        }));
        let hard = records.iter().filter(|r| r.is_true_positive && !classify_simple(r, criterion)).count() as f64;
        signed / n + self.hard_sample_bonus * hard / n
    }
}

/// One update: every parameter `p` becomes `best + (p - best) * exp(-gain * signal)`,
/// kept within `[floor, worst]`.
pub fn train_step(
    state: &DetectorState,
    records: &[LossRecord],
    dynamics: &TrainingDynamics,
    criterion: &SimpleCriterion,
) -> DetectorState {
    if records.is_empty() {
        return *state;
    }
    let factor = (-dynamics.learn_gain * dynamics.signal(records, criterion)).exp();
    let (f, w, p) = (params(&dynamics.floor), params(&dynamics.worst), params(state));
    with_params(state, std::array::from_fn(|i| clamp_between(f[i] + (p[i] - f[i]) * factor, f[i], w[i])))
}
