//! Split conformalized quantile regression, calibrated separately for the
//! delayed and on-time heads.
//!
//! Calibration partitions the calibration split by ground truth and scores
//! each subset against its own head. At deployment the head, and therefore
//! the correction, is chosen by the classifier.

use serde::{Deserialize, Serialize};

use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::model::{DelayModel, QuantilePrediction};
use crate::training::EVAL_CHUNK;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub q_hat_delayed: f64,
    pub q_hat_ontime: f64,
    pub n_delayed: usize,
    pub n_ontime: usize,
    /// Set when a subset was empty and its correction defaulted to zero.
    #[serde(default)]
    pub fallback: bool,
}

impl CalibrationResult {
    /// The identity correction, used when no calibration is available.
    pub fn uncalibrated(alpha: f64) -> Self {
        Self {
            alpha,
            q_hat_delayed: 0.0,
            q_hat_ontime: 0.0,
            n_delayed: 0,
            n_ontime: 0,
            fallback: true,
        }
    }

    pub fn q_hat(&self, delayed_head: bool) -> f64 {
        if delayed_head {
            self.q_hat_delayed
        } else {
            self.q_hat_ontime
        }
    }
}

/// `max(lower − y, y − upper)`: negative inside the interval, positive outside.
pub fn conformity_score(y: f64, lower: f64, upper: f64) -> f64 {
    (lower - y).max(y - upper)
}

/// The ⌈(1−α)(n+1)⌉-th smallest score, clamped to the largest.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let rank = ((1.0 - alpha) * (n as f64 + 1.0)).ceil() as usize;
    Some(s[rank.clamp(1, n) - 1])
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config("conformal.alpha", format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Per-head scores on a labeled split: each row is scored against the head
/// matching its ground-truth label. Returns `(delayed, ontime)` scores.
pub fn head_scores(model: &DelayModel, calib: &EncodedSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let preds = model.predict(calib, EVAL_CHUNK)?;
    let (mut del, mut on) = (Vec::new(), Vec::new());
    for (i, p) in preds.iter().enumerate() {
        if calib.delayed[i] {
            del.push(conformity_score(calib.y[i], p.delayed_head[0], p.delayed_head[2]));
        } else {
            on.push(conformity_score(calib.y[i], p.ontime_head[0], p.ontime_head[2]));
        }
    }
    Ok((del, on))
}

/// Calibrates both heads. An empty subset is an error naming it.
pub fn calibrate(model: &DelayModel, calib: &EncodedSet, alpha: f64) -> Result<CalibrationResult> {
    calibrate_inner(model, calib, alpha, false)
}

/// Like [`calibrate`], but an empty subset leaves that head uncorrected
/// (`q̂ = 0`) and sets the `fallback` flag instead of failing.
pub fn calibrate_with_fallback(model: &DelayModel, calib: &EncodedSet, alpha: f64) -> Result<CalibrationResult> {
    calibrate_inner(model, calib, alpha, true)
}

fn calibrate_inner(model: &DelayModel, calib: &EncodedSet, alpha: f64, fallback: bool) -> Result<CalibrationResult> {
    validate_alpha(alpha)?;
    let (del, on) = head_scores(model, calib)?;
    let mut used_fallback = false;
    let mut resolve = |scores: &[f64], subset: &'static str| match conformal_quantile(scores, alpha) {
        Some(q) => Ok(q),
        None if fallback => {
            log::warn!("calibration subset `{subset}` is empty; leaving its intervals uncalibrated");
            used_fallback = true;
            Ok(0.0)
        }
        None => Err(Error::EmptyCalibrationSubset { subset }),
    };
    let q_hat_delayed = resolve(&del, "delayed")?;
    let q_hat_ontime = resolve(&on, "ontime")?;
    Ok(CalibrationResult {
        alpha,
        q_hat_delayed,
        q_hat_ontime,
        n_delayed: del.len(),
        n_ontime: on.len(),
        fallback: used_fallback,
    })
}

/// A calibrated interval; `collapsed` marks an inverted interval replaced by
/// its midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    pub collapsed: bool,
}

/// `[q10 − q̂, q90 + q̂]` from a sorted quantile triple.
pub fn adjust_interval(quantiles: &[f64; 3], q_hat: f64) -> Interval {
    let (low, high) = (quantiles[0] - q_hat, quantiles[2] + q_hat);
    if high < low {
        let mid = 0.5 * (low + high);
        Interval {
            low: mid,
            high: mid,
            collapsed: true,
        }
    } else {
        Interval {
            low,
            high,
            collapsed: false,
        }
    }
}

/// Deployment interval: the head and its correction are picked by the
/// classifier (`p̂ > 0.5`).
pub fn calibrated_interval(pred: &QuantilePrediction, result: &CalibrationResult) -> Interval {
    adjust_interval(&pred.quantiles, result.q_hat(pred.predicted_delayed))
}
