//! Point and interval quality metrics, and the pre/post-calibration report.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformal::{adjust_interval, CalibrationResult, Interval};
use crate::data::EncodedSet;
use crate::error::{Error, Result};
use crate::model::{pinball, DelayModel, QuantilePrediction};
use crate::training::EVAL_CHUNK;

/// Mean absolute error between targets and median predictions.
pub fn mae(y: &[f64], median: &[f64]) -> f64 {
    assert_eq!(y.len(), median.len());
    y.iter().zip(median).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64
}

/// Mean pinball loss over all rows and all levels.
pub fn avg_ql(y: &[f64], preds: &[[f64; 3]], levels: &[f64; 3]) -> f64 {
    assert_eq!(y.len(), preds.len());
    let mut total = 0.0;
    for (yi, q) in y.iter().zip(preds) {
        for (j, &a) in levels.iter().enumerate() {
            total += pinball(yi - q[j], a);
        }
    }
    total / (3 * y.len()) as f64
}

/// Closed-interval coverage and average width.
pub fn coverage_aiw(y: &[f64], intervals: &[(f64, f64)]) -> (f64, f64) {
    assert_eq!(y.len(), intervals.len());
    let n = y.len() as f64;
    let covered = y
        .iter()
        .zip(intervals)
        .filter(|&(&v, &(lo, hi))| lo <= v && v <= hi)
        .count();
    let width: f64 = intervals.iter().map(|(lo, hi)| hi - lo).sum();
    (covered as f64 / n, width / n)
}

/// Interval width plus `2/α` times the distance by which `y` falls outside.
pub fn winkler(y: f64, low: f64, high: f64, alpha: f64) -> f64 {
    let w = high - low;
    if y < low {
        w + (2.0 / alpha) * (low - y)
    } else if y > high {
        w + (2.0 / alpha) * (y - high)
    } else {
        w
    }
}

pub fn mean_winkler(y: &[f64], intervals: &[(f64, f64)], alpha: f64) -> f64 {
    y.iter()
        .zip(intervals)
        .map(|(&v, &(lo, hi))| winkler(v, lo, hi, alpha))
        .sum::<f64>()
        / y.len() as f64
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Overall,
    Delayed,
}

/// How each row's head is chosen when building its interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// By the classifier, as in deployment.
    Predicted,
    /// By the ground-truth label, matching how calibration scores rows.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subset: Subset,
    pub calibrated: bool,
    pub routing: Routing,
    pub n: usize,
    pub mae: Option<f64>,
    pub avg_ql: Option<f64>,
    pub coverage: Option<f64>,
    pub aiw: Option<f64>,
    pub winkler: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDiagnostics {
    pub n: usize,
    pub delay_rate: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

pub fn classification_diagnostics(probs: &[f64], predicted: &[bool], truth: &[bool]) -> ClassificationDiagnostics {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let n = truth.len();
    ClassificationDiagnostics {
        n,
        delay_rate: ratio(truth.iter().filter(|&&t| t).count(), n),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        auc: roc_auc(probs, truth),
    }
}

/// Mann–Whitney form of ROC AUC with ties counted as one half.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| truth[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub alpha: f64,
    pub rows: Vec<MetricReport>,
    pub classification: ClassificationDiagnostics,
    pub calibration: Option<CalibrationResult>,
    /// Deployment intervals that inverted and were collapsed to a point.
    pub collapsed_intervals: usize,
}

impl EvaluationReport {
    pub fn row(&self, subset: Subset, calibrated: bool, routing: Routing) -> Option<&MetricReport> {
        self.rows
            .iter()
            .find(|r| r.subset == subset && r.calibrated == calibrated && r.routing == routing)
    }
}

fn subset_metrics(
    subset: Subset,
    calibrated: bool,
    routing: Routing,
    y: &[f64],
    quantiles: &[[f64; 3]],
    intervals: &[Interval],
    levels: &[f64; 3],
    alpha: f64,
) -> MetricReport {
    let mut row = MetricReport {
        subset,
        calibrated,
        routing,
        n: y.len(),
        mae: None,
        avg_ql: None,
        coverage: None,
        aiw: None,
        winkler: None,
    };
    if y.is_empty() {
        return row;
    }
    let medians: Vec<f64> = quantiles.iter().map(|q| q[1]).collect();
    // Interval bounds replace the outer quantiles so that Avg-QL reflects
    // the calibrated predictions.
    let shifted: Vec<[f64; 3]> = quantiles
        .iter()
        .zip(intervals)
        .map(|(q, iv)| [iv.low, q[1], iv.high])
        .collect();
    let bounds: Vec<(f64, f64)> = intervals.iter().map(|iv| (iv.low, iv.high)).collect();
    let (cov, aiw) = coverage_aiw(y, &bounds);
    row.mae = Some(mae(y, &medians));
    row.avg_ql = Some(avg_ql(y, &shifted, levels));
    row.coverage = Some(cov);
    row.aiw = Some(aiw);
    row.winkler = Some(mean_winkler(y, &bounds, alpha));
    row
}

/// Builds the report from precomputed predictions on a labeled split.
pub fn report_from_predictions(
    preds: &[QuantilePrediction],
    test: &EncodedSet,
    calibration: Option<&CalibrationResult>,
    alpha: f64,
    levels: &[f64; 3],
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    if preds.len() != test.len() {
        return Err(Error::Shape {
            op: "full_report",
            detail: format!("{} predictions for {} rows", preds.len(), test.len()),
        });
    }
    let mut rows = Vec::with_capacity(8);
    let mut collapsed = 0;
    let passes: &[bool] = if calibration.is_some() { &[false, true] } else { &[false] };
    for &calibrated in passes {
        for routing in [Routing::Predicted, Routing::Oracle] {
            let mut quantiles = Vec::with_capacity(preds.len());
            let mut intervals = Vec::with_capacity(preds.len());
            for (i, p) in preds.iter().enumerate() {
                let head_delayed = match routing {
                    Routing::Predicted => p.predicted_delayed,
                    Routing::Oracle => test.delayed[i],
                };
                let q = if head_delayed { p.delayed_head } else { p.ontime_head };
                let q_hat = match (calibrated, calibration) {
                    (true, Some(c)) => c.q_hat(head_delayed),
                    _ => 0.0,
                };
                let iv = adjust_interval(&q, q_hat);
                if calibrated && routing == Routing::Predicted && iv.collapsed {
                    collapsed += 1;
                }
                quantiles.push(q);
                intervals.push(iv);
            }
            for subset in [Subset::Overall, Subset::Delayed] {
                let keep: Vec<usize> = (0..preds.len())
                    .filter(|&i| subset == Subset::Overall || test.delayed[i])
                    .collect();
                let y: Vec<f64> = keep.iter().map(|&i| test.y[i]).collect();
                let q: Vec<[f64; 3]> = keep.iter().map(|&i| quantiles[i]).collect();
                let iv: Vec<Interval> = keep.iter().map(|&i| intervals[i]).collect();
                rows.push(subset_metrics(subset, calibrated, routing, &y, &q, &iv, levels, alpha));
            }
        }
    }
    // Stable presentation order: subset, then calibration, then routing.
    rows.sort_by_key(|r| (r.subset as u8, r.calibrated, r.routing as u8));
    let probs: Vec<f64> = preds.iter().map(|p| p.delay_prob).collect();
    let predicted: Vec<bool> = preds.iter().map(|p| p.predicted_delayed).collect();
    Ok(EvaluationReport {
        alpha,
        rows,
        classification: classification_diagnostics(&probs, &predicted, &test.delayed),
        calibration: calibration.copied(),
        collapsed_intervals: collapsed,
    })
}

/// Pre-calibration rows always; post-calibration rows when a calibration is
/// given. Each appears once per subset and per routing rule.
pub fn full_report(
    model: &DelayModel,
    calibration: Option<&CalibrationResult>,
    test: &EncodedSet,
    alpha: f64,
) -> Result<EvaluationReport> {
    crate::conformal::validate_alpha(alpha)?;
    let preds = model.predict(test, EVAL_CHUNK)?;
    report_from_predictions(&preds, test, calibration, alpha, &model.arch.quantile_levels)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn subset_name(s: Subset) -> &'static str {
    match s {
        Subset::Overall => "overall",
        Subset::Delayed => "delayed",
    }
}

fn routing_name(r: Routing) -> &'static str {
    match r {
        Routing::Predicted => "predicted",
        Routing::Oracle => "oracle",
    }
}

impl EvaluationReport {
    pub fn to_csv(&self, preamble: &[String]) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        for line in preamble {
            writeln!(buf, "# {line}").expect("write to Vec");
        }
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record([
                "subset", "calibrated", "routing", "n", "mae", "avg_ql", "coverage", "aiw", "winkler",
            ])?;
            for r in &self.rows {
                w.write_record([
                    subset_name(r.subset).to_string(),
                    r.calibrated.to_string(),
                    routing_name(r.routing).to_string(),
                    r.n.to_string(),
                    fmt_opt(r.mae),
                    fmt_opt(r.avg_ql),
                    fmt_opt(r.coverage),
                    fmt_opt(r.aiw),
                    fmt_opt(r.winkler),
                ])?;
            }
            w.flush().expect("write to Vec");
        }
        Ok(buf)
    }

    pub fn write_csv(&self, path: &Path, preamble: &[String]) -> Result<()> {
        crate::checkpoint::write_atomic(path, &self.to_csv(preamble)?)
    }

    pub fn to_json(&self, config_echo: &serde_json::Value) -> Result<String> {
        let v = serde_json::json!({ "config": config_echo, "report": self });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:<5} {:<9} {:>7} {:>8} {:>8} {:>8} {:>8} {:>9}",
            "subset", "calib", "routing", "n", "MAE", "Avg-QL", "Cov", "AIW", "Winkler"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:<5} {:<9} {:>7} {:>8} {:>8} {:>8} {:>8} {:>9}",
                subset_name(r.subset),
                if r.calibrated { "post" } else { "pre" },
                routing_name(r.routing),
                r.n,
                cell(r.mae),
                cell(r.avg_ql),
                cell(r.coverage),
                cell(r.aiw),
                cell(r.winkler),
            );
        }
        let c = &self.classification;
        let _ = writeln!(
            s,
            "classifier: F1 {:.4}  precision {:.4}  recall {:.4}  AUC {}  delay rate {:.4}",
            c.f1,
            c.precision,
            c.recall,
            cell(c.auc),
            c.delay_rate
        );
        if let Some(cal) = &self.calibration {
            let _ = writeln!(
                s,
                "calibration: alpha {}  q_hat delayed {:.4} (n={})  q_hat on-time {:.4} (n={})  collapsed {}",
                cal.alpha, cal.q_hat_delayed, cal.n_delayed, cal.q_hat_ontime, cal.n_ontime, self.collapsed_intervals
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LEVELS: [f64; 3] = [0.1, 0.5, 0.9];

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]), 1.0);
        assert_eq!(mae(&[3.0], &[0.0]), 3.0);
    }

    #[test]
    fn avg_ql_examples() {
        assert_eq!(avg_ql(&[2.0], &[[2.0, 2.0, 2.0]], &LEVELS), 0.0);
        let v = avg_ql(&[3.0], &[[1.0, 2.0, 4.0]], &LEVELS);
        // 0.1·2 + 0.5·1 + 0.1·1 = 0.8 over three levels.
        assert!((v - 0.8 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_aiw(&[3.0], &[(1.0, 3.0)]), (1.0, 2.0));
        assert_eq!(coverage_aiw(&[1.0, 5.0], &[(0.0, 2.0), (0.0, 2.0)]), (0.5, 2.0));
        assert_eq!(coverage_aiw(&[4.0], &[(4.0, 4.0)]), (1.0, 0.0));
    }

    #[test]
    fn winkler_examples() {
        assert_eq!(winkler(2.0, 1.0, 3.0, 0.2), 2.0);
        assert!((winkler(1.5, 0.0, 1.0, 0.2) - 6.0).abs() < 1e-12);
        assert_eq!(winkler(1.0, 1.0, 3.0, 0.2), 2.0);
        assert!((winkler(-1.0, 0.0, 1.0, 0.5) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn median_and_auc() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(roc_auc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(roc_auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(roc_auc(&[0.9, 0.1, 0.4, 0.6], &[false, true, true, false]), Some(0.0));
        assert_eq!(roc_auc(&[0.1], &[true]), None);
    }

    fn pred(p: f64, q: [f64; 3]) -> QuantilePrediction {
        QuantilePrediction {
            delay_prob: p,
            predicted_delayed: p > 0.5,
            quantiles: q,
            delayed_head: q,
            ontime_head: q,
        }
    }

    fn set(y: &[f64], delayed: &[bool]) -> EncodedSet {
        EncodedSet {
            n: y.len(),
            n_cat: 0,
            n_num: 0,
            cat: vec![],
            num: vec![],
            y: y.to_vec(),
            delayed: delayed.to_vec(),
        }
    }

    #[test]
    fn report_has_eight_rows_and_null_delayed_subset() {
        let preds = vec![pred(0.2, [-1.0, 0.0, 1.0]), pred(0.3, [-0.5, 0.0, 0.5])];
        let cal = CalibrationResult {
            alpha: 0.2,
            q_hat_delayed: 1.0,
            q_hat_ontime: 0.5,
            n_delayed: 1,
            n_ontime: 1,
            fallback: false,
        };
        let r = report_from_predictions(&preds, &set(&[0.0, 2.0], &[false, false]), Some(&cal), 0.2, &LEVELS).unwrap();
        assert_eq!(r.rows.len(), 8);
        for row in r.rows.iter().filter(|r| r.subset == Subset::Delayed) {
            assert_eq!(row.n, 0);
            assert!(row.mae.is_none() && row.coverage.is_none());
        }
        let pre = r.row(Subset::Overall, false, Routing::Predicted).unwrap();
        let post = r.row(Subset::Overall, true, Routing::Predicted).unwrap();
        assert_eq!(pre.coverage, Some(0.5));
        assert_eq!(post.coverage, Some(0.5));
        assert!((post.aiw.unwrap() - (pre.aiw.unwrap() + 1.0)).abs() < 1e-12);
        let no_cal = report_from_predictions(&preds, &set(&[0.0, 2.0], &[false, true]), None, 0.2, &LEVELS).unwrap();
        assert_eq!(no_cal.rows.len(), 4);
    }

    #[test]
    fn csv_and_json_render() {
        let preds = vec![pred(0.9, [1.0, 2.0, 3.0]), pred(0.1, [0.0, 0.0, 0.0])];
        let r = report_from_predictions(&preds, &set(&[2.0, 0.0], &[true, false]), None, 0.2, &LEVELS).unwrap();
        let csv = String::from_utf8(r.to_csv(&["k = 1".into()]).unwrap()).unwrap();
        assert!(csv.starts_with("# k = 1\nsubset,"));
        assert_eq!(csv.lines().count(), 6);
        let json = r.to_json(&serde_json::json!({})).unwrap();
        let back: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back["report"]["rows"].as_array().unwrap().len(), 4);
        assert!(r.to_table().contains("classifier: F1 1.0000"));
    }

    proptest! {
        #[test]
        fn winkler_dominates_width_and_median_ql_is_half_mae(
            rows in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, 0.0f64..10.0), 1..50),
            alpha in 0.01f64..0.99,
        ) {
            let y: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let iv: Vec<(f64, f64)> = rows.iter().map(|r| (r.1, r.1 + r.2)).collect();
            let (cov, aiw) = coverage_aiw(&y, &iv);
            let w = mean_winkler(&y, &iv, alpha);
            prop_assert!(w >= aiw - 1e-9);
            if cov == 1.0 {
                prop_assert!((w - aiw).abs() < 1e-12);
            } else {
                prop_assert!(w > aiw);
            }
            let med: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let ql: f64 = y.iter().zip(&med).map(|(a, b)| pinball(a - b, 0.5)).sum::<f64>() / y.len() as f64;
            prop_assert!((ql - mae(&y, &med) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn metrics_are_permutation_invariant(
            rows in prop::collection::vec((-20.0f64..20.0, -20.0f64..20.0, 0.0f64..10.0), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut crate::numerics::seeded(seed));
            let stats = |rs: &[(f64, f64, f64)]| {
                let y: Vec<f64> = rs.iter().map(|r| r.0).collect();
                let iv: Vec<(f64, f64)> = rs.iter().map(|r| (r.1, r.1 + r.2)).collect();
                let (c, a) = coverage_aiw(&y, &iv);
                (c, a, mean_winkler(&y, &iv, 0.2))
            };
            let (a, b) = (stats(&rows), stats(&shuffled));
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
        }
    }
}
