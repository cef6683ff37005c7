//! Thresholding, point adjustment, F1 and ROC-AUC.
//!
//! Predictions use `score >= threshold` throughout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fills every ground-truth segment that contains at least one positive
/// prediction. Predictions outside segments are left alone.
pub fn point_adjust(pred: &[bool], truth: &[bool]) -> Result<Vec<bool>> {
    check_len(pred.len(), truth.len())?;
    let mut out = pred.to_vec();
    for (lo, hi) in segments(truth) {
        if pred[lo..hi].iter().any(|&p| p) {
            out[lo..hi].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

/// Maximal runs of `true` as half-open ranges.
pub fn segments(truth: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &t) in truth.iter().enumerate() {
        match (t, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, truth.len()));
    }
    out
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!(
            "scores/predictions have length {a} but labels have length {b}"
        )));
    }
    Ok(())
}

fn check_eval_inputs(scores: &[f64], truth: &[bool]) -> Result<()> {
    check_len(scores.len(), truth.len())?;
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Eval(format!("score at t={i} is not finite")));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 || pos == truth.len() {
        return Err(Error::Eval(format!(
            "labels need both classes, got {pos} positives out of {}",
            truth.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Result<Self> {
        check_len(pred.len(), truth.len())?;
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_from_counts(self.tp, self.fp, self.fn_)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            confusion: *self,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`, the harmonic mean of precision and recall.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    /// Whether the threshold was chosen on point-adjusted F1.
    pub threshold_adjusted: bool,
    pub adjusted: Metrics,
    pub raw: Metrics,
    pub auc: f64,
}

impl EvalReport {
    /// Metrics of the mode the threshold was optimized for.
    pub fn selected(&self) -> &Metrics {
        if self.threshold_adjusted {
            &self.adjusted
        } else {
            &self.raw
        }
    }

    pub const CSV_HEADER: &'static str = "threshold,pa_precision,pa_recall,pa_f1,precision,recall,f1,auc,pa_tp,pa_fp,pa_fn,pa_tn,tp,fp,fn,tn";

    pub fn csv_row(&self) -> String {
        let (a, r) = (&self.adjusted, &self.raw);
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.threshold,
            a.precision,
            a.recall,
            a.f1,
            r.precision,
            r.recall,
            r.f1,
            self.auc,
            a.confusion.tp,
            a.confusion.fp,
            a.confusion.fn_,
            a.confusion.tn,
            r.confusion.tp,
            r.confusion.fp,
            r.confusion.fn_,
            r.confusion.tn
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are finite")
    }
}

/// Both metric sets at a fixed threshold.
pub fn report_at(scores: &[f64], truth: &[bool], threshold: f64, adjust: bool) -> Result<EvalReport> {
    check_eval_inputs(scores, truth)?;
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let raw = Confusion::from_predictions(&pred, truth)?.metrics();
    let adjusted = Confusion::from_predictions(&point_adjust(&pred, truth)?, truth)?.metrics();
    Ok(EvalReport {
        threshold,
        threshold_adjusted: adjust,
        adjusted,
        raw,
        auc: roc_auc(scores, truth)?,
    })
}

/// Threshold maximizing F1 over all distinct score values, ties toward the
/// larger threshold.
///
/// Sweeps thresholds in descending order. Under point adjustment each truth
/// segment switches on all at once when the threshold reaches its maximum
/// score, so only normal points and segment maxima move the counts.
pub fn best_f1_threshold(scores: &[f64], truth: &[bool], adjust: bool) -> Result<(f64, EvalReport)> {
    check_eval_inputs(scores, truth)?;
    // (score, positives gained, false positives gained)
    let mut events: Vec<(f64, usize, usize)> = Vec::with_capacity(scores.len());
    if adjust {
        for (i, &t) in truth.iter().enumerate() {
            if !t {
                events.push((scores[i], 0, 1));
            }
        }
        for (lo, hi) in segments(truth) {
            let top = scores[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            events.push((top, hi - lo, 0));
        }
    } else {
        for (&s, &t) in scores.iter().zip(truth) {
            events.push(if t { (s, 1, 0) } else { (s, 0, 1) });
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let positives = truth.iter().filter(|&&t| t).count();
    let (mut tp, mut fp) = (0, 0);
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    let mut i = 0;
    while i < events.len() {
        let level = events[i].0;
        while i < events.len() && events[i].0 == level {
            tp += events[i].1;
            fp += events[i].2;
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, positives - tp);
        if f1 > best.0 {
            best = (f1, level);
        }
    }
    let threshold = best.1;
    Ok((threshold, report_at(scores, truth, threshold, adjust)?))
}

/// Area under the ROC curve by the trapezoid rule, tied scores grouped into
/// a single step.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    check_eval_inputs(scores, truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = truth.iter().filter(|&&t| t).count() as f64;
    let neg = truth.len() as f64 - pos;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let level = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == level {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // width × mean height, in counts; normalized once at the end
        area += (fp - fp0) as f64 * (tp + tp0) as f64 * 0.5;
    }
    Ok(area / (pos * neg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Concatenate,
    EntityAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityReport {
    pub entity: String,
    pub report: EvalReport,
}

/// Per-entity best-F1 reports and their unweighted means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityAverage {
    pub entities: Vec<EntityReport>,
    /// Entities with a single label class, which cannot be scored.
    pub skipped: Vec<String>,
    pub pa_precision: f64,
    pub pa_recall: f64,
    pub pa_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Evaluates each entity's slice of the series on its own threshold.
/// Entity slices are the rows sharing a name, in order of first appearance.
pub fn evaluate_entities(
    scores: &[f64],
    truth: &[bool],
    entities: &[String],
    adjust: bool,
) -> Result<EntityAverage> {
    check_len(scores.len(), truth.len())?;
    check_len(entities.len(), truth.len())?;
    let mut names: Vec<&String> = Vec::new();
    for e in entities {
        if !names.contains(&e) {
            names.push(e);
        }
    }
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for name in names {
        let idx: Vec<usize> = (0..entities.len()).filter(|&i| &entities[i] == name).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let t: Vec<bool> = idx.iter().map(|&i| truth[i]).collect();
        let pos = t.iter().filter(|&&x| x).count();
        if pos == 0 || pos == t.len() {
            skipped.push(name.clone());
            continue;
        }
        let (_, report) = best_f1_threshold(&s, &t, adjust)?;
        reports.push(EntityReport {
            entity: name.clone(),
            report,
        });
    }
    if reports.is_empty() {
        return Err(Error::Eval("no entity has both label classes".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    Ok(EntityAverage {
        pa_precision: mean(&|r| r.adjusted.precision),
        pa_recall: mean(&|r| r.adjusted.recall),
        pa_f1: mean(&|r| r.adjusted.f1),
        precision: mean(&|r| r.raw.precision),
        recall: mean(&|r| r.raw.recall),
        f1: mean(&|r| r.raw.f1),
        auc: mean(&|r| r.auc),
        entities: reports,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn adjust_fills_touched_segment() {
        let out = point_adjust(&b(&[0, 0, 1, 0, 0]), &b(&[0, 1, 1, 1, 0])).unwrap();
        assert_eq!(out, b(&[0, 1, 1, 1, 0]));
    }

    #[test]
    fn adjust_trivial_cases() {
        let pred = b(&[1, 0, 1, 1]);
        assert_eq!(point_adjust(&pred, &b(&[0, 0, 0, 0])).unwrap(), pred);
        assert_eq!(point_adjust(&b(&[0; 4]), &b(&[1, 1, 0, 1])).unwrap(), b(&[0; 4]));
        assert!(matches!(point_adjust(&pred, &b(&[0, 1])), Err(Error::Input(_))));
    }

    #[test]
    fn segment_boundaries() {
        assert_eq!(segments(&b(&[1, 1, 0, 1, 0, 0, 1])), vec![(0, 2), (3, 4), (6, 7)]);
        assert!(segments(&b(&[0, 0])).is_empty());
    }

    #[test]
    fn separable_scores_give_perfect_f1() {
        let truth = b(&[0, 1, 1, 0, 1]);
        let scores: Vec<f64> = truth.iter().map(|&t| f64::from(u8::from(t))).collect();
        for adjust in [false, true] {
            let (th, r) = best_f1_threshold(&scores, &truth, adjust).unwrap();
            assert_eq!(th, 1.0);
            assert_eq!(r.selected().f1, 1.0);
            assert_eq!(r.auc, 1.0);
        }
    }

    #[test]
    fn tie_goes_to_larger_threshold() {
        // thresholds 0.9 and 0.5 both give F1 = 2/3
        let truth = b(&[1, 0, 0, 1]);
        let scores = [0.9, 0.5, 0.5, 0.5];
        let (th, r) = best_f1_threshold(&scores, &truth, false).unwrap();
        let at_half = report_at(&scores, &truth, 0.5, false).unwrap();
        assert_eq!(r.raw.f1, at_half.raw.f1);
        assert_eq!(th, 0.9);
    }

    #[test]
    fn degenerate_truth_rejected() {
        assert!(matches!(best_f1_threshold(&[0.1, 0.2], &b(&[0, 0]), true), Err(Error::Eval(_))));
        assert!(matches!(roc_auc(&[0.1, 0.2], &b(&[1, 1])), Err(Error::Eval(_))));
        assert!(roc_auc(&[f64::NAN, 0.2], &b(&[1, 0])).is_err());
    }

    #[test]
    fn auc_chance_and_inverted() {
        assert_eq!(roc_auc(&[0.3; 6], &b(&[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.0, 1.0, 2.0], &b(&[1, 0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn report_f1_is_harmonic_mean() {
        let truth = b(&[0, 1, 1, 0, 1, 0, 0, 1]);
        let scores = [0.2, 0.4, 0.9, 0.5, 0.1, 0.3, 0.8, 0.6];
        let r = report_at(&scores, &truth, 0.45, true).unwrap();
        for m in [r.adjusted, r.raw] {
            let hm = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            assert!((m.f1 - hm).abs() < 1e-15);
        }
        assert!(r.adjusted.f1 >= r.raw.f1);
    }

    #[test]
    fn csv_row_matches_header_width() {
        let truth = b(&[0, 1, 0]);
        let r = report_at(&[0.0, 1.0, 0.5], &truth, 0.5, true).unwrap();
        assert_eq!(
            r.csv_row().split(',').count(),
            EvalReport::CSV_HEADER.split(',').count()
        );
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn entity_average_skips_single_class() {
        let ents: Vec<String> = ["a", "a", "a", "b", "b", "c", "c"].iter().map(|s| s.to_string()).collect();
        let truth = b(&[0, 1, 0, 0, 1, 0, 0]);
        let scores = [0.1, 0.9, 0.2, 0.8, 0.3, 0.5, 0.5];
        let avg = evaluate_entities(&scores, &truth, &ents, false).unwrap();
        assert_eq!(avg.skipped, vec!["c".to_string()]);
        assert_eq!(avg.entities.len(), 2);
        // a is perfect, b best is threshold 0.3 flagging both: F1 2/3
        assert!((avg.f1 - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }
}
