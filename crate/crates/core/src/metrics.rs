// Copyright 2026 The tamt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Downstream evaluation metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MetricKind {
    Accuracy,
    Matthews,
    Pearson,
    F1Span,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Matthews => "matthews",
            MetricKind::Pearson => "pearson",
            MetricKind::F1Span => "f1_span",
        }
    }

    pub fn is_correlation(self) -> bool {
        matches!(self, MetricKind::Matthews | MetricKind::Pearson)
    }

    /// Maps correlation metrics from `[-1, 1]` onto `[0, 1]`.
    pub fn normalize(self, value: f64) -> f64 {
        if self.is_correlation() {
            (value + 1.0) / 2.0
        } else {
            value
        }
    }
}

impl core::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MetricKind::Accuracy, MetricKind::Matthews, MetricKind::Pearson, MetricKind::F1Span]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown metric `{s}`")))
    }
}

/// Gold annotation of one example. Spans are half-open character ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
    Span { start: usize, end: usize },
}

/// A model prediction, in the same units as [`Label`].
pub type Output = Label;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(alloc::format!(
            "{a} predictions for {b} gold labels"
        )));
    }
    if a == 0 {
        return Err(Error::Empty("prediction set"));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Binary Matthews correlation with class 1 as positive; 0 when undefined.
pub fn matthews(pred: &[usize], gold: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p == 1, g == 1) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((tp * tn - fp * fn_) / libm::sqrt(denom))
}

/// Sample Pearson correlation, `None` when either side is constant.
pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

/// Pearson correlation as a metric; a constant side scores 0.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    Ok(correlation(pred, gold).unwrap_or(0.0))
}

/// Mean over examples of the position-overlap F1 between half-open spans.
pub fn f1_span(pred: &[(usize, usize)], gold: &[(usize, usize)]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let total: f64 = pred
        .iter()
        .zip(gold)
        .map(|(&(ps, pe), &(gs, ge))| {
            let overlap = pe.min(ge).saturating_sub(ps.max(gs)) as f64;
            let (plen, glen) = (pe.saturating_sub(ps) as f64, ge.saturating_sub(gs) as f64);
            if overlap == 0.0 || plen == 0.0 || glen == 0.0 {
                return if plen == 0.0 && glen == 0.0 { 1.0 } else { 0.0 };
            }
            let (p, r) = (overlap / plen, overlap / glen);
            2.0 * p * r / (p + r)
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Dispatches to the metric matching `kind`.
pub fn metric(kind: MetricKind, pred: &[Output], gold: &[Label]) -> Result<f64> {
    check_lengths(pred.len(), gold.len())?;
    let mismatch = || Error::InvalidArgument(alloc::format!("label type does not fit metric {}", kind.as_str()));
    match kind {
        MetricKind::Accuracy | MetricKind::Matthews => {
            let mut p = Vec::with_capacity(pred.len());
            let mut g = Vec::with_capacity(gold.len());
            for (a, b) in pred.iter().zip(gold) {
                match (a, b) {
                    (Label::Class(x), Label::Class(y)) => {
                        p.push(*x);
                        g.push(*y);
                    }
                    _ => return Err(mismatch()),
                }
            }
            if kind == MetricKind::Accuracy {
                accuracy(&p, &g)
            } else {
                matthews(&p, &g)
            }
        }
        MetricKind::Pearson => {
            let pairs: Option<(Vec<f64>, Vec<f64>)> = pred
                .iter()
                .zip(gold)
                .map(|(a, b)| match (a, b) {
                    (Label::Value(x), Label::Value(y)) => Some((*x, *y)),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>()
                .map(|v| v.into_iter().unzip());
            let (p, g) = pairs.ok_or_else(mismatch)?;
            pearson(&p, &g)
        }
        MetricKind::F1Span => {
            let pairs: Option<Vec<((usize, usize), (usize, usize))>> = pred
                .iter()
                .zip(gold)
                .map(|(a, b)| match (a, b) {
                    (Label::Span { start: ps, end: pe }, Label::Span { start: gs, end: ge }) => {
                        Some(((*ps, *pe), (*gs, *ge)))
                    }
                    _ => None,
                })
                .collect();
            let (p, g): (Vec<_>, Vec<_>) = pairs.ok_or_else(mismatch)?.into_iter().unzip();
            f1_span(&p, &g)
        }
    }
}

/// One evaluated task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScore {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
}

/// Unweighted mean of normalized task scores over `expected` tasks.
pub fn avg_score(expected: &[&str], results: &[TaskScore]) -> Result<f64> {
    if expected.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let mut total = 0.0;
    for &task in expected {
        let r = results
            .iter()
            .find(|r| r.task == task)
            .ok_or_else(|| Error::UnknownTask(String::from(task)))?;
        total += r.metric.normalize(r.value);
    }
    Ok(total / expected.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn perfect_predictions() {
        let c = [0usize, 1, 1, 0];
        assert_eq!(accuracy(&c, &c).unwrap(), 1.0);
        assert_eq!(matthews(&c, &c).unwrap(), 1.0);
        let v = [0.1, 0.5, 0.2];
        assert!((pearson(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f1_span(&[(1, 4)], &[(1, 4)]).unwrap(), 1.0);
    }

    #[test]
    fn matthews_degenerate_and_hand_value() {
        assert_eq!(matthews(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap(), 0.0);
        // TP=2, TN=1, FP=1, FN=1.
        let pred = [1, 1, 0, 1, 0];
        let gold = [1, 1, 0, 0, 1];
        assert!((matthews(&pred, &gold).unwrap() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(accuracy(&[1], &[1, 0]).is_err());
        assert!(accuracy(&[], &[]).is_err());
        assert!(metric(MetricKind::Pearson, &[Label::Class(1)], &[Label::Class(1)]).is_err());
    }

    #[test]
    fn span_f1_partial_overlap() {
        // pred 2..6 (4), gold 4..8 (4), overlap 2 → p = r = 0.5.
        assert!((f1_span(&[(2, 6)], &[(4, 8)]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(f1_span(&[(0, 2)], &[(4, 8)]).unwrap(), 0.0);
    }

    #[test]
    fn avg_score_examples() {
        let s = |task: &str, metric, value| TaskScore {
            task: task.to_string(),
            metric,
            value,
        };
        let one = vec![s("a", MetricKind::Accuracy, 0.8)];
        assert_eq!(avg_score(&["a"], &one).unwrap(), 0.8);
        let two = vec![s("a", MetricKind::Accuracy, 0.8), s("b", MetricKind::Accuracy, 0.6)];
        assert!((avg_score(&["a", "b"], &two).unwrap() - 0.7).abs() < 1e-15);
        assert!((avg_score(&["b", "a"], &two).unwrap() - 0.7).abs() < 1e-15);
        let corr = vec![s("c", MetricKind::Matthews, 0.2)];
        assert!((avg_score(&["c"], &corr).unwrap() - 0.6).abs() < 1e-15);
        assert!(avg_score(&["a", "z"], &two).is_err());
    }

    #[test]
    fn correlation_undefined_for_constants() {
        assert_eq!(correlation(&[1.0, 1.0], &[0.0, 2.0]), None);
        assert_eq!(correlation(&[1.0], &[0.0]), None);
        let r = correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((r + 1.0).abs() < 1e-15);
    }
}
