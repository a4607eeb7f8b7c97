//! Ranking metrics, bootstrap confidence intervals and conditional
//! utilization rates.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::nn::TaskKind;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("length mismatch: {0} scores vs {1} labels")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("bootstrap needs at least 2 iterations")]
    TooFewIterations,
    #[error("all {0} bootstrap resamples were undefined")]
    AllResamplesUndefined(usize),
}

/// A metric that may be undefined (e.g. AUROC with a single class present).
/// Serializes as a number or the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Undefined,
}

impl MetricValue {
    pub fn value(self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(v),
            MetricValue::Undefined => None,
        }
    }
}

impl From<Result<f64, MetricError>> for MetricValue {
    fn from(r: Result<f64, MetricError>) -> Self {
        r.map_or(MetricValue::Undefined, MetricValue::Value)
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v:.4}"),
            MetricValue::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) => s.serialize_f64(*v),
            MetricValue::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(MetricValue::Value(v)),
            Raw::Str(s) if s == "undefined" => Ok(MetricValue::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric value {s:?}"))),
        }
    }
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::Length(scores.len(), labels.len()));
    }
    Ok(())
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve: `P(s+ > s-) + P(s+ = s-) / 2`, computed from
/// tie-averaged ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, with tied groups sharing their mean rank. Ranks
    // are doubled to stay in integers.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let doubled_mean_rank = (i + 1 + j + 1) as u128;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += doubled_mean_rank * pos_in_group;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * q) as f64)
}

/// Average precision: the sum over score thresholds (descending, with tied
/// scores forming one threshold) of precision times the recall increment.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("AUPRC needs a positive"));
    }
    let idx = descending(scores);
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                group_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (group_tp as f64 / n_pos as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    /// Resamples on which the metric was undefined and therefore skipped.
    pub skipped: usize,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `n` cases. `metric` receives the resampled
/// case indices; iteration `i` draws from its own stream so results do not
/// depend on evaluation order.
pub fn bootstrap_indices<F>(n: usize, n_iter: usize, seed: u64, metric: F) -> Result<ConfidenceInterval, MetricError>
where
    F: Fn(&[usize]) -> Result<f64, MetricError>,
{
    if n_iter < 2 {
        return Err(MetricError::TooFewIterations);
    }
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let mut values = Vec::with_capacity(n_iter);
    let mut idx = vec![0usize; n];
    for it in 0..n_iter {
        let mut rng = substream(seed, &format!("bootstrap:{it}"));
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
        if let Ok(v) = metric(&idx) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(MetricError::AllResamplesUndefined(n_iter));
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(ConfidenceInterval {
        lo: quantile(&values, 0.025),
        hi: quantile(&values, 0.975),
        skipped: n_iter - values.len(),
    })
}

/// Percentile bootstrap CI of a score/label metric.
pub fn bootstrap_ci<F>(
    metric: F,
    scores: &[f64],
    labels: &[bool],
    n_iter: usize,
    seed: u64,
) -> Result<ConfidenceInterval, MetricError>
where
    F: Fn(&[f64], &[bool]) -> Result<f64, MetricError>,
{
    check_lengths(scores, labels)?;
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(labels.len());
    let s = std::cell::RefCell::new(&mut s);
    let l = std::cell::RefCell::new(&mut l);
    bootstrap_indices(scores.len(), n_iter, seed, |idx| {
        let (mut s, mut l) = (s.borrow_mut(), l.borrow_mut());
        s.clear();
        l.clear();
        s.extend(idx.iter().map(|&i| scores[i]));
        l.extend(idx.iter().map(|&i| labels[i]));
        metric(&s, &l)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub u_a: f64,
    pub u_b: f64,
    pub d_util: f64,
}

/// Conditional utilization rates from fusion and per-head accuracies:
/// `u_A = (acc_AB - acc_B) / acc_AB`, `u_B = (acc_AB - acc_A) / acc_AB`,
/// `d_util = u_A - u_B`.
pub fn utilization(acc_ab: f64, acc_a: f64, acc_b: f64) -> Result<Utilization, MetricError> {
    if acc_ab == 0.0 {
        return Err(MetricError::Undefined("utilization with zero fusion accuracy"));
    }
    let u_a = (acc_ab - acc_b) / acc_ab;
    let u_b = (acc_ab - acc_a) / acc_ab;
    Ok(Utilization {
        u_a,
        u_b,
        d_util: u_a - u_b,
    })
}

/// Per-output label columns as booleans.
fn label_columns(y: &Tensor) -> Vec<Vec<bool>> {
    let (_, cols) = y.dims2().expect("labels are [n, L]");
    (0..cols).map(|j| y.column(j).iter().map(|&v| v == 1.0).collect()).collect()
}

/// Per-label metric values plus their macro mean over defined labels.
fn per_label(
    probs: &Tensor,
    cols: &[Vec<bool>],
    idx: Option<&[usize]>,
    metric: fn(&[f64], &[bool]) -> Result<f64, MetricError>,
) -> Vec<Result<f64, MetricError>> {
    cols.iter()
        .enumerate()
        .map(|(j, labels)| {
            let scores = probs.column(j);
            match idx {
                None => metric(&scores, labels),
                Some(idx) => {
                    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                    metric(&s, &l)
                }
            }
        })
        .collect()
}

fn macro_mean(values: &[Result<f64, MetricError>]) -> Result<f64, MetricError> {
    let defined: Vec<f64> = values.iter().filter_map(|v| v.as_ref().ok().copied()).collect();
    if defined.is_empty() {
        return Err(MetricError::Undefined("no label has a defined value"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Macro AUROC over labels (one-vs-rest for multiclass).
pub fn macro_auroc(probs: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    macro_mean(&per_label(probs, &label_columns(y), None, auroc))
}

pub fn macro_auprc(probs: &Tensor, y: &Tensor) -> Result<f64, MetricError> {
    macro_mean(&per_label(probs, &label_columns(y), None, auprc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointWithCi {
    pub value: MetricValue,
    pub ci: Option<ConfidenceInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label_auroc: Vec<MetricValue>,
    pub per_label_auprc: Vec<MetricValue>,
    pub macro_auroc: PointWithCi,
    pub macro_auprc: PointWithCi,
    /// Multiclass only.
    pub accuracy: Option<PointWithCi>,
    /// Labels excluded from the macro AUROC because they are undefined.
    pub undefined_labels: usize,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn all_defined(&self) -> bool {
        self.macro_auroc.value.value().is_some() && self.macro_auprc.value.value().is_some()
    }
}

/// Evaluates predicted probabilities `[n, L]` against labels, with
/// percentile bootstrap CIs on the aggregate metrics.
pub fn evaluate(probs: &Tensor, y: &Tensor, task: TaskKind, n_bootstrap: usize, seed: u64) -> MetricsReport {
    let cols = label_columns(y);
    let aurocs = per_label(probs, &cols, None, auroc);
    let auprcs = per_label(probs, &cols, None, auprc);
    let n = y.shape()[0];
    let ci = |metric: fn(&[f64], &[bool]) -> Result<f64, MetricError>, label: &str| {
        if n_bootstrap < 2 {
            return None;
        }
        bootstrap_indices(n, n_bootstrap, crate::rng::derive_seed(seed, label), |idx| {
            macro_mean(&per_label(probs, &cols, Some(idx), metric))
        })
        .ok()
    };
    let accuracy = task.is_multiclass().then(|| {
        let pred: Vec<usize> = (0..n).map(|i| argmax(probs.row(i))).collect();
        let truth: Vec<usize> = (0..n).map(|i| argmax(y.row(i))).collect();
        PointWithCi {
            value: accuracy(&pred, &truth).into(),
            ci: (n_bootstrap >= 2)
                .then(|| {
                    bootstrap_indices(n, n_bootstrap, crate::rng::derive_seed(seed, "accuracy"), |idx| {
                        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
                        let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
                        accuracy(&p, &t)
                    })
                    .ok()
                })
                .flatten(),
        }
    });
    MetricsReport {
        undefined_labels: aurocs.iter().filter(|v| v.is_err()).count(),
        macro_auroc: PointWithCi {
            value: macro_mean(&aurocs).into(),
            ci: ci(auroc, "auroc"),
        },
        macro_auprc: PointWithCi {
            value: macro_mean(&auprcs).into(),
            ci: ci(auprc, "auprc"),
        },
        per_label_auroc: aurocs.into_iter().map(MetricValue::from).collect(),
        per_label_auprc: auprcs.into_iter().map(MetricValue::from).collect(),
        accuracy,
        n_bootstrap,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_perfect_and_inverted() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[false, false, true, true]).unwrap(), 0.0);
    }

    #[test]
    fn auroc_ties_count_half() {
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_labels_are_undefined() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricError::Undefined(_))));
        assert!(matches!(auprc(&[0.1, 0.2], &[false, false]), Err(MetricError::Undefined(_))));
        assert_eq!(MetricValue::from(auroc(&[0.1], &[false])), MetricValue::Undefined);
    }

    #[test]
    fn single_positive_precision() {
        // One positive ranked k-th of n without ties has AP 1/k.
        let scores: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.05).collect();
        for k in 1..=10 {
            let labels: Vec<bool> = (0..10).map(|i| i + 1 == k).collect();
            assert!((auprc(&scores, &labels).unwrap() - 1.0 / k as f64).abs() < 1e-15);
        }
        assert_eq!(auprc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2], &[0, 0]).unwrap(), 0.0);
        let pred = [0, 1, 2, 0, 1, 2, 0];
        let truth = [0, 1, 2, 1, 2, 0, 1];
        assert!((accuracy(&pred, &truth).unwrap() - 3.0 / 7.0).abs() < 1e-15);
        assert_eq!(accuracy(&[], &[]), Err(MetricError::Empty));
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn utilization_arithmetic() {
        let u = utilization(0.8, 0.80, 0.72).unwrap();
        assert!((u.u_a - 0.1).abs() < 1e-12 && u.u_b.abs() < 1e-12 && (u.d_util - 0.1).abs() < 1e-12);
        let u = utilization(0.9, 0.6, 0.9).unwrap();
        assert!(u.u_a.abs() < 1e-12 && (u.u_b - 1.0 / 3.0).abs() < 1e-12);
        assert!((u.d_util + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(utilization(0.7, 0.6, 0.6).unwrap().d_util, 0.0);
        assert!(utilization(0.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn bootstrap_constant_metric_and_determinism() {
        let s: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let l: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let c = bootstrap_ci(|_, _| Ok(0.7), &s, &l, 100, 1).unwrap();
        assert_eq!((c.lo, c.hi), (0.7, 0.7));
        let a = bootstrap_ci(auroc, &s, &l, 200, 9).unwrap();
        let b = bootstrap_ci(auroc, &s, &l, 200, 9).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_ci(auroc, &s, &l, 1, 9).is_err());
        assert!(matches!(
            bootstrap_ci(|_, _| Err(MetricError::Undefined("x")), &s, &l, 10, 1),
            Err(MetricError::AllResamplesUndefined(10))
        ));
    }

    #[test]
    fn metric_value_serde() {
        let v = vec![MetricValue::Value(0.5), MetricValue::Undefined];
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"[0.5,"undefined"]"#);
        let back: Vec<MetricValue> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn macro_excludes_undefined_labels() {
        let probs = Tensor::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.3], vec![0.8, 0.1]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let report = evaluate(&probs, &y, TaskKind::Multilabel { labels: 2 }, 50, 3);
        assert_eq!(report.undefined_labels, 1);
        assert_eq!(report.macro_auroc.value, MetricValue::Value(1.0));
        assert_eq!(report.per_label_auroc[1], MetricValue::Undefined);
    }
}
