//! Group-fairness and accuracy metrics for a binary sensitive attribute.
//!
//! Multi-class rates are one-vs-rest per class. A rate whose denominator is
//! zero is undefined (`None`) and the class is skipped by every gap that
//! needs it; nothing is imputed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// How per-class gaps are folded into one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl Aggregation {
    fn fold(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let s: f64 = values.iter().sum();
        Some(match self {
            Aggregation::Mean => s / values.len() as f64,
            Aggregation::Sum => s,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn tpr(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.fp + self.tn)
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        self.tpr()
    }

    /// `2TP / (2TP + FP + FN)`; undefined when the class neither occurs nor is predicted.
    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Samples whose true label is the class.
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }
}

/// One-vs-rest confusion counts per class and sensitive group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRates {
    /// `cells[c][a]`
    pub cells: Vec<[Confusion; 2]>,
    pub group_sizes: [usize; 2],
}

impl GroupRates {
    pub fn num_classes(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, class: usize, group: u8) -> &Confusion {
        &self.cells[class][group as usize]
    }
}

fn check_inputs(predictions: &[usize], labels: Option<&[usize]>, sensitive: &[u8], num_classes: usize) -> Result<()> {
    let m = predictions.len();
    if m == 0 {
        return Err(Error::data("no samples to evaluate"));
    }
    if sensitive.len() != m || labels.is_some_and(|l| l.len() != m) {
        return Err(Error::dim("predictions, labels and sensitive attributes differ in length"));
    }
    let out_of_range = |v: &usize| *v >= num_classes;
    if predictions.iter().any(out_of_range) || labels.is_some_and(|l| l.iter().any(out_of_range)) {
        return Err(Error::Domain(format!("class index out of range for {num_classes} classes")));
    }
    if sensitive.iter().any(|&a| a > 1) {
        return Err(Error::Domain("sensitive attribute must be 0 or 1".into()));
    }
    Ok(())
}

pub fn group_rates(predictions: &[usize], labels: &[usize], sensitive: &[u8], num_classes: usize) -> Result<GroupRates> {
    check_inputs(predictions, Some(labels), sensitive, num_classes)?;
    let mut group_sizes = [0usize; 2];
    let mut cells = vec![[Confusion::default(); 2]; num_classes];
    for ((&p, &y), &a) in predictions.iter().zip(labels).zip(sensitive) {
        let g = a as usize;
        group_sizes[g] += 1;
        for (c, cell) in cells.iter_mut().enumerate() {
            let cell = &mut cell[g];
            match (y == c, p == c) {
                (true, true) => cell.tp += 1,
                (true, false) => cell.fn_ += 1,
                (false, true) => cell.fp += 1,
                (false, false) => cell.tn += 1,
            }
        }
    }
    Ok(GroupRates { cells, group_sizes })
}

/// Absolute between-group rate differences of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaps {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
}

impl ClassGaps {
    /// `Δtpr + Δfpr`, the class's equalized-odds term.
    pub fn odds(&self) -> Option<f64> {
        Some(self.tpr? + self.fpr?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FairnessGaps {
    /// Aggregated TNR gap.
    pub eopp0: f64,
    /// Aggregated TPR gap.
    pub eopp1: f64,
    /// Aggregated `Δtpr + Δfpr`.
    pub eodd: f64,
    pub per_class: Vec<ClassGaps>,
    /// Classes missing from at least one of the three aggregates.
    pub skipped_classes: usize,
}

fn gap(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? - b?).abs())
}

pub fn fairness_metrics(rates: &GroupRates, aggregation: Aggregation) -> Result<FairnessGaps> {
    let per_class: Vec<ClassGaps> = rates
        .cells
        .iter()
        .map(|[g0, g1]| ClassGaps {
            tpr: gap(g0.tpr(), g1.tpr()),
            fpr: gap(g0.fpr(), g1.fpr()),
            tnr: gap(g0.tnr(), g1.tnr()),
        })
        .collect();
    let collect = |f: fn(&ClassGaps) -> Option<f64>| -> Vec<f64> { per_class.iter().filter_map(f).collect() };
    let undefined = |name: &str| Error::Undefined(format!("{name}: no class has the needed rates in both groups"));
    let eopp0 = aggregation.fold(&collect(|g| g.tnr)).ok_or_else(|| undefined("eopp0"))?;
    let eopp1 = aggregation.fold(&collect(|g| g.tpr)).ok_or_else(|| undefined("eopp1"))?;
    let eodd = aggregation.fold(&collect(ClassGaps::odds)).ok_or_else(|| undefined("eodd"))?;
    let skipped_classes = per_class
        .iter()
        .filter(|g| g.tpr.is_none() || g.fpr.is_none() || g.tnr.is_none())
        .count();
    Ok(FairnessGaps {
        eopp0,
        eopp1,
        eodd,
        per_class,
        skipped_classes,
    })
}

/// Mean over classes of `|P(ŷ=c | a=0) - P(ŷ=c | a=1)|`.
pub fn dp_gap(predictions: &[usize], sensitive: &[u8], num_classes: usize) -> Result<f64> {
    check_inputs(predictions, None, sensitive, num_classes)?;
    let mut counts = vec![[0usize; 2]; num_classes];
    let mut sizes = [0usize; 2];
    for (&p, &a) in predictions.iter().zip(sensitive) {
        counts[p][a as usize] += 1;
        sizes[a as usize] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Undefined("dp_gap needs samples from both groups".into()));
    }
    let total: f64 = counts
        .iter()
        .map(|[c0, c1]| (*c0 as f64 / sizes[0] as f64 - *c1 as f64 / sizes[1] as f64).abs())
        .sum();
    Ok(total / num_classes as f64)
}

/// Macro precision/recall/F1 and accuracy of one group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

/// A metric for both groups with their average and absolute difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub g0: Option<f64>,
    pub g1: Option<f64>,
    pub avg: Option<f64>,
    pub diff: Option<f64>,
}

impl MetricRow {
    pub fn new(g0: Option<f64>, g1: Option<f64>) -> Self {
        let both = g0.zip(g1);
        Self {
            g0,
            g1,
            avg: both.map(|(a, b)| (a + b) / 2.0),
            diff: both.map(|(a, b)| (a - b).abs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrfReport {
    pub groups: [GroupScores; 2],
    pub precision: MetricRow,
    pub recall: MetricRow,
    pub f1: MetricRow,
    pub accuracy: MetricRow,
    pub overall_accuracy: f64,
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

fn group_scores(rates: &GroupRates, group: u8) -> GroupScores {
    let g = group as usize;
    if rates.group_sizes[g] == 0 {
        return GroupScores::default();
    }
    let cells = || rates.cells.iter().map(move |c| c[g]);
    let correct: usize = cells().map(|c| c.tp).sum();
    GroupScores {
        precision: macro_mean(cells().map(|c| c.precision())),
        recall: macro_mean(cells().map(|c| c.recall())),
        f1: macro_mean(cells().map(|c| c.f1())),
        accuracy: ratio(correct, rates.group_sizes[g]),
    }
}

pub fn prf_report(predictions: &[usize], labels: &[usize], sensitive: &[u8], num_classes: usize) -> Result<PrfReport> {
    let rates = group_rates(predictions, labels, sensitive, num_classes)?;
    Ok(prf_from_rates(&rates))
}

fn prf_from_rates(rates: &GroupRates) -> PrfReport {
    let groups = [group_scores(rates, 0), group_scores(rates, 1)];
    let row = |f: fn(&GroupScores) -> Option<f64>| MetricRow::new(f(&groups[0]), f(&groups[1]));
    let correct: usize = rates.cells.iter().map(|c| c[0].tp + c[1].tp).sum();
    let total = rates.group_sizes[0] + rates.group_sizes[1];
    PrfReport {
        precision: row(|g| g.precision),
        recall: row(|g| g.recall),
        f1: row(|g| g.f1),
        accuracy: row(|g| g.accuracy),
        overall_accuracy: correct as f64 / total as f64,
        groups,
    }
}

/// Every fairness and accuracy metric of one set of predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct FairnessReport {
    pub eopp0: f64,
    pub eopp1: f64,
    pub eodd: f64,
    pub dp_gap: f64,
    pub precision: MetricRow,
    pub recall: MetricRow,
    pub f1: MetricRow,
    pub accuracy: MetricRow,
    pub overall_accuracy: f64,
    pub skipped_classes: usize,
    pub aggregation: Aggregation,
    pub per_class: Vec<ClassGaps>,
}

/// Keys of [`FairnessReport::to_json`], in emission order.
pub const REPORT_KEYS: [&str; 21] = [
    "eopp0",
    "eopp1",
    "eodd",
    "dp_gap",
    "precision_g0",
    "precision_g1",
    "precision_avg",
    "precision_diff",
    "recall_g0",
    "recall_g1",
    "recall_avg",
    "recall_diff",
    "f1_g0",
    "f1_g1",
    "f1_avg",
    "f1_diff",
    "accuracy_g0",
    "accuracy_g1",
    "accuracy_avg",
    "accuracy_diff",
    "skipped_classes",
];

pub fn evaluate(
    predictions: &[usize],
    labels: &[usize],
    sensitive: &[u8],
    num_classes: usize,
    aggregation: Aggregation,
) -> Result<FairnessReport> {
    let rates = group_rates(predictions, labels, sensitive, num_classes)?;
    let gaps = fairness_metrics(&rates, aggregation)?;
    let prf = prf_from_rates(&rates);
    Ok(FairnessReport {
        eopp0: gaps.eopp0,
        eopp1: gaps.eopp1,
        eodd: gaps.eodd,
        dp_gap: dp_gap(predictions, sensitive, num_classes)?,
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy: prf.accuracy,
        overall_accuracy: prf.overall_accuracy,
        skipped_classes: gaps.skipped_classes,
        aggregation,
        per_class: gaps.per_class,
    })
}

impl FairnessReport {
    /// Flat `(key, value)` pairs in [`REPORT_KEYS`] order; `None` is undefined.
    pub fn entries(&self) -> Vec<(&'static str, Option<f64>)> {
        let mut out = vec![
            ("eopp0", Some(self.eopp0)),
            ("eopp1", Some(self.eopp1)),
            ("eodd", Some(self.eodd)),
            ("dp_gap", Some(self.dp_gap)),
        ];
        let rows = [
            (&self.precision, ["precision_g0", "precision_g1", "precision_avg", "precision_diff"]),
            (&self.recall, ["recall_g0", "recall_g1", "recall_avg", "recall_diff"]),
            (&self.f1, ["f1_g0", "f1_g1", "f1_avg", "f1_diff"]),
            (&self.accuracy, ["accuracy_g0", "accuracy_g1", "accuracy_avg", "accuracy_diff"]),
        ];
        for (row, keys) in rows {
            out.extend(keys.into_iter().zip([row.g0, row.g1, row.avg, row.diff]));
        }
        out.push(("skipped_classes", Some(self.skipped_classes as f64)));
        out
    }

    pub fn to_json(&self) -> Map<String, Value> {
        let mut map = Map::new();
        for (k, v) in self.entries() {
            let value = match (k, v) {
                ("skipped_classes", _) => Value::from(self.skipped_classes),
                (_, Some(x)) => Value::from(x),
                (_, None) => Value::Null,
            };
            map.insert(k.to_string(), value);
        }
        map
    }

    /// One `key = value` line per entry; undefined values print as `undefined`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            match (k, v) {
                ("skipped_classes", _) => writeln!(s, "{k} = {}", self.skipped_classes),
                (_, Some(x)) => writeln!(s, "{k} = {x}"),
                (_, None) => writeln!(s, "{k} = undefined"),
            }
            .expect("writing to a String cannot fail");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let labels = [0, 1, 2, 1, 0, 2];
        let groups = [0, 0, 0, 1, 1, 1];
        let r = group_rates(&labels, &labels, &groups, 3).unwrap();
        for c in 0..3 {
            for a in 0..2 {
                assert_eq!(r.get(c, a).tpr(), Some(1.0));
                assert_eq!(r.get(c, a).fpr(), Some(0.0));
            }
        }
        let rep = evaluate(&labels, &labels, &groups, 3, Aggregation::Mean).unwrap();
        assert_eq!((rep.eopp0, rep.eopp1, rep.eodd), (0.0, 0.0, 0.0));
        assert_eq!(rep.accuracy.g0, Some(1.0));
        assert_eq!(rep.accuracy.g1, Some(1.0));
        assert_eq!(rep.f1.diff, Some(0.0));
        assert_eq!(rep.precision.avg, Some(1.0));
    }

    #[test]
    fn four_sample_hand_count() {
        let labels = [1, 1, 0, 0];
        let groups = [0, 0, 1, 1];
        let preds = [1, 0, 1, 0];
        let r = group_rates(&preds, &labels, &groups, 2).unwrap();
        assert_eq!(r.get(1, 0).tpr(), Some(0.5));
        assert_eq!(r.get(1, 1).fpr(), Some(0.5));
        // group 0 has no negatives for class 1
        assert_eq!(r.get(1, 0).fpr(), None);
        assert_eq!(r.get(1, 1).tpr(), None);

        let prf = prf_report(&preds, &labels, &groups, 2).unwrap();
        // group 0: class1 tp=1 fn=1 fp=0 -> P=1, R=0.5, F1=2/3; class0 tp=0 fp=1 -> P=0, R undefined, F1=0
        assert_eq!(prf.groups[0].precision, Some(0.5));
        assert_eq!(prf.groups[0].recall, Some(0.5));
        assert!((prf.groups[0].f1.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(prf.groups[0].accuracy, Some(0.5));
        // group 1: class0 tp=1 fn=1 -> P=1, R=0.5; class1 tp=0 fp=1 -> P=0
        assert_eq!(prf.groups[1].precision, Some(0.5));
        assert_eq!(prf.groups[1].recall, Some(0.5));
        assert_eq!(prf.overall_accuracy, 0.5);
        assert_eq!(prf.accuracy.diff, Some(0.0));
    }

    #[test]
    fn binary_gap_example() {
        // class 1: group0 TPR 0.8, FPR 0.3; group1 TPR 0.4, FPR 0.1
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        let mut groups = Vec::new();
        let mut push = |a: u8, y: usize, p: usize, n: usize| {
            for _ in 0..n {
                labels.push(y);
                preds.push(p);
                groups.push(a);
            }
        };
        push(0, 1, 1, 8);
        push(0, 1, 0, 2);
        push(0, 0, 1, 3);
        push(0, 0, 0, 7);
        push(1, 1, 1, 4);
        push(1, 1, 0, 6);
        push(1, 0, 1, 1);
        push(1, 0, 0, 9);
        let r = group_rates(&preds, &labels, &groups, 2).unwrap();
        let g = fairness_metrics(&r, Aggregation::Mean).unwrap();
        let pos = g.per_class[1];
        assert!((pos.tpr.unwrap() - 0.4).abs() < 1e-12);
        assert!((pos.odds().unwrap() - 0.6).abs() < 1e-12);
        // one-vs-rest on class 0 swaps the roles of TPR and TNR
        assert!((g.eodd - 0.6).abs() < 1e-12);
        assert!((g.eopp1 - 0.3).abs() < 1e-12);
        let s = fairness_metrics(&r, Aggregation::Sum).unwrap();
        assert!((s.eodd - 1.2).abs() < 1e-12);
    }

    #[test]
    fn dp_gap_cases() {
        assert_eq!(dp_gap(&[1, 0], &[0, 1], 2).unwrap(), 1.0);
        assert_eq!(dp_gap(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap(), 1.0);
        assert_eq!(dp_gap(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap(), 0.0);
        assert!(matches!(dp_gap(&[0, 1], &[1, 1], 2), Err(Error::Undefined(_))));
    }

    #[test]
    fn missing_group_leaves_metrics_undefined() {
        let r = group_rates(&[0, 1], &[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(r.get(0, 1).tpr(), None);
        assert!(matches!(fairness_metrics(&r, Aggregation::Mean), Err(Error::Undefined(_))));
        let prf = prf_report(&[0, 1], &[0, 1], &[0, 0], 2).unwrap();
        assert_eq!(prf.groups[1], GroupScores::default());
        assert_eq!(prf.accuracy.diff, None);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(group_rates(&[], &[], &[], 2), Err(Error::Data(_))));
        assert!(group_rates(&[2], &[0], &[0], 2).is_err());
        assert!(group_rates(&[0], &[0, 1], &[0], 2).is_err());
    }

    #[test]
    fn report_serialization_keys() {
        let rep = evaluate(&[0, 1, 0, 0], &[0, 1, 1, 0], &[0, 0, 1, 1], 2, Aggregation::Mean).unwrap();
        let json = rep.to_json();
        let mut keys: Vec<&str> = json.keys().map(String::as_str).collect();
        let mut expected = REPORT_KEYS.to_vec();
        keys.sort_unstable();
        expected.sort_unstable();
        assert_eq!(keys, expected);
        let text = rep.to_text();
        assert_eq!(text.lines().count(), REPORT_KEYS.len());
        assert!(text.starts_with("eopp0 = "));
    }
}
