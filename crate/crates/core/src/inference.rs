//! Confidence-based early-exit inference.
//!
//! A sample leaves at the first internal exit whose maximum softmax
//! probability reaches θ; if none does it falls through to the final
//! classifier, which is never gated. All exits are evaluated in one forward
//! pass, so threshold sweeps reuse the same scores.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{self, Aggregation, FairnessReport};
use crate::model::MultiExitModel;
use crate::tensor::{argmax, softmax, Matrix};

/// An exit of the network. Internal exits are numbered from 1, shallow to deep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Exit {
    Internal(usize),
    Final,
}

impl Exit {
    /// Zero-based position among `num_internal + 1` exits.
    pub fn slot(self, num_internal: usize) -> usize {
        match self {
            Exit::Internal(k) => k - 1,
            Exit::Final => num_internal,
        }
    }

    pub fn from_slot(slot: usize, num_internal: usize) -> Exit {
        if slot >= num_internal {
            Exit::Final
        } else {
            Exit::Internal(slot + 1)
        }
    }

    fn check(self, num_internal: usize) -> Result<()> {
        match self {
            Exit::Internal(k) if k == 0 || k > num_internal => Err(Error::config(format!(
                "exit {k} out of range: the model has internal exits 1..={num_internal} and f"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exit::Internal(k) => write!(f, "{k}"),
            Exit::Final => f.write_str("f"),
        }
    }
}

impl FromStr for Exit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f" | "final" => Ok(Exit::Final),
            other => match other.parse::<usize>() {
                Ok(k) if k > 0 => Ok(Exit::Internal(k)),
                _ => Err(Error::config(format!("`{other}` is not an exit (use 1..n or f)"))),
            },
        }
    }
}

impl TryFrom<String> for Exit {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Exit> for String {
    fn from(e: Exit) -> String {
        e.to_string()
    }
}

/// Written as `early_exit`, `final_only` or `fixed:<exit>` in config files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExitMode {
    #[default]
    EarlyExit,
    /// Always use one exit (per-exit ablation).
    Fixed(Exit),
    FinalOnly,
}

impl fmt::Display for ExitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitMode::EarlyExit => f.write_str("early_exit"),
            ExitMode::FinalOnly => f.write_str("final_only"),
            ExitMode::Fixed(e) => write!(f, "fixed:{e}"),
        }
    }
}

impl FromStr for ExitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "early_exit" => Ok(ExitMode::EarlyExit),
            "final_only" => Ok(ExitMode::FinalOnly),
            other => match other.strip_prefix("fixed:") {
                Some(e) => Ok(ExitMode::Fixed(e.parse()?)),
                None => Err(Error::config(format!(
                    "unknown inference mode `{other}` (early_exit, final_only, fixed:<exit>)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for ExitMode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExitMode> for String {
    fn from(m: ExitMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub theta: f64,
    pub mode: ExitMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            theta: 0.999,
            mode: ExitMode::EarlyExit,
        }
    }
}

impl InferenceConfig {
    pub fn early_exit(theta: f64) -> Self {
        Self {
            theta,
            mode: ExitMode::EarlyExit,
        }
    }

    pub fn fixed(exit: Exit) -> Self {
        Self {
            mode: ExitMode::Fixed(exit),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config(format!("inference.theta must lie in [0, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// Maximum softmax probability.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    Ok(softmax(logits)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Earliest internal exit with confidence `>= theta`, else the final exit.
/// `confidences` holds the internal exits shallow to deep, then the final one.
pub fn select_exit(confidences: &[f64], theta: f64) -> Result<Exit> {
    if confidences.is_empty() {
        return Err(Error::Domain("no exit confidences".into()));
    }
    let internal = confidences.len() - 1;
    Ok(confidences[..internal]
        .iter()
        .position(|&c| c >= theta)
        .map_or(Exit::Final, |k| Exit::Internal(k + 1)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub exit: Exit,
    pub confidence: f64,
    pub prediction: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub entries: Vec<TraceEntry>,
    /// Samples per exit, internal exits first, final last.
    pub histogram: Vec<usize>,
}

impl InferenceTrace {
    /// Appends another trace over the same model.
    pub fn merge(&mut self, other: InferenceTrace) {
        for (h, o) in self.histogram.iter_mut().zip(&other.histogram) {
            *h += o;
        }
        self.entries.extend(other.entries);
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.prediction).collect()
    }
}

/// Per-sample confidence and predicted class at every exit.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitScores {
    num_internal: usize,
    confidences: Vec<Vec<f64>>,
    predictions: Vec<Vec<usize>>,
}

const FORWARD_CHUNK: usize = 512;

impl ExitScores {
    /// One forward pass over `data`, split into row chunks evaluated on the
    /// current rayon pool. Rows are independent, so chunking does not change
    /// any value.
    pub fn compute(model: &MultiExitModel, data: &Matrix) -> Result<Self> {
        let num_internal = model.config().num_internal_exits();
        let rows: Vec<usize> = (0..data.rows()).collect();
        let chunks: Vec<Result<Vec<(Vec<f64>, Vec<usize>)>>> = rows
            .par_chunks(FORWARD_CHUNK)
            .map(|idx| {
                let out = model.forward_all(&data.select_rows(idx))?;
                let mut per_sample = vec![(Vec::new(), Vec::new()); idx.len()];
                for logits in &out.logits {
                    for (i, row) in logits.iter_rows().enumerate() {
                        let probs = softmax(row)?;
                        let top = argmax(&probs);
                        per_sample[i].0.push(probs[top]);
                        per_sample[i].1.push(top);
                    }
                }
                Ok(per_sample)
            })
            .collect();
        let mut confidences = Vec::with_capacity(data.rows());
        let mut predictions = Vec::with_capacity(data.rows());
        for chunk in chunks {
            for (c, p) in chunk? {
                confidences.push(c);
                predictions.push(p);
            }
        }
        Ok(Self {
            num_internal,
            confidences,
            predictions,
        })
    }

    pub fn len(&self) -> usize {
        self.confidences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidences.is_empty()
    }

    pub fn num_internal(&self) -> usize {
        self.num_internal
    }

    /// Confidences of sample `i`, one per exit.
    pub fn confidences(&self, i: usize) -> &[f64] {
        &self.confidences[i]
    }

    /// Predicted classes of sample `i`, one per exit.
    pub fn predictions(&self, i: usize) -> &[usize] {
        &self.predictions[i]
    }

    pub fn resolve(&self, cfg: &InferenceConfig) -> Result<InferenceTrace> {
        cfg.validate()?;
        let n = self.num_internal;
        let fixed = match cfg.mode {
            ExitMode::EarlyExit => None,
            ExitMode::Fixed(e) => {
                e.check(n)?;
                Some(e)
            }
            ExitMode::FinalOnly => Some(Exit::Final),
        };
        let mut histogram = vec![0; n + 1];
        let mut entries = Vec::with_capacity(self.len());
        for (conf, pred) in self.confidences.iter().zip(&self.predictions) {
            let exit = match fixed {
                Some(e) => e,
                None => select_exit(conf, cfg.theta)?,
            };
            let slot = exit.slot(n);
            histogram[slot] += 1;
            entries.push(TraceEntry {
                exit,
                confidence: conf[slot],
                prediction: pred[slot],
            });
        }
        Ok(InferenceTrace { entries, histogram })
    }
}

/// Predictions for every row of `data` under `cfg`, with the exit trace.
pub fn predict_batch(model: &MultiExitModel, data: &Matrix, cfg: &InferenceConfig) -> Result<(Vec<usize>, InferenceTrace)> {
    cfg.validate()?;
    if let ExitMode::Fixed(e) = cfg.mode {
        e.check(model.config().num_internal_exits())?;
    }
    let trace = ExitScores::compute(model, data)?.resolve(cfg)?;
    Ok((trace.predictions(), trace))
}

/// Accuracy and fairness gaps of one inference policy. Gaps that cannot be
/// computed on the data are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySummary {
    pub accuracy: f64,
    pub eopp0: Option<f64>,
    pub eopp1: Option<f64>,
    pub eodd: Option<f64>,
    pub histogram: Vec<usize>,
}

fn summarize(trace: &InferenceTrace, data: &Dataset, aggregation: Aggregation) -> Result<PolicySummary> {
    let preds = trace.predictions();
    let rates = metrics::group_rates(&preds, data.targets(), data.sensitive(), data.num_classes())?;
    let gaps = metrics::fairness_metrics(&rates, aggregation).ok();
    let correct = preds.iter().zip(data.targets()).filter(|(p, y)| p == y).count();
    Ok(PolicySummary {
        accuracy: correct as f64 / data.len() as f64,
        eopp0: gaps.as_ref().map(|g| g.eopp0),
        eopp1: gaps.as_ref().map(|g| g.eopp1),
        eodd: gaps.as_ref().map(|g| g.eodd),
        histogram: trace.histogram.clone(),
    })
}

/// Full fairness report of the predictions `cfg` produces on `data`.
pub fn evaluate(
    model: &MultiExitModel,
    data: &Dataset,
    cfg: &InferenceConfig,
    aggregation: Aggregation,
) -> Result<(FairnessReport, InferenceTrace)> {
    check_dataset(model, data)?;
    let (preds, trace) = predict_batch(model, data.features(), cfg)?;
    let num_classes = model.config().num_classes;
    let report = metrics::evaluate(&preds, data.targets(), data.sensitive(), num_classes, aggregation)?;
    Ok((report, trace))
}

fn check_dataset(model: &MultiExitModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::data("no samples to evaluate"));
    }
    if data.num_classes() > model.config().num_classes {
        return Err(Error::data(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes(),
            model.config().num_classes
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    pub summary: PolicySummary,
}

/// Early-exit accuracy and fairness at each threshold, from one forward pass.
pub fn sweep_theta(model: &MultiExitModel, data: &Dataset, thetas: &[f64], aggregation: Aggregation) -> Result<Vec<SweepRow>> {
    if thetas.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    if thetas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config("threshold grid must be sorted ascending"));
    }
    check_dataset(model, data)?;
    let data = data.clone().with_num_classes(model.config().num_classes)?;
    let scores = ExitScores::compute(model, data.features())?;
    thetas
        .iter()
        .map(|&theta| {
            let trace = scores.resolve(&InferenceConfig::early_exit(theta))?;
            Ok(SweepRow {
                theta,
                summary: summarize(&trace, &data, aggregation)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowKind {
    Exit(Exit),
    /// The early-exit policy at this threshold.
    Policy(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitRow {
    pub kind: RowKind,
    pub summary: PolicySummary,
}

/// One row per exit (each used unconditionally) plus the early-exit policy at `theta`.
pub fn per_exit_eval(model: &MultiExitModel, data: &Dataset, theta: f64, aggregation: Aggregation) -> Result<Vec<ExitRow>> {
    check_dataset(model, data)?;
    let data = data.clone().with_num_classes(model.config().num_classes)?;
    let scores = ExitScores::compute(model, data.features())?;
    let n = scores.num_internal();
    let mut rows = Vec::with_capacity(n + 2);
    for slot in 0..=n {
        let exit = Exit::from_slot(slot, n);
        let trace = scores.resolve(&InferenceConfig::fixed(exit))?;
        rows.push(ExitRow {
            kind: RowKind::Exit(exit),
            summary: summarize(&trace, &data, aggregation)?,
        });
    }
    let trace = scores.resolve(&InferenceConfig::early_exit(theta))?;
    rows.push(ExitRow {
        kind: RowKind::Policy(theta),
        summary: summarize(&trace, &data, aggregation)?,
    });
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_table<W: Write>(mut w: W, key: &str, num_internal: usize, rows: impl Iterator<Item = (String, PolicySummary)>) -> Result<()> {
    let mut header = vec![key.to_string(), "accuracy".into(), "eopp0".into(), "eopp1".into(), "eodd".into()];
    header.extend((1..=num_internal).map(|k| format!("hist_{k}")));
    header.push("hist_f".into());
    writeln!(w, "{}", header.join(","))?;
    for (label, s) in rows {
        let mut fields = vec![label, s.accuracy.to_string(), opt(s.eopp0), opt(s.eopp1), opt(s.eodd)];
        fields.extend(s.histogram.iter().map(|h| h.to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// CSV columns: `theta,accuracy,eopp0,eopp1,eodd,hist_1..hist_n,hist_f`.
/// Undefined gaps are left empty.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.summary.histogram.len() - 1);
    write_table(w, "theta", n, rows.iter().map(|r| (r.theta.to_string(), r.summary.clone())))
}

/// CSV columns: `exit,accuracy,eopp0,eopp1,eodd,hist_1..hist_n,hist_f`; the
/// early-exit row is labelled `policy`.
pub fn write_per_exit_csv<W: Write>(w: W, rows: &[ExitRow]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.summary.histogram.len() - 1);
    write_table(
        w,
        "exit",
        n,
        rows.iter().map(|r| {
            let label = match r.kind {
                RowKind::Exit(e) => e.to_string(),
                RowKind::Policy(_) => "policy".to_string(),
            };
            (label, r.summary.clone())
        }),
    )
}
