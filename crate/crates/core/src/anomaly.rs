//! Negative log-likelihood window scoring and detection metrics.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::{GaussianPrior, VectorField};
use crate::ode::{self, SolverConfig};
use crate::tensor::Tensor;
use crate::trace::TraceEstimator;

/// Which field turns data into prior samples for density estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// The dual model's reverse field `v_λ`, integrated `t: 1 → 0`.
    ReverseModel,
    /// The forward field `v_θ`, integrated `t: 1 → 0`.
    ForwardModel,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ReverseModel => "reverse_model",
            Self::ForwardModel => "forward_model",
        }
    }

    /// Picks the field for this strategy, failing if the reverse model is
    /// requested but absent.
    pub fn select<'a, F: ?Sized>(&self, theta: &'a F, lambda: Option<&'a F>) -> Result<&'a F> {
        match (self, lambda) {
            (Self::ForwardModel, _) => Ok(theta),
            (Self::ReverseModel, Some(l)) => Ok(l),
            (Self::ReverseModel, None) => Err(Error::Config(
                "reverse_model strategy needs a reverse field".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    /// `−log p̂₁` per window; `+∞` where the solve failed.
    pub scores: Vec<f64>,
    /// Windows scored `+∞` because their chunk's solve failed.
    pub failures: usize,
    pub nfe: usize,
    pub chunks: usize,
}

/// Scores every row of `windows` in chunks of `chunk` rows. A chunk whose
/// solve fails is scored `+∞` rather than dropped, keeping scores aligned
/// with labels.
pub fn score_windows<F: VectorField + ?Sized>(
    field: &F,
    prior: &GaussianPrior,
    windows: &Tensor,
    solver: &SolverConfig,
    estimator: &TraceEstimator,
    chunk: usize,
) -> Result<Scores> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    estimator.validate()?;
    solver.validate()?;
    let n = windows.rows();
    let mut out = Scores {
        scores: Vec::with_capacity(n),
        failures: 0,
        nfe: 0,
        chunks: 0,
    };
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let est = match *estimator {
            TraceEstimator::Hutchinson { probes, dist, seed } => TraceEstimator::Hutchinson {
                probes,
                dist,
                seed: seed.wrapping_add(out.chunks as u64),
            },
            e => e,
        };
        let rows = windows.slice_rows(start, end);
        match ode::log_density(field, prior, &rows, solver, &est) {
            Ok((lp, nfe)) => {
                out.nfe += nfe;
                out.scores.extend(lp.data().iter().map(|v| -v));
            }
            Err(
                e @ (Error::MaxStepsExceeded { .. }
                | Error::FieldNotFinite { .. }
                | Error::NonFinite { .. }),
            ) => {
                let _ = e;
                out.failures += end - start;
                out.scores.extend(core::iter::repeat_n(f64::INFINITY, end - start));
            }
            Err(e) => return Err(e),
        }
        out.chunks += 1;
        start = end;
    }
    Ok(out)
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        Err(Error::DegenerateLabels)
    } else {
        Ok((pos, neg))
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LabelLength {
            series: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "scores" });
    }
    Ok(())
}

/// ROC area from the Mann–Whitney statistic, counting ties as one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sweep {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn better(cand: &Sweep, best: &Option<Sweep>) -> bool {
    match best {
        None => true,
        Some(b) => cand.f1 > b.f1 || (cand.f1 == b.f1 && cand.precision > b.precision),
    }
}

/// Best-F1 threshold over all distinct scores, flagging `score ≥ threshold`.
/// Ties in F1 go to the higher precision.
pub fn sweep_threshold(scores: &[f64], labels: &[u8]) -> Result<Sweep> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut best = None;
    let (mut tp, mut flagged) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += (labels[idx[i]] != 0) as usize;
            flagged += 1;
            i += 1;
        }
        let precision = tp as f64 / flagged as f64;
        let recall = tp as f64 / pos as f64;
        let cand = Sweep {
            threshold: s,
            precision,
            recall,
            f1: f1(precision, recall),
        };
        if better(&cand, &best) {
            best = Some(cand);
        }
    }
    Ok(best.expect("labels are nonempty"))
}

/// Contiguous runs of positive labels as `[start, end)`.
pub fn segments(labels: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] != 0 {
            let s = i;
            while i < labels.len() && labels[i] != 0 {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Marks a whole ground-truth segment as detected when any of its points is
/// flagged; predictions outside segments are unchanged.
pub fn point_adjust(predictions: &[bool], labels: &[u8]) -> Vec<bool> {
    let mut out = predictions.to_vec();
    for (s, e) in segments(labels) {
        if predictions[s..e].iter().any(|&p| p) {
            out[s..e].iter_mut().for_each(|p| *p = true);
        }
    }
    out
}

/// Best-F1 sweep where every threshold's predictions are point-adjusted
/// before counting.
pub fn sweep_threshold_adjusted(scores: &[f64], labels: &[u8]) -> Result<Sweep> {
    check_lengths(scores, labels)?;
    let (pos, _) = class_counts(labels)?;
    // A segment is detected from the moment its best score is reached.
    let mut events: Vec<(f64, usize, bool)> = Vec::new();
    for (s, e) in segments(labels) {
        let top = scores[s..e].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        events.push((top, e - s, true));
    }
    for (k, &l) in labels.iter().enumerate() {
        if l == 0 {
            events.push((scores[k], 1, false));
        }
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = None;
    let (mut tp, mut fp, mut j) = (0usize, 0usize, 0usize);
    for &th in &thresholds {
        while j < events.len() && events[j].0 >= th {
            if events[j].2 {
                tp += events[j].1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / pos as f64;
        let cand = Sweep {
            threshold: th,
            precision,
            recall,
            f1: f1(precision, recall),
        };
        if better(&cand, &best) {
            best = Some(cand);
        }
    }
    best.ok_or(Error::DegenerateLabels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
    pub point_adjusted: bool,
}

pub fn evaluate(scores: &[f64], labels: &[u8], point_adjusted: bool) -> Result<ScoreReport> {
    let sweep = if point_adjusted {
        sweep_threshold_adjusted(scores, labels)?
    } else {
        sweep_threshold(scores, labels)?
    };
    Ok(ScoreReport {
        threshold: sweep.threshold,
        precision: sweep.precision,
        recall: sweep.recall,
        f1: sweep.f1,
        auc: auc(scores, labels)?,
        point_adjusted,
    })
}

/// Flags `score ≥ threshold`.
pub fn predict(scores: &[f64], threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Precision and recall of boolean predictions.
pub fn precision_recall(predictions: &[bool], labels: &[u8]) -> (f64, f64) {
    let mut c = [0usize; 3];
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l != 0) {
            (true, true) => c[0] += 1,
            (true, false) => c[1] += 1,
            (false, true) => c[2] += 1,
            _ => {}
        }
    }
    let precision = if c[0] + c[1] > 0 {
        c[0] as f64 / (c[0] + c[1]) as f64
    } else {
        0.0
    };
    let recall = if c[0] + c[2] > 0 {
        c[0] as f64 / (c[0] + c[2]) as f64
    } else {
        0.0
    };
    (precision, recall)
}
