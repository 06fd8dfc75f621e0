//! Prediction-quality metrics: ROC/AUC from empirical score frequencies,
//! TPR/FPR/accuracy from counts, confusion matrices, top-k accuracy,
//! per-offset horizon accuracy profiles, and ensemble statistics.

use crate::labeling::EventRecord;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One ROC vertex: score threshold with the rates attained at it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone)]
pub struct RocCurve {
    /// Thresholds descending from +inf; FPR/TPR non-decreasing.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Smallest threshold whose FPR does not exceed `target_fpr`.
    pub fn threshold_at_fpr(&self, target_fpr: f64) -> f64 {
        let mut best = f64::INFINITY;
        for p in &self.points {
            if p.fpr <= target_fpr {
                best = p.threshold;
            } else {
                break;
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

/// Empirical ROC: thresholds sweep the distinct score values (descending)
/// plus +inf, ties grouped into one vertex; AUC by the trapezoidal rule.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Degenerate(format!(
            "need both classes present, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auc = 0.0;
    let mut i = 0;
    let (mut prev_fpr, mut prev_tpr) = (0.0, 0.0);
    while i < order.len() {
        let score = scores[order[i]];
        // Absorb the whole tie group before emitting a vertex.
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / n_pos as f64;
        let fpr = fp as f64 / n_neg as f64;
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        points.push(RocPoint {
            threshold: score,
            fpr,
            tpr,
        });
        prev_fpr = fpr;
        prev_tpr = tpr;
    }
    Ok(RocCurve { points, auc })
}

/// TPR = tp/(tp+fn), FPR = fp/(fp+tn), accuracy = (tp+tn)/total.
pub fn rates(tp: u64, fp: u64, fn_: u64, tn: u64) -> Result<(f64, f64, f64), EvalError> {
    if tp + fn_ == 0 || fp + tn == 0 {
        return Err(EvalError::Degenerate(
            "zero denominator in TPR or FPR".to_string(),
        ));
    }
    let tpr = tp as f64 / (tp + fn_) as f64;
    let fpr = fp as f64 / (fp + tn) as f64;
    let accuracy = (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64;
    Ok((tpr, fpr, accuracy))
}

/// Rows are actual classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Diagonal over row sum; None for absent classes.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[i] as f64 / total as f64)
            })
            .collect()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.n_classes).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total() as f64
    }

    /// Binary convenience: (tp, fp, fn, tn) with class 1 positive.
    pub fn binary_counts(&self) -> (u64, u64, u64, u64) {
        assert_eq!(self.n_classes, 2);
        (
            self.counts[1][1],
            self.counts[0][1],
            self.counts[1][0],
            self.counts[0][0],
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        write!(w, "actual")?;
        for c in 0..self.n_classes {
            write!(w, ",pred_{c}")?;
        }
        writeln!(w)?;
        for (i, row) in self.counts.iter().enumerate() {
            write!(w, "{i}")?;
            for v in row {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub fn confusion(
    preds: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} preds vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &a) in preds.iter().zip(labels) {
        if p >= n_classes || a >= n_classes {
            return Err(EvalError::Range(format!(
                "class out of range: pred {p}, actual {a}, n_classes {n_classes}"
            )));
        }
        counts[a][p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Per-class and unweighted-mean top-k accuracy. A sample counts as correct
/// iff its true class ranks among the k largest probabilities, ties at the
/// boundary broken by lower class index.
#[derive(Debug, Clone)]
pub struct TopkAccuracy {
    pub k: usize,
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn topk_accuracy(
    probabilities: &[Vec<f64>],
    labels: &[usize],
    k: usize,
) -> Result<TopkAccuracy, EvalError> {
    if probabilities.len() != labels.len() {
        return Err(EvalError::LengthMismatch(format!(
            "{} samples vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    let n_classes = probabilities
        .first()
        .map(Vec::len)
        .ok_or_else(|| EvalError::Degenerate("no samples".to_string()))?;
    if k < 1 || k > n_classes {
        return Err(EvalError::Range(format!(
            "k = {k} outside 1..={n_classes}"
        )));
    }
    let mut correct = vec![0u64; n_classes];
    let mut totals = vec![0u64; n_classes];
    for (probs, &label) in probabilities.iter().zip(labels) {
        if label >= n_classes || probs.len() != n_classes {
            return Err(EvalError::Range(format!(
                "label {label} or row width {} out of range",
                probs.len()
            )));
        }
        let p_true = probs[label];
        // Rank = classes strictly above, plus equal-probability classes
        // with a lower index.
        let rank = probs
            .iter()
            .enumerate()
            .filter(|&(j, &p)| p > p_true || (p == p_true && j < label))
            .count();
        totals[label] += 1;
        if rank < k {
            correct[label] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&totals)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(TopkAccuracy {
        k,
        per_class,
        mean,
    })
}

/// Accuracy as a function of the time offset before an event.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonProfile {
    /// Offsets -p..=0, contiguous; entries with no observed frames are None.
    pub offsets: Vec<i64>,
    pub accuracy: Vec<Option<f64>>,
}

impl HorizonProfile {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EvalError> {
        writeln!(w, "offset,accuracy,observed")?;
        for (o, a) in self.offsets.iter().zip(&self.accuracy) {
            match a {
                Some(acc) => writeln!(w, "{o},{acc},1")?,
                None => writeln!(w, "{o},,0")?,
            }
        }
        Ok(())
    }

    /// Pearson correlation between offset and accuracy over observed offsets.
    pub fn offset_accuracy_correlation(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .offsets
            .iter()
            .zip(&self.accuracy)
            .filter_map(|(&o, a)| a.map(|acc| (o as f64, acc)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let vx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let vy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        if vx == 0.0 || vy == 0.0 {
            return None;
        }
        Some(cov / (vx * vy).sqrt())
    }
}

/// Per-offset accuracy over all frames exactly k steps before an event.
/// `correct` must hold, per frame, whether the prediction for that frame
/// matches that frame's task target (binary label or event cell).
pub fn horizon_profile(correct: &[bool], events: &[EventRecord], p: usize) -> HorizonProfile {
    let mut hits = vec![0u64; p + 1];
    let mut totals = vec![0u64; p + 1];
    for e in events {
        for offset in 0..=p {
            if offset > e.frame_index {
                break;
            }
            let frame = e.frame_index - offset;
            if frame >= correct.len() {
                continue;
            }
            totals[offset] += 1;
            if correct[frame] {
                hits[offset] += 1;
            }
        }
    }
    let offsets: Vec<i64> = (0..=p as i64).map(|o| -o).rev().collect();
    let accuracy: Vec<Option<f64>> = (0..=p)
        .rev()
        .map(|o| (totals[o] > 0).then(|| hits[o] as f64 / totals[o] as f64))
        .collect();
    HorizonProfile { offsets, accuracy }
}

/// Per-epoch mean and population standard deviation across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

/// `runs[r][epoch][quantity]`; all runs must share epoch count and width.
pub fn ensemble_stats(runs: &[Vec<Vec<f64>>]) -> Result<EnsembleStats, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::Degenerate(format!(
            "need >= 2 runs, got {}",
            runs.len()
        )));
    }
    let n_epochs = runs[0].len();
    for (i, run) in runs.iter().enumerate() {
        if run.len() != n_epochs {
            return Err(EvalError::LengthMismatch(format!(
                "run {i} has {} epochs, expected {n_epochs}",
                run.len()
            )));
        }
    }
    let mut mean = Vec::with_capacity(n_epochs);
    let mut std = Vec::with_capacity(n_epochs);
    for epoch in 0..n_epochs {
        let width = runs[0][epoch].len();
        let mut m = vec![0.0; width];
        let mut s = vec![0.0; width];
        for run in runs {
            if run[epoch].len() != width {
                return Err(EvalError::LengthMismatch(format!(
                    "epoch {epoch} width mismatch"
                )));
            }
            for (j, &v) in run[epoch].iter().enumerate() {
                m[j] += v;
            }
        }
        for v in &mut m {
            *v /= runs.len() as f64;
        }
        for run in runs {
            for (j, &v) in run[epoch].iter().enumerate() {
                s[j] += (v - m[j]).powi(2);
            }
        }
        for v in &mut s {
            *v = (*v / runs.len() as f64).sqrt();
        }
        mean.push(m);
        std.push(s);
    }
    Ok(EnsembleStats { mean, std })
}
