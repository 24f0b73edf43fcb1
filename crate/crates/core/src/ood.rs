//! Maximum-class-probability scoring and the OOD / calibration metrics:
//! AUROC, AUPR, FPR at 95% TPR and expected calibration error.
//!
//! In-distribution samples are the positive class throughout.

use std::fmt;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{NdaError, Result};
use crate::model::Model;

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub probs: Vec<f64>,
    /// maximum class probability
    pub confidence: f64,
    /// argmax, lowest index on ties
    pub predicted: usize,
    /// `None` for out-of-distribution samples
    pub label: Option<usize>,
    pub in_distribution: bool,
}

impl ScoredPrediction {
    pub fn from_probs(probs: Vec<f64>, label: Option<usize>, in_distribution: bool) -> Self {
        let (predicted, confidence) = argmax(&probs);
        ScoredPrediction {
            probs,
            confidence,
            predicted,
            label,
            in_distribution,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.label == Some(self.predicted)
    }
}

/// First index of the maximum and the maximum itself.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Runs `model` over every sample of `dataset`.
pub fn score_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<ScoredPrediction>> {
    let (_, probs) = model.predict(&dataset.features)?;
    Ok(score_rows(&probs, dataset))
}

pub(crate) fn score_rows(probs: &Tensor, dataset: &Dataset) -> Vec<ScoredPrediction> {
    (0..probs.rows())
        .map(|r| {
            let label = dataset.in_distribution.then(|| dataset.labels[r]);
            ScoredPrediction::from_probs(probs.row(r).to_vec(), label, dataset.in_distribution)
        })
        .collect()
}

fn check_scores(op: &str, scores_in: &[f64], scores_out: &[f64]) -> Result<()> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(NdaError::contract(format!(
            "{op} needs both in- and out-of-distribution scores (got {} and {})",
            scores_in.len(),
            scores_out.len()
        )));
    }
    if let Some(bad) = scores_in.iter().chain(scores_out).find(|s| !s.is_finite()) {
        return Err(NdaError::contract(format!("{op}: non-finite score {bad}")));
    }
    Ok(())
}

/// `P(s_in > s_out) + ½·P(s_in = s_out)` via midranks.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check_scores("auroc", scores_in, scores_out)?;
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (n_in, n_out) = (scores_in.len() as f64, scores_out.len() as f64);
    Ok((rank_sum - n_in * (n_in + 1.0) / 2.0) / (n_in * n_out))
}

/// Step-wise area under the precision/recall curve, sweeping thresholds
/// over the distinct scores from high to low. A tie group enters as a
/// whole, so its negatives count against every positive it contains.
pub fn aupr(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check_scores("aupr", scores_in, scores_out)?;
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, true))
        .chain(scores_out.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let positives = scores_in.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut group_tp = 0;
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                group_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        if group_tp > 0 {
            area += (group_tp as f64 / positives) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(area)
}

/// False-positive rate at the highest threshold `t` for which at least 95%
/// of in-distribution scores satisfy `s ≥ t`.
pub fn fpr_at_95_tpr(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    check_scores("fpr_at_95_tpr", scores_in, scores_out)?;
    let mut sorted = scores_in.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n_in = sorted.len();
    // smallest count c with c/n ≥ 0.95, in integers
    let needed = (95 * n_in).div_ceil(100).max(1);
    let threshold = sorted[needed - 1];
    let false_pos = scores_out.iter().filter(|&&s| s >= threshold).count();
    Ok(false_pos as f64 / scores_out.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityBin {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `NaN`-free: empty bins report 0
    pub accuracy: f64,
    pub confidence: f64,
}

/// Equal-width confidence bins over `[0, 1]`; confidence 1.0 falls in the
/// last bin.
pub fn reliability_table(
    predictions: &[ScoredPrediction],
    num_bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    if num_bins == 0 {
        return Err(NdaError::contract("ece needs at least one bin"));
    }
    if predictions.is_empty() {
        return Err(NdaError::contract("ece needs at least one prediction"));
    }
    if predictions.iter().any(|p| p.label.is_none()) {
        return Err(NdaError::contract(
            "ece needs labelled in-distribution predictions",
        ));
    }
    let mut correct = vec![0usize; num_bins];
    let mut conf = vec![0.0; num_bins];
    let mut counts = vec![0usize; num_bins];
    for p in predictions {
        let b = ((p.confidence * num_bins as f64).floor() as usize).min(num_bins - 1);
        counts[b] += 1;
        conf[b] += p.confidence;
        correct[b] += p.is_correct() as usize;
    }
    Ok((0..num_bins)
        .map(|b| {
            let n = counts[b].max(1) as f64;
            ReliabilityBin {
                bin: b,
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: counts[b],
                accuracy: correct[b] as f64 / n,
                confidence: conf[b] / n,
            }
        })
        .collect())
}

/// `Σ_b (n_b / N)·|accuracy_b − confidence_b|`
pub fn ece(predictions: &[ScoredPrediction], num_bins: usize) -> Result<f64> {
    let table = reliability_table(predictions, num_bins)?;
    let n = predictions.len() as f64;
    Ok(table
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

pub fn render_reliability_csv(table: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin,lower,upper,count,accuracy,confidence\n");
    for b in table {
        out.push_str(&format!(
            "{},{:?},{:?},{},{:?},{:?}\n",
            b.bin, b.lower, b.upper, b.count, b.accuracy, b.confidence
        ));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OodMetrics {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95_tpr: f64,
    pub ece: f64,
}

impl OodMetrics {
    /// Metrics from MCP confidences; ECE uses the labelled in-set only.
    pub fn from_predictions(
        inset: &[ScoredPrediction],
        outset: &[ScoredPrediction],
        num_bins: usize,
    ) -> Result<OodMetrics> {
        let s_in: Vec<f64> = inset.iter().map(|p| p.confidence).collect();
        let s_out: Vec<f64> = outset.iter().map(|p| p.confidence).collect();
        Ok(OodMetrics {
            auroc: auroc(&s_in, &s_out)?,
            aupr: aupr(&s_in, &s_out)?,
            fpr_at_95_tpr: fpr_at_95_tpr(&s_in, &s_out)?,
            ece: ece(inset, num_bins)?,
        })
    }
}

impl fmt::Display for OodMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "auroc = {:.6}", self.auroc)?;
        writeln!(f, "aupr = {:.6}", self.aupr)?;
        writeln!(f, "fpr_at_95_tpr = {:.6}", self.fpr_at_95_tpr)?;
        writeln!(f, "ece = {:.6}", self.ece)
    }
}

pub fn ood_report(
    model: &Model,
    inset: &Dataset,
    outset: &Dataset,
    num_bins: usize,
) -> Result<OodMetrics> {
    if !inset.in_distribution {
        return Err(NdaError::contract(
            "the in-distribution split is flagged out-of-distribution",
        ));
    }
    let scored_in = score_dataset(model, inset)?;
    let mut scored_out = score_dataset(model, outset)?;
    for p in &mut scored_out {
        p.in_distribution = false;
        p.label = None;
    }
    OodMetrics::from_predictions(&scored_in, &scored_out, num_bins)
}

/// Confidence scores read from CSV, optionally with a correctness column.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreFile {
    pub confidence: Vec<f64>,
    pub correct: Option<Vec<bool>>,
}

impl ScoreFile {
    /// Predictions carrying only confidence and correctness, for ECE.
    pub fn to_predictions(&self) -> Option<Vec<ScoredPrediction>> {
        let correct = self.correct.as_ref()?;
        Some(
            self.confidence
                .iter()
                .zip(correct)
                .map(|(&c, &ok)| ScoredPrediction {
                    probs: vec![c],
                    confidence: c,
                    predicted: 0,
                    label: Some(if ok { 0 } else { 1 }),
                    in_distribution: true,
                })
                .collect(),
        )
    }
}

/// Header `confidence` or `confidence,correct`; confidences in `[0, 1]`,
/// correctness as `0`/`1` or `true`/`false`.
pub fn parse_scores(text: &str) -> Result<ScoreFile> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| NdaError::parse(1, "missing header"))?;
    let with_correct = match header.trim() {
        "confidence" => false,
        "confidence,correct" => true,
        other => return Err(NdaError::parse(1, format!("unexpected header {other:?}"))),
    };
    let mut confidence = Vec::new();
    let mut correct = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let mut cells = line.trim().split(',');
        let c_text = cells.next().unwrap_or("");
        let c: f64 = c_text
            .trim()
            .parse()
            .map_err(|_| NdaError::parse(line_no, format!("bad confidence {c_text:?}")))?;
        if !(0.0..=1.0).contains(&c) {
            return Err(NdaError::parse(
                line_no,
                format!("confidence {c} outside [0, 1]"),
            ));
        }
        confidence.push(c);
        if with_correct {
            let flag = match cells.next().map(str::trim) {
                Some("1") | Some("true") => true,
                Some("0") | Some("false") => false,
                other => {
                    return Err(NdaError::parse(
                        line_no,
                        format!("bad correctness flag {other:?}"),
                    ))
                }
            };
            correct.push(flag);
        }
        if cells.next().is_some() {
            return Err(NdaError::parse(line_no, "too many cells"));
        }
    }
    if confidence.is_empty() {
        return Err(NdaError::parse(1, "no scores"));
    }
    Ok(ScoreFile {
        confidence,
        correct: with_correct.then_some(correct),
    })
}

pub fn render_scores(predictions: &[ScoredPrediction]) -> String {
    let labelled = predictions.iter().all(|p| p.label.is_some());
    let mut out = String::from(if labelled {
        "confidence,correct\n"
    } else {
        "confidence\n"
    });
    for p in predictions {
        if labelled {
            out.push_str(&format!("{:?},{}\n", p.confidence, p.is_correct() as u8));
        } else {
            out.push_str(&format!("{:?}\n", p.confidence));
        }
    }
    out
}
