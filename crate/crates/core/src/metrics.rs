//! Binary-classification evaluation: confusion counts, derived rates, and the
//! ROC curve with a trapezoidal AUC that matches the pairwise-concordance
//! definition exactly (ties count half).

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUC undefined: input contains a single class")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fneg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fneg
    }
}

/// Counts outcomes at a decision threshold. A score equal to the threshold
/// predicts positive (inclusive rule).
pub fn confusion(
    scores: &[f64],
    truth: &[bool],
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fneg: 0,
    };
    for (&s, &t) in scores.iter().zip(truth) {
        let predicted = s >= threshold;
        match (predicted, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fneg += 1,
        }
    }
    Ok(c)
}

/// Rates derived from confusion counts. A 0/0 ratio is reported as `None`,
/// never silently as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derived(c: &ConfusionCounts) -> DerivedMetrics {
    DerivedMetrics {
        sensitivity: ratio(c.tp, c.tp + c.fneg),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fneg),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Lowest score still predicted positive at this point; infinite at (0,0).
    pub threshold: f64,
}

/// ROC curve with one point per distinct score, from (0,0) to (1,1).
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// CSV rendering with columns fpr,tpr,threshold.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        out
    }
}

/// Builds the ROC curve over thresholds at every distinct score and returns
/// it with the trapezoidal AUC, which equals
/// (concordant pairs + 0.5 * tied pairs) / (P * N).
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<(RocCurve, f64), MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pos = truth.iter().filter(|&&t| t).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // Consume the whole tie group before emitting a point.
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok((RocCurve { points }, auc))
}

/// Flat evaluation report emitted as the metrics JSON artifact.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub n: u64,
    pub n_pos: u64,
    pub n_neg: u64,
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fneg: u64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub auc: f64,
}

/// Evaluates scores against truth at one threshold plus the threshold-free AUC.
pub fn evaluate(
    scores: &[f64],
    truth: &[bool],
    threshold: f64,
) -> Result<(MetricsReport, RocCurve), MetricsError> {
    let counts = confusion(scores, truth, threshold)?;
    let rates = derived(&counts);
    let (curve, auc) = roc_auc(scores, truth)?;
    let n_pos = truth.iter().filter(|&&t| t).count() as u64;
    Ok((
        MetricsReport {
            n: truth.len() as u64,
            n_pos,
            n_neg: truth.len() as u64 - n_pos,
            threshold,
            tp: counts.tp,
            fp: counts.fp,
            tn: counts.tn,
            fneg: counts.fneg,
            sensitivity: rates.sensitivity,
            specificity: rates.specificity,
            precision: rates.precision,
            f1: rates.f1,
            accuracy: rates.accuracy,
            auc,
        },
        curve,
    ))
}
