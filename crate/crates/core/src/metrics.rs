//! Clustering evaluation: accuracy under an optimal one-to-one matching
//! of predicted clusters to true classes, normalized mutual information,
//! and purity. All functions are pure and deterministic.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix as WeightMatrix;

use crate::error::{Error, Result};

/// Labels above this are rejected; they would blow up the contingency
/// matrix and almost certainly indicate corrupted input.
const MAX_LABEL: usize = 65_535;

/// Evaluation results for one labeling against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
    /// counts[p][t] = samples with predicted cluster p and true class t.
    pub contingency: Vec<Vec<usize>>,
    /// matching[p] = true class assigned to predicted cluster p by the
    /// accuracy solver; values >= the true class count are padding (a
    /// cluster matched to no real class).
    pub matching: Vec<usize>,
}

impl MetricsReport {
    /// JSON with acc/nmi/pur rounded to 6 decimal places.
    pub fn to_json(&self) -> serde_json::Value {
        let round = |v: f64| (v * 1e6).round() / 1e6;
        serde_json::json!({
            "acc": round(self.acc),
            "nmi": round(self.nmi),
            "pur": round(self.pur),
            "contingency": self.contingency,
            "matching": self.matching,
        })
    }
}

fn validate(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Data(format!(
            "{} predicted labels vs {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Data("empty label vectors".into()));
    }
    for &l in pred.iter().chain(truth) {
        if l > MAX_LABEL {
            return Err(Error::Data(format!("label {l} out of range")));
        }
    }
    Ok(())
}

/// K_pred x K_true count matrix, with K = max label + 1 on each side.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Vec<Vec<usize>>> {
    validate(pred, truth)?;
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; kt]; kp];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    Ok(counts)
}

/// Maximum agreement rate over one-to-one mappings from predicted
/// clusters to true classes, with the mapping that attains it. The
/// contingency matrix is zero-padded to a square so the assignment is
/// always well defined.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<(f64, Vec<usize>)> {
    let counts = contingency(pred, truth)?;
    let kp = counts.len();
    let kt = counts[0].len();
    let side = kp.max(kt);
    let rows: Vec<Vec<i64>> = (0..side)
        .map(|p| {
            (0..side)
                .map(|t| if p < kp && t < kt { counts[p][t] as i64 } else { 0 })
                .collect()
        })
        .collect();
    let weights = WeightMatrix::from_rows(rows)
        .map_err(|e| Error::Numeric(format!("assignment matrix: {e}")))?;
    let (matched, assignment) = kuhn_munkres(&weights);
    Ok((matched as f64 / pred.len() as f64, assignment[..kp].to_vec()))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two label
/// entropies. 0 log 0 := 0; when both entropies are zero (both labelings
/// constant) the labelings carry identical information, so 1.0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let counts = contingency(pred, truth)?;
    let n = pred.len() as f64;
    let row_sums: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..counts[0].len())
        .map(|t| counts.iter().map(|r| r[t]).sum())
        .collect();
    let h_pred = entropy(row_sums.iter().copied(), n);
    let h_true = entropy(col_sums.iter().copied(), n);
    if h_pred == 0.0 && h_true == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (p, row) in counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let joint = c as f64 / n;
            let marg = (row_sums[p] as f64 / n) * (col_sums[t] as f64 / n);
            mi += joint * (joint / marg).ln();
        }
    }
    Ok(mi / ((h_pred + h_true) / 2.0))
}

/// (1/N) * sum over predicted clusters of the dominant true-class count.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let counts = contingency(pred, truth)?;
    let dominant: usize = counts.iter().map(|r| r.iter().max().copied().unwrap_or(0)).sum();
    Ok(dominant as f64 / pred.len() as f64)
}

/// All three metrics plus the contingency matrix and matched permutation.
pub fn evaluate(pred: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    let (acc, matching) = accuracy(pred, truth)?;
    Ok(MetricsReport {
        acc,
        nmi: nmi(pred, truth)?,
        pur: purity(pred, truth)?,
        contingency: contingency(pred, truth)?,
        matching,
    })
}
