//! Device-wise confusion accounting and the evaluation metrics derived
//! from it (detection probability, misdetection, precision, F1, AUC).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scalar::Scalar;

/// Raw confusion counts; a commutative monoid under [`ConfusionCounts::merge`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Device-wise increments for one snapshot: each device is one binary
    /// classification decision.
    pub fn accumulate(&mut self, truth: &[usize], estimate: &[usize], n_devices: usize) {
        debug_assert!(truth.iter().all(|&i| i < n_devices));
        debug_assert!(estimate.iter().all(|&i| i < n_devices));
        let in_truth = |i: &usize| truth.contains(i);
        let in_est = |i: &usize| estimate.contains(i);
        let tp = truth.iter().filter(|i| in_est(i)).count() as u64;
        let fp = estimate.iter().filter(|i| !in_truth(i)).count() as u64;
        let fn_ = truth.len() as u64 - tp;
        let union = truth.len() as u64 + fp;
        self.tp += tp;
        self.fp += fp;
        self.fn_ += fn_;
        self.tn += n_devices as u64 - union;
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Finalized metrics for one evaluation cell. Ratios with an empty
/// denominator are `None`, never NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    /// Detection probability (recall), `tp / (tp + fn)`.
    pub p_d: Option<f64>,
    /// Misdetection probability (false-negative rate), `fn / (tp + fn)`.
    pub p_m: Option<f64>,
    /// Positive predictive value (precision), `tp / (tp + fp)`.
    pub ppv: Option<f64>,
    /// Harmonic mean `2 * ppv * p_d / (ppv + p_d)`.
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

/// Ratios per the standard definitions; AUC is supplied separately since it
/// needs the raw scores.
pub fn finalize(counts: ConfusionCounts, auc: Option<f64>) -> MetricsReport {
    let pos = counts.tp + counts.fn_;
    let pred_pos = counts.tp + counts.fp;
    let p_d = (pos > 0).then(|| counts.tp as f64 / pos as f64);
    let p_m = (pos > 0).then(|| counts.fn_ as f64 / pos as f64);
    let ppv = (pred_pos > 0).then(|| counts.tp as f64 / pred_pos as f64);
    let f1 = match (ppv, p_d) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    MetricsReport { counts, p_d, p_m, ppv, f1, auc }
}

/// Rank-based AUC over pooled `(score, label)` pairs with tie averaging
/// (Mann-Whitney). `None` when either class is absent.
pub fn rank_auc<T: Scalar>(scores: &[T], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks across ties
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Some((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Key identifying one evaluation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub detector: String,
    pub or_percent: f64,
    pub n_active: usize,
    pub snr_db: f64,
    pub mode: String,
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub report: MetricsReport,
    pub snapshots: u64,
}

pub const RESULTS_CSV_HEADER: &str =
    "detector,or_percent,n_active,snr_db,mode,snapshots,tp,fp,fn,tn,p_d,p_m,ppv,f1,auc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes the results table as CSV, one row per cell, full precision.
pub fn write_results_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{RESULTS_CSV_HEADER}")?;
    for c in cells {
        let r = &c.report;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.key.detector,
            c.key.or_percent,
            c.key.n_active,
            c.key.snr_db,
            c.key.mode,
            c.snapshots,
            r.counts.tp,
            r.counts.fp,
            r.counts.fn_,
            r.counts.tn,
            opt(r.p_d),
            opt(r.p_m),
            opt(r.ppv),
            opt(r.f1),
            opt(r.auc),
        )?;
    }
    w.flush()?;
    Ok(())
}
