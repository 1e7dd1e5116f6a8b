//! Binary classification metrics. The positive class is label 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub acc: f64,
    /// `None` when no negatives are present.
    pub spe: Option<f64>,
    /// `None` when no positives are present.
    pub sen: Option<f64>,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn n(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn auc_defined(&self) -> bool {
        self.auc.is_some()
    }

    /// Tab-separated `key\tvalue` lines; undefined values print as `nan`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        format!(
            "tp\t{}\ntn\t{}\nfp\t{}\nfn\t{}\nacc\t{}\nspe\t{}\nsen\t{}\nauc\t{}\nauc_defined\t{}\nthreshold\t{}\n",
            self.tp,
            self.tn,
            self.fp,
            self.fn_,
            self.acc,
            opt(self.spe),
            opt(self.sen),
            opt(self.auc),
            u8::from(self.auc_defined()),
            self.threshold
        )
    }
}

/// Confusion counts at `threshold` (predict positive when `p >= threshold`)
/// plus the threshold-free AUC.
pub fn compute_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if probs.len() != labels.len() {
        return Err(Error::shape("compute_metrics", &[probs.len()], &[labels.len()]));
    }
    if probs.is_empty() {
        return Err(Error::invalid("compute_metrics", "no samples"));
    }
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in probs.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(MetricsReport {
        tp,
        tn,
        fp,
        fn_,
        acc: (tp + tn) as f64 / probs.len() as f64,
        spe: ratio(tn, tn + fp),
        sen: ratio(tp, tp + fn_),
        auc: auc(probs, labels).ok(),
        threshold,
    })
}

/// Mann–Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
