//! OOD detection scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio at which an OOD set counts as clearly more uncertain.
pub const RATIO_FLAG: f64 = 1.05;
/// Ratio at which an OOD set counts as much more uncertain.
pub const RATIO_STRONG_FLAG: f64 = 1.10;

/// Area under the ROC curve for telling label 1 (OOD) from label 0 (ID) by
/// score, via the Mann-Whitney statistic with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("AUROC scores".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Config("AUROC labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// AUROC of ID scores against OOD scores.
pub fn auroc_sets(id: &[f64], ood: &[f64]) -> Result<f64> {
    let scores: Vec<f64> = id.iter().chain(ood).copied().collect();
    let labels: Vec<u8> = std::iter::repeat_n(0, id.len()).chain(std::iter::repeat_n(1, ood.len())).collect();
    auroc(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub set: String,
    pub ratio: f64,
    pub flag: bool,
    pub strong_flag: bool,
    pub id_count: usize,
    pub ood_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
    pub flagged: usize,
    pub strongly_flagged: usize,
}

/// Mean OOD score over mean ID score for each named OOD set.
pub fn epkl_ratio_report(id_scores: &[f64], ood_scores_by_set: &[(String, Vec<f64>)]) -> Result<RatioReport> {
    if id_scores.is_empty() {
        return Err(Error::Config("ratio report needs ID scores".into()));
    }
    let id_mean = id_scores.iter().sum::<f64>() / id_scores.len() as f64;
    let mut rows = Vec::with_capacity(ood_scores_by_set.len());
    for (set, scores) in ood_scores_by_set {
        if scores.is_empty() {
            return Err(Error::Config(format!("OOD set {set} has no scores")));
        }
        let ratio = scores.iter().sum::<f64>() / scores.len() as f64 / id_mean;
        rows.push(RatioRow {
            set: set.clone(),
            ratio,
            flag: ratio >= RATIO_FLAG,
            strong_flag: ratio >= RATIO_STRONG_FLAG,
            id_count: id_scores.len(),
            ood_count: scores.len(),
        });
    }
    let flagged = rows.iter().filter(|r| r.flag).count();
    let strongly_flagged = rows.iter().filter(|r| r.strong_flag).count();
    Ok(RatioReport { rows, flagged, strongly_flagged })
}
