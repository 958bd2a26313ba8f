use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney rank sum; ties count 1/2.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension { expected: scores.len(), got: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(labels.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 2 * rank for the positives, ranks 1-based and tie-averaged, kept
    // in integers so the result is exact.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_tie;
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok((twice_u as f64 / 2.0) / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Indices ordered by descending score, ties by ascending index.
pub fn top_k_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Treat the top `k` scores as predicted positive.
pub fn confusion_at_k(scores: &[f64], labels: &[bool], k: usize) -> Result<Confusion> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension { expected: scores.len(), got: labels.len() });
    }
    if k == 0 || k > scores.len() {
        return Err(Error::CapacityExceeded { k, n: scores.len() });
    }
    let mut c = Confusion::default();
    for (rank, &i) in top_k_order(scores).iter().enumerate() {
        match (rank < k, labels[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}
