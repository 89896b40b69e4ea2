//! Classification metrics: top-1 accuracy, F1-Macro and rank-based AUROC.

use crate::error::{input_err, Result};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_aligned(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(input_err!("{a} predictions for {b} labels"));
    }
    if a == 0 {
        return Err(input_err!("metrics need at least one sample"));
    }
    Ok(())
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    // zero support and zero predictions scores 0
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Unweighted mean of per-class F1 over `n_classes` classes.
pub fn f1_macro(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    check_aligned(preds.len(), labels.len())?;
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(input_err!("class {bad} out of range for {n_classes} classes"));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    Ok((0..n_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / n_classes as f64)
}

/// F1-Macro over independent label bits: one binary F1 per bit, averaged.
pub fn f1_macro_multilabel(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    check_aligned(preds.len(), labels.len())?;
    let k = labels[0].len();
    if preds.iter().chain(labels).any(|v| v.len() != k) {
        return Err(input_err!("label vectors must all have {k} bits"));
    }
    let mut total = 0.0;
    for bit in 0..k {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, l) in preds.iter().zip(labels) {
            match (p[bit], l[bit]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        total += f1(tp, fp, fn_);
    }
    Ok(total / k as f64)
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_aligned(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(input_err!("AUROC needs both classes present"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(input_err!("AUROC scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tie group spanning i..=j shares the mean rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &ix in &order[i..=j] {
            if labels[ix] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}
