//! Ranking metrics.

use std::collections::HashMap;

/// Mann–Whitney AUC: probability that a random positive outranks a random
/// negative, ties counted ½. `None` when either class is absent.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of (1-based, tie-averaged) ranks of positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Impression-weighted mean of per-group AUCs over groups with both classes.
pub fn compute_gauc(groups: &[u64], scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut by: HashMap<u64, (Vec<f64>, Vec<bool>)> = HashMap::new();
    for ((g, s), l) in groups.iter().zip(scores).zip(labels) {
        let e = by.entry(*g).or_default();
        e.0.push(*s);
        e.1.push(*l);
    }
    let mut keys: Vec<_> = by.keys().copied().collect();
    keys.sort_unstable();
    let (mut num, mut den) = (0.0, 0.0);
    for k in keys {
        let (s, l) = &by[&k];
        if let Some(a) = compute_auc(s, l) {
            num += a * s.len() as f64;
            den += s.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}
