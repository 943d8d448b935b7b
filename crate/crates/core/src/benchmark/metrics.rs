use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numkernel::dot;

/// Orders `pool` by descending dot product with the query embedding.
/// Ties go to the smaller candidate id.
pub fn rank_candidates(
    embeddings: &BTreeMap<usize, Vec<f64>>,
    query_id: usize,
    pool: &[usize],
) -> Result<Vec<usize>> {
    let lookup = |id: usize| {
        embeddings
            .get(&id)
            .ok_or_else(|| Error::input(format!("no embedding for paper {id}")))
    };
    let q = lookup(query_id)?;
    let mut scored = Vec::with_capacity(pool.len());
    for &id in pool {
        scored.push((dot(q, lookup(id)?), id));
    }
    sort_by_score(&mut scored);
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

pub(crate) fn sort_by_score(scored: &mut [(f64, usize)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// `None` when there are no positives in the ranking.
pub fn average_precision(ranking: &[usize], positives: &BTreeSet<usize>) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Binary-relevance nDCG with `1 / log2(rank + 1)` gains.
pub fn ndcg(ranking: &[usize], positives: &BTreeSet<usize>) -> Option<f64> {
    let gain = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut dcg = 0.0;
    let mut hits = 0usize;
    for (i, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            hits += 1;
            dcg += gain(i + 1);
        }
    }
    if hits == 0 {
        return None;
    }
    let ideal: f64 = (1..=hits).map(gain).sum();
    Some(dcg / ideal)
}

/// Mean of the defined values; queries without positives do not count.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Unweighted mean of per-class F1 over classes `0..num_classes`.
pub fn macro_f1(predictions: &[usize], gold: &[usize], num_classes: usize) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::input(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::input("macro F1 needs at least one class"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::input(format!("label outside 0..{num_classes}")));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let precision = if tp[c] + fp[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / (tp[c] + fp[c]) as f64
            };
            let recall = if tp[c] + fneg[c] == 0 {
                0.0
            } else {
                tp[c] as f64 / (tp[c] + fneg[c]) as f64
            };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}
