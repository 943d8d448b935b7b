//! Paper-pair similarity and the contrastive citation loss.
//!
//! The similarity of two documents blends the single best CLS-pair dot
//! product with the dot product of their pooled vectors:
//! `S = λ·max_{i,j} c_iᴬ·c_jᴮ + (1 − λ)·cᴬ·cᴮ`. The loss is softmax cross
//! entropy with the cited paper as the target class among the cited paper and
//! the negatives, using raw similarities as logits.

use crate::encoder::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numkernel::{dot, softmax_cross_entropy, NodeId, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    /// 0-based CLS indices `(i, j)` attaining the max term.
    pub argmax_pair: (usize, usize),
}

/// Query, one cited paper, and at least one uncited paper.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub query: EmbeddingSet,
    pub positive: EmbeddingSet,
    pub negatives: Vec<EmbeddingSet>,
}

/// Unnormalized sum of the CLS components.
pub fn pooled_embedding(es: &EmbeddingSet) -> Vec<f64> {
    let mut out = vec![0.0; es.dim()];
    for k in 0..es.num_cls() {
        for (o, v) in out.iter_mut().zip(es.components.row(k)) {
            *o += v;
        }
    }
    out
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::input(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// First `(i, j)` in row-major order attaining the largest `a_i·b_j`.
fn best_pair(a: &EmbeddingSet, b: &EmbeddingSet) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for i in 0..a.num_cls() {
        for j in 0..b.num_cls() {
            let v = dot(a.components.row(i), b.components.row(j));
            if v > best.1 {
                best = ((i, j), v);
            }
        }
    }
    best
}

pub fn pair_similarity(a: &EmbeddingSet, b: &EmbeddingSet, lambda: f64) -> Result<SimilarityScore> {
    if a.components.shape() != b.components.shape() {
        return Err(Error::ShapeMismatch {
            op: "pair_similarity",
            left: a.components.shape(),
            right: b.components.shape(),
        });
    }
    check_lambda(lambda)?;
    let (argmax_pair, max_term) = best_pair(a, b);
    let pooled = dot(&pooled_embedding(a), &pooled_embedding(b));
    Ok(SimilarityScore {
        value: lambda * max_term + (1.0 - lambda) * pooled,
        argmax_pair,
    })
}

fn check_batch(batch: &TripletBatch) -> Result<()> {
    if batch.negatives.is_empty() {
        return Err(Error::input("triplet batch needs at least one negative"));
    }
    Ok(())
}

/// `−log(exp S(Q,+) / (exp S(Q,+) + Σ_neg exp S(Q,neg)))`.
pub fn contrastive_loss(batch: &TripletBatch, lambda: f64) -> Result<f64> {
    check_batch(batch)?;
    let mut logits = Vec::with_capacity(1 + batch.negatives.len());
    logits.push(pair_similarity(&batch.query, &batch.positive, lambda)?.value);
    for n in &batch.negatives {
        logits.push(pair_similarity(&batch.query, n, lambda)?.value);
    }
    Ok(softmax_cross_entropy(&logits, 0))
}

/// Differentiable similarity between two `[K × d]` CLS nodes.
///
/// The max term is a subgradient: it is routed through the single argmax pair,
/// chosen from the current values with row-major tie breaking.
pub fn similarity_on_tape(tape: &mut Tape, a: NodeId, b: NodeId, lambda: f64) -> Result<NodeId> {
    check_lambda(lambda)?;
    let va = EmbeddingSet::from_components(tape.value(a).clone());
    let vb = EmbeddingSet::from_components(tape.value(b).clone());
    if va.components.shape() != vb.components.shape() {
        return Err(Error::ShapeMismatch {
            op: "similarity_on_tape",
            left: va.components.shape(),
            right: vb.components.shape(),
        });
    }
    let ((i, j), _) = best_pair(&va, &vb);
    let ai = tape.slice_rows(a, i, 1)?;
    let bj = tape.slice_rows(b, j, 1)?;
    let max_term = tape.dot(ai, bj)?;
    let pa = tape.sum_rows(a);
    let pb = tape.sum_rows(b);
    let pooled = tape.dot(pa, pb)?;
    let left = tape.scale(max_term, lambda);
    let right = tape.scale(pooled, 1.0 - lambda);
    tape.add(left, right)
}

/// Differentiable contrastive loss over CLS nodes.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    query: NodeId,
    positive: NodeId,
    negatives: &[NodeId],
    lambda: f64,
) -> Result<NodeId> {
    if negatives.is_empty() {
        return Err(Error::input("triplet batch needs at least one negative"));
    }
    let mut logits = Vec::with_capacity(1 + negatives.len());
    logits.push(similarity_on_tape(tape, query, positive, lambda)?);
    for &n in negatives {
        logits.push(similarity_on_tape(tape, query, n, lambda)?);
    }
    let row = tape.concat_cols(&logits)?;
    tape.cross_entropy(row, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{finite_difference_gradient, relative_error, Matrix, Step};
    use proptest::prelude::*;

    fn set(rows: &[&[f64]]) -> EmbeddingSet {
        EmbeddingSet::from_components(Matrix::from_rows(rows))
    }

    #[test]
    fn pooled_examples() {
        assert_eq!(pooled_embedding(&set(&[&[1.0, 2.0]])), vec![1.0, 2.0]);
        assert_eq!(
            pooled_embedding(&set(&[&[1.0, 0.0], &[0.0, 1.0]])),
            vec![1.0, 1.0]
        );
        assert_eq!(
            pooled_embedding(&set(&[&[1.5, -2.0], &[-1.5, 2.0]])),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn single_cls_similarity_is_plain_dot() {
        let a = set(&[&[1.0, 2.0]]);
        let b = set(&[&[3.0, 4.0]]);
        for lambda in [0.0, 0.1, 0.5, 1.0] {
            let s = pair_similarity(&a, &b, lambda).unwrap();
            assert_eq!(s.value, 11.0);
            assert_eq!(s.argmax_pair, (0, 0));
        }
    }

    #[test]
    fn lambda_one_enumerated_example() {
        let a = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = set(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let s = pair_similarity(&a, &b, 1.0).unwrap();
        assert_eq!(s.value, 1.0);
        assert_eq!(s.argmax_pair, (0, 0));
        // λ = 0 is the pooled dot: [1,1]·[1,0]
        assert_eq!(pair_similarity(&a, &b, 0.0).unwrap().value, 1.0);
    }

    #[test]
    fn ties_break_to_first_pair() {
        let a = set(&[&[1.0], &[1.0]]);
        let b = set(&[&[2.0], &[2.0]]);
        assert_eq!(pair_similarity(&a, &b, 1.0).unwrap().argmax_pair, (0, 0));
    }

    #[test]
    fn rejects_mismatch_and_bad_lambda() {
        let a = set(&[&[1.0, 2.0]]);
        let b = set(&[&[1.0, 2.0], &[0.0, 0.0]]);
        assert!(pair_similarity(&a, &b, 0.5).is_err());
        assert!(pair_similarity(&a, &a, 1.5).is_err());
        let batch = TripletBatch {
            query: a.clone(),
            positive: a.clone(),
            negatives: vec![],
        };
        assert!(contrastive_loss(&batch, 0.1).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let q = set(&[&[1.0]]);
        let one = set(&[&[1.0]]);
        let zero = set(&[&[0.0]]);
        let equal = TripletBatch {
            query: q.clone(),
            positive: one.clone(),
            negatives: vec![one.clone()],
        };
        assert!((contrastive_loss(&equal, 0.3).unwrap() - 2f64.ln()).abs() < 1e-15);
        let many = TripletBatch {
            negatives: vec![one.clone(); 4],
            ..equal.clone()
        };
        assert!((contrastive_loss(&many, 0.3).unwrap() - 5f64.ln()).abs() < 1e-15);
        let skewed = TripletBatch {
            query: q,
            positive: one,
            negatives: vec![zero],
        };
        // ln(1 + e⁻¹)
        assert!((contrastive_loss(&skewed, 0.0).unwrap() - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    fn random_set(seed: u64, k: usize, d: usize) -> EmbeddingSet {
        let vals = (0..k * d)
            .map(|i| ((seed as f64 + 1.3) * (i as f64 + 0.7)).sin())
            .collect();
        EmbeddingSet::from_components(Matrix::from_vec(k, d, vals).unwrap())
    }

    #[test]
    fn tape_loss_matches_value_loss_and_finite_differences() {
        let (k, d) = (3, 4);
        let sets: Vec<EmbeddingSet> = (0..4).map(|s| random_set(s, k, d)).collect();
        let lambda = 0.4;
        let flat: Vec<f64> = sets
            .iter()
            .flat_map(|s| s.components.values().to_vec())
            .collect();
        let loss_of = |flat: &[f64]| {
            let s: Vec<EmbeddingSet> = flat
                .chunks(k * d)
                .map(|c| EmbeddingSet::from_components(Matrix::from_vec(k, d, c.to_vec()).unwrap()))
                .collect();
            contrastive_loss(
                &TripletBatch {
                    query: s[0].clone(),
                    positive: s[1].clone(),
                    negatives: s[2..].to_vec(),
                },
                lambda,
            )
            .unwrap()
        };
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = sets
            .iter()
            .enumerate()
            .map(|(i, s)| tape.param(i, s.components.clone()))
            .collect();
        let loss = contrastive_loss_on_tape(&mut tape, ids[0], ids[1], &ids[2..], lambda).unwrap();
        assert_eq!(tape.value(loss).item(), loss_of(&flat));
        tape.backward(loss).unwrap();
        let grads = tape.param_grads();
        let analytic: Vec<f64> = grads.values().flat_map(|g| g.values().to_vec()).collect();
        let numeric = finite_difference_gradient(loss_of, &flat, Step::Relative(1e-5));
        assert!(relative_error(&analytic, &numeric, 1e-12) < 1e-6);
    }

    fn arb_set(k: usize, d: usize) -> impl Strategy<Value = EmbeddingSet> {
        prop::collection::vec(-3.0f64..3.0, k * d)
            .prop_map(move |v| EmbeddingSet::from_components(Matrix::from_vec(k, d, v).unwrap()))
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric((a, b) in (1usize..4, 1usize..5).prop_flat_map(|(k, d)| (arb_set(k, d), arb_set(k, d))),
                                   lambda in 0.0f64..=1.0) {
            let ab = pair_similarity(&a, &b, lambda).unwrap();
            let ba = pair_similarity(&b, &a, lambda).unwrap();
            prop_assert!((ab.value - ba.value).abs() <= 1e-12 * (1.0 + ab.value.abs()));
        }

        #[test]
        fn single_cls_is_lambda_invariant(a in arb_set(1, 5), b in arb_set(1, 5)) {
            let s0 = pair_similarity(&a, &b, 0.0).unwrap().value;
            let s1 = pair_similarity(&a, &b, 1.0).unwrap().value;
            prop_assert!((s0 - s1).abs() <= 1e-12);
        }

        #[test]
        fn scaling_multiplies_by_square(a in arb_set(3, 4), b in arb_set(3, 4), alpha in 0.1f64..5.0, lambda in 0.0f64..=1.0) {
            let scale = |s: &EmbeddingSet| EmbeddingSet::from_components(s.components.scale(alpha));
            let base = pair_similarity(&a, &b, lambda).unwrap();
            let scaled = pair_similarity(&scale(&a), &scale(&b), lambda).unwrap();
            prop_assert!((scaled.value - alpha * alpha * base.value).abs() <= 1e-9 * (1.0 + scaled.value.abs()));
        }

        #[test]
        fn loss_positive_and_monotone_in_positive_logit(q in arb_set(2, 3), p in arb_set(2, 3), n in arb_set(2, 3)) {
            let batch = TripletBatch { query: q.clone(), positive: p.clone(), negatives: vec![n] };
            let l0 = contrastive_loss(&batch, 0.0).unwrap();
            prop_assert!(l0 > 0.0);
            // Moving the positive's pooled vector towards the query raises S(Q,+) at λ=0.
            let pooled_q = pooled_embedding(&q);
            let mut shifted = p.components.clone();
            for (j, v) in pooled_q.iter().enumerate() {
                shifted.set(0, j, shifted.get(0, j) + 0.5 * v);
            }
            let moved = TripletBatch { positive: EmbeddingSet::from_components(shifted), ..batch };
            if dot(&pooled_q, &pooled_q) > 1e-6 {
                prop_assert!(contrastive_loss(&moved, 0.0).unwrap() < l0);
            }
        }
    }
}
