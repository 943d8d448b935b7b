use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, lr_schedule, AdamHyper, AdamState};
use crate::citegraph::{sample_triplets, CorpusGraph, Triplet};
use crate::encoder::{forward_on_tape, BoundParams, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tape};
use crate::simloss::contrastive_loss_on_tape;

/// Optimizer, batching and sampling settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seeds: Vec<u64>,
    /// Papers are cut to this many tokens before encoding.
    pub truncation_len: usize,
    /// `None` uses every paper that cites something once per epoch.
    pub queries_per_epoch: Option<usize>,
    pub easy_per_query: usize,
    pub hard_per_query: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_fraction: 0.1,
            epochs: 2,
            micro_batch: 2,
            accumulation_steps: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seeds: vec![1783, 1918, 1945, 1991],
            truncation_len: 32,
            queries_per_epoch: None,
            easy_per_query: 1,
            hard_per_query: 1,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("micro_batch", self.micro_batch),
            ("accumulation_steps", self.accumulation_steps),
            ("truncation_len", self.truncation_len),
            ("queries_per_epoch", self.queries_per_epoch.unwrap_or(1)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.easy_per_query + self.hard_per_query == 0 {
            return Err(Error::config(
                "easy_per_query + hard_per_query must be positive",
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must lie in [0, 1]"));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("adam_eps must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    /// Mean loss of each optimizer step's effective batch.
    pub losses: Vec<f64>,
}

/// Independent stream derived from a run seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loss and per-array gradients (in [`EncoderParams::named`] order) for one
/// query against a positive and a list of negatives.
pub fn loss_and_gradients(
    params: &EncoderParams,
    config: &EncoderConfig,
    query: &[usize],
    positive: &[usize],
    negatives: &[&[usize]],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let q = forward_on_tape(&mut tape, &bound, config, query)?;
    let p = forward_on_tape(&mut tape, &bound, config, positive)?;
    let negs = negatives
        .iter()
        .map(|n| forward_on_tape(&mut tape, &bound, config, n))
        .collect::<Result<Vec<_>>>()?;
    let loss = contrastive_loss_on_tape(&mut tape, q, p, &negs, config.lambda)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    tape.backward(loss)?;
    Ok((value, tape.param_grads().into_values().collect()))
}

fn truncated(graph: &CorpusGraph, id: usize, len: usize) -> &[usize] {
    let t = &graph.paper(id).tokens;
    &t[..t.len().min(len)]
}

/// Triplets for every epoch, in the order they are consumed.
pub fn epoch_triplets(
    graph: &CorpusGraph,
    train: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Vec<Triplet> {
    let queries = train.queries_per_epoch.unwrap_or_else(|| {
        graph
            .papers
            .iter()
            .filter(|p| !p.out_citations.is_empty())
            .count()
    });
    let mut triplets = sample_triplets(
        graph,
        queries,
        train.easy_per_query,
        train.hard_per_query,
        derive_seed(seed, 2 * epoch as u64),
    );
    triplets.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        2 * epoch as u64 + 1,
    )));
    triplets
}

/// Trains from a fresh initialization.
///
/// Each epoch resamples triplets; each optimizer step consumes
/// `micro_batch × accumulation_steps` of them and leftovers are dropped.
/// Gradients are summed triplet by triplet in a fixed order and scaled by the
/// effective batch size, so the micro-batch split does not change the result.
pub fn train(
    encoder: &EncoderConfig,
    train: &TrainConfig,
    graph: &CorpusGraph,
    seed: u64,
) -> Result<TrainOutcome> {
    encoder.validate()?;
    train.validate()?;
    let batch = train.effective_batch();
    let epochs: Vec<Vec<Triplet>> = (0..train.epochs)
        .map(|e| epoch_triplets(graph, train, seed, e))
        .collect();
    let total_steps: usize = epochs.iter().map(|t| t.len() / batch).sum();
    if total_steps == 0 {
        return Err(Error::config(format!(
            "fewer triplets per epoch than the effective batch of {batch}"
        )));
    }
    let len = train.truncation_len.min(encoder.max_seq_len);
    let mut params = EncoderParams::init(encoder, seed)?;
    let mut state = AdamState::new(&params);
    let mut losses = Vec::with_capacity(total_steps);
    let scale = 1.0 / batch as f64;
    let mut step = 0;
    for triplets in &epochs {
        for chunk in triplets.chunks_exact(batch) {
            let mut grads: Vec<Matrix> = state
                .m
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect();
            let mut loss_sum = 0.0;
            for micro in chunk.chunks(train.micro_batch) {
                for t in micro {
                    let neg = truncated(graph, t.negative_id, len);
                    let (loss, g) = loss_and_gradients(
                        &params,
                        encoder,
                        truncated(graph, t.query_id, len),
                        truncated(graph, t.positive_id, len),
                        &[neg],
                    )
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!("{m} at step {step}")),
                        other => other,
                    })?;
                    loss_sum += loss;
                    for (acc, g) in grads.iter_mut().zip(&g) {
                        acc.add_scaled_assign(g, scale);
                    }
                }
            }
            let hyper = AdamHyper {
                lr: lr_schedule(step, total_steps, train.warmup_fraction, train.base_lr),
                beta1: train.adam_beta1,
                beta2: train.adam_beta2,
                eps: train.adam_eps,
            };
            adam_step(&mut params, &grads, &mut state, hyper)?;
            losses.push(loss_sum * scale);
            step += 1;
        }
    }
    Ok(TrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citegraph::{generate_corpus, CorpusSpec};

    fn setup() -> (EncoderConfig, TrainConfig, CorpusGraph) {
        let graph = generate_corpus(
            &CorpusSpec {
                papers_per_domain: 20,
                citations_per_paper: 3.0,
                vocab_size: 40,
                min_seq_len: 3,
                max_seq_len: 6,
                ..CorpusSpec::default()
            },
            2,
        )
        .unwrap();
        let encoder = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            num_cls: 2,
            injection_layers: vec![1],
            vocab_size: 40,
            max_seq_len: 6,
            ..EncoderConfig::default()
        };
        let train = TrainConfig {
            epochs: 1,
            micro_batch: 2,
            accumulation_steps: 4,
            queries_per_epoch: Some(12),
            base_lr: 1e-2,
            ..TrainConfig::default()
        };
        (encoder, train, graph)
    }

    #[test]
    fn accumulation_split_is_irrelevant() {
        let (encoder, train, graph) = setup();
        let a = super::train(&encoder, &train, &graph, 5).unwrap();
        let one_batch = TrainConfig {
            micro_batch: 8,
            accumulation_steps: 1,
            ..train.clone()
        };
        let b = super::train(&encoder, &one_batch, &graph, 5).unwrap();
        assert_eq!(a.losses.len(), 3);
        for (x, y) in a.params.flatten().iter().zip(b.params.flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let (encoder, train, graph) = setup();
        let a = super::train(&encoder, &train, &graph, 7).unwrap();
        let b = super::train(&encoder, &train, &graph, 7).unwrap();
        assert_eq!(a, b);
        let c = super::train(&encoder, &train, &graph, 8).unwrap();
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn too_few_triplets_rejected() {
        let (encoder, mut train, graph) = setup();
        train.accumulation_steps = 100;
        assert!(super::train(&encoder, &train, &graph, 1).is_err());
    }

    #[test]
    fn derive_seed_streams_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
