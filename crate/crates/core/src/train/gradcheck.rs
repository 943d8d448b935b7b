use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::trainer::loss_and_gradients;
use crate::encoder::{encode, EmbeddingSet, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::numkernel::{dot, finite_difference_gradient, relative_error, Step};
use crate::simloss::{contrastive_loss, TripletBatch};

/// Parameter groups reported separately by [`gradient_check`].
pub const PARAM_CLASSES: [&str; 7] = [
    "token_embedding",
    "position_embedding",
    "layer_norm",
    "attention",
    "feed_forward",
    "injection_weight",
    "injection_bias",
];

pub fn param_class(name: &str) -> &'static str {
    if name == "token_embedding" {
        PARAM_CLASSES[0]
    } else if name == "position_embedding" {
        PARAM_CLASSES[1]
    } else if name.contains(".ln") {
        PARAM_CLASSES[2]
    } else if name.contains(".attn.") {
        PARAM_CLASSES[3]
    } else if name.contains(".ff.") {
        PARAM_CLASSES[4]
    } else if name.contains(".w") {
        PARAM_CLASSES[5]
    } else {
        PARAM_CLASSES[6]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub instances: usize,
    pub negatives: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Instances whose best and second-best CLS pair dots are closer than
    /// this are redrawn, since the max term is not differentiable there.
    pub tie_margin: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            negatives: 2,
            tolerance: 1e-3,
            seed: 0,
            tie_margin: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per class over all instances.
    pub worst: Vec<(&'static str, f64)>,
    pub instances: usize,
    pub redrawn: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.instances > 0 && self.worst.iter().all(|(_, e)| *e < self.tolerance)
    }
}

fn pair_gap(a: &EmbeddingSet, b: &EmbeddingSet) -> f64 {
    let mut vals: Vec<f64> = (0..a.num_cls())
        .flat_map(|i| (0..b.num_cls()).map(move |j| (i, j)))
        .map(|(i, j)| dot(a.components.row(i), b.components.row(j)))
        .collect();
    if vals.len() < 2 {
        return f64::INFINITY;
    }
    vals.sort_by(|x, y| y.total_cmp(x));
    vals[0] - vals[1]
}

/// Compares tape gradients of the contrastive loss with central differences
/// on random parameters and token sequences.
pub fn gradient_check(config: &EncoderConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: Vec<(&'static str, f64)> = PARAM_CLASSES.iter().map(|c| (*c, 0.0)).collect();
    let mut done = 0;
    let mut redrawn = 0;
    while done < opts.instances {
        let mut params = EncoderParams::init(config, rng.random())?;
        // Move every array off its structured init so identity and zero
        // blocks do not hide errors.
        for m in params.arrays_mut() {
            for v in m.values_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let mut seq = || -> Vec<usize> {
            let len = rng.random_range(1..=config.max_seq_len);
            (0..len)
                .map(|_| rng.random_range(config.num_cls..config.vocab_size))
                .collect()
        };
        let docs: Vec<Vec<usize>> = (0..2 + opts.negatives).map(|_| seq()).collect();
        let sets = docs
            .iter()
            .map(|d| encode(&params, config, d))
            .collect::<Result<Vec<_>>>()?;
        if config.lambda > 0.0
            && sets[1..]
                .iter()
                .any(|s| pair_gap(&sets[0], s) < opts.tie_margin)
        {
            redrawn += 1;
            if redrawn > 50 * opts.instances.max(1) {
                break;
            }
            continue;
        }
        let negs: Vec<&[usize]> = docs[2..].iter().map(Vec::as_slice).collect();
        let (_, grads) = loss_and_gradients(&params, config, &docs[0], &docs[1], &negs)?;

        let theta = params.flatten();
        let mut scratch = params.clone();
        let mut loss_at = |flat: &[f64]| {
            scratch.assign_flat(flat);
            let sets: Vec<EmbeddingSet> = docs
                .iter()
                .map(|d| encode(&scratch, config, d).unwrap())
                .collect();
            let batch = TripletBatch {
                query: sets[0].clone(),
                positive: sets[1].clone(),
                negatives: sets[2..].to_vec(),
            };
            contrastive_loss(&batch, config.lambda).unwrap()
        };
        let numeric = finite_difference_gradient(&mut loss_at, &theta, Step::Absolute(1e-5));

        let mut offset = 0;
        let mut per_class: Vec<(Vec<f64>, Vec<f64>)> =
            vec![(Vec::new(), Vec::new()); PARAM_CLASSES.len()];
        for ((name, m), g) in params.named().iter().zip(&grads) {
            let idx = PARAM_CLASSES
                .iter()
                .position(|c| *c == param_class(name))
                .unwrap();
            per_class[idx].0.extend_from_slice(g.values());
            per_class[idx]
                .1
                .extend_from_slice(&numeric[offset..offset + m.len()]);
            offset += m.len();
        }
        for ((_, w), (a, n)) in worst.iter_mut().zip(&per_class) {
            if !a.is_empty() {
                *w = w.max(relative_error(a, n, 1e-8));
            }
        }
        done += 1;
    }
    Ok(GradCheckReport {
        worst,
        instances: done,
        redrawn,
        tolerance: opts.tolerance,
    })
}
