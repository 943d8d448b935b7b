use m2spe::encoder::{effective_projection, encode, EncoderConfig, EncoderParams};
use m2spe::numkernel::Matrix;
use m2spe::simloss::pair_similarity;
use m2spe::train::{gradient_check, GradCheckOptions};
use proptest::prelude::*;

fn small(num_cls: usize, reparam: bool) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 8,
        ff_dim: 16,
        num_cls,
        injection_layers: vec![1, 2],
        vocab_size: 32,
        max_seq_len: 6,
        reparam_enabled: reparam,
        ..EncoderConfig::default()
    }
}

fn tokens(k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(k..32usize, 1..=6)
}

#[test]
fn gradients_match_finite_differences() {
    let config = EncoderConfig {
        num_cls: 2,
        max_seq_len: 4,
        vocab_size: 16,
        ..small(2, true)
    };
    let report = gradient_check(
        &config,
        &GradCheckOptions {
            instances: 5,
            seed: 9,
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_injections_are_transparent(seed in any::<u64>(), k in 1usize..5, toks in tokens(4)) {
        let config = small(k, false);
        let mut params = EncoderParams::init(&config, seed).unwrap();
        for inj in &mut params.injections {
            for w in &mut inj.weights {
                *w = Matrix::identity(config.hidden_dim);
            }
        }
        let plain = EncoderConfig { injections_enabled: false, ..config.clone() };
        let a = encode(&params, &config, &toks).unwrap();
        let b = encode(&params, &plain, &toks).unwrap();
        prop_assert!(a.components.sub(&b.components).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn cls_slots_are_exchangeable(seed in any::<u64>(), reparam in any::<bool>(), toks in tokens(3), rot in 1usize..3) {
        let config = small(3, reparam);
        let params = EncoderParams::init(&config, seed).unwrap();
        let perm: Vec<usize> = (0..3).map(|i| (i + rot) % 3).collect();
        let mut permuted = params.clone();
        for (i, &p) in perm.iter().enumerate() {
            permuted.token_embedding.row_mut(i).copy_from_slice(params.token_embedding.row(p));
            permuted.position_embedding.row_mut(i).copy_from_slice(params.position_embedding.row(p));
        }
        for (dst, src) in permuted.injections.iter_mut().zip(&params.injections) {
            dst.weights = perm.iter().map(|&p| src.weights[p].clone()).collect();
            dst.biases = perm.iter().map(|&p| src.biases[p].clone()).collect();
        }
        let a = encode(&params, &config, &toks).unwrap();
        let b = encode(&permuted, &config, &toks).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (x, y) in b.components.row(i).iter().zip(a.components.row(p)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
        for (x, y) in a.pooled.iter().zip(&b.pooled) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let s = pair_similarity(&a, &a, 0.4).unwrap().value;
        let t = pair_similarity(&b, &b, 0.4).unwrap().value;
        prop_assert!((s - t).abs() <= 1e-9 * s.abs().max(1.0));
    }

    #[test]
    fn reparameterized_projections_sum_to_zero(seed in any::<u64>(), k in 2usize..6) {
        let config = small(k, true);
        let params = EncoderParams::init(&config, seed).unwrap();
        for inj in &params.injections {
            let mut total = Matrix::zeros(config.hidden_dim, config.hidden_dim);
            for i in 0..k {
                total = total.add(&effective_projection(&inj.weights, i, true).unwrap()).unwrap();
            }
            prop_assert!(total.max_abs() <= 1e-12);
        }
    }

    #[test]
    fn pooled_is_sum_of_components(seed in any::<u64>(), k in 1usize..5, toks in tokens(4)) {
        let config = small(k, true);
        let params = EncoderParams::init(&config, seed).unwrap();
        let set = encode(&params, &config, &toks).unwrap();
        for c in 0..config.hidden_dim {
            let sum: f64 = (0..k).map(|r| set.components.get(r, c)).sum();
            prop_assert!((sum - set.pooled[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn encoding_is_a_pure_function(seed in any::<u64>(), toks in tokens(3)) {
        let config = small(3, true);
        let params = EncoderParams::init(&config, seed).unwrap();
        prop_assert_eq!(encode(&params, &config, &toks).unwrap(), encode(&params, &config, &toks).unwrap());
    }
}

#[test]
fn rejects_reserved_and_out_of_range_tokens() {
    let config = small(3, true);
    let params = EncoderParams::init(&config, 0).unwrap();
    assert!(encode(&params, &config, &[1, 5]).is_err());
    assert!(encode(&params, &config, &[32]).is_err());
    assert!(encode(&params, &config, &[]).is_err());
    assert!(encode(&params, &config, &[5; 7]).is_err());
}
