use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, NodeId, Tape};

/// The `K` per-CLS output vectors of one document and their unnormalized sum.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[K × d]`, row `k` is `c_k`.
    pub components: Matrix,
    /// `Σ_k c_k`.
    pub pooled: Vec<f64>,
}

impl EmbeddingSet {
    pub fn from_components(components: Matrix) -> Self {
        let mut pooled = vec![0.0; components.cols()];
        for k in 0..components.rows() {
            for (p, v) in pooled.iter_mut().zip(components.row(k)) {
                *p += v;
            }
        }
        Self { components, pooled }
    }

    pub fn num_cls(&self) -> usize {
        self.components.rows()
    }

    pub fn dim(&self) -> usize {
        self.components.cols()
    }
}

/// Mean-centred projection for CLS slot `k` (0-based) among `weights`.
///
/// With re-parameterization on and more than one slot this is
/// `W_k − (1/K)·Σ W_k'`; otherwise `W_k` itself.
pub fn effective_projection(weights: &[Matrix], k: usize, reparam_enabled: bool) -> Result<Matrix> {
    let w = weights.get(k).ok_or_else(|| {
        Error::input(format!(
            "CLS index {k} out of range for {} weights",
            weights.len()
        ))
    })?;
    if !reparam_enabled || weights.len() == 1 {
        return Ok(w.clone());
    }
    let mut total = weights[0].clone();
    for other in &weights[1..] {
        total = total.add(other)?;
    }
    let mean = total.scale(1.0 / weights.len() as f64);
    w.sub(&mean)
}

struct BoundLayer {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

struct BoundInjection {
    layer: usize,
    /// Effective (possibly mean-centred) projections, one per CLS slot.
    projections: Vec<NodeId>,
    biases: Vec<NodeId>,
}

/// Encoder parameters registered as leaves on one tape. Keys follow
/// [`EncoderParams::named`] order, so tape gradients map straight back.
pub struct BoundParams {
    token_embedding: NodeId,
    position_embedding: NodeId,
    layers: Vec<BoundLayer>,
    injections: Vec<BoundInjection>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &EncoderParams, config: &EncoderConfig) -> Result<Self> {
        let mut key = 0;
        let mut leaf = |tape: &mut Tape, m: &Matrix| {
            let id = tape.param(key, m.clone());
            key += 1;
            id
        };
        let token_embedding = leaf(tape, &params.token_embedding);
        let position_embedding = leaf(tape, &params.position_embedding);
        let layers = params
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_gain: leaf(tape, &l.ln1_gain),
                ln1_bias: leaf(tape, &l.ln1_bias),
                wq: leaf(tape, &l.wq),
                bq: leaf(tape, &l.bq),
                wk: leaf(tape, &l.wk),
                bk: leaf(tape, &l.bk),
                wv: leaf(tape, &l.wv),
                bv: leaf(tape, &l.bv),
                wo: leaf(tape, &l.wo),
                bo: leaf(tape, &l.bo),
                ln2_gain: leaf(tape, &l.ln2_gain),
                ln2_bias: leaf(tape, &l.ln2_bias),
                w1: leaf(tape, &l.w1),
                b1: leaf(tape, &l.b1),
                w2: leaf(tape, &l.w2),
                b2: leaf(tape, &l.b2),
            })
            .collect();
        let mut injections = Vec::with_capacity(params.injections.len());
        for inj in &params.injections {
            let weights: Vec<NodeId> = inj.weights.iter().map(|w| leaf(tape, w)).collect();
            let biases: Vec<NodeId> = inj.biases.iter().map(|b| leaf(tape, b)).collect();
            let projections = if config.reparam_active() {
                // Same arithmetic order as `effective_projection`.
                let mut total = weights[0];
                for &w in &weights[1..] {
                    total = tape.add(total, w)?;
                }
                let mean = tape.scale(total, 1.0 / weights.len() as f64);
                weights
                    .iter()
                    .map(|&w| tape.sub(w, mean))
                    .collect::<Result<_>>()?
            } else {
                weights
            };
            injections.push(BoundInjection {
                layer: inj.layer,
                projections,
                biases,
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            injections,
        })
    }

    fn injection(&self, layer: usize) -> Result<&BoundInjection> {
        self.injections
            .iter()
            .find(|i| i.layer == layer)
            .ok_or_else(|| Error::input(format!("layer {layer} is not an injection layer")))
    }
}

pub(crate) fn check_tokens(config: &EncoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::input("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens
        .iter()
        .find(|&&t| t < config.num_cls || t >= config.vocab_size)
    {
        return Err(Error::input(format!(
            "token id {bad} outside the document range {}..{}",
            config.num_cls, config.vocab_size
        )));
    }
    Ok(())
}

/// Replaces CLS rows `0..K` of `hidden` by their injected projections.
fn inject_on_tape(tape: &mut Tape, hidden: NodeId, inj: &BoundInjection) -> Result<NodeId> {
    let k_count = inj.projections.len();
    let rows = tape.value(hidden).rows();
    let mut parts = Vec::with_capacity(k_count + 1);
    for k in 0..k_count {
        let h = tape.slice_rows(hidden, k, 1)?;
        let projected = tape.matmul_t(h, inj.projections[k])?;
        parts.push(tape.add(projected, inj.biases[k])?);
    }
    if rows > k_count {
        parts.push(tape.slice_rows(hidden, k_count, rows - k_count)?);
    }
    tape.concat_rows(&parts)
}

fn attention(tape: &mut Tape, x: NodeId, l: &BoundLayer, config: &EncoderConfig) -> Result<NodeId> {
    let q = tape.matmul(x, l.wq)?;
    let q = tape.add_row(q, l.bq)?;
    let k = tape.matmul(x, l.wk)?;
    let k = tape.add_row(k, l.bk)?;
    let v = tape.matmul(x, l.wv)?;
    let v = tape.add_row(v, l.bv)?;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let (qh, kh, vh) = if config.num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = tape.matmul(merged, l.wo)?;
    tape.add_row(out, l.bo)
}

/// Full forward pass on `tape`; returns the `[K × d]` CLS output node.
pub fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &EncoderConfig,
    tokens: &[usize],
) -> Result<NodeId> {
    check_tokens(config, tokens)?;
    let k_count = config.num_cls;
    let ids: Vec<usize> = (0..k_count).chain(tokens.iter().copied()).collect();
    let tok = tape.gather_rows(bound.token_embedding, &ids)?;
    let pos = tape.slice_rows(bound.position_embedding, 0, ids.len())?;
    let mut x = tape.add(tok, pos)?;
    let eps = EncoderConfig::LAYER_NORM_EPS;
    for (i, l) in bound.layers.iter().enumerate() {
        let a = tape.layer_norm_rows(x, l.ln1_gain, l.ln1_bias, eps)?;
        let att = attention(tape, a, l, config)?;
        x = tape.add(x, att)?;
        let f = tape.layer_norm_rows(x, l.ln2_gain, l.ln2_bias, eps)?;
        let h = tape.matmul(f, l.w1)?;
        let h = tape.add_row(h, l.b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, l.w2)?;
        let h = tape.add_row(h, l.b2)?;
        x = tape.add(x, h)?;
        let layer = i + 1;
        if config.injections_enabled && config.is_injection_layer(layer) {
            x = inject_on_tape(tape, x, bound.injection(layer)?)?;
        }
    }
    tape.slice_rows(x, 0, k_count)
}

/// Encodes one token sequence (without CLS ids; they are prepended here).
pub fn encode(
    params: &EncoderParams,
    config: &EncoderConfig,
    tokens: &[usize],
) -> Result<EmbeddingSet> {
    check_tokens(config, tokens)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, config)?;
    let out = forward_on_tape(&mut tape, &bound, config, tokens)?;
    Ok(EmbeddingSet::from_components(tape.value(out).clone()))
}

/// Applies the layer-`layer` CLS injection to hidden states `[(K+T) × d]`.
/// Non-CLS rows pass through untouched; with injections disabled the input is
/// returned unchanged.
pub fn apply_cls_injection(
    hidden: &Matrix,
    layer: usize,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<Matrix> {
    if !config.is_injection_layer(layer) {
        return Err(Error::input(format!(
            "layer {layer} is not an injection layer"
        )));
    }
    if hidden.rows() < config.num_cls || hidden.cols() != config.hidden_dim {
        return Err(Error::ShapeMismatch {
            op: "apply_cls_injection",
            left: hidden.shape(),
            right: (config.num_cls, config.hidden_dim),
        });
    }
    if !config.injections_enabled {
        return Ok(hidden.clone());
    }
    let inj = params
        .injection(layer)
        .ok_or_else(|| Error::input(format!("no injection weights for layer {layer}")))?;
    let mut out = hidden.clone();
    for k in 0..config.num_cls {
        let w = effective_projection(&inj.weights, k, config.reparam_active())?;
        let h = Matrix::row_vector(hidden.row(k).to_vec());
        let projected = h.matmul_transposed(&w)?.add(&inj.biases[k])?;
        out.row_mut(k).copy_from_slice(projected.values());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            num_cls: k,
            injection_layers: vec![1, 2],
            vocab_size: 24,
            max_seq_len: 6,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn effective_projection_examples() {
        let w = Matrix::from_rows(&[[0.3, -1.0], [2.0, 0.5]]);
        for k in 0..2 {
            let eff = effective_projection(&[w.clone(), w.clone()], k, true).unwrap();
            assert_eq!(eff, Matrix::zeros(2, 2));
        }
        let ws = [Matrix::from_rows(&[[2.0]]), Matrix::from_rows(&[[0.0]])];
        assert_eq!(effective_projection(&ws, 0, true).unwrap().item(), 1.0);
        assert_eq!(effective_projection(&ws, 1, true).unwrap().item(), -1.0);
        assert_eq!(effective_projection(&ws[..1], 0, true).unwrap().item(), 2.0);
        assert_eq!(effective_projection(&ws, 1, false).unwrap().item(), 0.0);
        assert!(effective_projection(&ws, 2, true).is_err());
    }

    #[test]
    fn hand_evaluated_injection() {
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 1,
            hidden_dim: 1,
            ff_dim: 1,
            num_cls: 2,
            injection_layers: vec![1],
            vocab_size: 4,
            max_seq_len: 2,
            ..EncoderConfig::default()
        };
        let mut p = EncoderParams::init(&cfg, 0).unwrap();
        p.injections[0].weights = vec![Matrix::from_rows(&[[2.0]]), Matrix::from_rows(&[[0.0]])];
        let h = Matrix::from_rows(&[[3.0], [3.0], [7.0]]);
        let out = apply_cls_injection(&h, 1, &p, &cfg).unwrap();
        assert_eq!(out.values(), &[3.0, -3.0, 7.0]);
    }

    #[test]
    fn identity_injection_without_reparam_is_noop() {
        let cfg = EncoderConfig {
            reparam_enabled: false,
            injection_layers: vec![1, 2],
            ..tiny(3)
        };
        let p = EncoderParams::init(&cfg, 4).unwrap();
        let h = Matrix::from_vec(5, 8, (0..40).map(|i| (i as f64).sin()).collect()).unwrap();
        assert_eq!(apply_cls_injection(&h, 1, &p, &cfg).unwrap(), h);
        let off = EncoderConfig {
            injections_enabled: false,
            ..tiny(3)
        };
        assert_eq!(apply_cls_injection(&h, 2, &p, &off).unwrap(), h);
        assert!(apply_cls_injection(&h, 3, &p, &cfg).is_err());
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = EncoderConfig {
            hidden_dim: 8,
            num_cls: 3,
            max_seq_len: 5,
            ..tiny(3)
        };
        let p = EncoderParams::init(&cfg, 9).unwrap();
        let toks = [3, 7, 11, 20, 5];
        let a = encode(&p, &cfg, &toks).unwrap();
        assert_eq!(a.components.shape(), (3, 8));
        assert_eq!(a.pooled.len(), 8);
        let b = encode(&p, &cfg, &toks).unwrap();
        assert_eq!(a, b);
        for j in 0..8 {
            let s: f64 = (0..3)
                .map(|k| a.components.get(k, j))
                .fold(0.0, |acc, v| acc + v);
            assert_eq!(a.pooled[j], s);
        }
    }

    #[test]
    fn encode_rejects_bad_sequences() {
        let cfg = tiny(2);
        let p = EncoderParams::init(&cfg, 0).unwrap();
        assert!(encode(&p, &cfg, &[]).is_err());
        assert!(encode(&p, &cfg, &[5; 7]).is_err());
        assert!(encode(&p, &cfg, &[1, 5]).is_err());
        assert!(encode(&p, &cfg, &[24]).is_err());
    }

    #[test]
    fn tape_injection_matches_value_path() {
        let cfg = tiny(3);
        let mut p = EncoderParams::init(&cfg, 2).unwrap();
        p.injections[0].biases[1] = Matrix::filled(1, 8, 0.25);
        let h = Matrix::from_vec(5, 8, (0..40).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &p, &cfg).unwrap();
        let hid = tape.constant(h.clone());
        let out = inject_on_tape(&mut tape, hid, bound.injection(1).unwrap()).unwrap();
        assert_eq!(
            tape.value(out),
            &apply_cls_injection(&h, 1, &p, &cfg).unwrap()
        );
    }
}
