use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Weights of one pre-norm transformer layer. Projections act on row vectors (`x·W`).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Per-CLS linear maps inserted after one layer. `weights[k]` acts on a column
/// vector (`W·h`), `biases[k]` is `[1×d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionParams {
    pub layer: usize,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

/// All trainable arrays of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `[vocab_size × d]`; rows `0..K` are the CLS embeddings.
    pub token_embedding: Matrix,
    /// `[(K + max_seq_len) × d]`.
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub injections: Vec<InjectionParams>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, values).expect("sized by construction")
}

impl EncoderParams {
    /// Fresh parameters for `config`, deterministic in `seed`.
    ///
    /// Transformer weights are drawn first, so two configs that differ only in
    /// injection settings share them. Injections below the top layer start as
    /// the identity; top-layer injections are random. All biases start at zero
    /// and layer-norm gains at one.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ff_dim;
        let token_embedding = xavier(&mut rng, config.vocab_size, d);
        let position_embedding = xavier(&mut rng, config.num_cls + config.max_seq_len, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                wq: xavier(&mut rng, d, d),
                bq: Matrix::zeros(1, d),
                wk: xavier(&mut rng, d, d),
                bk: Matrix::zeros(1, d),
                wv: xavier(&mut rng, d, d),
                bv: Matrix::zeros(1, d),
                wo: xavier(&mut rng, d, d),
                bo: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                w1: xavier(&mut rng, d, f),
                b1: Matrix::zeros(1, f),
                w2: xavier(&mut rng, f, d),
                b2: Matrix::zeros(1, d),
            })
            .collect();
        let injections = config
            .injection_layers
            .iter()
            .map(|&layer| {
                let weights = (0..config.num_cls)
                    .map(|_| {
                        if layer == config.num_layers {
                            xavier(&mut rng, d, d)
                        } else {
                            Matrix::identity(d)
                        }
                    })
                    .collect();
                InjectionParams {
                    layer,
                    weights,
                    biases: vec![Matrix::zeros(1, d); config.num_cls],
                }
            })
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            injections,
        })
    }

    pub fn injection(&self, layer: usize) -> Option<&InjectionParams> {
        self.injections.iter().find(|i| i.layer == layer)
    }

    /// Every array with a stable name, in a fixed order. Parameter keys on the
    /// autodiff tape are indices into this list.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = i + 1;
            for (suffix, m) in [
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
                ("ff.w1", &l.w1),
                ("ff.b1", &l.b1),
                ("ff.w2", &l.w2),
                ("ff.b2", &l.b2),
            ] {
                out.push((format!("layer{n}.{suffix}"), m));
            }
        }
        for inj in &self.injections {
            for (k, w) in inj.weights.iter().enumerate() {
                out.push((format!("inject{}.w{k}", inj.layer), w));
            }
            for (k, b) in inj.biases.iter().enumerate() {
                out.push((format!("inject{}.b{k}", inj.layer), b));
            }
        }
        out
    }

    /// Mutable counterpart of [`EncoderParams::named`], same order.
    pub fn arrays_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        for inj in &mut self.injections {
            out.extend(inj.weights.iter_mut());
            out.extend(inj.biases.iter_mut());
        }
        out
    }

    pub fn arrays(&self) -> Vec<&Matrix> {
        self.named().into_iter().map(|(_, m)| m).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays().iter().map(|m| m.len()).sum()
    }

    /// Checks array shapes against `config`.
    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let reference = EncoderParams::zeros_like(config)?;
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(Error::config(format!(
                "expected {} arrays, found {}",
                theirs.len(),
                ours.len()
            )));
        }
        for ((name, m), (rname, r)) in ours.iter().zip(&theirs) {
            if name != rname || m.shape() != r.shape() {
                return Err(Error::config(format!(
                    "array {name} {:?} does not match {rname} {:?}",
                    m.shape(),
                    r.shape()
                )));
            }
        }
        Ok(())
    }

    /// Same shapes as `config` requires, all zeros.
    pub fn zeros_like(config: &EncoderConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for m in p.arrays_mut() {
            m.fill(0.0);
        }
        Ok(p)
    }

    /// Flattens all arrays into one vector, in [`EncoderParams::named`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays()
            .iter()
            .flat_map(|m| m.values().iter().copied())
            .collect()
    }

    /// Inverse of [`EncoderParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for m in self.arrays_mut() {
            let n = m.len();
            m.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            num_layers: 4,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            num_cls: 3,
            injection_layers: vec![2, 4],
            vocab_size: 20,
            max_seq_len: 6,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn lower_injections_start_as_identity() {
        let p = EncoderParams::init(&small(), 5).unwrap();
        let inj = p.injection(2).unwrap();
        assert_eq!(inj.weights.len(), 3);
        for w in &inj.weights {
            assert_eq!(w, &Matrix::identity(8));
        }
        let top = p.injection(4).unwrap();
        assert!(top.weights.iter().all(|w| w != &Matrix::identity(8)));
        assert_ne!(top.weights[0], top.weights[1]);
        assert!(top
            .biases
            .iter()
            .all(|b| b.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(&small(), 11).unwrap();
        let b = EncoderParams::init(&small(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, EncoderParams::init(&small(), 12).unwrap());
    }

    #[test]
    fn single_cls_has_one_injection_per_layer() {
        let cfg = EncoderConfig {
            num_cls: 1,
            ..small()
        };
        let p = EncoderParams::init(&cfg, 0).unwrap();
        assert_eq!(p.injections.len(), 2);
        assert!(p
            .injections
            .iter()
            .all(|i| i.weights.len() == 1 && i.biases.len() == 1));
    }

    #[test]
    fn transformer_weights_ignore_injection_flags() {
        let on = EncoderParams::init(&small(), 3).unwrap();
        let off = EncoderParams::init(
            &EncoderConfig {
                injections_enabled: false,
                reparam_enabled: false,
                ..small()
            },
            3,
        )
        .unwrap();
        assert_eq!(on.layers, off.layers);
        assert_eq!(on.token_embedding, off.token_embedding);
    }

    #[test]
    fn init_rejects_invalid_config() {
        let cfg = EncoderConfig {
            num_cls: 0,
            ..small()
        };
        assert!(EncoderParams::init(&cfg, 0).is_err());
    }

    #[test]
    fn flat_roundtrip_and_names_align() {
        let p = EncoderParams::init(&small(), 1).unwrap();
        let mut q = EncoderParams::zeros_like(&small()).unwrap();
        q.assign_flat(&p.flatten());
        assert_eq!(p, q);
        assert_eq!(p.named().len(), p.clone().arrays_mut().len());
        p.check_shapes(&small()).unwrap();
    }
}
