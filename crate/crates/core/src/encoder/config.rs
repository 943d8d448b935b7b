use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the multi-CLS encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    /// Number of CLS tokens.
    #[serde(rename = "K")]
    pub num_cls: usize,
    /// 1-based layer indices followed by a CLS injection; must include the top layer.
    pub injection_layers: Vec<usize>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Blend between the best CLS-pair dot product and the pooled dot product.
    pub lambda: f64,
    pub reparam_enabled: bool,
    pub injections_enabled: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 64,
            ff_dim: 256,
            num_cls: 3,
            injection_layers: vec![2, 4],
            vocab_size: 512,
            max_seq_len: 32,
            lambda: 0.1,
            reparam_enabled: true,
            injections_enabled: true,
        }
    }
}

impl EncoderConfig {
    pub const LAYER_NORM_EPS: f64 = 1e-5;

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0
            || self.hidden_dim == 0
            || !self.hidden_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.ff_dim == 0 {
            return fail("ff_dim must be at least 1".into());
        }
        if self.num_cls == 0 {
            return fail("K must be at least 1".into());
        }
        if self.vocab_size <= self.num_cls {
            return fail(format!(
                "vocab_size {} leaves no room beyond {} CLS ids",
                self.vocab_size, self.num_cls
            ));
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !self.injection_layers.windows(2).all(|w| w[0] < w[1]) {
            return fail("injection_layers must be strictly increasing".into());
        }
        if self
            .injection_layers
            .iter()
            .any(|&l| l == 0 || l > self.num_layers)
        {
            return fail(format!(
                "injection_layers must lie in 1..={}",
                self.num_layers
            ));
        }
        if self.injection_layers.last() != Some(&self.num_layers) {
            return fail("injection_layers must contain the top layer".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Mean subtraction only applies with more than one CLS token.
    pub fn reparam_active(&self) -> bool {
        self.reparam_enabled && self.num_cls > 1
    }

    pub fn is_injection_layer(&self, layer: usize) -> bool {
        self.injection_layers.contains(&layer)
    }
}
