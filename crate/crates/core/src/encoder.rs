//! Pre-norm Transformer encoder used for intra-segment fusion.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positional_encoding, Activation, LayerNorm, Linear, MultiHeadSelfAttention};
use crate::params::{ParamStore, Session};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub use_positional_encoding: bool,
    /// Longest segment the encoder accepts.
    pub max_len: usize,
    pub activation: Activation,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 512,
            n_heads: 8,
            n_layers: 4,
            ffn_dim: 1024,
            dropout: 0.3,
            use_positional_encoding: true,
            max_len: 1024,
            activation: Activation::Relu,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.use_positional_encoding && !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("positional encoding needs an even d_model".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attention: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub dropout: f64,
    pub activation: Activation,
}

impl EncoderLayer {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.d_model, cfg.layer_norm_eps),
            attention: MultiHeadSelfAttention::new(store, &format!("{name}.attention"), cfg.d_model, cfg.n_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.d_model, cfg.layer_norm_eps),
            ff1: Linear::new(store, &format!("{name}.ff1"), cfg.d_model, cfg.ffn_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_dim, cfg.d_model, rng),
            dropout: cfg.dropout,
            activation: cfg.activation,
        })
    }

    /// `x + drop(attn(norm1(x)))`, then `x + drop(ff2(act(ff1(norm2(x)))))`.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let a = self.norm1.forward(s, x)?;
        let a = self.attention.forward(s, a)?;
        let a = s.dropout(a, self.dropout)?;
        let x = s.graph.add(x, a)?;

        let f = self.norm2.forward(s, x)?;
        let f = self.ff1.forward(s, f)?;
        let f = self.activation.apply(&mut s.graph, f)?;
        let f = self.ff2.forward(s, f)?;
        let f = s.dropout(f, self.dropout)?;
        s.graph.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { config, layers })
    }

    /// `(T x d_model) -> (T x d_model)`. Each call sees a single segment and
    /// keeps no state between calls.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model || shape[0] == 0 {
            return Err(Error::shape(
                "encoder",
                &[&shape],
                format!("expected (T >= 1) x {}", self.config.d_model),
            ));
        }
        if shape[0] > self.config.max_len {
            return Err(Error::Invalid(format!(
                "segment length {} exceeds encoder max_len {}",
                shape[0], self.config.max_len
            )));
        }
        let mut h = x;
        if self.config.use_positional_encoding {
            let pe = sinusoidal_positional_encoding(shape[0], self.config.d_model)?;
            let pe = s.input(pe);
            h = s.graph.add(h, pe)?;
        }
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        Ok(h)
    }
}
