//! Temporal convolutional encoder: residual blocks of dilated causal convolutions.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Activation, CausalConv1d};
use crate::params::{ParamStore, Session};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct TcnConfig {
    pub in_dim: usize,
    pub channels: usize,
    pub kernel_size: usize,
    /// One entry per temporal block.
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub activation: Activation,
}

impl TcnConfig {
    pub fn new(in_dim: usize, channels: usize) -> Self {
        TcnConfig {
            in_dim,
            channels,
            kernel_size: 3,
            dilations: vec![1, 2, 4],
            dropout: 0.3,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.channels == 0 || self.kernel_size == 0 {
            return Err(Error::Config("tcn dimensions must be positive".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config(format!(
                "tcn dilations must be non-empty and >= 1, got {:?}",
                self.dilations
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("tcn dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of past frames (including the current one) that can influence
    /// an output frame.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// `conv -> act -> dropout -> conv -> act -> dropout`, plus a residual that is
/// the identity or a kernel-1 projection when channel counts differ.
#[derive(Clone, Debug)]
pub struct TemporalBlock {
    pub conv1: CausalConv1d,
    pub conv2: CausalConv1d,
    pub downsample: Option<CausalConv1d>,
    pub dropout: f64,
    pub activation: Activation,
}

impl TemporalBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        channels: usize,
        kernel_size: usize,
        dilation: usize,
        dropout: f64,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv1 = CausalConv1d::new(store, &format!("{name}.conv1"), in_channels, channels, kernel_size, dilation, rng)?;
        let conv2 = CausalConv1d::new(store, &format!("{name}.conv2"), channels, channels, kernel_size, dilation, rng)?;
        let downsample = (in_channels != channels)
            .then(|| CausalConv1d::new(store, &format!("{name}.downsample"), in_channels, channels, 1, 1, rng))
            .transpose()?;
        Ok(TemporalBlock {
            conv1,
            conv2,
            downsample,
            dropout,
            activation,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(s, x)?;
        let h = self.activation.apply(&mut s.graph, h)?;
        let h = s.dropout(h, self.dropout)?;
        let h = self.conv2.forward(s, h)?;
        let h = self.activation.apply(&mut s.graph, h)?;
        let h = s.dropout(h, self.dropout)?;
        let residual = match &self.downsample {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        s.graph.add(h, residual)
    }
}

#[derive(Clone, Debug)]
pub struct Tcn {
    pub config: TcnConfig,
    pub blocks: Vec<TemporalBlock>,
}

impl Tcn {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, config: TcnConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.dilations.len());
        let mut in_ch = config.in_dim;
        for (i, &d) in config.dilations.iter().enumerate() {
            blocks.push(TemporalBlock::new(
                store,
                &format!("{name}.block{i}"),
                in_ch,
                config.channels,
                config.kernel_size,
                d,
                config.dropout,
                config.activation,
                rng,
            )?);
            in_ch = config.channels;
        }
        Ok(Tcn { config, blocks })
    }

    /// `(T x in_dim) -> (T x channels)`.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x);
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.in_dim {
            return Err(Error::shape(
                "tcn",
                &[shape],
                format!("expected (T >= 1) x {}", self.config.in_dim),
            ));
        }
        self.blocks.iter().try_fold(x, |h, b| b.forward(s, h))
    }
}
