//! Parameterized layers built from autograd primitives.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Float>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

fn uniform<T: Float>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `y = x W + b` over the trailing dimension. `W` is `(in x out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), false);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(Error::shape(
                "linear",
                &[&shape],
                format!("trailing dimension must be {}", self.in_dim),
            ));
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let g = &mut s.graph;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim])? };
        let y = g.matmul(flat, w)?;
        let y = g.add(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.out_dim;
            g.reshape(y, &out)
        }
    }
}

/// Causal dilated 1-D convolution over `(T x C_in)` sequences. The input is
/// left-padded with `(k - 1) * dilation` zeros so the output keeps length `T`
/// and step `t` only sees inputs at steps `<= t`.
#[derive(Clone, Debug)]
pub struct CausalConv1d {
    /// `(C_out x C_in x k)`.
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl CausalConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel_size < 1 {
            return Err(Error::Config("kernel_size must be >= 1".into()));
        }
        if dilation < 1 {
            return Err(Error::Config(format!("dilation must be >= 1, got {dilation}")));
        }
        // He-uniform
        let bound = (6.0 / (in_channels * kernel_size).max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[out_channels, in_channels, kernel_size], bound, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), false);
        Ok(CausalConv1d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel_size,
            dilation,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("conv1d_causal", &[&shape], "expected non-empty (T x C_in)"));
        }
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let g = &mut s.graph;
        let left = (self.kernel_size - 1) * self.dilation;
        let padded = if left > 0 { g.pad(x, 0, left, 0, 0.0)? } else { x };
        let y = g.conv1d(padded, w, 1, self.dilation)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        LayerNorm {
            gamma,
            beta,
            dim,
            eps,
        }
    }

    /// Normalizes each position over the trailing dimension (population
    /// variance), then scales by gamma and shifts by beta.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(Error::shape(
                "layer_norm",
                &[&shape],
                format!("trailing dimension must be {}", self.dim),
            ));
        }
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        let g = &mut s.graph;
        let axis = shape.len() - 1;
        let mean = g.mean(x, Some(axis), true)?;
        let mean = g.broadcast_to(mean, &shape)?;
        let centered = g.sub(x, mean)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean(sq, Some(axis), true)?;
        let eps = g.scalar(self.eps);
        let var = g.add(var, eps)?;
        // 1/sqrt(v) = exp(-log(v)/2)
        let log_var = g.log(var)?;
        let half = g.scale(log_var, -0.5)?;
        let inv_std = g.exp(half)?;
        let inv_std = g.broadcast_to(inv_std, &shape)?;
        let normed = g.mul(centered, inv_std)?;
        let scaled = g.mul(normed, gamma)?;
        g.add(scaled, beta)
    }
}

/// Unmasked multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub d_model: usize,
    pub n_heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(MultiHeadSelfAttention {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng),
            d_model,
            n_heads,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let head_dim = self.d_model / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let g = &mut s.graph;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let start = h * head_dim;
            let qh = g.slice(q, 1, start, head_dim)?;
            let kh = g.slice(k, 1, start, head_dim)?;
            let vh = g.slice(v, 1, start, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax(scores, 1)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        self.output.forward(s, merged)
    }
}

/// Fixed sin/cos position table: `pe[t, 2i] = sin(t / 10000^(2i/d))`,
/// `pe[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn sinusoidal_positional_encoding<T: Float>(len: usize, d_model: usize) -> Result<Tensor<T>> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    let mut data = Vec::with_capacity(len * d_model);
    for t in 0..len {
        for i in 0..d_model / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
            let angle = t as f64 * freq;
            data.push(T::of(angle.sin()));
            data.push(T::of(angle.cos()));
        }
    }
    Tensor::new(vec![len, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 2, 2, &mut rng());
        *store.get_mut(lin.weight) = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let mut s = Session::inference(&store);
        let x = s.input(Tensor::from_f64(&[1, 2], &[4., -5.]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.value(y).data(), &[4., -5.]);

        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 2, 1, &mut rng());
        *store.get_mut(lin.weight) = Tensor::from_f64(&[2, 1], &[1., 1.]).unwrap();
        *store.get_mut(lin.bias) = Tensor::from_f64(&[1], &[0.5]).unwrap();
        let mut s = Session::inference(&store);
        let x = s.input(Tensor::from_f64(&[2], &[1., 2.]).unwrap());
        let x = s.graph.reshape(x, &[1, 2]).unwrap();
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.value(y).data(), &[3.5]);
    }

    #[test]
    fn linear_shapes() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 5, 8, &mut rng());
        let mut s = Session::inference(&store);
        let x = s.input(Tensor::ones(&[2, 3, 5]));
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[2, 3, 8]);
        let bad = s.input(Tensor::ones(&[3, 4]));
        assert!(lin.forward(&mut s, bad).is_err());
    }

    fn conv_with(kernel: &[f64], dilation: usize, x: &[f64]) -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        let conv = CausalConv1d::new(&mut store, "c", 1, 1, kernel.len(), dilation, &mut rng()).unwrap();
        *store.get_mut(conv.weight) = Tensor::from_f64(&[1, 1, kernel.len()], kernel).unwrap();
        let mut s = Session::inference(&store);
        let xv = s.input(Tensor::from_f64(&[x.len(), 1], x).unwrap());
        let y = conv.forward(&mut s, xv).unwrap();
        s.graph.value(y).to_f64_vec()
    }

    #[test]
    fn causal_conv_hand_oracles() {
        assert_eq!(conv_with(&[1.0], 1, &[1., 2., 3.]), vec![1., 2., 3.]);
        // y[t] = x[t-1] + x[t] with x[-1] = 0
        assert_eq!(conv_with(&[1.0, 1.0], 1, &[1., 2., 3.]), vec![1., 3., 5.]);
        // y[t] = x[t-2] + x[t]
        assert_eq!(conv_with(&[1.0, 1.0], 2, &[1., 2., 3., 4.]), vec![1., 2., 4., 6.]);
    }

    #[test]
    fn causal_conv_errors() {
        let mut store = ParamStore::<f64>::new();
        assert!(CausalConv1d::new(&mut store, "c", 1, 1, 2, 0, &mut rng()).is_err());
        let conv = CausalConv1d::new(&mut store, "d", 1, 1, 2, 1, &mut rng()).unwrap();
        let mut s = Session::inference(&store);
        let empty = s.input(Tensor::zeros(&[0, 1]));
        assert!(conv.forward(&mut s, empty).is_err());
    }

    fn norm_of(x: &[f64], gamma: f64, beta: f64, eps: f64) -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", x.len(), eps);
        *store.get_mut(ln.gamma) = Tensor::full(&[x.len()], gamma);
        *store.get_mut(ln.beta) = Tensor::full(&[x.len()], beta);
        let mut s = Session::inference(&store);
        let xv = s.input(Tensor::from_f64(&[1, x.len()], x).unwrap());
        let y = ln.forward(&mut s, xv).unwrap();
        s.graph.value(y).to_f64_vec()
    }

    #[test]
    fn layer_norm_cases() {
        assert_eq!(norm_of(&[2.5; 4], 1.0, 0.0, 1e-5), vec![0.0; 4]);
        // mean 1, population variance 2/3
        let y = norm_of(&[0., 1., 2.], 1.0, 0.0, 1e-12);
        let e = 1.0 / (2.0f64 / 3.0).sqrt();
        for (a, b) in y.iter().zip([-e, 0.0, e]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        assert!((e - 1.2247).abs() < 1e-4);
        assert_eq!(norm_of(&[3., -1., 7.], 0.0, 0.25, 1e-5), vec![0.25; 3]);
    }

    #[test]
    fn attention_single_position_returns_value_row() {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadSelfAttention::new(&mut store, "a", 3, 1, &mut rng()).unwrap();
        let eye = Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        for lin in [&attn.query, &attn.key, &attn.value, &attn.output] {
            *store.get_mut(lin.weight) = eye.clone();
        }
        let mut s = Session::inference(&store);
        let x = s.input(Tensor::from_f64(&[1, 3], &[0.3, -2.0, 5.0]).unwrap());
        let y = attn.forward(&mut s, x).unwrap();
        let out = s.graph.value(y).to_f64_vec();
        for (a, b) in out.iter().zip([0.3, -2.0, 5.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_identical_rows_give_identical_outputs() {
        let mut store = ParamStore::<f64>::new();
        let attn = MultiHeadSelfAttention::new(&mut store, "a", 4, 2, &mut rng()).unwrap();
        let mut s = Session::inference(&store);
        let x = s.input(Tensor::from_f64(&[2, 4], &[0.1, 0.2, -0.3, 0.4, 0.1, 0.2, -0.3, 0.4]).unwrap());
        let y = attn.forward(&mut s, x).unwrap();
        let v = s.graph.value(y);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::<f64>::new();
        assert!(matches!(
            MultiHeadSelfAttention::new(&mut store, "a", 6, 4, &mut rng()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn positional_encoding_values() {
        let pe = sinusoidal_positional_encoding::<f64>(50, 6).unwrap();
        assert_eq!(pe.row(0), &[0., 1., 0., 1., 0., 1.]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for t in [1usize, 7, 33] {
            assert!((pe.get(&[t, 0]) - (t as f64).sin()).abs() < 1e-15);
            assert!((pe.get(&[t, 1]) - (t as f64).cos()).abs() < 1e-15);
        }
        assert!(sinusoidal_positional_encoding::<f64>(4, 5).is_err());
    }

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 2, 2, &mut rng());
        let mut s = Session::new(&store, Mode::Train, 0);
        let a = s.param(lin.weight);
        let b = s.param(lin.weight);
        assert_eq!(a, b);
    }
}
