//! Parameter storage and the per-forward-pass [`Session`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Every learnable tensor of a model, addressable by hierarchical name.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].value)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrites every parameter from `named`, which must contain exactly
    /// the same names with the same shapes.
    pub fn load_named<U: Float>(&mut self, named: &[(String, Tensor<U>)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: model has {}, file has {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = *self
                .index
                .get(name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name}")))?;
            let e = &mut self.entries[i];
            if e.value.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "{name}: shape {:?} does not match model shape {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss did not reach.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for g in self.grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }
}

/// One forward (and optionally backward) pass: a fresh graph, lazily bound
/// parameter leaves, the train/eval mode and the dropout RNG.
pub struct Session<'p, T: Float> {
    pub graph: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    rng: ChaCha8Rng,
}

impl<'p, T: Float> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            track_grads: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Eval mode without gradient tracking.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut s = Self::new(params, Mode::Eval, 0);
        s.track_grads = false;
        s
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.graph = std::mem::take(&mut self.graph).with_strict(strict);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.params.get(id).clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn dropout(&mut self, x: Var, p_drop: f64) -> Result<Var> {
        dropout(&mut self.graph, x, p_drop, self.mode, &mut self.rng)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.graph.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.graph.grad(v).cloned()))
            .collect();
        Ok(Gradients { grads })
    }
}

/// Inverted dropout: identity in eval mode; in train mode each element is
/// zeroed with probability `p_drop` and survivors scaled by `1 / (1 - p_drop)`.
pub fn dropout<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    p_drop: f64,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p_drop}")));
    }
    if mode == Mode::Eval || p_drop == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - p_drop));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.random::<f64>() < p_drop { T::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mask_apply(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[10]));
        assert_eq!(dropout(&mut g, x, 0.3, Mode::Eval, &mut rng).unwrap(), x);
        let y = dropout(&mut g, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        assert!(dropout(&mut g, x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(&mut g, x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[100_000]));
        let y = dropout(&mut g, x, 0.3, Mode::Train, &mut rng).unwrap();
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64 / v.len() as f64;
        assert!((zeros - 0.3).abs() < 0.01);
    }

    #[test]
    fn dropout_is_seed_deterministic() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::ones(&[64]));
            let y = dropout(&mut g, x, 0.5, Mode::Train, &mut rng).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut grads = Gradients {
            grads: vec![
                Some(Tensor::<f64>::from_f64(&[2], &[3.0, 0.0]).unwrap()),
                None,
                Some(Tensor::from_f64(&[1], &[-4.0]).unwrap()),
            ],
        };
        let before = grads.clip_global_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
        let g0 = grads.grads[0].as_ref().unwrap().data();
        let g2 = grads.grads[2].as_ref().unwrap().data();
        assert!((g0[0] - 0.6).abs() < 1e-15 && g0[1] == 0.0);
        assert!((g2[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn load_named_validates() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[2, 2]), true);
        let wrong_shape = vec![("w".to_string(), Tensor::<f32>::zeros(&[4]))];
        assert!(s.load_named(&wrong_shape).is_err());
        let wrong_name = vec![("v".to_string(), Tensor::<f32>::zeros(&[2, 2]))];
        assert!(s.load_named(&wrong_name).is_err());
        let ok = vec![("w".to_string(), Tensor::<f32>::ones(&[2, 2]))];
        s.load_named(&ok).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).data(), &[1.0; 4]);
    }
}
