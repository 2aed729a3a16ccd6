//! The fusion model: visual and audio TCNs, channel concatenation, a
//! Transformer encoder and a per-frame MLP head.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear};
use crate::params::{ParamStore, Session};
use crate::task::Task;
use crate::tcn::{Tcn, TcnConfig};
use crate::tensor::{Float, Tensor};
use crate::tnsr;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub task: Task,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub visual_tcn: TcnConfig,
    pub audio_tcn: TcnConfig,
    pub encoder: EncoderConfig,
    pub mlp_hidden: usize,
    pub head_dropout: f64,
}

impl FusionConfig {
    /// Default architecture: 256 TCN channels per modality into a 512-wide
    /// encoder.
    pub fn new(task: Task, visual_dim: usize, audio_dim: usize) -> Self {
        FusionConfig {
            task,
            visual_dim,
            audio_dim,
            visual_tcn: TcnConfig::new(visual_dim, 256),
            audio_tcn: TcnConfig::new(audio_dim, 256),
            encoder: EncoderConfig::default(),
            mlp_hidden: 256,
            head_dropout: 0.3,
        }
    }

    /// Small configuration with the given TCN width and encoder width.
    pub fn small(task: Task, visual_dim: usize, audio_dim: usize, channels: usize, d_model: usize, layers: usize) -> Self {
        let mut c = Self::new(task, visual_dim, audio_dim);
        c.visual_tcn.channels = channels;
        c.audio_tcn.channels = channels;
        c.encoder.d_model = d_model;
        c.encoder.n_layers = layers;
        c.encoder.n_heads = if d_model.is_multiple_of(4) { 4 } else { 1 };
        c.encoder.ffn_dim = 2 * d_model;
        c.mlp_hidden = d_model;
        c
    }

    /// Sets every dropout probability in the model.
    pub fn set_dropout(&mut self, p: f64) {
        self.visual_tcn.dropout = p;
        self.audio_tcn.dropout = p;
        self.encoder.dropout = p;
        self.head_dropout = p;
    }

    pub fn validate(&self) -> Result<()> {
        if self.visual_dim == 0 || self.audio_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.visual_tcn.in_dim != self.visual_dim || self.audio_tcn.in_dim != self.audio_dim {
            return Err(Error::Config(format!(
                "tcn input dims {}/{} do not match feature dims {}/{}",
                self.visual_tcn.in_dim, self.audio_tcn.in_dim, self.visual_dim, self.audio_dim
            )));
        }
        self.visual_tcn.validate()?;
        self.audio_tcn.validate()?;
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", self.head_dropout)));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.visual_tcn.channels + self.audio_tcn.channels
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("task", self.task.to_string());
        kv("visual_dim", self.visual_dim.to_string());
        kv("audio_dim", self.audio_dim.to_string());
        for (p, t) in [("visual", &self.visual_tcn), ("audio", &self.audio_tcn)] {
            kv(&format!("{p}.channels"), t.channels.to_string());
            kv(&format!("{p}.kernel_size"), t.kernel_size.to_string());
            kv(
                &format!("{p}.dilations"),
                t.dilations.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            );
            kv(&format!("{p}.dropout"), t.dropout.to_string());
            kv(&format!("{p}.activation"), t.activation.name().to_string());
        }
        let e = &self.encoder;
        kv("encoder.d_model", e.d_model.to_string());
        kv("encoder.n_heads", e.n_heads.to_string());
        kv("encoder.n_layers", e.n_layers.to_string());
        kv("encoder.ffn_dim", e.ffn_dim.to_string());
        kv("encoder.dropout", e.dropout.to_string());
        kv("encoder.use_positional_encoding", e.use_positional_encoding.to_string());
        kv("encoder.max_len", e.max_len.to_string());
        kv("encoder.activation", e.activation.name().to_string());
        kv("encoder.layer_norm_eps", e.layer_norm_eps.to_string());
        kv("mlp_hidden", self.mlp_hidden.to_string());
        kv("head_dropout", self.head_dropout.to_string());
        s
    }

    /// Parses the output of [`FusionConfig::to_text`]. Every key is required.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = parse_key_values(text)?;
        let task: Task = take(&mut map, "task")?.parse()?;
        let visual_dim = parse(&mut map, "visual_dim")?;
        let audio_dim = parse(&mut map, "audio_dim")?;
        let mut c = FusionConfig::new(task, visual_dim, audio_dim);
        c.apply_overrides(&mut map)?;
        for k in REQUIRED_KEYS {
            if !text.lines().any(|l| l.split('=').next().map(str::trim) == Some(k)) {
                return Err(Error::Config(format!("config is missing key {k}")));
            }
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown config key {k}")));
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies and removes every architecture key present in `map`.
    pub fn apply_overrides(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        if let Some(v) = map.remove("task") {
            self.task = v.parse()?;
        }
        if map.contains_key("visual_dim") {
            self.visual_dim = parse(map, "visual_dim")?;
        }
        if map.contains_key("audio_dim") {
            self.audio_dim = parse(map, "audio_dim")?;
        }
        self.visual_tcn.in_dim = self.visual_dim;
        self.audio_tcn.in_dim = self.audio_dim;
        for (p, t) in [("visual", &mut self.visual_tcn), ("audio", &mut self.audio_tcn)] {
            opt(map, &format!("{p}.channels"), &mut t.channels)?;
            opt(map, &format!("{p}.kernel_size"), &mut t.kernel_size)?;
            if let Some(v) = map.remove(&format!("{p}.dilations")) {
                t.dilations = v
                    .split(',')
                    .map(|d| d.trim().parse().map_err(|_| bad(&format!("{p}.dilations"), &v)))
                    .collect::<Result<_>>()?;
            }
            opt(map, &format!("{p}.dropout"), &mut t.dropout)?;
            if let Some(v) = map.remove(&format!("{p}.activation")) {
                t.activation = Activation::parse(&v)?;
            }
        }
        let e = &mut self.encoder;
        opt(map, "encoder.d_model", &mut e.d_model)?;
        opt(map, "encoder.n_heads", &mut e.n_heads)?;
        opt(map, "encoder.n_layers", &mut e.n_layers)?;
        opt(map, "encoder.ffn_dim", &mut e.ffn_dim)?;
        opt(map, "encoder.dropout", &mut e.dropout)?;
        opt(map, "encoder.use_positional_encoding", &mut e.use_positional_encoding)?;
        opt(map, "encoder.max_len", &mut e.max_len)?;
        if let Some(v) = map.remove("encoder.activation") {
            e.activation = Activation::parse(&v)?;
        }
        opt(map, "encoder.layer_norm_eps", &mut e.layer_norm_eps)?;
        opt(map, "mlp_hidden", &mut self.mlp_hidden)?;
        opt(map, "head_dropout", &mut self.head_dropout)?;
        Ok(())
    }
}

const REQUIRED_KEYS: [&str; 24] = [
    "task",
    "visual_dim",
    "audio_dim",
    "visual.channels",
    "visual.kernel_size",
    "visual.dilations",
    "visual.dropout",
    "visual.activation",
    "audio.channels",
    "audio.kernel_size",
    "audio.dilations",
    "audio.dropout",
    "audio.activation",
    "encoder.d_model",
    "encoder.n_heads",
    "encoder.n_layers",
    "encoder.ffn_dim",
    "encoder.dropout",
    "encoder.use_positional_encoding",
    "encoder.max_len",
    "encoder.activation",
    "encoder.layer_norm_eps",
    "mlp_hidden",
    "head_dropout",
];

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(map)
}

fn bad(key: &str, v: &str) -> Error {
    Error::Config(format!("bad value for {key}: {v:?}"))
}

fn take(map: &mut BTreeMap<String, String>, key: &str) -> Result<String> {
    map.remove(key)
        .ok_or_else(|| Error::Config(format!("config is missing key {key}")))
}

fn parse<V: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<V> {
    let v = take(map, key)?;
    v.parse().map_err(|_| bad(key, &v))
}

pub(crate) fn opt<V: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str, slot: &mut V) -> Result<()> {
    if let Some(v) = map.remove(key) {
        *slot = v.parse().map_err(|_| bad(key, &v))?;
    }
    Ok(())
}

/// Channel-axis concatenation, visual columns first.
pub fn concat_features<T: Float>(g: &mut Graph<T>, visual: Var, audio: Var) -> Result<Var> {
    let (sv, sa) = (g.shape(visual).to_vec(), g.shape(audio).to_vec());
    if sv.len() != 2 || sa.len() != 2 || sv[0] != sa[0] {
        return Err(Error::shape("concat_features", &[&sv, &sa], "expected (T x c_v) and (T x c_a)"));
    }
    if sa[1] == 0 {
        return Ok(visual);
    }
    g.concat(&[visual, audio], 1)
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub visual: Tcn,
    pub audio: Tcn,
    /// Present when the concatenated width differs from `d_model`.
    pub projection: Option<Linear>,
    pub encoder: TransformerEncoder,
    pub hidden: Linear,
    pub output: Linear,
}

impl FusionModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new<T: Float>(config: FusionConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let visual = Tcn::new(&mut store, "visual_tcn", config.visual_tcn.clone(), &mut rng)?;
        let audio = Tcn::new(&mut store, "audio_tcn", config.audio_tcn.clone(), &mut rng)?;
        let d_model = config.encoder.d_model;
        let projection =
            (config.fused_dim() != d_model).then(|| Linear::new(&mut store, "input_proj", config.fused_dim(), d_model, &mut rng));
        let encoder = TransformerEncoder::new(&mut store, "encoder", config.encoder.clone(), &mut rng)?;
        let hidden = Linear::new(&mut store, "head.hidden", d_model, config.mlp_hidden, &mut rng);
        let output = Linear::new(&mut store, "head.output", config.mlp_hidden, config.task.out_dim(), &mut rng);
        Ok((
            FusionModel {
                config,
                visual,
                audio,
                projection,
                encoder,
                hidden,
                output,
            },
            store,
        ))
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    /// `(T x visual_dim), (T x audio_dim) -> (T x out_dim)`. VA outputs pass
    /// through tanh; EXPR and AU outputs are logits.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, visual: Var, audio: Var) -> Result<Var> {
        let (sv, sa) = (s.graph.shape(visual).to_vec(), s.graph.shape(audio).to_vec());
        if sv.len() != 2 || sv[1] != self.config.visual_dim || sv[0] == 0 {
            return Err(Error::shape("fuse_forward", &[&sv], format!("visual must be (T x {})", self.config.visual_dim)));
        }
        if sa.len() != 2 || sa[1] != self.config.audio_dim || sa[0] != sv[0] {
            return Err(Error::shape(
                "fuse_forward",
                &[&sv, &sa],
                format!("audio must be ({} x {})", sv[0], self.config.audio_dim),
            ));
        }
        let gv = self.visual.forward(s, visual)?;
        let ga = self.audio.forward(s, audio)?;
        let mut h = concat_features(&mut s.graph, gv, ga)?;
        if let Some(p) = &self.projection {
            h = p.forward(s, h)?;
        }
        let h = self.encoder.forward(s, h)?;
        let y = self.hidden.forward(s, h)?;
        let y = s.graph.relu(y)?;
        let y = s.dropout(y, self.config.head_dropout)?;
        let y = self.output.forward(s, y)?;
        match self.config.task {
            Task::Va => s.graph.tanh(y),
            Task::Expr | Task::Au => Ok(y),
        }
    }

    /// Eval-mode forward on plain tensors.
    pub fn predict<T: Float>(&self, params: &ParamStore<T>, visual: Tensor<T>, audio: Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::inference(params);
        let v = s.input(visual);
        let a = s.input(audio);
        let y = self.forward(&mut s, v, a)?;
        Ok(s.graph.value(y).clone())
    }
}

pub const PARAMS_FILE: &str = "params.tnsr";
pub const CONFIG_FILE: &str = "config.txt";

/// Writes `params.tnsr` and `config.txt` into `dir`.
pub fn save_checkpoint<T: Float>(dir: &Path, config: &FusionConfig, params: &ParamStore<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    tnsr::write(&dir.join(PARAMS_FILE), &params.named_tensors())?;
    let p = dir.join(CONFIG_FILE);
    std::fs::write(&p, config.to_text()).map_err(|e| Error::io(&p, e))
}

/// Rebuilds the model from `config.txt` and loads `params.tnsr`, checking
/// that names and shapes agree with the config.
pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<(FusionModel, ParamStore<T>)> {
    let p = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let config = FusionConfig::from_text(&text)?;
    let (model, mut params) = FusionModel::new::<T>(config, 0)?;
    let named = tnsr::read(&dir.join(PARAMS_FILE))?;
    params
        .load_named(&named)
        .map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    Ok((model, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;

    fn tiny(task: Task) -> FusionConfig {
        let mut c = FusionConfig::small(task, 4, 3, 4, 8, 1);
        c.encoder.n_heads = 2;
        c
    }

    #[test]
    fn concat_orders_visual_first() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let a = g.constant(Tensor::from_f64(&[3, 1], &[7., 8., 9.]).unwrap());
        let c = concat_features(&mut g, v, a).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 7., 3., 4., 8., 5., 6., 9.]);
        let empty = g.constant(Tensor::zeros(&[3, 0]));
        assert_eq!(concat_features(&mut g, v, empty).unwrap(), v);
        let short = g.constant(Tensor::zeros(&[2, 1]));
        assert!(concat_features(&mut g, v, short).is_err());
    }

    #[test]
    fn output_shapes_per_task() {
        for task in Task::ALL {
            let (m, p) = FusionModel::new::<f64>(tiny(task), 1).unwrap();
            let y = m.predict(&p, Tensor::ones(&[6, 4]), Tensor::ones(&[6, 3])).unwrap();
            assert_eq!(y.shape(), &[6, task.out_dim()]);
        }
        let (m, p) = FusionModel::new::<f64>(tiny(Task::Va), 1).unwrap();
        assert!(m.predict(&p, Tensor::ones(&[6, 5]), Tensor::ones(&[6, 3])).is_err());
        assert!(m.predict(&p, Tensor::ones(&[6, 4]), Tensor::ones(&[5, 3])).is_err());
    }

    #[test]
    fn va_outputs_are_bounded() {
        let (m, mut p) = FusionModel::new::<f64>(tiny(Task::Va), 2).unwrap();
        let id = p.id("head.output.bias").unwrap();
        p.get_mut(id).data_mut().copy_from_slice(&[50.0, -50.0]);
        let x = Tensor::full(&[4, 4], 1e3);
        let y = m.predict(&p, x, Tensor::full(&[4, 3], -1e3)).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1.0 && v.is_finite()));
    }

    #[test]
    fn projection_only_when_widths_differ() {
        let (m, _) = FusionModel::new::<f32>(tiny(Task::Va), 0).unwrap();
        assert!(m.projection.is_none());
        let mut c = tiny(Task::Va);
        c.encoder.d_model = 12;
        c.encoder.n_heads = 3;
        let (m, _) = FusionModel::new::<f32>(c, 0).unwrap();
        assert!(m.projection.is_some());
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_mode_uses_dropout() {
        let (m, p) = FusionModel::new::<f32>(tiny(Task::Au), 3).unwrap();
        let run = |mode: Mode, seed: u64| {
            let mut s = Session::new(&p, mode, seed);
            let v = s.input(Tensor::from_f64(&[5, 4], &(0..20).map(|i| i as f64 / 7.0).collect::<Vec<_>>()).unwrap());
            let a = s.input(Tensor::ones(&[5, 3]));
            let y = m.forward(&mut s, v, a).unwrap();
            s.graph.value(y).data().to_vec()
        };
        assert_eq!(run(Mode::Eval, 1), run(Mode::Eval, 2));
        assert_ne!(run(Mode::Train, 1), run(Mode::Eval, 1));
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = tiny(Task::Expr);
        c.visual_tcn.dilations = vec![1, 3];
        c.encoder.activation = Activation::Gelu;
        let back = FusionConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let missing = c.to_text().replace("mlp_hidden=8\n", "");
        assert!(FusionConfig::from_text(&missing).is_err());
        let unknown = format!("{}extra=1\n", c.to_text());
        assert!(FusionConfig::from_text(&unknown).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let (m, p) = FusionModel::new::<f32>(tiny(Task::Va), 5).unwrap();
        save_checkpoint(dir.path(), &m.config, &p).unwrap();
        let (m2, p2) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(m2.config, m.config);
        for (a, b) in p.entries().iter().zip(p2.entries()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }

        // a config that disagrees with the stored parameters
        let mut other = m.config.clone();
        other.mlp_hidden = 16;
        std::fs::write(dir.path().join(CONFIG_FILE), other.to_text()).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
