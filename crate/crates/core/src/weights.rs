//! Named parameter storage, initialization and graph binding.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{CompressionKind, ModelConfig};
use crate::error::{Error, Result};
use crate::io::checkpoint::CheckpointError;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Vision,
    Projector,
    Lm,
}

impl Component {
    /// Component from the parameter-name prefix, e.g. `projector.mlp.fc1.weight`.
    pub fn of(name: &str) -> Option<Component> {
        match name.split('.').next()? {
            "vision" => Some(Component::Vision),
            "projector" => Some(Component::Projector),
            "lm" => Some(Component::Lm),
            _ => None,
        }
    }
}

/// Every tensor name a configuration requires, with its shape.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut s = BTreeMap::new();
    let mut put = |name: String, shape: Vec<usize>| {
        s.insert(name, shape);
    };

    let v = &cfg.vision;
    let dv = v.d_vision;
    put("vision.patch_embed.weight".into(), vec![v.patch_dim(), dv]);
    put("vision.patch_embed.bias".into(), vec![dv]);
    put("vision.pos_embed".into(), vec![v.seq_len(), dv]);
    for l in 0..v.n_layers {
        let p = format!("vision.layers.{l}");
        for ln in ["ln1", "ln2"] {
            put(format!("{p}.{ln}.gamma"), vec![dv]);
            put(format!("{p}.{ln}.beta"), vec![dv]);
        }
        for proj in ["q", "k", "v", "o"] {
            put(format!("{p}.attn.w{proj}"), vec![dv, dv]);
            put(format!("{p}.attn.b{proj}"), vec![dv]);
        }
        put(format!("{p}.mlp.fc1.weight"), vec![dv, v.mlp_dim]);
        put(format!("{p}.mlp.fc1.bias"), vec![v.mlp_dim]);
        put(format!("{p}.mlp.fc2.weight"), vec![v.mlp_dim, dv]);
        put(format!("{p}.mlp.fc2.bias"), vec![dv]);
    }

    let r = cfg.strategy.ratio;
    put("projector.norm.gamma".into(), vec![dv]);
    put("projector.norm.beta".into(), vec![dv]);
    let mlp_in = match cfg.strategy.kind {
        CompressionKind::Reshape => r * dv,
        CompressionKind::Conv1d => {
            put("projector.conv.weight".into(), vec![dv, dv, r]);
            dv
        }
        CompressionKind::Conv2d => {
            put("projector.conv.weight".into(), vec![dv, dv, r, 1]);
            dv
        }
    };
    put("projector.mlp.fc1.weight".into(), vec![mlp_in, cfg.d_proj]);
    put("projector.mlp.fc1.bias".into(), vec![cfg.d_proj]);
    put("projector.mlp.fc2.weight".into(), vec![cfg.d_proj, cfg.lm.d_lm]);
    put("projector.mlp.fc2.bias".into(), vec![cfg.lm.d_lm]);

    let lm = &cfg.lm;
    let d = lm.d_lm;
    put("lm.embed".into(), vec![lm.vocab_size, d]);
    for l in 0..lm.n_layers {
        let p = format!("lm.layers.{l}");
        put(format!("{p}.attn_norm.gamma"), vec![d]);
        for proj in ["wq", "wk", "wv", "wo"] {
            put(format!("{p}.attn.{proj}"), vec![d, d]);
        }
        put(format!("{p}.mlp_norm.gamma"), vec![d]);
        put(format!("{p}.mlp.gate"), vec![d, lm.d_ff]);
        put(format!("{p}.mlp.up"), vec![d, lm.d_ff]);
        put(format!("{p}.mlp.down"), vec![lm.d_ff, d]);
    }
    put("lm.final_norm.gamma".into(), vec![d]);
    put("lm.head".into(), vec![d, lm.vocab_size]);
    s
}

/// Standard deviation used to initialize `name`; `None` for constants
/// (norm gains are one, biases and shifts zero).
fn init_std(name: &str, shape: &[usize], cfg: &ModelConfig) -> Option<f64> {
    if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with("bias") || is_attn_bias(name) {
        return None;
    }
    match Component::of(name) {
        Some(Component::Vision) | Some(Component::Projector) => Some(0.02),
        Some(Component::Lm) => {
            let d = cfg.lm.d_lm as f64;
            Some(match name {
                // Small next to the image prefix, which the projector has to dominate.
                "lm.embed" => 0.1,
                // Keeps initial logits near uniform while leaving the head
                // enough range to be steered by the image prefix.
                "lm.head" => 0.5 / d.sqrt(),
                _ => 1.0 / (shape[0] as f64).sqrt(),
            })
        }
        None => Some(0.02),
    }
}

fn is_attn_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|last| matches!(last, "bq" | "bk" | "bv" | "bo"))
}

/// Stable per-tensor seed so that each tensor's initial values depend only
/// on `(seed, name)`, never on which other tensors exist.
fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// An ordered map from parameter name to tensor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Weights<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Weights<T> {
    pub fn new() -> Self {
        Weights {
            tensors: BTreeMap::new(),
        }
    }

    /// Randomly initializes every tensor the configuration requires.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut w = Weights::new();
        for (name, shape) in expected_shapes(cfg) {
            let t = init_tensor(&name, &shape, cfg, seed);
            w.tensors.insert(name, t);
        }
        w
    }

    /// Re-initializes the projector for the configuration's strategy,
    /// leaving vision and LM tensors untouched.
    pub fn reinit_projector(&mut self, cfg: &ModelConfig, seed: u64) {
        self.tensors.retain(|name, _| Component::of(name) != Some(Component::Projector));
        for (name, shape) in expected_shapes(cfg) {
            if Component::of(&name) == Some(Component::Projector) {
                let t = init_tensor(&name, &shape, cfg, seed);
                self.tensors.insert(name, t);
            }
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn component_param_count(&self, c: Component) -> usize {
        self.iter()
            .filter(|(n, _)| Component::of(n) == Some(c))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        Weights {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the tensor set and shapes are exactly those `cfg` requires.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), CheckpointError> {
        let expected = expected_shapes(cfg);
        let missing: Vec<String> = expected.keys().filter(|k| !self.tensors.contains_key(*k)).cloned().collect();
        let unexpected: Vec<String> = self.tensors.keys().filter(|k| !expected.contains_key(*k)).cloned().collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(CheckpointError::TensorSet { missing, unexpected });
        }
        for (name, shape) in &expected {
            let got = self.tensors[name].shape();
            if got != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: got.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Bit-level equality of every tensor.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}

fn init_tensor<T: Real>(name: &str, shape: &[usize], cfg: &ModelConfig, seed: u64) -> Tensor<T> {
    match init_std(name, shape, cfg) {
        Some(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, name));
            Tensor::randn(shape.to_vec(), std, &mut rng)
        }
        None if name.ends_with(".gamma") => Tensor::ones(shape.to_vec()),
        None => Tensor::zeros(shape.to_vec()),
    }
}

/// Which weights receive gradients when bound into a graph.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    Nothing,
    Everything,
    Only(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

/// A graph plus lazily bound weights.
///
/// Each named weight enters the graph at most once, as a borrowed leaf.
pub struct Ctx<'w, T: Real = f32> {
    pub g: Graph<'w, T>,
    weights: &'w Weights<T>,
    trainable: Trainable<'w>,
    bound: HashMap<&'w str, Var>,
}

impl<'w, T: Real> Ctx<'w, T> {
    pub fn new(weights: &'w Weights<T>, trainable: Trainable<'w>) -> Self {
        let g = match trainable {
            Trainable::Nothing => Graph::no_grad(),
            _ => Graph::new(),
        };
        Ctx {
            g,
            weights,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// No gradients anywhere.
    pub fn inference(weights: &'w Weights<T>) -> Self {
        Self::new(weights, Trainable::Nothing)
    }

    pub fn weights(&self) -> &'w Weights<T> {
        self.weights
    }

    /// The graph handle for weight `name`, binding it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .weights
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Checkpoint(CheckpointError::MissingTensor(name.to_string())))?;
        let v = self.g.param(t, self.trainable.contains(key));
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Weights bound so far, with their graph handles.
    pub fn bound(&self) -> impl Iterator<Item = (&'w str, Var)> + '_ {
        self.bound.iter().map(|(&k, &v)| (k, v))
    }

    /// `x · W (+ b)` for weight names `w` and optional bias `b`.
    pub fn linear(&mut self, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let wv = self.p(w)?;
        let y = self.g.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.p(b)?;
                self.g.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }
}
