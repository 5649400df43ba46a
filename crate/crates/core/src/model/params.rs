//! Named parameter collection for the whole network.

use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{Gradients, Graph, Scalar, Tensor, Var};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    /// `N(0, 1/fan_in)` with `fan_in` the first extent.
    FanIn,
    Zeros,
    Ones,
}

/// Parameters in a fixed registration order. All linear weights are stored
/// `[in, out]` and applied as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    tensors: IndexMap<String, Arc<Tensor<T>>>,
}

/// Gradient per parameter name.
pub type ParamGrads<T = f32> = IndexMap<String, Tensor<T>>;

const VIT_STD: f64 = 0.02;

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut v = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| v.push((name, shape, init));
    let (d, m, n) = (cfg.dim, cfg.num_expert, cfg.num_patches());
    let db = cfg.bilinear_dim;

    add("vit.patch_proj".into(), vec![cfg.patch_dim(), d], Init::Normal(VIT_STD));
    add("vit.expert_tokens".into(), vec![m, d], Init::Normal(VIT_STD));
    add("vit.pos_emb".into(), vec![n + m, d], Init::Normal(VIT_STD));
    add("vit.seg_emb".into(), vec![2, d], Init::Normal(VIT_STD));
    for l in 0..cfg.vit_layers {
        let p = format!("vit.layer{l}");
        add(format!("{p}.ln1.gain"), vec![d], Init::Ones);
        add(format!("{p}.ln1.bias"), vec![d], Init::Zeros);
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("{p}.attn.{w}"), vec![d, d], Init::Normal(VIT_STD));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            add(format!("{p}.attn.{b}"), vec![d], Init::Zeros);
        }
        add(format!("{p}.ln2.gain"), vec![d], Init::Ones);
        add(format!("{p}.ln2.bias"), vec![d], Init::Zeros);
        add(format!("{p}.mlp.w1"), vec![d, 4 * d], Init::Normal(VIT_STD));
        add(format!("{p}.mlp.b1"), vec![4 * d], Init::Zeros);
        add(format!("{p}.mlp.w2"), vec![4 * d, d], Init::Normal(VIT_STD));
        add(format!("{p}.mlp.b2"), vec![d], Init::Zeros);
    }
    add("embed.weight".into(), vec![d, db], Init::FanIn);
    add("embed.bias".into(), vec![db], Init::Zeros);

    let eba = |prefix: &str, add: &mut dyn FnMut(String, Vec<usize>, Init)| {
        for w in ["w_k", "w_v", "w_qk", "w_qv"] {
            add(format!("{prefix}.{w}"), vec![db, db], Init::FanIn);
        }
        add(format!("{prefix}.w_bk"), vec![db, cfg.mid_dim], Init::FanIn);
        add(format!("{prefix}.w_s"), vec![cfg.mid_dim, 1], Init::FanIn);
        add(format!("{prefix}.w_c"), vec![cfg.mid_dim, db], Init::FanIn);
    };
    if cfg.use_bilinear_encoder {
        for layer in 0..cfg.enc_layers {
            let p = format!("benc.layer{layer}");
            eba(&format!("{p}.eba"), &mut add);
            add(format!("{p}.fuse"), vec![2 * db, db], Init::FanIn);
            add(format!("{p}.ln.gain"), vec![db], Init::Ones);
            add(format!("{p}.ln.bias"), vec![db], Init::Zeros);
        }
    }
    add("dec.word_emb".into(), vec![cfg.vocab_size, db], Init::Normal(VIT_STD));
    add("dec.pos_emb".into(), vec![cfg.t_max, db], Init::Normal(VIT_STD));
    for i in 0..cfg.dec_layers {
        let p = format!("dec.layer{i}");
        for a in ["adjust_word", "adjust_vis"] {
            add(format!("{p}.{a}.w_e"), vec![db, db], Init::FanIn);
            add(format!("{p}.{a}.w_v"), vec![db, db], Init::FanIn);
        }
        eba(&format!("{p}.mask_eba"), &mut add);
        add(format!("{p}.ln_mid.gain"), vec![db], Init::Ones);
        add(format!("{p}.ln_mid.bias"), vec![db], Init::Zeros);
        eba(&format!("{p}.cross_eba"), &mut add);
        add(format!("{p}.ln_cross.gain"), vec![db], Init::Ones);
        add(format!("{p}.ln_cross.bias"), vec![db], Init::Zeros);
        add(format!("{p}.fuse"), vec![2 * db, db], Init::FanIn);
        add(format!("{p}.ln_out.gain"), vec![db], Init::Ones);
        add(format!("{p}.ln_out.bias"), vec![db], Init::Zeros);
    }
    add("dec.out.weight".into(), vec![db, cfg.vocab_size], Init::Normal(VIT_STD));
    add("dec.out.bias".into(), vec![cfg.vocab_size], Init::Zeros);
    v
}

/// Names and shapes of every trainable tensor for `cfg`, in registration order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded random initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape, init) in layout(cfg) {
            let numel: usize = shape.iter().product();
            let std = match init {
                Init::Normal(s) => Some(s),
                Init::FanIn => Some(1.0 / (shape[0] as f64).sqrt()),
                _ => None,
            };
            let data: Vec<T> = match (init, std) {
                (Init::Zeros, _) => vec![T::zero(); numel],
                (Init::Ones, _) => vec![T::one(); numel],
                (_, Some(s)) => {
                    let dist = Normal::new(0.0, s).expect("valid std");
                    (0..numel).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
                _ => unreachable!(),
            };
            tensors.insert(name, Arc::new(Tensor::new(&shape, data)?));
        }
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        Self {
            tensors: tensors
                .into_iter()
                .map(|(n, t)| (n, Arc::new(t)))
                .collect(),
        }
    }

    /// Check names and shapes against the layout `cfg` implies.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = param_shapes(cfg);
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "config implies {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have_name, t)) in expected.iter().zip(&self.tensors) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Shape(format!(
                    "expected `{name}` {shape:?}, found `{have_name}` {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))
    }

    /// Mutable access; clones the buffer if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Arc::new(t.cast::<U>())))
                .collect(),
        }
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.shared_leaf(Arc::clone(t), trainable)))
                .collect(),
        }
    }
}

/// Parameters registered on one graph.
pub struct Bound<'g, T: Scalar = f32> {
    vars: IndexMap<String, Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    /// Name arbitrary graph values, e.g. for testing a single layer.
    pub fn new(vars: impl IntoIterator<Item = (String, Var<'g, T>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no parameter named `{name}`")))
    }

    /// Collect the gradient of every bound parameter.
    pub fn grads(&self, grads: &Gradients<T>) -> ParamGrads<T> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), grads.get(*v)))
            .collect()
    }
}
