//! GPT-style decoder-only transformer with grid-mapped sublayer outputs.
//!
//! Every attention and MLP sublayer output (after its final projection,
//! before the residual add) is a spatial hook: a `[batch, seq, d_model]`
//! tensor whose feature columns are units on that sublayer's [`GridLayout`].
//! Blocks are pre-norm; the output head is tied to the token embedding.

use crate::autodiff::{Tape, Tensor};
use crate::grid::GridLayout;
use crate::seeds::derive_seed;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {t} exceeds block size {block_size}")]
    ContextTooLong { t: usize, block_size: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("empty token batch")]
    EmptyBatch,
    #[error("no hook named {0}")]
    UnknownHook(String),
}

/// Which sublayer of a block a hook taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Attention,
    Mlp,
}

/// Identifies one spatial hook: (block index, sublayer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookId {
    pub layer: usize,
    pub sublayer: Sublayer,
}

impl HookId {
    pub fn attn(layer: usize) -> Self {
        HookId { layer, sublayer: Sublayer::Attention }
    }
    pub fn mlp(layer: usize) -> Self {
        HookId { layer, sublayer: Sublayer::Mlp }
    }
}

impl std::fmt::Display for HookId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.sublayer {
            Sublayer::Attention => write!(f, "L{}.attn", self.layer),
            Sublayer::Mlp => write!(f, "L{}.mlp", self.layer),
        }
    }
}

impl std::str::FromStr for HookId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::UnknownHook(s.to_string());
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (layer, sub) = rest.split_once('.').ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        match sub {
            "attn" => Ok(HookId::attn(layer)),
            "mlp" => Ok(HookId::mlp(layer)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub block_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    pub permute_spatial: bool,
    pub permutation_seed: u64,
    #[serde(default)]
    pub dropout_rate: f32,
}

impl ModelConfig {
    /// Desk-scale defaults: byte vocab, 8x8 grids, 4 blocks of 4 heads.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: 256,
            block_size: 128,
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            grid_width: 8,
            grid_height: 8,
            permute_spatial: true,
            permutation_seed: 0,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.block_size == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("vocab_size, block_size, n_layers, n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_model != self.grid_width * self.grid_height {
            return bad(format!(
                "d_model {} must equal grid_width*grid_height = {}",
                self.d_model,
                self.grid_width * self.grid_height
            ));
        }
        if self.dropout_rate != 0.0 {
            return bad("dropout_rate must be 0; nonzero dropout is reserved for fine-tuning flows not included here".into());
        }
        Ok(())
    }

    pub fn n_hooks(&self) -> usize {
        2 * self.n_layers
    }

    pub fn hook_ids(&self) -> Vec<HookId> {
        (0..self.n_layers)
            .flat_map(|l| [HookId::attn(l), HookId::mlp(l)])
            .collect()
    }
}

/// One named parameter tensor. `decay` marks participation in weight decay
/// (matrices yes; norms, biases, and embeddings no).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub decay: bool,
}

/// Ordered parameter registry; the order fixes init draws and serialization.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f32>, decay: bool) {
        self.entries.push(Param { name: name.into(), value, decay });
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn n_elements(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Insert every parameter into a tape as a differentiable leaf, in
    /// registry order. Index i of the result corresponds to entry i.
    pub fn bind<'t>(&self, tape: &'t Tape<f32>) -> Vec<Tensor<'t, f32>> {
        self.entries.iter().map(|p| tape.var(p.value.clone())).collect()
    }
}

/// Normal(0, std) init, deterministic for a given generator state.
pub fn normal_init(shape: &[usize], std: f32, rng: &mut ChaCha12Rng) -> ArrayD<f32> {
    let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// Captured sublayer outputs of one forward pass, still attached to the tape.
pub struct SpatialActivations<'t> {
    entries: Vec<(HookId, Tensor<'t, f32>)>,
}

impl<'t> SpatialActivations<'t> {
    pub fn get(&self, hook: HookId) -> Result<Tensor<'t, f32>, ModelError> {
        self.entries
            .iter()
            .find(|(h, _)| *h == hook)
            .map(|(_, t)| *t)
            .ok_or_else(|| ModelError::UnknownHook(hook.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (HookId, Tensor<'t, f32>)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Output of [`TopoTransformer::forward`]: logits, optional hooks, and the
/// tape-bound parameter leaves (index-aligned with the model's [`ParamSet`]).
pub struct ForwardPass<'t> {
    pub logits: Tensor<'t, f32>,
    pub hooks: Option<SpatialActivations<'t>>,
    pub bound_params: Vec<Tensor<'t, f32>>,
}

pub struct TopoTransformer {
    config: ModelConfig,
    params: ParamSet,
    layouts: Vec<(HookId, GridLayout)>,
}

impl TopoTransformer {
    /// Initialize parameters: Normal(0, 0.02) for embeddings and weights,
    /// residual projections scaled down by 1/sqrt(2 * n_layers), zeros for
    /// biases, ones for layernorm gains. Deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.d_model;
        let std = 0.02f32;
        let resid_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "param-init"));
        let mut params = ParamSet::default();
        let zeros = |shape: &[usize]| ArrayD::<f32>::zeros(IxDyn(shape));
        let ones = |shape: &[usize]| ArrayD::<f32>::from_elem(IxDyn(shape), 1.0);

        params.push("tok_emb", normal_init(&[config.vocab_size, c], std, &mut rng), false);
        params.push("pos_emb", normal_init(&[config.block_size, c], std, &mut rng), false);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            params.push(p("ln1.gain"), ones(&[c]), false);
            params.push(p("ln1.bias"), zeros(&[c]), false);
            params.push(p("attn.w_qkv"), normal_init(&[c, 3 * c], std, &mut rng), true);
            params.push(p("attn.b_qkv"), zeros(&[3 * c]), false);
            params.push(p("attn.w_proj"), normal_init(&[c, c], resid_std, &mut rng), true);
            params.push(p("attn.b_proj"), zeros(&[c]), false);
            params.push(p("ln2.gain"), ones(&[c]), false);
            params.push(p("ln2.bias"), zeros(&[c]), false);
            params.push(p("mlp.w_fc"), normal_init(&[c, 4 * c], std, &mut rng), true);
            params.push(p("mlp.b_fc"), zeros(&[4 * c]), false);
            params.push(p("mlp.w_out"), normal_init(&[4 * c, c], resid_std, &mut rng), true);
            params.push(p("mlp.b_out"), zeros(&[c]), false);
        }
        params.push("lnf.gain", ones(&[c]), false);
        params.push("lnf.bias", zeros(&[c]), false);

        let layouts = Self::build_layouts(&config);
        Ok(TopoTransformer { config, params, layouts })
    }

    fn build_layouts(config: &ModelConfig) -> Vec<(HookId, GridLayout)> {
        config
            .hook_ids()
            .into_iter()
            .map(|hook| {
                let layout_seed = derive_seed(config.permutation_seed, &hook.to_string());
                let layout = GridLayout::build(
                    config.grid_width,
                    config.grid_height,
                    layout_seed,
                    config.permute_spatial,
                );
                (hook, layout)
            })
            .collect()
    }

    /// Reassemble a model from config plus parameter values (checkpoint load).
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let layouts = Self::build_layouts(&config);
        Ok(TopoTransformer { config, params, layouts })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn hooks(&self) -> Vec<HookId> {
        self.config.hook_ids()
    }

    pub fn layout(&self, hook: HookId) -> Result<&GridLayout, ModelError> {
        self.layouts
            .iter()
            .find(|(h, _)| *h == hook)
            .map(|(_, l)| l)
            .ok_or_else(|| ModelError::UnknownHook(hook.to_string()))
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_elements()
    }

    /// Run the model on a `[batch, seq]` token matrix. With `capture` on,
    /// every sublayer output is recorded as a spatial hook, still attached
    /// to the tape so losses on it are differentiable.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<f32>,
        tokens: &Array2<usize>,
        capture: bool,
    ) -> Result<ForwardPass<'t>, ModelError> {
        let (b, t) = tokens.dim();
        if b == 0 || t == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if t > self.config.block_size {
            return Err(ModelError::ContextTooLong { t, block_size: self.config.block_size });
        }
        for &id in tokens.iter() {
            if id >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { id, vocab: self.config.vocab_size });
            }
        }
        let c = self.config.d_model;
        let h = self.config.n_heads;
        let hd = c / h;
        let bound = self.params.bind(tape);
        let at = |name: &str| bound[self.params.index_of(name).unwrap()];

        let flat_ids: Vec<usize> = tokens.iter().copied().collect();
        let tok = at("tok_emb").index_select(0, &flat_ids).reshape(&[b, t, c]);
        let pos = at("pos_emb").narrow(0, 0, t);
        let mut x = tok.add(pos);
        let mut hooks = Vec::with_capacity(self.config.n_hooks());

        for l in 0..self.config.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");

            let normed = x.layer_norm(at(&p("ln1.gain")), at(&p("ln1.bias")), LN_EPS);
            let qkv = normed.reshape(&[b * t, c]).matmul(at(&p("attn.w_qkv"))).add(at(&p("attn.b_qkv")));
            let split_heads = |z: Tensor<'t, f32>| {
                z.reshape(&[b, t, h, hd]).permute_axes(&[0, 2, 1, 3]).reshape(&[b * h, t, hd])
            };
            let q = split_heads(qkv.narrow(1, 0, c));
            let k = split_heads(qkv.narrow(1, c, c));
            let v = split_heads(qkv.narrow(1, 2 * c, c));
            let scores = q.batch_matmul(k.permute_axes(&[0, 2, 1])).scale(1.0 / (hd as f32).sqrt());
            let att = scores.causal_softmax().batch_matmul(v);
            let merged = att.reshape(&[b, h, t, hd]).permute_axes(&[0, 2, 1, 3]).reshape(&[b * t, c]);
            let attn_out = merged
                .matmul(at(&p("attn.w_proj")))
                .add(at(&p("attn.b_proj")))
                .reshape(&[b, t, c]);
            if capture {
                hooks.push((HookId::attn(l), attn_out));
            }
            x = x.add(attn_out);

            let normed = x.layer_norm(at(&p("ln2.gain")), at(&p("ln2.bias")), LN_EPS);
            let up = normed.reshape(&[b * t, c]).matmul(at(&p("mlp.w_fc"))).add(at(&p("mlp.b_fc"))).gelu();
            let mlp_out = up.matmul(at(&p("mlp.w_out"))).add(at(&p("mlp.b_out"))).reshape(&[b, t, c]);
            if capture {
                hooks.push((HookId::mlp(l), mlp_out));
            }
            x = x.add(mlp_out);
        }

        let final_norm = x.layer_norm(at("lnf.gain"), at("lnf.bias"), LN_EPS);
        // output head tied to the token embedding
        let logits = final_norm
            .reshape(&[b * t, c])
            .matmul(at("tok_emb").permute_axes(&[1, 0]))
            .reshape(&[b, t, self.config.vocab_size]);

        Ok(ForwardPass {
            logits,
            hooks: capture.then_some(SpatialActivations { entries: hooks }),
            bound_params: bound,
        })
    }
}

/// Flatten a `[batch, seq, units]` activation tensor into `[samples, units]`
/// rows (batch-major), optionally dropping masked positions. Column `j` is
/// unit `j`, which lives at grid cell `layout.cell_of_unit(j)`.
pub fn unit_activations(values: &ArrayD<f32>, mask: Option<&[bool]>) -> Array2<f32> {
    assert_eq!(values.ndim(), 3, "expected [batch, seq, units]");
    let (b, t, n) = (values.shape()[0], values.shape()[1], values.shape()[2]);
    let flat = values.view().into_shape_with_order((b * t, n)).unwrap();
    match mask {
        None => flat.to_owned(),
        Some(m) => {
            assert_eq!(m.len(), b * t, "mask length must equal batch*seq");
            let keep: Vec<usize> = m.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
            flat.select(ndarray::Axis(0), &keep)
        }
    }
}
