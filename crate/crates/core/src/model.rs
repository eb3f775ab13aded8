//! Pre-norm decoder-only transformer with learned positions and a
//! weight-tied output projection.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, Entry, Payload};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};
use crate::tokenizer::{TokenSeq, BOS, BYTE_VOCAB, EOS};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds context of {max}")]
    Length { len: usize, max: usize },
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("token id {id} outside vocabulary of {vocab}")]
    Token { id: u32, vocab: usize },
    #[error("checkpoint does not match its config: {0}")]
    Layout(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context length in tokens; also the size of the positional table.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < BYTE_VOCAB {
            return fail(format!("vocab_size {} is smaller than the byte vocabulary {BYTE_VOCAB}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return fail("d_model, n_heads and n_layers must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len {} must be at least 2", self.max_seq_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter names and shapes, in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.w_qkv"), vec![d, 3 * d]),
                (p("attn.b_qkv"), vec![3 * d]),
                (p("attn.w_out"), vec![d, d]),
                (p("attn.b_out"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w_in"), vec![d, 4 * d]),
                (p("mlp.b_in"), vec![4 * d]),
                (p("mlp.w_out"), vec![4 * d, d]),
                (p("mlp.b_out"), vec![d]),
            ]);
        }
        out.push(("ln_f.gamma".to_string(), vec![d]));
        out.push(("ln_f.beta".to_string(), vec![d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Policy,
    Reference,
    RewardBackbone,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Policy => "policy",
            Role::Reference => "reference",
            Role::RewardBackbone => "reward-backbone",
        })
    }
}

impl FromStr for Role {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "policy" => Ok(Role::Policy),
            "reference" => Ok(Role::Reference),
            "reward-backbone" => Ok(Role::RewardBackbone),
            other => Err(ModelError::Layout(format!("unknown role {other:?}"))),
        }
    }
}

/// Draws from N(0, std²) via Box–Muller.
pub(crate) fn normal(rng: &mut ChaCha8Rng, std: f64) -> f32 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (std * libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)) as f32
}

/// Named parameters plus the config that determines their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    pub step: u64,
    pub role: Role,
}

impl ModelCheckpoint {
    /// Random initialization: N(0, 0.02) weights, zero biases, unit
    /// layer-norm scales. Deterministic in `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (names, tensors) = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with("gamma") {
                    vec![1.0; n]
                } else if name.ends_with("beta") || name.contains(".b_") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal(&mut rng, INIT_STD)).collect()
                };
                (name, Tensor::new(shape, data).expect("layout shape"))
            })
            .unzip();
        Ok(Self {
            config,
            names,
            tensors,
            step: 0,
            role: Role::Policy,
        })
    }

    /// Every parameter zero. Produces uniform next-token distributions.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (names, tensors) = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .unzip();
        Ok(Self {
            config,
            names,
            tensors,
            step: 0,
            role: Role::Policy,
        })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<(String, Tensor)>, step: u64, role: Role) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len() {
            return Err(ModelError::Layout(format!("expected {} parameters, got {}", layout.len(), params.len())));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::Layout(format!(
                    "expected {name} {shape:?}, got {pname} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = params.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
            step,
            role,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable parameter values; shapes must not change.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// FNV-1a over config and parameter bits. Identifies the exact weights
    /// a reference cache was computed from.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        let c = &self.config;
        for v in [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.max_seq_len] {
            h.write(&(v as u64).to_le_bytes());
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.write(name.as_bytes());
            for x in t.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("model");
        let cfg = &self.config;
        c.push_meta("vocab_size", cfg.vocab_size);
        c.push_meta("d_model", cfg.d_model);
        c.push_meta("n_layers", cfg.n_layers);
        c.push_meta("n_heads", cfg.n_heads);
        c.push_meta("max_seq_len", cfg.max_seq_len);
        c.push_meta("seed", cfg.seed);
        c.push_meta("step", self.step);
        c.push_meta("role", self.role);
        for (name, t) in self.names.iter().zip(&self.tensors) {
            c.entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                payload: Payload::F32(t.data().to_vec()),
            });
        }
        c
    }

    pub fn from_container(c: Container) -> Result<Self, ModelError> {
        if c.kind != "model" {
            return Err(ContainerError::Corrupt(format!("expected a model container, found {:?}", c.kind)).into());
        }
        fn field<T: FromStr>(c: &Container, key: &str) -> Result<T, ModelError> {
            c.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ContainerError::Corrupt(format!("missing or invalid meta {key}")).into())
        }
        let config = ModelConfig {
            vocab_size: field(&c, "vocab_size")?,
            d_model: field(&c, "d_model")?,
            n_layers: field(&c, "n_layers")?,
            n_heads: field(&c, "n_heads")?,
            max_seq_len: field(&c, "max_seq_len")?,
            seed: field(&c, "seed")?,
        };
        let step = field(&c, "step")?;
        let role: Role = c
            .meta("role")
            .ok_or_else(|| ContainerError::Corrupt("missing role".into()))?
            .parse()?;
        let params = c
            .entries
            .into_iter()
            .map(|e| match e.payload {
                Payload::F32(v) => Ok((e.name, Tensor::new(e.shape, v)?)),
                Payload::F64(_) => Err(ModelError::from(ContainerError::Corrupt(format!("parameter {} is not f32", e.name)))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(config, params, step, role).map_err(|e| match e {
            ModelError::Layout(m) => ContainerError::Corrupt(m).into(),
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().encode().expect("parameter names are valid")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_container(Container::decode(bytes)?)
    }

    /// Next-token logits `[T, vocab]` for `ids`, evaluated without gradients.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor, ModelError> {
        let mut g = Graph::<f32>::new();
        let mv = ModelVars::bind(&mut g, self, false);
        let out = forward(&mut g, &mv, ids)?;
        Ok(g.to_tensor(out))
    }

    /// `log π(completion | BOS + prompt)` evaluated without gradients.
    pub fn sequence_logprob(&self, prompt: &[u32], completion: &[u32], length_normalize: bool) -> Result<f64, ModelError> {
        let mut g = Graph::<f32>::new();
        let mv = ModelVars::bind(&mut g, self, false);
        let lp = sequence_logprob(&mut g, &mv, prompt, completion, length_normalize)?;
        Ok(g.item(lp) as f64)
    }

    /// Greedy decoding after `BOS + prompt`. Stops after emitting EOS (which
    /// is included), after `max_new_tokens`, or when the context is full.
    pub fn generate(&self, prompt: &[u32], max_new_tokens: usize) -> Result<TokenSeq, ModelError> {
        let mut ids = Vec::with_capacity(prompt.len() + 1 + max_new_tokens);
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        check_ids(&ids, &self.config)?;
        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            if ids.len() >= self.config.max_seq_len {
                break;
            }
            let mut g = Graph::<f32>::new();
            let mv = ModelVars::bind(&mut g, self, false);
            let h = hidden_states(&mut g, &mv, &ids)?;
            let last = g.gather_rows(h, &[ids.len() - 1])?;
            let logits = g.matmul_nt(last, mv.tok_emb)?;
            let next = argmax(g.value(logits));
            ids.push(next);
            out.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(TokenSeq::from_ids(out))
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w_qkv: Var,
    pub b_qkv: Var,
    pub w_attn_out: Var,
    pub b_attn_out: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_mlp_in: Var,
    pub b_mlp_in: Var,
    pub w_mlp_out: Var,
    pub b_mlp_out: Var,
}

/// Graph handles for every model parameter.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub blocks: Vec<BlockVars>,
    pub ln_f_gamma: Var,
    pub ln_f_beta: Var,
    all: Vec<Var>,
}

impl ModelVars {
    /// Registers the checkpoint's tensors as leaves of `g`.
    pub fn bind<T: Float>(g: &mut Graph<T>, ckpt: &ModelCheckpoint, trainable: bool) -> Self {
        let vars: Vec<Var> = ckpt
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        Self::from_vars(ckpt.config.clone(), &vars)
    }

    /// Interprets `vars` (canonical layout order) as model parameters.
    pub fn from_vars(config: ModelConfig, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("vars follow the parameter layout");
        let tok_emb = next();
        let pos_emb = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockVars {
                ln1_gamma: next(),
                ln1_beta: next(),
                w_qkv: next(),
                b_qkv: next(),
                w_attn_out: next(),
                b_attn_out: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                w_mlp_in: next(),
                b_mlp_in: next(),
                w_mlp_out: next(),
                b_mlp_out: next(),
            })
            .collect();
        let ln_f_gamma = next();
        let ln_f_beta = next();
        let n = 4 + 12 * config.n_layers;
        Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gamma,
            ln_f_beta,
            all: vars[..n].to_vec(),
        }
    }

    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

fn check_ids(ids: &[u32], config: &ModelConfig) -> Result<(), ModelError> {
    if ids.len() > config.max_seq_len {
        return Err(ModelError::Length {
            len: ids.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::Token {
            id,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

fn attention<T: Float>(g: &mut Graph<T>, b: &BlockVars, x: Var, cfg: &ModelConfig) -> Result<Var, TensorError> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let qkv = g.matmul(x, b.w_qkv)?;
    let qkv = g.add_bias(qkv, b.b_qkv)?;
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let q = g.slice_cols(qkv, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let probs = g.causal_softmax(scores)?;
        heads.push(g.matmul(probs, v)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let out = g.matmul(merged, b.w_attn_out)?;
    g.add_bias(out, b.b_attn_out)
}

fn mlp<T: Float>(g: &mut Graph<T>, b: &BlockVars, x: Var) -> Result<Var, TensorError> {
    let h = g.matmul(x, b.w_mlp_in)?;
    let h = g.add_bias(h, b.b_mlp_in)?;
    let h = g.gelu(h);
    let out = g.matmul(h, b.w_mlp_out)?;
    g.add_bias(out, b.b_mlp_out)
}

/// Final-layer-norm hidden states `[T, d_model]`.
pub fn hidden_states<T: Float>(g: &mut Graph<T>, mv: &ModelVars, ids: &[u32]) -> Result<Var, ModelError> {
    let cfg = &mv.config;
    check_ids(ids, cfg)?;
    if ids.is_empty() {
        return Err(ModelError::Length { len: 0, max: cfg.max_seq_len });
    }
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = g.gather_rows(mv.tok_emb, &rows)?;
    let pos = g.gather_rows(mv.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    for b in &mv.blocks {
        let h = g.layer_norm(x, b.ln1_gamma, b.ln1_beta)?;
        let a = attention(g, b, h, cfg)?;
        x = g.add(x, a)?;
        let h = g.layer_norm(x, b.ln2_gamma, b.ln2_beta)?;
        let m = mlp(g, b, h)?;
        x = g.add(x, m)?;
    }
    Ok(g.layer_norm(x, mv.ln_f_gamma, mv.ln_f_beta)?)
}

/// Next-token logits `[T, vocab]`; row `t` depends only on `ids[..=t]`.
pub fn forward<T: Float>(g: &mut Graph<T>, mv: &ModelVars, ids: &[u32]) -> Result<Var, ModelError> {
    let h = hidden_states(g, mv, ids)?;
    Ok(g.matmul_nt(h, mv.tok_emb)?)
}

/// Sum over completion tokens of `log softmax(logits)[t, token_t]`,
/// conditioned on `BOS + prompt`; divided by the completion length when
/// `length_normalize` is set.
pub fn sequence_logprob<T: Float>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    prompt: &[u32],
    completion: &[u32],
    length_normalize: bool,
) -> Result<Var, ModelError> {
    if completion.is_empty() {
        return Err(ModelError::EmptyCompletion);
    }
    let mut ids = Vec::with_capacity(1 + prompt.len() + completion.len());
    ids.push(BOS);
    ids.extend_from_slice(prompt);
    ids.extend_from_slice(completion);
    let logits = forward(g, mv, &ids)?;
    let start = prompt.len(); // row predicting completion[0]
    let rows: Vec<usize> = (start..start + completion.len()).collect();
    let lps = g.token_logprobs(logits, &rows, completion)?;
    let total = g.sum(lps);
    if length_normalize {
        Ok(g.div_scalar(total, T::from_f64(completion.len() as f64)))
    } else {
        Ok(total)
    }
}
