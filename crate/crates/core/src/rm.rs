//! Reward model: a scalar head on the transformer backbone, trained with
//! the pairwise logistic loss on preference pairs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::container::{Container, ContainerError, Entry, Payload};
use crate::data::{fit_to_context, PreferencePair};
use crate::float::{softplus, Float};
use crate::graph::{Graph, Var};
use crate::model::{hidden_states, ModelCheckpoint, ModelError, ModelVars, Role};
use crate::tensor::Tensor;
use crate::tokenizer::{BOS, EOS, PAD};
use crate::train::{run_training_loop, StepRecord, TrainConfig, TrainError};

const RM_KIND: &str = "reward-model";
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub backbone: ModelCheckpoint,
    /// `[d_model, 1]`
    pub head_w: Tensor,
    /// `[1]`
    pub head_b: Tensor,
}

impl RewardModel {
    /// Wraps `backbone` with a zero-initialized head.
    pub fn new(backbone: ModelCheckpoint) -> Self {
        let d = backbone.config().d_model;
        Self {
            backbone: backbone.with_role(Role::RewardBackbone),
            head_w: Tensor::zeros(vec![d, 1]),
            head_b: Tensor::zeros(vec![1]),
        }
    }

    pub fn from_parts(backbone: ModelCheckpoint, head_w: Tensor, head_b: Tensor) -> Result<Self, ModelError> {
        let d = backbone.config().d_model;
        if head_w.shape() != [d, 1] || head_b.shape() != [1] {
            return Err(ModelError::Layout(format!(
                "reward head shapes {:?}/{:?} do not match d_model {d}",
                head_w.shape(),
                head_b.shape()
            )));
        }
        Ok(Self {
            backbone: backbone.with_role(Role::RewardBackbone),
            head_w,
            head_b,
        })
    }

    /// Reward of `response` after `prompt`; the prompt is used as given.
    pub fn score(&self, prompt: &[u32], response: &[u32]) -> Result<f64, ModelError> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, false);
        let r = reward(&mut g, &vars, prompt, response, usize::MAX)?;
        Ok(g.item(r) as f64)
    }

    /// Rewards of both responses, with the prompt left-truncated to fit
    /// `max_seq_len`.
    pub fn score_pair(&self, pair: &PreferencePair, max_seq_len: usize) -> Result<(f64, f64), ModelError> {
        let mut g = Graph::<f32>::new();
        let vars = self.bind(&mut g, false);
        let c = reward(&mut g, &vars, &pair.prompt.ids, &pair.chosen.ids, max_seq_len)?;
        let r = reward(&mut g, &vars, &pair.prompt.ids, &pair.rejected.ids, max_seq_len)?;
        Ok((g.item(c) as f64, g.item(r) as f64))
    }

    pub fn bind<T: Float>(&self, g: &mut Graph<T>, trainable: bool) -> RewardVars {
        let leaf = |g: &mut Graph<T>, t: &Tensor| if trainable { g.param(t) } else { g.constant(t) };
        let backbone = ModelVars::bind(g, &self.backbone, trainable);
        let head_w = leaf(g, &self.head_w);
        let head_b = leaf(g, &self.head_b);
        RewardVars { backbone, head_w, head_b }
    }

    /// Backbone tensors followed by the head weight and bias.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut ts = self.backbone.tensors().to_vec();
        ts.push(self.head_w.clone());
        ts.push(self.head_b.clone());
        ts
    }

    fn set_tensors(&mut self, mut ts: Vec<Tensor>) {
        self.head_b = ts.pop().expect("head bias");
        self.head_w = ts.pop().expect("head weight");
        for (dst, src) in self.backbone.tensors_mut().iter_mut().zip(ts) {
            *dst = src;
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = self.backbone.to_container();
        c.kind = RM_KIND.into();
        for (name, t) in [(HEAD_W, &self.head_w), (HEAD_B, &self.head_b)] {
            c.entries.push(Entry {
                name: name.into(),
                shape: t.shape().to_vec(),
                payload: Payload::F32(t.data().to_vec()),
            });
        }
        c
    }

    pub fn from_container(mut c: Container) -> Result<Self, ModelError> {
        if c.kind != RM_KIND {
            return Err(ContainerError::Corrupt(format!("expected a {RM_KIND} container, found {:?}", c.kind)).into());
        }
        let mut take = |name: &str| -> Result<Tensor, ModelError> {
            let i = c
                .entries
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| ContainerError::Corrupt(format!("missing {name}")))?;
            let e = c.entries.remove(i);
            match e.payload {
                Payload::F32(v) => Ok(Tensor::new(e.shape, v)?),
                Payload::F64(_) => Err(ContainerError::Corrupt(format!("{name} is not f32")).into()),
            }
        };
        let head_w = take(HEAD_W)?;
        let head_b = take(HEAD_B)?;
        c.kind = "model".into();
        Self::from_parts(ModelCheckpoint::from_container(c)?, head_w, head_b)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().encode().expect("parameter names are valid")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_container(Container::decode(bytes)?)
    }
}

#[derive(Debug, Clone)]
pub struct RewardVars {
    pub backbone: ModelVars,
    pub head_w: Var,
    pub head_b: Var,
}

impl RewardVars {
    /// Interprets `vars` as backbone parameters followed by head w and b.
    pub fn from_vars(config: crate::model::ModelConfig, vars: &[Var]) -> Self {
        let n = vars.len();
        Self {
            backbone: ModelVars::from_vars(config, &vars[..n - 2]),
            head_w: vars[n - 2],
            head_b: vars[n - 1],
        }
    }
}

/// Response with trailing EOS/PAD removed: the head reads the hidden state
/// of the last real response token.
pub fn strip_response(response: &[u32]) -> &[u32] {
    let end = response.iter().rposition(|&t| t != EOS && t != PAD).map_or(0, |i| i + 1);
    &response[..end]
}

/// Scalar reward `[1, 1]` of `response` after `prompt`. The prompt is
/// left-truncated to fit `max_seq_len` (and the model's context).
pub fn reward<T: Float>(
    g: &mut Graph<T>,
    rv: &RewardVars,
    prompt: &[u32],
    response: &[u32],
    max_seq_len: usize,
) -> Result<Var, ModelError> {
    let response = strip_response(response);
    if response.is_empty() {
        return Err(ModelError::EmptyCompletion);
    }
    let max_len = max_seq_len.min(rv.backbone.config.max_seq_len);
    let prompt = if max_seq_len == usize::MAX {
        prompt
    } else {
        fit_to_context(prompt, response, max_len).map_err(|_| ModelError::Length {
            len: 1 + prompt.len() + response.len(),
            max: max_len,
        })?
    };
    let mut ids = Vec::with_capacity(1 + prompt.len() + response.len());
    ids.push(BOS);
    ids.extend_from_slice(prompt);
    ids.extend_from_slice(response);
    let h = hidden_states(g, &rv.backbone, &ids)?;
    let last = g.gather_rows(h, &[ids.len() - 1])?;
    let r = g.matmul(last, rv.head_w)?;
    Ok(g.add_bias(r, rv.head_b)?)
}

/// `softplus(-(r_chosen - r_rejected))`
pub fn rm_loss(r_chosen: f64, r_rejected: f64) -> f64 {
    softplus(-(r_chosen - r_rejected))
}

/// Mean pairwise loss over `batch`.
pub fn rm_batch_loss<T: Float>(
    g: &mut Graph<T>,
    rv: &RewardVars,
    batch: &[&PreferencePair],
    max_seq_len: usize,
) -> Result<Var, TrainError> {
    let mut total: Option<Var> = None;
    for pair in batch {
        let c = reward(g, rv, &pair.prompt.ids, &pair.chosen.ids, max_seq_len)?;
        let r = reward(g, rv, &pair.prompt.ids, &pair.rejected.ids, max_seq_len)?;
        let gap = g.sub(r, c)?;
        let loss = g.softplus(gap);
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    let total = total.ok_or(TrainError::EmptyDataset)?;
    let total = g.sum(total);
    Ok(g.div_scalar(total, T::from_f64(batch.len() as f64)))
}

/// Trains a reward model whose backbone starts from `init` (normally the
/// SFT checkpoint) and whose head starts at zero.
pub fn train_rm(
    init: &ModelCheckpoint,
    pairs: &[PreferencePair],
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(RewardModel, Vec<StepRecord>), TrainError> {
    let mut rm = RewardModel::new(init.clone());
    let model_config = init.config().clone();
    let mut params = rm.tensors();
    let records = run_training_loop(
        &mut params,
        pairs.len(),
        config,
        |g, vars, idx| {
            let rv = RewardVars::from_vars(model_config.clone(), vars);
            let batch: Vec<&PreferencePair> = idx.iter().map(|&i| &pairs[i]).collect();
            rm_batch_loss(g, &rv, &batch, config.max_seq_len)
        },
        on_step,
    )?;
    rm.set_tensors(params);
    rm.backbone.step += records.len() as u64;
    Ok((rm, records))
}

/// Preference accuracy, overall and per category.
#[derive(Debug, Clone, PartialEq)]
pub struct RmReport {
    pub overall: f64,
    pub per_category: BTreeMap<String, f64>,
    pub n_pairs: usize,
}

/// Accuracy from `(r_chosen, r_rejected)` scores; ties count as incorrect.
pub fn accuracy_from_scores(scores: &[(f64, f64)], categories: Option<&[String]>) -> RmReport {
    let correct: Vec<bool> = scores.iter().map(|&(c, r)| c > r).collect();
    let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    if let Some(cats) = categories {
        for (cat, &ok) in cats.iter().zip(&correct) {
            let e = per.entry(cat.clone()).or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
    }
    RmReport {
        overall: frac(correct.iter().filter(|&&b| b).count(), correct.len()),
        per_category: per.into_iter().map(|(k, (h, n))| (k, frac(h, n))).collect(),
        n_pairs: scores.len(),
    }
}

/// Scores every pair with `rm` and reports accuracy.
pub fn rm_accuracy(
    rm: &RewardModel,
    pairs: &[PreferencePair],
    categories: Option<&[String]>,
    max_seq_len: usize,
) -> Result<RmReport, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(c) = categories {
        if c.len() != pairs.len() {
            return Err(TrainError::Mismatch(format!("{} category labels for {} pairs", c.len(), pairs.len())));
        }
    }
    let scores = pairs
        .iter()
        .map(|p| rm.score_pair(p, max_seq_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(accuracy_from_scores(&scores, categories))
}
