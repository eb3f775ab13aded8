//! Supervised finetuning: completion-only cross-entropy.

use alloc::vec::Vec;

use crate::data::{fit_to_context, SftExample};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::model::{hidden_states, ModelCheckpoint, ModelVars, Role};
use crate::tokenizer::{BOS, PAD};
use crate::train::{run_training_loop, StepRecord, TrainConfig, TrainError};

/// Mean next-token cross-entropy over the completion tokens of `batch`.
/// Prompts are left-truncated so each example fits `max_seq_len`; every
/// example is its own row (no packing).
pub fn sft_batch_loss<T: Float>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    batch: &[&SftExample],
    max_seq_len: usize,
) -> Result<Var, TrainError> {
    let max_len = max_seq_len.min(mv.config.max_seq_len);
    let mut hidden = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for ex in batch {
        let completion = &ex.completion.ids;
        let prompt = fit_to_context(&ex.prompt.ids, completion, max_len)?;
        let mut ids = Vec::with_capacity(1 + prompt.len() + completion.len());
        ids.push(BOS);
        ids.extend_from_slice(prompt);
        ids.extend_from_slice(completion);
        hidden.push(hidden_states(g, mv, &ids)?);
        let (t, m) = completion_targets(&ids, prompt.len());
        targets.extend(t);
        mask.extend(m);
    }
    let h = if hidden.len() == 1 { hidden[0] } else { g.concat_rows(&hidden)? };
    let logits = g.matmul_nt(h, mv.tok_emb)?;
    Ok(g.softmax_cross_entropy(logits, &targets, &mask)?)
}

/// Per-row targets for `ids = BOS + prompt + completion`: row `t` predicts
/// `ids[t + 1]`, and only rows predicting completion tokens are unmasked.
pub fn completion_targets(ids: &[u32], prompt_len: usize) -> (Vec<u32>, Vec<bool>) {
    (0..ids.len())
        .map(|t| match ids.get(t + 1) {
            Some(&next) => (next, t >= prompt_len),
            None => (PAD, false),
        })
        .unzip()
}

/// Evaluates [`sft_batch_loss`] without gradients.
pub fn sft_loss(model: &ModelCheckpoint, batch: &[&SftExample], max_seq_len: usize) -> Result<f64, TrainError> {
    let mut g = Graph::<f32>::new();
    let mv = ModelVars::bind(&mut g, model, false);
    let loss = sft_batch_loss(&mut g, &mv, batch, max_seq_len)?;
    Ok(g.item(loss) as f64)
}

/// Trains `base` on `data`; the result is tagged [`Role::Policy`].
pub fn train_sft(
    base: &ModelCheckpoint,
    data: &[SftExample],
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ModelCheckpoint, Vec<StepRecord>), TrainError> {
    let mut model = base.clone();
    let model_config = model.config().clone();
    let records = run_training_loop(
        model.tensors_mut(),
        data.len(),
        config,
        |g, vars, idx| {
            let mv = ModelVars::from_vars(model_config.clone(), vars);
            let batch: Vec<&SftExample> = idx.iter().map(|&i| &data[i]).collect();
            sft_batch_loss(g, &mv, &batch, config.max_seq_len)
        },
        on_step,
    )?;
    model.step += records.len() as u64;
    Ok((model.with_role(Role::Policy), records))
}
