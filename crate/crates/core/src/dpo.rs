//! Direct preference optimization against a frozen reference whose
//! log-probabilities are computed once and cached.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::container::{Container, ContainerError, Entry, Payload};
use crate::data::PreferencePair;
use crate::float::{softplus, Float};
use crate::graph::{Graph, Var};
use crate::model::{sequence_logprob, ModelCheckpoint, ModelError, ModelVars, Role};
use crate::train::{run_training_loop, StepRecord, TrainConfig, TrainError};

const CACHE_KIND: &str = "ref-logp-cache";

/// Reference log-probabilities of one pair: raw completion sums and
/// completion lengths, so either normalization can be reconstructed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefEntry {
    pub chosen_sum: f64,
    pub rejected_sum: f64,
    pub chosen_len: usize,
    pub rejected_len: usize,
}

/// Sequence log-probabilities of a pair's two responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogpPair {
    pub chosen: f64,
    pub rejected: f64,
    /// Whether both values are divided by their completion length.
    pub normalized: bool,
}

fn normalize(sum: f64, len: usize) -> f64 {
    // Same f32 division the training graph performs.
    (sum as f32 / len as f32) as f64
}

impl RefEntry {
    pub fn logps(&self, normalized: bool) -> LogpPair {
        if normalized {
            LogpPair {
                chosen: normalize(self.chosen_sum, self.chosen_len),
                rejected: normalize(self.rejected_sum, self.rejected_len),
                normalized,
            }
        } else {
            LogpPair {
                chosen: self.chosen_sum,
                rejected: self.rejected_sum,
                normalized,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefLogpCache {
    /// Fingerprint of the reference checkpoint the values came from.
    pub fingerprint: u64,
    /// Normalization the cached values are served with.
    pub normalized: bool,
    pub entries: BTreeMap<String, RefEntry>,
    /// Pairs skipped because they do not fit the context window.
    pub excluded: Vec<String>,
}

impl RefLogpCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, pair_id: &str) -> bool {
        self.entries.contains_key(pair_id)
    }

    pub fn get(&self, pair_id: &str) -> Result<LogpPair, TrainError> {
        self.entries
            .get(pair_id)
            .map(|e| e.logps(self.normalized))
            .ok_or_else(|| TrainError::CacheMiss(pair_id.to_string()))
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CACHE_KIND);
        c.push_meta("fingerprint", format!("{:016x}", self.fingerprint));
        c.push_meta("normalized", self.normalized);
        c.push_meta("pairs", self.entries.len());
        c.push_meta("excluded", self.excluded.len());
        for (i, (id, e)) in self.entries.iter().enumerate() {
            c.push_meta(&format!("pair.{i}"), id);
            c.entries.push(Entry {
                name: format!("pair.{i}"),
                shape: vec![4],
                payload: Payload::F64(vec![e.chosen_sum, e.rejected_sum, e.chosen_len as f64, e.rejected_len as f64]),
            });
        }
        for (i, id) in self.excluded.iter().enumerate() {
            c.push_meta(&format!("excluded.{i}"), id);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ContainerError> {
        let corrupt = |m: &str| ContainerError::Corrupt(m.into());
        if c.kind != CACHE_KIND {
            return Err(ContainerError::Corrupt(format!("expected a {CACHE_KIND} container, found {:?}", c.kind)));
        }
        let fingerprint = c
            .meta("fingerprint")
            .and_then(|v| u64::from_str_radix(v, 16).ok())
            .ok_or_else(|| corrupt("missing fingerprint"))?;
        let normalized = c
            .meta("normalized")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing normalized flag"))?;
        let n_excluded: usize = c
            .meta("excluded")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("missing excluded count"))?;
        let mut entries = BTreeMap::new();
        for e in &c.entries {
            let id = c.meta(&e.name).ok_or_else(|| corrupt("entry without pair id"))?;
            let v = match &e.payload {
                Payload::F64(v) if v.len() == 4 => v,
                _ => return Err(corrupt("cache entries must be four f64 values")),
            };
            entries.insert(
                id.to_string(),
                RefEntry {
                    chosen_sum: v[0],
                    rejected_sum: v[1],
                    chosen_len: v[2] as usize,
                    rejected_len: v[3] as usize,
                },
            );
        }
        let excluded = (0..n_excluded)
            .map(|i| c.meta(&format!("excluded.{i}")).map(str::to_string).ok_or_else(|| corrupt("missing excluded id")))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            fingerprint,
            normalized,
            entries,
            excluded,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_container().encode().expect("cache entry names are valid")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        Self::from_container(&Container::decode(bytes)?)
    }
}

/// Whether `BOS + prompt + response` fits for both responses.
pub fn pair_fits(pair: &PreferencePair, max_len: usize) -> bool {
    let longest = pair.chosen.len().max(pair.rejected.len());
    1 + pair.prompt.len() + longest <= max_len
}

/// Reference sums for one pair, or `None` when it overflows the context.
pub fn ref_entry(reference: &ModelCheckpoint, pair: &PreferencePair, max_seq_len: usize) -> Result<Option<RefEntry>, ModelError> {
    if !pair_fits(pair, max_seq_len.min(reference.config().max_seq_len)) {
        return Ok(None);
    }
    Ok(Some(RefEntry {
        chosen_sum: reference.sequence_logprob(&pair.prompt.ids, &pair.chosen.ids, false)?,
        rejected_sum: reference.sequence_logprob(&pair.prompt.ids, &pair.rejected.ids, false)?,
        chosen_len: pair.chosen.len(),
        rejected_len: pair.rejected.len(),
    }))
}

/// Builds the reference cache. Pairs that overflow the context are listed
/// in `excluded` instead of failing the run.
pub fn cache_ref_logprobs(
    reference: &ModelCheckpoint,
    pairs: &[PreferencePair],
    normalized: bool,
    max_seq_len: usize,
) -> Result<RefLogpCache, ModelError> {
    let mut entries = BTreeMap::new();
    let mut excluded = Vec::new();
    for p in pairs {
        match ref_entry(reference, p, max_seq_len)? {
            Some(e) => {
                entries.insert(p.pair_id.clone(), e);
            }
            None => excluded.push(p.pair_id.clone()),
        }
    }
    Ok(RefLogpCache {
        fingerprint: reference.fingerprint(),
        normalized,
        entries,
        excluded,
    })
}

/// `softplus(-beta * margin)` with
/// `margin = (policy.chosen - ref.chosen) - (policy.rejected - ref.rejected)`.
pub fn dpo_loss(policy: LogpPair, reference: LogpPair, beta: f64) -> Result<f64, TrainError> {
    if policy.normalized != reference.normalized {
        return Err(TrainError::MixedNormalization);
    }
    let margin = (policy.chosen - reference.chosen) - (policy.rejected - reference.rejected);
    Ok(softplus(-beta * margin))
}

/// Policy-vs-reference margin of one pair.
pub fn margin(policy: LogpPair, reference: LogpPair) -> Result<f64, TrainError> {
    if policy.normalized != reference.normalized {
        return Err(TrainError::MixedNormalization);
    }
    Ok((policy.chosen - policy.rejected) - (reference.chosen - reference.rejected))
}

/// Mean DPO loss over `batch`. Each pair gets two independent forward
/// passes (chosen, rejected); reference values come from `cache`.
pub fn dpo_batch_loss<T: Float>(
    g: &mut Graph<T>,
    mv: &ModelVars,
    batch: &[&PreferencePair],
    cache: &RefLogpCache,
    config: &TrainConfig,
) -> Result<Var, TrainError> {
    if cache.normalized != config.length_normalize {
        return Err(TrainError::MixedNormalization);
    }
    let norm = config.length_normalize;
    let mut total: Option<Var> = None;
    for pair in batch {
        let reference = cache.get(&pair.pair_id)?;
        let chosen = sequence_logprob(g, mv, &pair.prompt.ids, &pair.chosen.ids, norm)?;
        let rejected = sequence_logprob(g, mv, &pair.prompt.ids, &pair.rejected.ids, norm)?;
        let policy_gap = g.sub(chosen, rejected)?;
        let ref_gap = g.scalar(T::from_f64(reference.chosen) - T::from_f64(reference.rejected));
        let m = g.sub(policy_gap, ref_gap)?;
        let z = g.scale(m, T::from_f64(-config.beta));
        let loss = g.softplus(z);
        total = Some(match total {
            None => loss,
            Some(acc) => g.add(acc, loss)?,
        });
    }
    let total = total.ok_or(TrainError::EmptyDataset)?;
    Ok(g.div_scalar(total, T::from_f64(batch.len() as f64)))
}

/// Sequence log-probs of both responses under `model`.
pub fn pair_logps(model: &ModelCheckpoint, pair: &PreferencePair, normalized: bool) -> Result<LogpPair, ModelError> {
    Ok(LogpPair {
        chosen: model.sequence_logprob(&pair.prompt.ids, &pair.chosen.ids, normalized)?,
        rejected: model.sequence_logprob(&pair.prompt.ids, &pair.rejected.ids, normalized)?,
        normalized,
    })
}

/// Held-out statistics of a policy against a reference cache.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub mean_margin: f64,
    /// Fraction of pairs whose chosen log-prob exceeds the rejected one.
    pub accuracy: f64,
    pub n: usize,
}

pub fn pair_stats(policy: &ModelCheckpoint, pairs: &[PreferencePair], cache: &RefLogpCache) -> Result<PairStats, TrainError> {
    let mut sum = 0.0;
    let mut correct = 0usize;
    let mut n = 0usize;
    for p in pairs.iter().filter(|p| cache.contains(&p.pair_id)) {
        let pol = pair_logps(policy, p, cache.normalized)?;
        sum += margin(pol, cache.get(&p.pair_id)?)?;
        correct += usize::from(pol.chosen > pol.rejected);
        n += 1;
    }
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    Ok(PairStats {
        mean_margin: sum / n as f64,
        accuracy: correct as f64 / n as f64,
        n,
    })
}

/// Trains `sft` with DPO; the reference is a frozen copy of `sft`, whose
/// log-probabilities are cached before the first step.
pub fn train_dpo(
    sft: &ModelCheckpoint,
    pairs: &[PreferencePair],
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ModelCheckpoint, RefLogpCache, Vec<StepRecord>), TrainError> {
    config.validate()?;
    let reference = sft.clone().with_role(Role::Reference);
    let cache = cache_ref_logprobs(&reference, pairs, config.length_normalize, config.max_seq_len)?;
    let (model, records) = train_dpo_cached(sft, pairs, &cache, config, on_step)?;
    Ok((model, cache, records))
}

/// [`train_dpo`] with a prebuilt cache, which must come from `sft` itself.
/// Pairs absent from the cache (context overflow) are skipped.
pub fn train_dpo_cached(
    sft: &ModelCheckpoint,
    pairs: &[PreferencePair],
    cache: &RefLogpCache,
    config: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<(ModelCheckpoint, Vec<StepRecord>), TrainError> {
    if sft.role != Role::Policy {
        return Err(TrainError::Config(format!("DPO starts from a policy checkpoint, got role {}", sft.role)));
    }
    if cache.fingerprint != sft.fingerprint() {
        return Err(TrainError::CacheFingerprint);
    }
    let usable: Vec<&PreferencePair> = pairs.iter().filter(|p| cache.contains(&p.pair_id)).collect();
    let mut model = sft.clone();
    let model_config = model.config().clone();
    let records = run_training_loop(
        model.tensors_mut(),
        usable.len(),
        config,
        |g, vars, idx| {
            let mv = ModelVars::from_vars(model_config.clone(), vars);
            let batch: Vec<&PreferencePair> = idx.iter().map(|&i| usable[i]).collect();
            dpo_batch_loss(g, &mv, &batch, cache, config)
        },
        on_step,
    )?;
    model.step += records.len() as u64;
    Ok((model, records))
}
