//! Discrete suffix search.
//!
//! [`gcg_step`] is one greedy coordinate-gradient update: rank replacement
//! tokens per suffix slot by the one-hot gradient, sample single-swap
//! candidates from the top-k sets, keep the batch argmin. Stage 1
//! ([`stage1_anchor_search`]) runs it against the benign embedding until the
//! generated semantics flip; Stage 3 ([`stage3_targeted`]) runs it toward a
//! boundary embedding. Random and greedy baselines live here too.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{token_gradient, Embedding, EncoderParams, Objective, Prompt, TokenId};
use crate::error::{BpoError, Result};
use crate::model_sim::{ConceptId, ModelRegistry, ModelSpec};
use crate::par;
use crate::rng::{derive_seed, KeyedRng};

const FLIP_STREAM: u64 = 0x666c_6970;
const STAGE1_STREAM: u64 = 0x7374_6731;
const STAGE3_STREAM: u64 = 0x7374_6733;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub suffix_len: usize,
    pub max_iters: usize,
    pub batch_size: usize,
    pub top_k: usize,
    /// Generations per flip check; a strict majority must deviate.
    pub votes: usize,
    pub seed: u64,
    /// Evaluate every distinct single swap from the top-k sets instead of
    /// sampling `batch_size` of them.
    #[serde(default)]
    pub enumerate: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            suffix_len: 8,
            max_iters: 100,
            batch_size: 256,
            top_k: 16,
            votes: 5,
            seed: 0,
            enumerate: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(BpoError::InvalidConfig(m));
        if self.suffix_len == 0 {
            return bad("suffix length must be at least 1".into());
        }
        if self.max_iters == 0 {
            return bad("max iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return bad(format!("top_k {} outside 1..={vocab_size}", self.top_k));
        }
        if self.votes.is_multiple_of(2) {
            return bad(format!("votes must be odd, got {}", self.votes));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AttackConfig { seed, ..self.clone() }
    }
}

/// Stage 1 output: the first flipping prompt and the one just before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub p_adv: Prompt,
    pub p_pis: Prompt,
    pub flip_iter: usize,
    pub loss_trace: Vec<f64>,
    pub origin_concept: String,
    /// First seed of the flip-check schedule used during the run.
    pub flip_seed_base: u64,
}

/// Majority-of-`votes` deviation check on an arbitrary embedding, with seeds
/// `seed_base .. seed_base + votes`.
pub fn flipped_at(
    family: &ModelRegistry,
    model: &ModelSpec,
    e: &Embedding,
    origin: ConceptId,
    votes: usize,
    seed_base: u64,
) -> Result<bool> {
    let mut deviating = 0;
    for i in 0..votes as u64 {
        let image = family.generate(model, e, origin, seed_base.wrapping_add(i))?;
        if family.extract_semantics_of(&image.proxy)? != origin {
            deviating += 1;
        }
    }
    Ok(2 * deviating > votes)
}

/// Whether `prompt`'s generations on `model` deviate from `origin` by majority.
pub fn semantic_flipped(
    family: &ModelRegistry,
    model: &ModelSpec,
    prompt: &Prompt,
    origin: ConceptId,
    votes: usize,
    seed_base: u64,
) -> Result<bool> {
    if votes.is_multiple_of(2) {
        return Err(BpoError::InvalidConfig(format!("votes must be odd, got {votes}")));
    }
    flipped_at(family, model, &model.encode(prompt)?, origin, votes, seed_base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub suffix: Vec<TokenId>,
    pub loss: f64,
    pub candidates: usize,
}

/// Token ids of one gradient row, best first (ascending gradient, ties low id).
fn top_k_tokens(row: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..row.len() as TokenId).collect();
    ids.sort_by(|&a, &b| row[a as usize].total_cmp(&row[b as usize]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// One coordinate-gradient update of `prompt`'s suffix. Returns the batch
/// minimum even when it is worse than the incoming suffix.
pub fn gcg_step(
    encoder: &EncoderParams,
    prompt: &Prompt,
    objective: &Objective,
    cfg: &AttackConfig,
    rng: &mut KeyedRng,
) -> Result<StepOutcome> {
    let n = prompt.suffix_tokens.len();
    if n == 0 {
        return Err(BpoError::EmptySuffix);
    }
    cfg.validate(encoder.vocab_size())?;
    let table = token_gradient(encoder, prompt, objective)?;
    let top: Vec<Vec<TokenId>> = table.grads.iter().map(|row| top_k_tokens(row, cfg.top_k)).collect();

    let current = &prompt.suffix_tokens;
    let mut batch: Vec<Vec<TokenId>> = Vec::new();
    if cfg.enumerate {
        let mut seen = HashSet::new();
        for (j, set) in top.iter().enumerate() {
            let mut set = set.clone();
            set.sort_unstable();
            for v in set {
                let mut cand = current.clone();
                cand[j] = v;
                if seen.insert(cand.clone()) {
                    batch.push(cand);
                }
            }
        }
    } else {
        batch.reserve(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let j = rng.random_range(0..n);
            let v = top[j][rng.random_range(0..top[j].len())];
            let mut cand = current.clone();
            cand[j] = v;
            batch.push(cand);
        }
    }

    let losses = par::map(&batch, |cand| objective.loss(encoder, &prompt.with_suffix(cand.clone())));
    let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
    let best = par::argmin(&losses).ok_or(BpoError::EmptyCandidates)?;
    Ok(StepOutcome { suffix: batch.swap_remove(best), loss: losses[best], candidates: losses.len() })
}

/// Seed schedule start for the flip checks of one run.
pub fn flip_seed_base(run_seed: u64) -> u64 {
    derive_seed(&[run_seed, FLIP_STREAM])
}

/// Stage 1: push the suffix away from the benign embedding until a majority
/// of generations leave the benign concept.
pub fn stage1_anchor_search(
    family: &ModelRegistry,
    model: &ModelSpec,
    benign: &Prompt,
    cfg: &AttackConfig,
) -> Result<AnchorPair> {
    cfg.validate(family.vocab.len())?;
    let benign = benign.base();
    let origin = family.origin_concept(model, &benign)?;
    let objective = Objective::Untargeted(model.encode(&benign)?);
    let seed_base = flip_seed_base(cfg.seed);
    let mut rng = KeyedRng::new(&[cfg.seed, STAGE1_STREAM]);

    let mut current = benign.with_suffix(vec![family.vocab.initializer(); cfg.suffix_len]);
    if semantic_flipped(family, model, &current, origin, cfg.votes, seed_base)? {
        return Err(BpoError::InitialPromptFlipped);
    }
    let mut trace = Vec::with_capacity(cfg.max_iters);
    for k in 1..=cfg.max_iters {
        let step = gcg_step(&model.encoder, &current, &objective, cfg, &mut rng)?;
        trace.push(step.loss);
        let previous = std::mem::replace(&mut current, benign.with_suffix(step.suffix));
        if semantic_flipped(family, model, &current, origin, cfg.votes, seed_base)? {
            return Ok(AnchorPair {
                p_adv: current,
                p_pis: previous,
                flip_iter: k,
                loss_trace: trace,
                origin_concept: family.label(origin).to_string(),
                flip_seed_base: seed_base,
            });
        }
    }
    Err(BpoError::NotFound(cfg.max_iters))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetedResult {
    pub prompt: Prompt,
    /// Cosine between the returned prompt's embedding and the target.
    pub similarity: f64,
    pub initial_similarity: f64,
    pub similarity_trace: Vec<f64>,
}

/// Stage 3: move the suffix of `start` toward `target`, returning the
/// best iterate seen over `cfg.max_iters` steps.
pub fn stage3_targeted(
    model: &ModelSpec,
    start: &Prompt,
    target: &Embedding,
    cfg: &AttackConfig,
) -> Result<TargetedResult> {
    if start.suffix_tokens.is_empty() {
        return Err(BpoError::EmptySuffix);
    }
    if !target.is_finite() {
        return Err(BpoError::InvalidConfig("target embedding is not finite".into()));
    }
    cfg.validate(model.encoder.vocab_size())?;
    let objective = Objective::Targeted(target.clone());
    let mut rng = KeyedRng::new(&[cfg.seed, STAGE3_STREAM]);

    let initial = -objective.loss(&model.encoder, start)?;
    let mut best = (start.clone(), initial);
    let mut current = start.clone();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    for _ in 0..cfg.max_iters {
        let step = gcg_step(&model.encoder, &current, &objective, cfg, &mut rng)?;
        current = current.with_suffix(step.suffix);
        let sim = -step.loss;
        trace.push(sim);
        if sim > best.1 {
            best = (current.clone(), sim);
        }
    }
    Ok(TargetedResult { prompt: best.0, similarity: best.1, initial_similarity: initial, similarity_trace: trace })
}

/// Benign prompt plus `n` uniformly drawn tokens.
pub fn baseline_random(benign: &Prompt, n: usize, vocab_size: usize, rng: &mut KeyedRng) -> Result<Prompt> {
    if n == 0 {
        return Err(BpoError::InvalidConfig("suffix length must be at least 1".into()));
    }
    let suffix = (0..n).map(|_| rng.random_range(0..vocab_size) as TokenId).collect();
    Ok(benign.base().with_suffix(suffix))
}

/// Gradient-free coordinate descent on the untargeted objective: sweep the
/// slots left to right, take the exhaustive best token per slot when it
/// strictly lowers the loss, stop after a sweep without change or
/// `cfg.max_iters` sweeps.
pub fn baseline_greedy(
    family: &ModelRegistry,
    model: &ModelSpec,
    benign: &Prompt,
    cfg: &AttackConfig,
) -> Result<Prompt> {
    cfg.validate(family.vocab.len())?;
    let benign = benign.base();
    let objective = Objective::Untargeted(model.encode(&benign)?);
    let mut suffix = vec![family.vocab.initializer(); cfg.suffix_len];
    let mut loss = objective.loss(&model.encoder, &benign.with_suffix(suffix.clone()))?;
    let vocab_size = model.encoder.vocab_size();
    for _ in 0..cfg.max_iters {
        let mut changed = false;
        for j in 0..suffix.len() {
            let losses = par::map_range(vocab_size, |v| {
                let mut cand = suffix.clone();
                cand[j] = v as TokenId;
                objective.loss(&model.encoder, &benign.with_suffix(cand))
            });
            let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
            let best = par::argmin(&losses).expect("non-empty vocabulary");
            if losses[best] < loss {
                suffix[j] = best as TokenId;
                loss = losses[best];
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(benign.with_suffix(suffix))
}
