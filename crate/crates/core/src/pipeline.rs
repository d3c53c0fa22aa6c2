//! The three stages chained on one (model, benign prompt).

use serde::{Deserialize, Serialize};

use crate::boundary::{explore_on_model, BoundaryResult};
use crate::embed::{Prompt, TokenId, Vocab};
use crate::error::Result;
use crate::model_sim::{ModelRegistry, ModelSpec};
use crate::rng::derive_seed;
use crate::suffix_opt::{stage1_anchor_search, stage3_targeted, AnchorPair, AttackConfig, TargetedResult};

const BOUNDARY_STREAM: u64 = 0x626e_6472;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRun {
    pub anchor: AnchorPair,
    pub boundary: BoundaryResult,
    pub targeted: TargetedResult,
    pub boundary_seed_base: u64,
}

impl PipelineRun {
    pub fn verification_prompt(&self) -> &Prompt {
        &self.targeted.prompt
    }
}

/// Seed schedule start for the boundary probes of one run.
pub fn boundary_seed_base(run_seed: u64) -> u64 {
    derive_seed(&[run_seed, BOUNDARY_STREAM])
}

/// Stage 1 → Stage 2 → Stage 3 with the run seed in `cfg.seed`.
pub fn run_pipeline(
    family: &ModelRegistry,
    model: &ModelSpec,
    benign: &Prompt,
    cfg: &AttackConfig,
    epsilon: f64,
) -> Result<PipelineRun> {
    let anchor = stage1_anchor_search(family, model, benign, cfg)?;
    let origin = family.concept_id(&anchor.origin_concept)?;
    let seed_base = boundary_seed_base(cfg.seed);
    let boundary = explore_on_model(
        family,
        model,
        &model.encode(&anchor.p_adv)?,
        &model.encode(&anchor.p_pis)?,
        origin,
        epsilon,
        cfg.votes,
        seed_base,
    )?;
    let targeted = stage3_targeted(model, &anchor.p_adv, &boundary.e_star, cfg)?;
    Ok(PipelineRun { anchor, boundary, targeted, boundary_seed_base: seed_base })
}

/// Token ids with their rendered text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub base_tokens: Vec<TokenId>,
    pub suffix_tokens: Vec<TokenId>,
}

impl PromptRecord {
    pub fn new(prompt: &Prompt, vocab: &Vocab) -> Self {
        PromptRecord {
            text: prompt.render(vocab),
            base_tokens: prompt.base_tokens.clone(),
            suffix_tokens: prompt.suffix_tokens.clone(),
        }
    }

    pub fn prompt(&self) -> Prompt {
        Prompt::new(self.base_tokens.clone(), self.suffix_tokens.clone())
    }
}

/// JSON record of one pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineArtifact {
    pub model_id: String,
    pub config: AttackConfig,
    pub epsilon: f64,
    pub benign_prompt: PromptRecord,
    pub origin_concept: String,
    pub p_adv: PromptRecord,
    pub p_pis: PromptRecord,
    pub flip_iter: usize,
    pub loss_trace: Vec<f64>,
    pub flip_seed_base: u64,
    pub boundary: BoundaryResult,
    pub boundary_seed_base: u64,
    pub verification_prompt: PromptRecord,
    pub target_similarity: f64,
    pub initial_similarity: f64,
}

impl PipelineArtifact {
    pub fn new(run: &PipelineRun, model: &ModelSpec, benign: &Prompt, cfg: &AttackConfig, epsilon: f64, vocab: &Vocab) -> Self {
        PipelineArtifact {
            model_id: model.id.clone(),
            config: cfg.clone(),
            epsilon,
            benign_prompt: PromptRecord::new(&benign.base(), vocab),
            origin_concept: run.anchor.origin_concept.clone(),
            p_adv: PromptRecord::new(&run.anchor.p_adv, vocab),
            p_pis: PromptRecord::new(&run.anchor.p_pis, vocab),
            flip_iter: run.anchor.flip_iter,
            loss_trace: run.anchor.loss_trace.clone(),
            flip_seed_base: run.anchor.flip_seed_base,
            boundary: run.boundary.clone(),
            boundary_seed_base: run.boundary_seed_base,
            verification_prompt: PromptRecord::new(&run.targeted.prompt, vocab),
            target_similarity: run.targeted.similarity,
            initial_similarity: run.targeted.initial_similarity,
        }
    }
}
