//! Consistency scoring and the two-phase verification protocol.
//!
//! Owner phase: craft candidate prompts on the white-box target, keep the one
//! whose alignment scores spread the most, score it (`C_t`) and publish a
//! [`VerificationPackage`]. User phase: query a black-box endpoint with the
//! package prompt, score the answers (`C_v`) and accept the endpoint as the
//! target iff `C_v <= C_t`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::{cosine, Prompt, TokenId};
use crate::endpoint::{GenerateRequest, ImageEndpoint, ModelEndpoint};
use crate::error::{BpoError, Result};
use crate::model_sim::{ConceptId, ModelRegistry, ModelSpec};
use crate::par;
use crate::pipeline::{run_pipeline, PromptRecord};
use crate::rng::{derive_seed, KeyedRng};
use crate::suffix_opt::{baseline_greedy, baseline_random, AttackConfig};

const PIPELINE_STREAM: u64 = 1;
const RANDOM_STREAM: u64 = 2;
const SELECT_STREAM: u64 = 3;
const SCORE_STREAM: u64 = 4;
const USER_STREAM: u64 = 5;

/// `|2r - 1|`: 1 when every image agrees, 0 for an even split.
pub fn consistency_score(r: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(BpoError::OutOfRange(r));
    }
    Ok((2.0 * r - 1.0).abs())
}

/// `|2k - n| / n` for `k` deviating images out of `n`. Same value as
/// [`consistency_score`] of `k / n` up to rounding, but exact in the integer
/// step, so `k` and `n - k` deviations score identically.
pub fn consistency_from_counts(deviating: usize, n: usize) -> Result<f64> {
    if n == 0 || deviating > n {
        return Err(BpoError::InvalidConfig(format!("{deviating} deviating images out of {n}")));
    }
    Ok((2 * deviating).abs_diff(n) as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Target,
    NotTarget,
}

/// `Target` iff `c_v <= c_t`.
pub fn decide(c_v: f64, c_t: f64) -> Result<Verdict> {
    for c in [c_v, c_t] {
        if !(0.0..=1.0).contains(&c) {
            return Err(BpoError::OutOfRange(c));
        }
    }
    Ok(if c_v <= c_t { Verdict::Target } else { Verdict::NotTarget })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub prompt: String,
    pub prompt_tokens: Vec<TokenId>,
    pub origin_concept: String,
    /// Per image: does it deviate from the origin concept?
    pub judgments: Vec<bool>,
    pub n_images: usize,
    pub r: f64,
    pub c: f64,
    /// Cosine of each image proxy to the origin concept anchor.
    pub alignment_scores: Vec<f64>,
    pub seed_schedule: Vec<u64>,
}

impl ConsistencyReport {
    /// Builds a report from per-image judgments.
    pub fn from_judgments(
        prompt: String,
        prompt_tokens: Vec<TokenId>,
        origin_concept: String,
        judgments: Vec<bool>,
        alignment_scores: Vec<f64>,
        seed_schedule: Vec<u64>,
    ) -> Result<Self> {
        let n_images = judgments.len();
        if n_images == 0 {
            return Err(BpoError::InvalidConfig("a report needs at least one image".into()));
        }
        let deviating = judgments.iter().filter(|&&d| d).count();
        Ok(ConsistencyReport {
            prompt,
            prompt_tokens,
            origin_concept,
            judgments,
            n_images,
            r: deviating as f64 / n_images as f64,
            c: consistency_from_counts(deviating, n_images)?,
            alignment_scores,
            seed_schedule,
        })
    }
}

/// Generates `n` images through `endpoint` with seeds `seed_base ..` and
/// judges each against `origin`.
pub fn evaluate_prompt(
    endpoint: &dyn ImageEndpoint,
    family: &ModelRegistry,
    prompt: &str,
    origin: &str,
    n: usize,
    seed_base: u64,
) -> Result<ConsistencyReport> {
    if n == 0 {
        return Err(BpoError::InvalidConfig("n must be at least 1".into()));
    }
    let tokens = family.tokenize(prompt)?;
    let origin_id = family.concept_id(origin)?;
    let req = GenerateRequest { prompt: prompt.to_string(), origin_concept: origin.to_string(), n, seed_base };
    let resp = endpoint.generate(&req)?;
    resp.validate(&req)?;
    let anchor = family.anchor(origin_id);
    let mut judgments = Vec::with_capacity(n);
    let mut alignment = Vec::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    for img in &resp.images {
        judgments.push(family.extract_semantics_of(&img.proxy)? != origin_id);
        alignment.push(cosine(&img.proxy, anchor)?);
        seeds.push(img.seed);
    }
    ConsistencyReport::from_judgments(
        tokens.render(&family.vocab),
        tokens.tokens().collect(),
        origin.to_string(),
        judgments,
        alignment,
        seeds,
    )
}

/// A candidate verification prompt with the benign prompt it grew from.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub benign: Prompt,
    pub prompt: Prompt,
    pub origin: ConceptId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub std_devs: Vec<f64>,
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Picks the candidate whose `n` generations on `model` have the largest
/// population standard deviation of `cos(image, E_target(benign))`. Every
/// candidate uses the seed schedule `seed_base ..`; ties go to the lowest index.
pub fn select_best_candidate(
    family: &ModelRegistry,
    model: &ModelSpec,
    candidates: &[Candidate],
    n: usize,
    seed_base: u64,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(BpoError::EmptyCandidates);
    }
    if n == 0 {
        return Err(BpoError::InvalidConfig("n must be at least 1".into()));
    }
    let stds = par::map(candidates, |c| -> Result<f64> {
        let reference = model.encode(&c.benign)?;
        let e = model.encode(&c.prompt)?;
        let scores = (0..n as u64)
            .map(|i| {
                let img = family.generate(model, &e, c.origin, seed_base.wrapping_add(i))?;
                cosine(&img.proxy, &reference)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(population_std(&scores))
    });
    let std_devs = stds.into_iter().collect::<Result<Vec<_>>>()?;
    let index = par::argmax(&std_devs).ok_or(BpoError::EmptyCandidates)?;
    Ok(Selection { index, std_devs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Normal,
    Random,
    Greedy,
    Bpo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Normal, Method::Random, Method::Greedy, Method::Bpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Normal => "normal",
            Method::Random => "random",
            Method::Greedy => "greedy",
            Method::Bpo => "bpo",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BpoError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BpoError::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Which stage artifact of a BPO run is used as the candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    PPis,
    PAdv,
    PV,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::PPis, PromptKind::PAdv, PromptKind::PV];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::PPis => "p_pis",
            PromptKind::PAdv => "p_adv",
            PromptKind::PV => "p_v",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptKind {
    type Err = BpoError;

    fn from_str(s: &str) -> Result<Self> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| BpoError::InvalidConfig(format!("unknown prompt kind {s:?}")))
    }
}

/// Settings shared by the owner phase and the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    /// Suffix search settings; the run seed is derived per pipeline run.
    pub attack: AttackConfig,
    pub epsilon: f64,
    pub n_images: usize,
    pub per_prompt_candidates: usize,
    /// Extra pipeline attempts allowed per benign prompt after failures.
    pub retry_budget: usize,
    pub master_seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            attack: AttackConfig::default(),
            epsilon: 0.001,
            n_images: 10,
            per_prompt_candidates: 10,
            retry_budget: 3,
            master_seed: 0,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.attack.validate(vocab_size)?;
        if !(self.epsilon > 0.0) {
            return Err(BpoError::NonPositiveEpsilon(self.epsilon));
        }
        if self.n_images == 0 || self.per_prompt_candidates == 0 {
            return Err(BpoError::InvalidConfig("n_images and per_prompt_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// FNV-1a of a model id, used to key per-model seed streams.
fn id_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Candidate pools from full pipeline runs, one per stage artifact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BpoPools {
    pub p_pis: Vec<Candidate>,
    pub p_adv: Vec<Candidate>,
    pub p_v: Vec<Candidate>,
    pub attempted_runs: usize,
    pub failed_runs: usize,
}

impl BpoPools {
    pub fn get(&self, kind: PromptKind) -> &[Candidate] {
        match kind {
            PromptKind::PPis => &self.p_pis,
            PromptKind::PAdv => &self.p_adv,
            PromptKind::PV => &self.p_v,
        }
    }
}

/// Runs the pipeline until `per_prompt_candidates` runs succeed for each
/// benign prompt or its retry budget is spent.
pub fn bpo_pools(family: &ModelRegistry, model: &ModelSpec, benign_prompts: &[String], cfg: &VerifyConfig) -> Result<BpoPools> {
    let prompts = benign_prompts.iter().map(|t| family.tokenize(t)).collect::<Result<Vec<_>>>()?;
    let key = id_key(&model.id);
    let per_prompt = par::map_range(prompts.len(), |pi| -> Result<(Vec<[Candidate; 3]>, usize, usize)> {
        let benign = &prompts[pi];
        let mut found = Vec::new();
        let (mut attempts, mut failures) = (0, 0);
        while found.len() < cfg.per_prompt_candidates && failures <= cfg.retry_budget {
            let seed = derive_seed(&[cfg.master_seed, PIPELINE_STREAM, key, pi as u64, attempts as u64]);
            attempts += 1;
            match run_pipeline(family, model, benign, &cfg.attack.with_seed(seed), cfg.epsilon) {
                Ok(run) => {
                    let origin = family.concept_id(&run.anchor.origin_concept)?;
                    let cand = |p: &Prompt| Candidate { benign: benign.clone(), prompt: p.clone(), origin };
                    found.push([cand(&run.anchor.p_pis), cand(&run.anchor.p_adv), cand(&run.targeted.prompt)]);
                }
                Err(
                    err @ (BpoError::NotFound(_) | BpoError::EndpointsAgree | BpoError::InitialPromptFlipped),
                ) => {
                    log::debug!("{} prompt {pi} attempt {attempts}: {err}", model.id);
                    failures += 1;
                }
                Err(err) => return Err(err),
            }
        }
        Ok((found, attempts, failures))
    });
    let mut pools = BpoPools::default();
    for item in per_prompt {
        let (found, attempts, failures) = item?;
        pools.attempted_runs += attempts;
        pools.failed_runs += failures;
        for [pis, adv, v] in found {
            pools.p_pis.push(pis);
            pools.p_adv.push(adv);
            pools.p_v.push(v);
        }
    }
    if pools.failed_runs > 0 {
        log::info!("{}: skipped {} failed pipeline runs of {}", model.id, pools.failed_runs, pools.attempted_runs);
    }
    Ok(pools)
}

/// Baseline candidates for `method` (not `Bpo`).
pub fn baseline_pool(
    family: &ModelRegistry,
    model: &ModelSpec,
    method: Method,
    benign_prompts: &[String],
    cfg: &VerifyConfig,
) -> Result<Vec<Candidate>> {
    let key = id_key(&model.id);
    let mut out = Vec::new();
    for (pi, text) in benign_prompts.iter().enumerate() {
        let benign = family.tokenize(text)?;
        let origin = family.origin_concept(model, &benign)?;
        let cand = |prompt: Prompt| Candidate { benign: benign.clone(), prompt, origin };
        match method {
            Method::Normal => out.push(cand(benign.clone())),
            Method::Random => {
                for c in 0..cfg.per_prompt_candidates as u64 {
                    let mut rng = KeyedRng::new(&[cfg.master_seed, RANDOM_STREAM, key, pi as u64, c]);
                    out.push(cand(baseline_random(&benign, cfg.attack.suffix_len, family.vocab.len(), &mut rng)?));
                }
            }
            Method::Greedy => out.push(cand(baseline_greedy(family, model, &benign, &cfg.attack)?)),
            Method::Bpo => return Err(BpoError::InvalidConfig("bpo candidates come from bpo_pools".into())),
        }
    }
    Ok(out)
}

/// Everything a user needs to verify an endpoint against the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPackage {
    pub target_model_id: String,
    pub method: Method,
    pub prompt_kind: PromptKind,
    pub benign_prompt: String,
    pub origin_concept: String,
    pub verification_prompt: PromptRecord,
    pub c_t: f64,
    pub n_images: usize,
    pub seed_schedule: Vec<u64>,
    pub selection_std: f64,
    pub pool_size: usize,
}

impl VerificationPackage {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pkg: VerificationPackage = serde_json::from_str(text)?;
        if pkg.n_images == 0 || !(0.0..=1.0).contains(&pkg.c_t) {
            return Err(BpoError::InvalidConfig("package needs n_images >= 1 and c_t in [0, 1]".into()));
        }
        Ok(pkg)
    }
}

/// Selects from `pool` and scores the winner on the target with its own
/// seed schedule.
pub fn package_from_pool(
    family: &ModelRegistry,
    model: &ModelSpec,
    method: Method,
    kind: PromptKind,
    pool: &[Candidate],
    cfg: &VerifyConfig,
) -> Result<VerificationPackage> {
    if pool.is_empty() {
        return Err(BpoError::NoViableCandidate(model.id.clone()));
    }
    let key = id_key(&model.id);
    let selection = select_best_candidate(
        family,
        model,
        pool,
        cfg.n_images,
        derive_seed(&[cfg.master_seed, SELECT_STREAM, key]),
    )?;
    let chosen = &pool[selection.index];
    let origin = family.label(chosen.origin).to_string();
    let record = PromptRecord::new(&chosen.prompt, &family.vocab);
    let endpoint = ModelEndpoint::new(family, model);
    let report = evaluate_prompt(
        &endpoint,
        family,
        &record.text,
        &origin,
        cfg.n_images,
        derive_seed(&[cfg.master_seed, SCORE_STREAM, key]),
    )?;
    Ok(VerificationPackage {
        target_model_id: model.id.clone(),
        method,
        prompt_kind: kind,
        benign_prompt: chosen.benign.render(&family.vocab),
        origin_concept: origin,
        verification_prompt: record,
        c_t: report.c,
        n_images: cfg.n_images,
        seed_schedule: report.seed_schedule,
        selection_std: selection.std_devs[selection.index],
        pool_size: pool.len(),
    })
}

/// Phase one on the white-box target: build candidates with `method`,
/// select one and score it.
pub fn owner_phase(
    family: &ModelRegistry,
    model: &ModelSpec,
    method: Method,
    benign_prompts: &[String],
    cfg: &VerifyConfig,
) -> Result<VerificationPackage> {
    if benign_prompts.is_empty() {
        return Err(BpoError::InvalidConfig("no benign prompts".into()));
    }
    cfg.validate(family.vocab.len())?;
    let pool = match method {
        Method::Bpo => bpo_pools(family, model, benign_prompts, cfg)?.p_v,
        other => baseline_pool(family, model, other, benign_prompts, cfg)?,
    };
    package_from_pool(family, model, method, PromptKind::PV, &pool, cfg)
}

/// Phase two against a black-box endpoint, with the user's own seeds.
pub fn user_phase(
    package: &VerificationPackage,
    endpoint: &dyn ImageEndpoint,
    family: &ModelRegistry,
    seed_base: u64,
) -> Result<(Verdict, ConsistencyReport)> {
    let report = evaluate_prompt(
        endpoint,
        family,
        &package.verification_prompt.text,
        &package.origin_concept,
        package.n_images,
        seed_base,
    )?;
    Ok((decide(report.c, package.c_t)?, report))
}

/// A fresh user seed base that never collides with the owner's streams.
pub fn fresh_user_seed(master_seed: u64, target_id: &str, tested_id: &str) -> u64 {
    derive_seed(&[master_seed, USER_STREAM, id_key(target_id), id_key(tested_id)])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Positive class: the verdict says `Target`. Precision, recall and F1 are
/// 0 when their denominators are 0.
pub fn metrics(outcomes: &[(bool, Verdict)]) -> Result<MetricsRow> {
    if outcomes.is_empty() {
        return Err(BpoError::InvalidConfig("no outcomes".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for &(is_target, verdict) in outcomes {
        match (is_target, verdict) {
            (true, Verdict::Target) => tp += 1,
            (false, Verdict::Target) => fp += 1,
            (false, Verdict::NotTarget) => tn += 1,
            (true, Verdict::NotTarget) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(MetricsRow { accuracy: ratio(tp + tn, outcomes.len()), precision, recall, f1 })
}

/// Column-wise mean of metric rows.
pub fn average(rows: &[MetricsRow]) -> Option<MetricsRow> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Some(MetricsRow {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model_id: String,
    pub is_target: bool,
    pub c_v: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub package: Option<VerificationPackage>,
    pub evaluations: Vec<Evaluation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsRow>,
    pub failed_runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_digest: String,
    pub family_seed: u64,
    pub method: Method,
    pub prompt_kind: PromptKind,
    pub config: VerifyConfig,
    pub rows: Vec<TargetRow>,
    pub average: Option<MetricsRow>,
    pub failed_targets: usize,
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

#[derive(Serialize)]
struct DigestInput<'a> {
    config: &'a VerifyConfig,
    family_seed: u64,
    models: Vec<&'a str>,
    method: Method,
    prompt_kind: PromptKind,
}

fn evaluate_package(family: &ModelRegistry, package: &VerificationPackage, cfg: &VerifyConfig) -> Result<Vec<Evaluation>> {
    family
        .models
        .iter()
        .map(|tested| {
            let endpoint = ModelEndpoint::new(family, tested);
            let seed = fresh_user_seed(cfg.master_seed, &package.target_model_id, &tested.id);
            let (verdict, report) = user_phase(package, &endpoint, family, seed)?;
            Ok(Evaluation {
                model_id: tested.id.clone(),
                is_target: tested.id == package.target_model_id,
                c_v: report.c,
                verdict,
            })
        })
        .collect()
}

fn target_rows(
    family: &ModelRegistry,
    target: &ModelSpec,
    method: Method,
    kinds: &[PromptKind],
    benign: &[String],
    cfg: &VerifyConfig,
) -> Result<Vec<TargetRow>> {
    let (pools, failed_runs): (Vec<Vec<Candidate>>, usize) = match method {
        Method::Bpo => {
            let p = bpo_pools(family, target, benign, cfg)?;
            (kinds.iter().map(|&k| p.get(k).to_vec()).collect(), p.failed_runs)
        }
        other => {
            let pool = baseline_pool(family, target, other, benign, cfg)?;
            (vec![pool; kinds.len()], 0)
        }
    };
    kinds
        .iter()
        .zip(pools)
        .map(|(&kind, pool)| {
            let failed = |e: BpoError| TargetRow {
                target: target.id.clone(),
                ok: false,
                error: Some(e.to_string()),
                package: None,
                evaluations: Vec::new(),
                metrics: None,
                failed_runs,
            };
            let package = match package_from_pool(family, target, method, kind, &pool, cfg) {
                Ok(p) => p,
                Err(e @ BpoError::NoViableCandidate(_)) => return Ok(failed(e)),
                Err(e) => return Err(e),
            };
            let evaluations = evaluate_package(family, &package, cfg)?;
            let outcomes: Vec<(bool, Verdict)> = evaluations.iter().map(|e| (e.is_target, e.verdict)).collect();
            Ok(TargetRow {
                target: target.id.clone(),
                ok: true,
                error: None,
                package: Some(package),
                metrics: Some(metrics(&outcomes)?),
                evaluations,
                failed_runs,
            })
        })
        .collect()
}

/// Runs the protocol with every model as target, once per prompt kind.
/// BPO pipeline runs are shared across kinds.
pub fn run_benchmark_kinds(
    family: &ModelRegistry,
    method: Method,
    kinds: &[PromptKind],
    cfg: &VerifyConfig,
) -> Result<Vec<BenchmarkReport>> {
    if family.models.len() < 2 {
        return Err(BpoError::InvalidRegistry("benchmark needs at least 2 models".into()));
    }
    cfg.validate(family.vocab.len())?;
    let per_target = par::map(&family.models, |t| target_rows(family, t, method, kinds, &family.benign_prompts, cfg));
    let per_target = per_target.into_iter().collect::<Result<Vec<_>>>()?;
    kinds
        .iter()
        .enumerate()
        .map(|(ki, &kind)| {
            let rows: Vec<TargetRow> = per_target.iter().map(|rows| rows[ki].clone()).collect();
            let ok: Vec<MetricsRow> = rows.iter().filter_map(|r| r.metrics).collect();
            let digest = config_digest(&DigestInput {
                config: cfg,
                family_seed: family.family_seed,
                models: family.models.iter().map(|m| m.id.as_str()).collect(),
                method,
                prompt_kind: kind,
            })?;
            Ok(BenchmarkReport {
                config_digest: digest,
                family_seed: family.family_seed,
                method,
                prompt_kind: kind,
                config: cfg.clone(),
                failed_targets: rows.len() - ok.len(),
                average: average(&ok),
                rows,
            })
        })
        .collect()
}

pub fn run_benchmark(family: &ModelRegistry, method: Method, kind: PromptKind, cfg: &VerifyConfig) -> Result<BenchmarkReport> {
    Ok(run_benchmark_kinds(family, method, &[kind], cfg)?.remove(0))
}

/// BPO benchmark for `p_pis`, `p_adv` and `p_v` from one set of runs.
pub fn run_ablation(family: &ModelRegistry, cfg: &VerifyConfig) -> Result<Vec<BenchmarkReport>> {
    run_benchmark_kinds(family, Method::Bpo, &PromptKind::ALL, cfg)
}

pub const BENCH_CSV_HEADER: &str = "model_id,method,prompt_kind,status,accuracy,precision,recall,f1,c_t";

/// One CSV row per (target, report), then an `average` row per report.
pub fn write_bench_csv<W: Write>(out: &mut W, reports: &[BenchmarkReport]) -> Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    let fmt_row = |m: &Option<MetricsRow>| match m {
        Some(m) => format!("{:.4},{:.4},{:.4},{:.4}", m.accuracy, m.precision, m.recall, m.f1),
        None => ",,,".to_string(),
    };
    for rep in reports {
        for row in &rep.rows {
            let c_t = row.package.as_ref().map(|p| format!("{}", p.c_t)).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                row.target,
                rep.method,
                rep.prompt_kind,
                if row.ok { "ok" } else { "failed" },
                fmt_row(&row.metrics),
                c_t
            )?;
        }
    }
    for rep in reports {
        writeln!(out, "average,{},{},ok,{},", rep.method, rep.prompt_kind, fmt_row(&rep.average))?;
    }
    Ok(())
}

/// Draws an unrelated 64-bit seed from a stream; handy for CLI defaults.
pub fn seed_from(master_seed: u64, tag: u64) -> u64 {
    KeyedRng::new(&[master_seed, tag]).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_values() {
        assert_eq!(consistency_score(0.5).unwrap(), 0.0);
        assert_eq!(consistency_score(0.0).unwrap(), 1.0);
        assert_eq!(consistency_score(1.0).unwrap(), 1.0);
        assert!((consistency_score(0.7).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(consistency_score(1.2).unwrap_err(), BpoError::OutOfRange(1.2));
        assert!(consistency_score(f64::NAN).is_err());
    }

    #[test]
    fn counts_are_symmetric() {
        for k in 0..=10 {
            let c = consistency_from_counts(k, 10).unwrap();
            assert_eq!(c, consistency_from_counts(10 - k, 10).unwrap());
            assert!((c - consistency_score(k as f64 / 10.0).unwrap()).abs() < 1e-15);
        }
        // the float formula is not symmetric in the last bit
        assert_ne!(consistency_score(0.2).unwrap(), consistency_score(0.8).unwrap());
        assert!(consistency_from_counts(3, 2).is_err());
    }

    #[test]
    fn decide_is_inclusive() {
        assert_eq!(decide(0.4, 0.4).unwrap(), Verdict::Target);
        assert_eq!(decide(1.0, 0.0).unwrap(), Verdict::NotTarget);
        assert_eq!(decide(0.0, 0.2).unwrap(), Verdict::Target);
        assert!(decide(-0.1, 0.2).is_err());
        assert!(decide(0.1, 1.5).is_err());
    }

    #[test]
    fn report_from_judgments() {
        let j = vec![true, true, true, true, true, false, false, false, false, false];
        let r = ConsistencyReport::from_judgments("p".into(), vec![], "corgi".into(), j, vec![], vec![]).unwrap();
        assert_eq!(r.r, 0.5);
        assert_eq!(r.c, 0.0);
        let r = ConsistencyReport::from_judgments("p".into(), vec![], "corgi".into(), vec![false; 10], vec![], vec![]).unwrap();
        assert_eq!((r.r, r.c), (0.0, 1.0));
        assert!(ConsistencyReport::from_judgments("p".into(), vec![], "c".into(), vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn metrics_edge_cases() {
        let all_rejected = vec![(true, Verdict::NotTarget), (false, Verdict::NotTarget)];
        let m = metrics(&all_rejected).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 0.5));
        assert!(metrics(&[]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        for k in PromptKind::ALL {
            assert_eq!(k.name().parse::<PromptKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("tvn".parse::<Method>().is_err());
    }

    #[test]
    fn population_std_of_constant_is_zero() {
        assert_eq!(population_std(&[0.3; 5]), 0.0);
        assert!((population_std(&[0.0, 1.0]) - 0.5).abs() < 1e-15);
    }
}
