//! Synthetic text-to-image model family.
//!
//! Every model shares one embedding table and one set of concept anchors, so
//! ordinary prompts behave alike across the family. What differs per model is
//! the encoder mix and the semantic boundary: a logistic retain probability
//! over the anchor margin with a model-specific shift and temperature.
//!
//! A generated "image" is an [`ImageProxy`]: the sampled concept's anchor plus
//! isotropic Gaussian noise, re-normalized. The nearest-anchor extractor plays
//! the role of the vision-language judge.

use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{
    cosine, default_position_weights, dot, Embedding, EncoderParams, Prompt, Vocab, CARRIER_WORDS,
    CONCEPT_LABELS, DEFAULT_MAX_LEN, INITIALIZER_TOKEN,
};
use crate::error::{BpoError, Result};
use crate::rng::KeyedRng;

pub type ConceptId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptAnchor {
    pub label: String,
    pub anchor: Embedding,
}

/// One synthetic model `G ∘ E`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub id: String,
    pub encoder: EncoderParams,
    /// Margin at which the model is equally likely to keep or lose the concept.
    pub margin_shift: f64,
    /// Width of the logistic transition in margin units.
    pub temperature: f64,
    /// Standard deviation of the per-coordinate image noise.
    pub noise_scale: f64,
    pub rng_salt: u64,
}

impl ModelSpec {
    pub fn encode(&self, prompt: &Prompt) -> Result<Embedding> {
        self.encoder.encode(prompt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageProxy {
    pub label: String,
    pub proxy: Embedding,
    pub seed: u64,
}

/// Knobs of [`build_family_with`]. The defaults are what `build_family` uses.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyParams {
    /// Scale of the random perturbation in `A = I + eps * R`, `R_ij ~ N(0, 1/d)`.
    pub mix_eps: f64,
    pub margin_shift_range: (f64, f64),
    /// Where inside its stratum each model's shift may fall, as fractions of
    /// the stratum width. Keeps neighbouring boundaries apart.
    pub shift_jitter: (f64, f64),
    pub temperature_range: (f64, f64),
    pub noise_scale: f64,
    /// Norm of the rows of the carrier words and the initializer token.
    pub carrier_norm: f64,
    /// Norm range of every other non-concept row.
    pub filler_norm_range: (f64, f64),
    pub benign_prompt_count: usize,
    /// Minimum retain probability every model must show on every benign prompt.
    pub min_benign_retain: f64,
    pub max_attempts: usize,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            mix_eps: 0.05,
            margin_shift_range: (-0.5, 0.5),
            shift_jitter: (0.3, 0.7),
            temperature_range: (0.02, 0.04),
            noise_scale: 0.05,
            carrier_norm: 0.1,
            filler_norm_range: (0.05, 0.4),
            benign_prompt_count: 10,
            min_benign_retain: 0.95,
            max_attempts: 1000,
        }
    }
}

/// A family of models over one vocabulary and concept set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRegistry {
    pub family_seed: u64,
    pub vocab: Vocab,
    pub concepts: Vec<ConceptAnchor>,
    pub models: Vec<ModelSpec>,
    pub benign_prompts: Vec<String>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_unit(rng: &mut KeyedRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Orthonormal anchors by Gram-Schmidt over Gaussian draws.
fn orthonormal_anchors(rng: &mut KeyedRng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = random_unit(rng, dim);
        for q in &out {
            let p = dot(&v, q);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= p * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// `count` prompts cycling "a photo of a X" / "a picture of a X" over the concepts.
pub fn default_benign_prompts(labels: &[String], count: usize) -> Vec<String> {
    const TEMPLATES: &[&str] = &["a photo of a", "a picture of a", "an image of a"];
    (0..count)
        .map(|i| {
            let template = TEMPLATES[(i / labels.len()) % TEMPLATES.len()];
            format!("{template} {}", labels[i % labels.len()])
        })
        .collect()
}

/// Builds a family with [`FamilyParams::default`].
pub fn build_family(
    family_seed: u64,
    n_models: usize,
    n_concepts: usize,
    dim: usize,
    vocab: &Vocab,
) -> Result<ModelRegistry> {
    build_family_with(&FamilyParams::default(), family_seed, n_models, n_concepts, dim, vocab)
}

/// Builds a family deterministically from `family_seed`. Draws are repeated
/// with a fresh attempt key until every model keeps every benign prompt's
/// concept with probability above `params.min_benign_retain`.
pub fn build_family_with(
    params: &FamilyParams,
    family_seed: u64,
    n_models: usize,
    n_concepts: usize,
    dim: usize,
    vocab: &Vocab,
) -> Result<ModelRegistry> {
    if n_models < 2 {
        return Err(BpoError::BadDimensions(format!("need at least 2 models, got {n_models}")));
    }
    if n_concepts < 2 {
        return Err(BpoError::BadDimensions(format!("need at least 2 concepts, got {n_concepts}")));
    }
    if n_concepts > dim {
        return Err(BpoError::BadDimensions(format!("{n_concepts} concepts do not fit in dim {dim}")));
    }
    if n_concepts > CONCEPT_LABELS.len() {
        return Err(BpoError::BadDimensions(format!(
            "at most {} concepts are available",
            CONCEPT_LABELS.len()
        )));
    }
    let labels: Vec<String> = CONCEPT_LABELS[..n_concepts].iter().map(|s| s.to_string()).collect();
    for l in &labels {
        if vocab.id(l).is_none() {
            return Err(BpoError::UnknownToken(l.clone()));
        }
    }
    for w in CARRIER_WORDS {
        if vocab.id(w).is_none() {
            return Err(BpoError::UnknownToken(w.to_string()));
        }
    }
    let benign_prompts = default_benign_prompts(&labels, params.benign_prompt_count);

    for attempt in 0..params.max_attempts as u64 {
        let registry = draw_family(params, family_seed, attempt, n_models, &labels, dim, vocab, &benign_prompts)?;
        if registry.accepts(params.min_benign_retain)? {
            if attempt > 0 {
                log::debug!("family seed {family_seed} accepted on attempt {attempt}");
            }
            return Ok(registry);
        }
    }
    Err(BpoError::FamilyRejected(params.max_attempts))
}

#[allow(clippy::too_many_arguments)]
fn draw_family(
    params: &FamilyParams,
    family_seed: u64,
    attempt: u64,
    n_models: usize,
    labels: &[String],
    dim: usize,
    vocab: &Vocab,
    benign_prompts: &[String],
) -> Result<ModelRegistry> {
    let mut rng = KeyedRng::new(&[family_seed, attempt]);
    let anchors = orthonormal_anchors(&mut rng, labels.len(), dim);

    let mut table = vec![0.0; vocab.len() * dim];
    for (id, tok) in vocab.tokens().iter().enumerate() {
        let row = &mut table[id * dim..(id + 1) * dim];
        if let Some(c) = labels.iter().position(|l| l == tok) {
            row.copy_from_slice(&anchors[c]);
            continue;
        }
        let dir = random_unit(&mut rng, dim);
        let norm = if tok == INITIALIZER_TOKEN || CARRIER_WORDS.contains(&tok.as_str()) {
            params.carrier_norm
        } else {
            rng.random_range(params.filler_norm_range.0..=params.filler_norm_range.1)
        };
        for (r, d) in row.iter_mut().zip(dir) {
            *r = norm * d;
        }
    }
    let table = Arc::new(table);
    let weights = Arc::new(default_position_weights(DEFAULT_MAX_LEN));

    let shifts = draw_shifts(&mut rng, n_models, params.margin_shift_range, params.shift_jitter);
    let mut models = Vec::with_capacity(n_models);
    for (k, margin_shift) in shifts.into_iter().enumerate() {
        let scale = params.mix_eps / (dim as f64).sqrt();
        let mut mix = vec![0.0; dim * dim];
        for (i, m) in mix.iter_mut().enumerate() {
            let r: f64 = StandardNormal.sample(&mut rng);
            *m = scale * r + if i % (dim + 1) == 0 { 1.0 } else { 0.0 };
        }
        let temperature = rng.random_range(params.temperature_range.0..=params.temperature_range.1);
        let rng_salt = rng.next_u64();
        models.push(ModelSpec {
            id: format!("model-{k}"),
            encoder: EncoderParams::new(dim, table.clone(), weights.clone(), mix)?,
            margin_shift,
            temperature,
            noise_scale: params.noise_scale,
            rng_salt,
        });
    }

    Ok(ModelRegistry {
        family_seed,
        vocab: vocab.clone(),
        concepts: labels
            .iter()
            .zip(anchors)
            .map(|(l, a)| ConceptAnchor { label: l.clone(), anchor: Embedding(a) })
            .collect(),
        models,
        benign_prompts: benign_prompts.to_vec(),
    })
}

/// One margin shift per model, each drawn uniformly inside its own stratum of
/// the range so that no two models share a boundary.
fn draw_shifts(rng: &mut KeyedRng, n: usize, range: (f64, f64), jitter: (f64, f64)) -> Vec<f64> {
    let width = (range.1 - range.0) / n as f64;
    let mut shifts: Vec<f64> = (0..n)
        .map(|k| range.0 + width * (k as f64 + rng.random_range(jitter.0..jitter.1)))
        .collect();
    // Shuffle so model order carries no information about the shift.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        shifts.swap(i, j);
    }
    shifts
}


impl ModelRegistry {
    pub fn dim(&self) -> usize {
        self.concepts[0].anchor.dim()
    }

    pub fn model(&self, id: &str) -> Result<&ModelSpec> {
        self.models.iter().find(|m| m.id == id).ok_or_else(|| BpoError::UnknownModel(id.to_string()))
    }

    pub fn model_index(&self, id: &str) -> Result<usize> {
        self.models.iter().position(|m| m.id == id).ok_or_else(|| BpoError::UnknownModel(id.to_string()))
    }

    pub fn concept_id(&self, label: &str) -> Result<ConceptId> {
        self.concepts
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| BpoError::UnknownConcept(label.to_string()))
    }

    pub fn anchor(&self, concept: ConceptId) -> &Embedding {
        &self.concepts[concept].anchor
    }

    pub fn label(&self, concept: ConceptId) -> &str {
        &self.concepts[concept].label
    }

    pub fn tokenize(&self, text: &str) -> Result<Prompt> {
        self.vocab.tokenize(text)
    }

    fn check_dim(&self, e: &Embedding) -> Result<()> {
        if e.dim() != self.dim() {
            return Err(BpoError::DimensionMismatch { expected: self.dim(), got: e.dim() });
        }
        Ok(())
    }

    /// Cosine to every anchor, in concept order.
    fn anchor_cosines(&self, e: &Embedding) -> Result<Vec<f64>> {
        self.check_dim(e)?;
        self.concepts.iter().map(|c| cosine(e, &c.anchor)).collect()
    }

    /// `cos(ê, anchor[origin]) - max_{c != origin} cos(ê, anchor[c])`.
    pub fn margin(&self, e: &Embedding, origin: ConceptId) -> Result<f64> {
        let cos = self.anchor_cosines(e)?;
        let other = cos
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != origin)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(cos[origin] - other)
    }

    /// Probability that `model` keeps `origin` when generating from `e`:
    /// `sigmoid((margin - δ) / τ)`.
    pub fn retain_probability(&self, model: &ModelSpec, e: &Embedding, origin: ConceptId) -> Result<f64> {
        if origin >= self.concepts.len() {
            return Err(BpoError::UnknownConcept(format!("#{origin}")));
        }
        let m = self.margin(e, origin)?;
        Ok(sigmoid((m - model.margin_shift) / model.temperature))
    }

    /// Label-keyed form of [`retain_probability`](Self::retain_probability).
    pub fn retain_probability_for(&self, model: &ModelSpec, e: &Embedding, origin: &str) -> Result<f64> {
        self.retain_probability(model, e, self.concept_id(origin)?)
    }

    /// Nearest anchor other than `origin`; ties go to the lowest index.
    fn nearest_other(&self, e: &Embedding, origin: ConceptId) -> Result<ConceptId> {
        let cos = self.anchor_cosines(e)?;
        let mut best: Option<ConceptId> = None;
        for (c, v) in cos.iter().enumerate() {
            if c == origin {
                continue;
            }
            match best {
                Some(b) if cos[b] >= *v => {}
                _ => best = Some(c),
            }
        }
        Ok(best.expect("families have at least two concepts"))
    }

    /// Samples one image proxy. Deterministic in `(model, e, origin, seed)`.
    pub fn generate(&self, model: &ModelSpec, e: &Embedding, origin: ConceptId, seed: u64) -> Result<ImageProxy> {
        let p = self.retain_probability(model, e, origin)?;
        let mut rng = KeyedRng::new(&[model.rng_salt, seed]);
        let u: f64 = rng.random();
        let label = if u < p { origin } else { self.nearest_other(e, origin)? };
        let noisy: Vec<f64> = self.concepts[label]
            .anchor
            .0
            .iter()
            .map(|a| {
                let z: f64 = StandardNormal.sample(&mut rng);
                a + model.noise_scale * z
            })
            .collect();
        Ok(ImageProxy {
            label: self.concepts[label].label.clone(),
            proxy: Embedding(noisy).normalized()?,
            seed,
        })
    }

    /// Nearest anchor to a proxy vector; ties go to the lowest index.
    pub fn extract_semantics_of(&self, proxy: &Embedding) -> Result<ConceptId> {
        let cos = self.anchor_cosines(proxy)?;
        let mut best = 0;
        for (c, v) in cos.iter().enumerate() {
            if *v > cos[best] {
                best = c;
            }
        }
        Ok(best)
    }

    pub fn extract_semantics(&self, image: &ImageProxy) -> Result<&str> {
        Ok(self.label(self.extract_semantics_of(&image.proxy)?))
    }

    /// True iff the image is judged to show something other than `origin`.
    pub fn judge_deviation(&self, image: &ImageProxy, origin: &str) -> Result<bool> {
        let origin = self.concept_id(origin)?;
        Ok(self.extract_semantics_of(&image.proxy)? != origin)
    }

    /// The concept a benign prompt shows on `model`: the judged label of its
    /// own generation at seed 0, seeded with the nearest anchor.
    pub fn origin_concept(&self, model: &ModelSpec, benign: &Prompt) -> Result<ConceptId> {
        let e = model.encode(benign)?;
        let nearest = self.extract_semantics_of(&e)?;
        let image = self.generate(model, &e, nearest, 0)?;
        self.extract_semantics_of(&image.proxy)
    }

    /// Whether every model keeps every benign prompt above `min_retain`, and
    /// the models have pairwise distinct boundaries.
    fn accepts(&self, min_retain: f64) -> Result<bool> {
        for (i, a) in self.models.iter().enumerate() {
            for b in &self.models[i + 1..] {
                if a.margin_shift == b.margin_shift && a.temperature == b.temperature && a.encoder.mix() == b.encoder.mix() {
                    return Ok(false);
                }
            }
        }
        for text in &self.benign_prompts {
            let prompt = self.tokenize(text)?;
            for model in &self.models {
                let e = model.encode(&prompt)?;
                let origin = self.extract_semantics_of(&e)?;
                if self.retain_probability(model, &e, origin)? <= min_retain {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Checks the structural invariants of a registry (used on load).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BpoError::InvalidRegistry(msg));
        if self.models.len() < 2 {
            return bad(format!("{} models, need at least 2", self.models.len()));
        }
        if self.concepts.len() < 2 {
            return bad(format!("{} concepts, need at least 2", self.concepts.len()));
        }
        let dim = self.dim();
        for (i, c) in self.concepts.iter().enumerate() {
            if c.anchor.dim() != dim || (c.anchor.norm() - 1.0).abs() > 1e-9 {
                return bad(format!("anchor {:?} is not a unit vector of dim {dim}", c.label));
            }
            for d in &self.concepts[i + 1..] {
                if c.label == d.label {
                    return bad(format!("duplicate concept {:?}", c.label));
                }
                if cosine(&c.anchor, &d.anchor)? >= 0.8 {
                    return bad(format!("anchors {:?} and {:?} are too close", c.label, d.label));
                }
            }
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].iter().any(|o| o.id == m.id) {
                return bad(format!("duplicate model id {:?}", m.id));
            }
            if m.encoder.dim() != dim || m.encoder.vocab_size() != self.vocab.len() {
                return bad(format!("model {:?} encoder does not match the family", m.id));
            }
            if !(0.01..=1.0).contains(&m.temperature) {
                return bad(format!("model {:?} temperature {} outside [0.01, 1]", m.id, m.temperature));
            }
            if !(-0.5..=0.5).contains(&m.margin_shift) {
                return bad(format!("model {:?} margin shift {} outside [-0.5, 0.5]", m.id, m.margin_shift));
            }
            if !(m.noise_scale >= 0.0 && m.noise_scale.is_finite()) {
                return bad(format!("model {:?} noise scale {}", m.id, m.noise_scale));
            }
        }
        for text in &self.benign_prompts {
            self.tokenize(text)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = RegistryFile::from(self);
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RegistryFile = serde_json::from_str(text)?;
        let registry = file.into_registry()?;
        registry.validate()?;
        Ok(registry)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// On-disk layout of a registry.
#[derive(Serialize, Deserialize)]
struct RegistryFile {
    family_seed: u64,
    dim: usize,
    max_len: usize,
    vocab: Vocab,
    position_weights: Vec<f64>,
    embed_table: Vec<Vec<f64>>,
    concepts: Vec<ConceptAnchor>,
    models: Vec<ModelRecord>,
    benign_prompts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    id: String,
    mix: Vec<Vec<f64>>,
    margin_shift: f64,
    temperature: f64,
    noise_scale: f64,
    rng_salt: u64,
}

impl From<&ModelRegistry> for RegistryFile {
    fn from(r: &ModelRegistry) -> Self {
        let enc = &r.models[0].encoder;
        let dim = enc.dim();
        RegistryFile {
            family_seed: r.family_seed,
            dim,
            max_len: enc.max_len(),
            vocab: r.vocab.clone(),
            position_weights: enc.position_weights().to_vec(),
            embed_table: enc.embed_table().chunks_exact(dim).map(|c| c.to_vec()).collect(),
            concepts: r.concepts.clone(),
            models: r
                .models
                .iter()
                .map(|m| ModelRecord {
                    id: m.id.clone(),
                    mix: m.encoder.mix().chunks_exact(dim).map(|c| c.to_vec()).collect(),
                    margin_shift: m.margin_shift,
                    temperature: m.temperature,
                    noise_scale: m.noise_scale,
                    rng_salt: m.rng_salt,
                })
                .collect(),
            benign_prompts: r.benign_prompts.clone(),
        }
    }
}

fn flatten(rows: Vec<Vec<f64>>, width: usize, what: &str) -> Result<Vec<f64>> {
    if rows.iter().any(|r| r.len() != width) {
        return Err(BpoError::InvalidRegistry(format!("{what} rows must have {width} entries")));
    }
    Ok(rows.into_iter().flatten().collect())
}

impl RegistryFile {
    fn into_registry(self) -> Result<ModelRegistry> {
        if self.embed_table.len() != self.vocab.len() {
            return Err(BpoError::InvalidRegistry(format!(
                "embedding table has {} rows for {} tokens",
                self.embed_table.len(),
                self.vocab.len()
            )));
        }
        if self.position_weights.len() != self.max_len {
            return Err(BpoError::InvalidRegistry("position weights do not match max_len".into()));
        }
        let table = Arc::new(flatten(self.embed_table, self.dim, "embedding table")?);
        let weights = Arc::new(self.position_weights);
        let models = self
            .models
            .into_iter()
            .map(|m| {
                if m.mix.len() != self.dim {
                    return Err(BpoError::InvalidRegistry(format!("model {:?} mix is not square", m.id)));
                }
                Ok(ModelSpec {
                    encoder: EncoderParams::new(self.dim, table.clone(), weights.clone(), flatten(m.mix, self.dim, "mix")?)?,
                    id: m.id,
                    margin_shift: m.margin_shift,
                    temperature: m.temperature,
                    noise_scale: m.noise_scale,
                    rng_salt: m.rng_salt,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if models.is_empty() {
            return Err(BpoError::InvalidRegistry("no models".into()));
        }
        Ok(ModelRegistry {
            family_seed: self.family_seed,
            vocab: self.vocab,
            concepts: self.concepts,
            models,
            benign_prompts: self.benign_prompts,
        })
    }
}

/// The default five-model, eight-concept family over the built-in alphabet.
pub fn default_family(family_seed: u64) -> Result<ModelRegistry> {
    let vocab = Vocab::builtin(crate::embed::DEFAULT_VOCAB_SIZE)?;
    build_family(family_seed, 5, 8, crate::embed::DEFAULT_DIM, &vocab)
}

pub const DEFAULT_FAMILY_SEED: u64 = 7;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::interpolate;

    fn family() -> ModelRegistry {
        default_family(DEFAULT_FAMILY_SEED).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = family();
        let b = family();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a.to_json().unwrap(), default_family(8).unwrap().to_json().unwrap());
    }

    #[test]
    fn models_have_distinct_boundaries() {
        let f = family();
        for (i, a) in f.models.iter().enumerate() {
            for b in &f.models[i + 1..] {
                assert_ne!(a.margin_shift, b.margin_shift);
                assert_ne!(a.encoder.mix(), b.encoder.mix());
            }
        }
        f.validate().unwrap();
    }

    #[test]
    fn benign_prompts_are_stable_everywhere() {
        let f = family();
        assert_eq!(f.benign_prompts.len(), 10);
        for text in &f.benign_prompts {
            let p = f.tokenize(text).unwrap();
            let concept = text.split_whitespace().last().unwrap();
            for m in &f.models {
                let e = m.encode(&p).unwrap();
                assert!(f.retain_probability_for(m, &e, concept).unwrap() > 0.95, "{text} on {}", m.id);
                assert_eq!(f.label(f.origin_concept(m, &p).unwrap()), concept);
            }
        }
    }

    #[test]
    fn retain_matches_scripted_formula() {
        let f = family();
        let m = &f.models[0];
        let corgi = f.concept_id("corgi").unwrap();
        let bagel = f.concept_id("bagel").unwrap();
        let e = interpolate(f.anchor(corgi), f.anchor(bagel), 0.5).unwrap();
        // Recompute from raw components.
        let norm = e.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cosines: Vec<f64> = f
            .concepts
            .iter()
            .map(|c| e.0.iter().zip(&c.anchor.0).map(|(a, b)| a * b).sum::<f64>() / norm)
            .collect();
        let best_other = cosines.iter().enumerate().filter(|(i, _)| *i != corgi).map(|(_, v)| *v).fold(-2.0, f64::max);
        let expected = 1.0 / (1.0 + (-((cosines[corgi] - best_other) - m.margin_shift) / m.temperature).exp());
        let got = f.retain_probability(m, &e, corgi).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn sigmoid_midpoint_and_anchor_sign() {
        let mut f = family();
        let corgi = f.concept_id("corgi").unwrap();
        let e = f.anchor(corgi).clone();
        f.models[0].margin_shift = 0.0;
        assert!(f.retain_probability(&f.models[0], &e, corgi).unwrap() > 0.5);
        let margin = f.margin(&e, corgi).unwrap();
        f.models[0].margin_shift = margin;
        assert_eq!(f.retain_probability(&f.models[0], &e, corgi).unwrap(), 0.5);
    }

    #[test]
    fn retain_decreases_along_anchor_path() {
        let f = family();
        let (a, b) = (f.anchor(0).clone(), f.anchor(1).clone());
        for m in &f.models {
            let mut last = f64::INFINITY;
            let mut last_margin = f64::INFINITY;
            for i in 0..=100 {
                let e = interpolate(&a, &b, i as f64 / 100.0).unwrap();
                let margin = f.margin(&e, 0).unwrap();
                let p = f.retain_probability(m, &e, 0).unwrap();
                assert!(margin < last_margin);
                assert!(p <= last);
                last = p;
                last_margin = margin;
            }
        }
    }

    #[test]
    fn generation_frequency_matches_probability() {
        let f = family();
        let m = &f.models[2];
        let corgi = f.concept_id("corgi").unwrap();
        let bagel = f.concept_id("bagel").unwrap();
        // Find a point on the path with an intermediate probability.
        let (e, p) = (0..=200)
            .map(|i| {
                let e = interpolate(f.anchor(corgi), f.anchor(bagel), i as f64 / 200.0).unwrap();
                let p = f.retain_probability(m, &e, corgi).unwrap();
                (e, p)
            })
            .min_by(|x, y| (x.1 - 0.5).abs().total_cmp(&(y.1 - 0.5).abs()))
            .unwrap();
        assert!(p > 0.05 && p < 0.95, "{p}");
        let n = 10_000;
        let kept = (0..n).filter(|&s| f.generate(m, &e, corgi, s).unwrap().label == "corgi").count();
        let freq = kept as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{freq} vs {p}");
    }

    #[test]
    fn judged_label_is_sampled_label() {
        let f = family();
        let corgi = f.concept_id("corgi").unwrap();
        let bagel = f.concept_id("bagel").unwrap();
        for (k, m) in f.models.iter().enumerate() {
            let e = interpolate(f.anchor(corgi), f.anchor(bagel), 0.3 + 0.1 * k as f64).unwrap();
            for seed in 0..200 {
                let img = f.generate(m, &e, corgi, seed).unwrap();
                assert_eq!(f.extract_semantics(&img).unwrap(), img.label);
                assert!((img.proxy.norm() - 1.0).abs() < 1e-12);
                assert_eq!(f.generate(m, &e, corgi, seed).unwrap(), img);
            }
        }
    }

    #[test]
    fn noiseless_stable_generation_returns_anchor() {
        let mut f = family();
        f.models[0].noise_scale = 0.0;
        f.models[0].temperature = 0.01;
        f.models[0].margin_shift = -0.5;
        let corgi = f.concept_id("corgi").unwrap();
        let e = f.anchor(corgi).clone();
        for seed in 0..50 {
            assert_eq!(&f.generate(&f.models[0], &e, corgi, seed).unwrap().proxy, f.anchor(corgi));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let f = family();
        let (a1, a2) = (f.anchor(1), f.anchor(2));
        let mid = Embedding(a1.0.iter().zip(&a2.0).map(|(x, y)| x + y).collect());
        assert_eq!(f.extract_semantics_of(&mid).unwrap(), 1);
        assert_eq!(f.nearest_other(&mid, 0).unwrap(), 1);
        assert_eq!(f.nearest_other(&mid, 1).unwrap(), 2);
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let f = family();
        let text = f.to_json().unwrap();
        let back = ModelRegistry::from_json(&text).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn load_rejects_broken_registries() {
        let f = family();
        let mut bad = f.clone();
        bad.models.truncate(1);
        assert!(matches!(bad.validate(), Err(BpoError::InvalidRegistry(_))));
        let mut bad = f.clone();
        bad.models[1].temperature = 0.0;
        assert!(ModelRegistry::from_json(&bad.to_json().unwrap()).is_err());
        assert!(ModelRegistry::from_json("{}").is_err());
    }

    #[test]
    fn too_few_models_or_concepts() {
        let v = Vocab::builtin(256).unwrap();
        assert!(matches!(build_family(7, 1, 8, 16, &v), Err(BpoError::BadDimensions(_))));
        assert!(matches!(build_family(7, 5, 1, 16, &v), Err(BpoError::BadDimensions(_))));
        assert!(matches!(build_family(7, 5, 17, 16, &v), Err(BpoError::BadDimensions(_))));
    }
}
