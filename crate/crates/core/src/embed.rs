//! Token vocabulary, prompts, the toy text encoder and cosine objectives.
//!
//! The encoder maps a token sequence to
//! `normalize(A · Σ_i w_i · W[t_i])`: a position-weighted sum of embedding
//! rows, a per-model linear mix `A`, then L2 normalization. Gradients of the
//! cosine objectives are taken over the one-hot relaxation of the suffix
//! tokens, which is what the coordinate-gradient search ranks candidates by.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BpoError, Result};

pub type TokenId = u32;

/// Token the learnable suffix is initialized with.
pub const INITIALIZER_TOKEN: &str = "!";
pub const MIN_VOCAB_SIZE: usize = 32;
pub const DEFAULT_DIM: usize = 16;
pub const DEFAULT_VOCAB_SIZE: usize = 256;
pub const DEFAULT_MAX_LEN: usize = 64;

/// Ordered token alphabet. Serialized as a JSON array of strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    special: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < MIN_VOCAB_SIZE {
            return Err(BpoError::InvalidVocab(format!(
                "{} tokens, need at least {MIN_VOCAB_SIZE}",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(|c| c.is_whitespace() || c.is_control()) {
                return Err(BpoError::InvalidVocab(format!("token {i} is not printable: {tok:?}")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(BpoError::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        let special = *index
            .get(INITIALIZER_TOKEN)
            .ok_or_else(|| BpoError::InvalidVocab(format!("missing initializer {INITIALIZER_TOKEN:?}")))?;
        Ok(Vocab { tokens, index, special })
    }

    /// The built-in alphabet: the initializer, prompt words, concept words,
    /// punctuation, then syllable fillers up to `size` tokens.
    pub fn builtin(size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::with_capacity(size);
        tokens.push(INITIALIZER_TOKEN.to_string());
        for w in CARRIER_WORDS.iter().chain(CONCEPT_LABELS).chain(OTHER_WORDS).chain(PUNCTUATION) {
            tokens.push((*w).to_string());
        }
        const ONSETS: &[&str] = &[
            "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
        ];
        const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "y"];
        const CODAS: &[&str] = &["", "n", "x", "q"];
        'fill: for coda in CODAS {
            for onset in ONSETS {
                for vowel in VOWELS {
                    if tokens.len() >= size {
                        break 'fill;
                    }
                    let tok = format!("{onset}{vowel}{coda}");
                    if !tokens.contains(&tok) {
                        tokens.push(tok);
                    }
                }
            }
        }
        if tokens.len() > size {
            return Err(BpoError::InvalidVocab(format!(
                "built-in alphabet needs at least {} tokens",
                tokens.len()
            )));
        }
        if tokens.len() < size {
            return Err(BpoError::InvalidVocab(format!("built-in alphabet tops out at {}", tokens.len())));
        }
        Vocab::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn initializer(&self) -> TokenId {
        self.special
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits on whitespace and looks every piece up.
    pub fn tokenize(&self, text: &str) -> Result<Prompt> {
        let base = text
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| BpoError::UnknownToken(w.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prompt::new(base, Vec::new()))
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.token(t)).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = BpoError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::new(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Words that frame a benign prompt ("a photo of a ...").
pub const CARRIER_WORDS: &[&str] = &["a", "an", "the", "photo", "picture", "image", "of"];

/// Concept words, in the order families bind them to concepts.
pub const CONCEPT_LABELS: &[&str] = &[
    "corgi", "bagel", "cat", "apple", "car", "tree", "house", "bird", "boat", "clock", "flower",
    "horse", "chair", "guitar", "lamp", "shoe",
];

const OTHER_WORDS: &[&str] = &[
    "with", "on", "in", "and", "at", "by", "near", "under", "over", "from", "small", "large",
    "red", "blue", "green", "yellow", "bright", "dark", "old", "new", "happy", "sleepy", "shiny",
    "wooden", "painting", "drawing", "sketch", "render", "portrait", "closeup", "street", "park",
    "beach", "kitchen", "forest", "city", "night", "morning", "winter", "summer", "golden",
    "vintage", "cartoon", "realistic", "studio", "light", "shadow", "style", "art", "detailed",
];

const PUNCTUATION: &[&str] = &[
    "?", "#", "*", "~", "@", "%", "&", "+", "=", "^", "|", "/", ":", ";", "<", ">", "[", "]", "{",
    "}", "(", ")", "$", "_", "-", ".", ",", "'", "\"", "`",
];

/// A benign base prompt followed by a learnable suffix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub base_tokens: Vec<TokenId>,
    pub suffix_tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn new(base_tokens: Vec<TokenId>, suffix_tokens: Vec<TokenId>) -> Self {
        Prompt { base_tokens, suffix_tokens }
    }

    pub fn with_suffix(&self, suffix: Vec<TokenId>) -> Self {
        Prompt::new(self.base_tokens.clone(), suffix)
    }

    /// The benign prompt alone.
    pub fn base(&self) -> Prompt {
        Prompt::new(self.base_tokens.clone(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.base_tokens.len() + self.suffix_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Base tokens followed by suffix tokens.
    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.base_tokens.iter().chain(&self.suffix_tokens).copied()
    }

    /// Textual concatenation `I + s`.
    pub fn render(&self, vocab: &Vocab) -> String {
        let all: Vec<TokenId> = self.tokens().collect();
        vocab.render(&all)
    }
}

/// A real vector in embedding space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(BpoError::ZeroVector);
        }
        Ok(Embedding(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn scaled(&self, k: f64) -> Embedding {
        Embedding(self.0.iter().map(|v| v * k).collect())
    }

    pub fn add(&self, other: &Embedding) -> Embedding {
        Embedding(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(BpoError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(BpoError::ZeroVector);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// `(1 - alpha) * e_pis + alpha * e_adv`, component-wise and not re-normalized.
pub fn interpolate(e_pis: &Embedding, e_adv: &Embedding, alpha: f64) -> Result<Embedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(BpoError::AlphaOutOfRange(alpha));
    }
    if e_pis.dim() != e_adv.dim() {
        return Err(BpoError::DimensionMismatch { expected: e_pis.dim(), got: e_adv.dim() });
    }
    Ok(Embedding(
        e_pis.0.iter().zip(&e_adv.0).map(|(p, a)| (1.0 - alpha) * p + alpha * a).collect(),
    ))
}

/// `w_i = 1 / (1 + 0.05 i)`.
pub fn default_position_weights(max_len: usize) -> Vec<f64> {
    (0..max_len).map(|i| 1.0 / (1.0 + 0.05 * i as f64)).collect()
}

/// Parameters of one model's text encoder. The embedding table and position
/// weights are shared across a family; the mix matrix is per model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    dim: usize,
    embed_table: Arc<Vec<f64>>,
    position_weights: Arc<Vec<f64>>,
    mix: Vec<f64>,
}

impl EncoderParams {
    pub fn new(
        dim: usize,
        embed_table: Arc<Vec<f64>>,
        position_weights: Arc<Vec<f64>>,
        mix: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || embed_table.is_empty() || !embed_table.len().is_multiple_of(dim) {
            return Err(BpoError::BadDimensions(format!(
                "embedding table of {} values is not a multiple of dim {dim}",
                embed_table.len()
            )));
        }
        if mix.len() != dim * dim {
            return Err(BpoError::BadDimensions(format!("mix has {} entries, want {}", mix.len(), dim * dim)));
        }
        if position_weights.is_empty() {
            return Err(BpoError::BadDimensions("no position weights".into()));
        }
        let params = EncoderParams { dim, embed_table, position_weights, mix };
        params.validate()?;
        Ok(params)
    }

    /// Identity mix over the given table, mostly for tests.
    pub fn with_identity_mix(dim: usize, embed_table: Vec<f64>, position_weights: Vec<f64>) -> Result<Self> {
        let mut mix = vec![0.0; dim * dim];
        for i in 0..dim {
            mix[i * dim + i] = 1.0;
        }
        EncoderParams::new(dim, Arc::new(embed_table), Arc::new(position_weights), mix)
    }

    fn validate(&self) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|v| v.is_finite());
        if !finite(&self.embed_table) || !finite(&self.mix) || !finite(&self.position_weights) {
            return Err(BpoError::InvalidRegistry("encoder has non-finite entries".into()));
        }
        if self.position_weights.iter().any(|&w| w <= 0.0) {
            return Err(BpoError::InvalidRegistry("position weights must be positive".into()));
        }
        let cond = self.mix_condition_number();
        if !(cond < 1e6) {
            return Err(BpoError::InvalidRegistry(format!("mix matrix condition number {cond:e}")));
        }
        Ok(())
    }

    pub fn mix_condition_number(&self) -> f64 {
        let m = nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.mix);
        let sv = m.singular_values();
        let max = sv.iter().cloned().fold(0.0, f64::max);
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.embed_table.len() / self.dim
    }

    pub fn max_len(&self) -> usize {
        self.position_weights.len()
    }

    pub fn mix(&self) -> &[f64] {
        &self.mix
    }

    pub fn embed_table(&self) -> &Arc<Vec<f64>> {
        &self.embed_table
    }

    pub fn position_weights(&self) -> &Arc<Vec<f64>> {
        &self.position_weights
    }

    pub fn row(&self, token: TokenId) -> &[f64] {
        let start = token as usize * self.dim;
        &self.embed_table[start..start + self.dim]
    }

    fn check_tokens<I: Iterator<Item = TokenId>>(&self, tokens: I) -> Result<usize> {
        let mut n = 0;
        for t in tokens {
            if t as usize >= self.vocab_size() {
                return Err(BpoError::UnknownToken(format!("#{t}")));
            }
            n += 1;
        }
        if n == 0 {
            return Err(BpoError::EmptyPrompt);
        }
        if n > self.max_len() {
            return Err(BpoError::PromptTooLong { len: n, max: self.max_len() });
        }
        Ok(n)
    }

    /// `Σ_i w_i W[t_i]` before the mix.
    fn weighted_sum<I: Iterator<Item = TokenId>>(&self, tokens: I) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for (i, t) in tokens.enumerate() {
            let w = self.position_weights[i];
            for (a, r) in acc.iter_mut().zip(self.row(t)) {
                *a += w * r;
            }
        }
        acc
    }

    fn apply_mix(&self, s: &[f64]) -> Vec<f64> {
        self.mix.chunks_exact(self.dim).map(|row| dot(row, s)).collect()
    }

    fn apply_mix_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, gk) in self.mix.chunks_exact(self.dim).zip(g) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * gk;
            }
        }
        out
    }

    /// Mixed but unnormalized encoding.
    fn mixed(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.check_tokens(prompt.tokens())?;
        Ok(self.apply_mix(&self.weighted_sum(prompt.tokens())))
    }

    /// Unit-norm text embedding of `prompt`.
    pub fn encode(&self, prompt: &Prompt) -> Result<Embedding> {
        Embedding(self.mixed(prompt)?).normalized()
    }

    /// Maps a concept-space vector through this model's mix.
    pub fn mix_vector(&self, v: &Embedding) -> Result<Embedding> {
        if v.dim() != self.dim {
            return Err(BpoError::DimensionMismatch { expected: self.dim, got: v.dim() });
        }
        Ok(Embedding(self.apply_mix(&v.0)))
    }
}

/// Which way the suffix search pushes the cosine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "reference", rename_all = "snake_case")]
pub enum Objective {
    /// Loss `cos(E(I+s), reference)`, minimized to move away from the benign embedding.
    Untargeted(Embedding),
    /// Loss `-cos(E(I+s), reference)`, minimized to approach a target embedding.
    Targeted(Embedding),
}

impl Objective {
    pub fn reference(&self) -> &Embedding {
        match self {
            Objective::Untargeted(r) | Objective::Targeted(r) => r,
        }
    }

    fn sign(&self) -> f64 {
        match self {
            Objective::Untargeted(_) => 1.0,
            Objective::Targeted(_) => -1.0,
        }
    }

    pub fn loss_at(&self, e: &Embedding) -> Result<f64> {
        Ok(self.sign() * cosine(e, self.reference())?)
    }

    pub fn loss(&self, params: &EncoderParams, prompt: &Prompt) -> Result<f64> {
        self.loss_at(&params.encode(prompt)?)
    }
}

/// Gradient of an objective over the one-hot relaxation of each suffix slot.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTable {
    /// `grads[j][v]` is the partial derivative for suffix slot `j`, token `v`.
    pub grads: Vec<Vec<f64>>,
    pub objective_value: f64,
}

/// Analytic gradient through the weighted sum, mix and normalization.
pub fn token_gradient(params: &EncoderParams, prompt: &Prompt, objective: &Objective) -> Result<GradientTable> {
    if prompt.suffix_tokens.is_empty() {
        return Err(BpoError::EmptySuffix);
    }
    let reference = objective.reference();
    if reference.dim() != params.dim {
        return Err(BpoError::DimensionMismatch { expected: params.dim, got: reference.dim() });
    }
    let r_hat = reference.normalized()?;
    let u = params.mixed(prompt)?;
    let u_norm = dot(&u, &u).sqrt();
    if u_norm == 0.0 {
        return Err(BpoError::ZeroVector);
    }
    let e_hat: Vec<f64> = u.iter().map(|x| x / u_norm).collect();
    let c = dot(&e_hat, &r_hat.0);
    let sign = objective.sign();

    // d(sign * cos)/du, then back through the mix.
    let d_u: Vec<f64> = r_hat.0.iter().zip(&e_hat).map(|(r, e)| sign * (r - c * e) / u_norm).collect();
    let d_s = params.apply_mix_transpose(&d_u);

    let row_scores: Vec<f64> = (0..params.vocab_size() as TokenId).map(|v| dot(params.row(v), &d_s)).collect();
    let offset = prompt.base_tokens.len();
    let grads = (0..prompt.suffix_tokens.len())
        .map(|j| {
            let w = params.position_weights[offset + j];
            row_scores.iter().map(|s| w * s).collect()
        })
        .collect();
    Ok(GradientTable { grads, objective_value: sign * c })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocab {
        Vocab::builtin(DEFAULT_VOCAB_SIZE).unwrap()
    }

    #[test]
    fn tokenize_known_words() {
        let v = small_vocab();
        let p = v.tokenize("a photo of a corgi dog").unwrap_err();
        assert_eq!(p, BpoError::UnknownToken("dog".into()));
        let p = v.tokenize("a photo of a corgi cat").unwrap();
        assert_eq!(p.base_tokens.len(), 6);
        assert!(p.suffix_tokens.is_empty());
        assert_eq!(p.render(&v), "a photo of a corgi cat");
    }

    #[test]
    fn tokenize_empty_and_unknown() {
        let v = small_vocab();
        assert!(v.tokenize("").unwrap().is_empty());
        assert_eq!(v.tokenize("a zyx").unwrap_err(), BpoError::UnknownToken("zyx".into()));
        // whitespace is normalized
        assert_eq!(v.tokenize("  a \t cat ").unwrap().render(&v), "a cat");
    }

    #[test]
    fn builtin_vocab_shape() {
        let v = small_vocab();
        assert_eq!(v.len(), 256);
        assert_eq!(v.token(v.initializer()), "!");
        for c in CONCEPT_LABELS {
            assert!(v.id(c).is_some(), "{c}");
        }
    }

    #[test]
    fn vocab_rejects_bad_alphabets() {
        let mut toks: Vec<String> = (0..40).map(|i| format!("t{i}")).collect();
        assert!(matches!(Vocab::new(toks.clone()), Err(BpoError::InvalidVocab(_))));
        toks[0] = "!".into();
        assert!(Vocab::new(toks.clone()).is_ok());
        toks[1] = "t2".into();
        assert!(matches!(Vocab::new(toks.clone()), Err(BpoError::InvalidVocab(_))));
        assert!(Vocab::new(vec!["!".into(); 3]).is_err());
    }

    #[test]
    fn vocab_json_is_a_plain_array() {
        let v = small_vocab();
        let s = serde_json::to_string(&v).unwrap();
        assert!(s.starts_with("[\"!\","));
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocab>("[\"a\",\"b\"]").is_err());
    }

    fn toy_params() -> EncoderParams {
        let dim = 4;
        let table: Vec<f64> = (0..8 * dim).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        EncoderParams::with_identity_mix(dim, table, default_position_weights(16)).unwrap()
    }

    #[test]
    fn single_token_encodes_to_its_row_direction() {
        let p = toy_params();
        let e = p.encode(&Prompt::new(vec![3], vec![])).unwrap();
        let want = Embedding(p.row(3).to_vec()).normalized().unwrap();
        assert_eq!(e, want);
    }

    #[test]
    fn encode_errors() {
        let p = toy_params();
        assert_eq!(p.encode(&Prompt::new(vec![], vec![])).unwrap_err(), BpoError::EmptyPrompt);
        let long = Prompt::new(vec![1; 17], vec![]);
        assert_eq!(p.encode(&long).unwrap_err(), BpoError::PromptTooLong { len: 17, max: 16 });
        assert!(matches!(p.encode(&Prompt::new(vec![99], vec![])), Err(BpoError::UnknownToken(_))));
    }

    #[test]
    fn encode_ignores_base_suffix_partition() {
        let p = toy_params();
        let a = p.encode(&Prompt::new(vec![1, 2, 3], vec![4, 5])).unwrap();
        let b = p.encode(&Prompt::new(vec![1, 2, 3, 4, 5], vec![])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_edges() {
        let e = Embedding(vec![0.3, -0.4, 1.2]);
        assert!((cosine(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&e, &e.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&e, &Embedding(vec![0.0; 3])).unwrap_err(), BpoError::ZeroVector);
        assert!(matches!(cosine(&e, &Embedding(vec![1.0])), Err(BpoError::DimensionMismatch { .. })));
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let a = Embedding(vec![1.0, 0.0]);
        let b = Embedding(vec![0.0, 1.0]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap(), Embedding(vec![0.5, 0.5]));
        assert_eq!(interpolate(&a, &b, 1.5).unwrap_err(), BpoError::AlphaOutOfRange(1.5));
        assert!(interpolate(&a, &b, -0.01).is_err());
    }

    #[test]
    fn gradient_needs_suffix() {
        let p = toy_params();
        let obj = Objective::Untargeted(Embedding(vec![1.0, 0.0, 0.0, 0.0]));
        assert_eq!(token_gradient(&p, &Prompt::new(vec![1], vec![]), &obj).unwrap_err(), BpoError::EmptySuffix);
    }

    #[test]
    fn targeted_and_untargeted_gradients_negate() {
        let p = toy_params();
        let prompt = Prompt::new(vec![1, 2], vec![3, 0]);
        let r = Embedding(vec![0.2, 0.5, -0.1, 0.9]);
        let u = token_gradient(&p, &prompt, &Objective::Untargeted(r.clone())).unwrap();
        let t = token_gradient(&p, &prompt, &Objective::Targeted(r)).unwrap();
        assert_eq!(u.objective_value, -t.objective_value);
        for (ru, rt) in u.grads.iter().zip(&t.grads) {
            for (a, b) in ru.iter().zip(rt) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn stationary_at_target() {
        let p = toy_params();
        let prompt = Prompt::new(vec![1, 2], vec![3, 5]);
        let here = p.encode(&prompt).unwrap();
        let g = token_gradient(&p, &prompt, &Objective::Targeted(here.clone())).unwrap();
        assert!((g.objective_value + 1.0).abs() < 1e-12);
        // A swap that only rescales the slot's contribution along `here` is
        // direction preserving; a combination of rows equal to `here` has zero
        // directional derivative.
        let dim = p.dim();
        for row in &g.grads {
            // grads[v] = w * W[v]·d_s; d_s is ~0 at the maximum.
            for v in 0..p.vocab_size() {
                assert!(row[v].abs() < 1e-9, "{}", row[v]);
            }
        }
        assert_eq!(here.dim(), dim);
    }
}
