//! Vocabulary, categorical distributions and tabular autoregressive models.
//!
//! A [`TabularModel`] of order `m` keeps one logits row per possible
//! length-`m` context, so it has `V^m` rows of `V` logits each. The row for a
//! context is picked from its last `m` tokens, left-padded with token 0 when
//! the context is shorter than `m`. Temperature is applied when a
//! distribution is evaluated; the stored logits are never pre-divided.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Tolerance on the total mass of a [`CategoricalDist`].
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidModel(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// The reserved end-of-sequence token, always the last id.
    pub fn eos(&self) -> Token {
        (self.size - 1) as Token
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.size
    }
}

/// A normalized probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("mass sums to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes a nonnegative weight vector.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    /// `softmax(logits / temperature)`, computed with the max-shift trick.
    pub fn softmax(logits: &[f64], temperature: f64) -> Self {
        let probs = log_softmax(logits, temperature).into_iter().map(f64::exp).collect();
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        Self { probs: vec![1.0 / size as f64; size] }
    }

    pub fn point_mass(size: usize, token: Token) -> Self {
        let mut probs = vec![0.0; size];
        probs[token as usize] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: Token) -> f64 {
        self.probs[token as usize]
    }

    /// Inverse-CDF lookup for a uniform variate in `[0, 1)`.
    pub fn sample_with_uniform(&self, u: f64) -> Token {
        let mut cumulative = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            cumulative += p;
            if u < cumulative {
                return i as Token;
            }
        }
        // Rounding left u above the final cumulative sum.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as Token
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        self.sample_with_uniform(rng.random::<f64>())
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Numerically stable `log_softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let log_norm = logits
        .iter()
        .map(|z| (z / temperature - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|z| z / temperature - log_norm).collect()
}

/// A realized prefix of token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context {
    tokens: Vec<Token>,
}

impl Context {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: Token) {
        self.tokens.push(token);
    }

    pub fn extend_from_slice(&mut self, tokens: &[Token]) {
        self.tokens.extend_from_slice(tokens);
    }

    pub fn last(&self) -> Option<Token> {
        self.tokens.last().copied()
    }
}

impl From<Vec<Token>> for Context {
    fn from(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }
}

/// Row-major logits table of shape `V^order x V`.
///
/// Models are immutable values: training produces a new model with a bumped
/// version rather than mutating one that decoders may be reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDoc", into = "ModelDoc")]
pub struct TabularModel {
    vocab: Vocabulary,
    order: usize,
    temperature: f64,
    logits: Vec<f64>,
    version: u64,
}

/// Flat JSON checkpoint layout.
#[derive(Serialize, Deserialize)]
struct ModelDoc {
    vocab_size: usize,
    order: usize,
    temperature: f64,
    logits: Vec<f64>,
    #[serde(default)]
    version: u64,
}

impl TryFrom<ModelDoc> for TabularModel {
    type Error = Error;

    fn try_from(doc: ModelDoc) -> Result<Self> {
        let mut model =
            TabularModel::new(Vocabulary::new(doc.vocab_size)?, doc.order, doc.temperature, doc.logits)?;
        model.version = doc.version;
        Ok(model)
    }
}

impl From<TabularModel> for ModelDoc {
    fn from(model: TabularModel) -> Self {
        ModelDoc {
            vocab_size: model.vocab.size(),
            order: model.order,
            temperature: model.temperature,
            logits: model.logits,
            version: model.version,
        }
    }
}

impl TabularModel {
    pub fn new(vocab: Vocabulary, order: usize, temperature: f64, logits: Vec<f64>) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidModel(format!("temperature must be positive, got {temperature}")));
        }
        let rows = num_rows(vocab.size(), order)?;
        if logits.len() != rows * vocab.size() {
            return Err(Error::InvalidModel(format!(
                "expected {} logits for order {order} over {} tokens, got {}",
                rows * vocab.size(),
                vocab.size(),
                logits.len()
            )));
        }
        if logits.iter().any(|z| z.is_nan() || *z == f64::INFINITY) {
            return Err(Error::InvalidModel("logits must not be NaN or +inf".into()));
        }
        Ok(Self { vocab, order, temperature, logits, version: 0 })
    }

    /// All-zero logits: the uniform distribution in every context.
    pub fn uniform(vocab: Vocabulary, order: usize, temperature: f64) -> Result<Self> {
        let rows = num_rows(vocab.size(), order)?;
        Self::new(vocab, order, temperature, vec![0.0; rows * vocab.size()])
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        vocab: Vocabulary,
        order: usize,
        temperature: f64,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let rows = num_rows(vocab.size(), order)?;
        let logits = (0..rows * vocab.size())
            .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
            .collect();
        Self::new(vocab, order, temperature, logits)
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn eos(&self) -> Token {
        self.vocab.eos()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_rows(&self) -> usize {
        self.logits.len() / self.vocab.size()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let v = self.vocab.size();
        &self.logits[row * v..(row + 1) * v]
    }

    /// Row selected by the last `order` tokens of `tokens`, left-padded with 0.
    pub fn row_index(&self, tokens: &[Token]) -> usize {
        let v = self.vocab.size();
        let start = tokens.len().saturating_sub(self.order);
        // Leading pad zeros are the most significant digits, so they vanish.
        tokens[start..].iter().fold(0usize, |acc, &t| acc * v + t as usize)
    }

    pub fn next_dist(&self, ctx: &[Token]) -> CategoricalDist {
        CategoricalDist::softmax(self.row(self.row_index(ctx)), self.temperature)
    }

    pub fn dist_for_row(&self, row: usize) -> CategoricalDist {
        CategoricalDist::softmax(self.row(row), self.temperature)
    }

    /// Full log-probability vector for the next token.
    pub fn log_probs(&self, ctx: &[Token]) -> Vec<f64> {
        log_softmax(self.row(self.row_index(ctx)), self.temperature)
    }

    pub fn logprob(&self, ctx: &[Token], token: Token) -> f64 {
        self.log_probs(ctx)[token as usize]
    }

    pub fn sample<R: Rng + ?Sized>(&self, ctx: &[Token], rng: &mut R) -> Token {
        self.next_dist(ctx).sample(rng)
    }

    /// Copy with replaced logits and the version bumped by one.
    pub fn with_logits(&self, logits: Vec<f64>) -> Result<Self> {
        let mut next = Self::new(self.vocab, self.order, self.temperature, logits)?;
        next.version = self.version + 1;
        Ok(next)
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn num_rows(vocab_size: usize, order: usize) -> Result<usize> {
    u32::try_from(order)
        .ok()
        .and_then(|o| vocab_size.checked_pow(o))
        .filter(|rows| rows.checked_mul(vocab_size).is_some())
        .ok_or_else(|| Error::InvalidModel(format!("table for order {order} over {vocab_size} tokens is too large")))
}
