//! Differentiable toy text classifiers `F: R^{m×n} → R`.
//!
//! Three heads are provided. `linear-pool` is affine in the input,
//! `mlp-pool` sum-pools the word rows and feeds them through a one-hidden-layer
//! MLP, and `bilinear-attn` first mixes the rows with bilinear self-attention
//! so that words interact before pooling. All gradients come from the
//! reverse-mode [`Tape`](crate::autodiff::Tape).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::tensor::{sample_gaussian, Matrix, Rng};

pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";

/// The two reserved tokens every vocabulary carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    Pad,
    Mask,
}

/// Anything that maps an `m × n` input to a scalar and can differentiate it.
///
/// Attribution methods are written against this trait so that hand-built test
/// functions and the trained classifiers go through the same code path.
pub trait Differentiable: Sync {
    fn value(&self, x: &Matrix) -> Result<f64>;

    fn gradient(&self, x: &Matrix) -> Result<Matrix>;

    /// Embedding row of a reserved token, when the model has one.
    fn special_embedding(&self, _token: SpecialToken) -> Option<&[f64]> {
        None
    }

    /// Embedding table that discretized paths may snap to.
    fn candidate_embeddings(&self) -> Option<&Matrix> {
        None
    }
}

/// Ordered token list with reserved `<pad>` and `<mask>` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pad_id: usize,
    mask_id: usize,
}

impl Vocabulary {
    /// `<pad>` and `<mask>` must both be present exactly once.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate token {t:?} in vocabulary")));
            }
        }
        let pad_id = *index
            .get(PAD_TOKEN)
            .ok_or_else(|| Error::input("vocabulary has no <pad> token"))?;
        let mask_id = *index
            .get(MASK_TOKEN)
            .ok_or_else(|| Error::input("vocabulary has no <mask> token"))?;
        Ok(Vocabulary {
            tokens,
            index,
            pad_id,
            mask_id,
        })
    }

    /// `["<pad>", "<mask>", words...]`.
    pub fn with_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), MASK_TOKEN.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn special_id(&self, token: SpecialToken) -> usize {
        match token {
            SpecialToken::Pad => self.pad_id,
            SpecialToken::Mask => self.mask_id,
        }
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSequence> {
        let ids = words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::input(format!("token {:?} not in vocabulary", w.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(ids, self.len())
    }

    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids().iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// A non-empty sequence of valid token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::input("token sequence is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocabulary of size {vocab_size}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Copy with the given positions replaced by `replacement`.
    pub fn with_replaced(&self, positions: impl IntoIterator<Item = usize>, replacement: usize) -> Self {
        let mut ids = self.ids.clone();
        for p in positions {
            ids[p] = replacement;
        }
        TokenSequence { ids }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    LinearPool,
    MlpPool,
    BilinearAttn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::LinearPool,
        Architecture::MlpPool,
        Architecture::BilinearAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::LinearPool => "linear-pool",
            Architecture::MlpPool => "mlp-pool",
            Architecture::BilinearAttn => "bilinear-attn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::input(format!(
                    "unknown architecture {s:?}; expected one of linear-pool, mlp-pool, bilinear-attn"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Architecture-specific parameters.
///
/// Weight matrices act on row vectors: a pooled `1 × n` input times
/// `hidden_weights` (`n × h`) gives the `1 × h` hidden pre-activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    /// `bias + Σ_i weights · x_i`.
    LinearPool { weights: Matrix, bias: f64 },
    /// `out_bias + out_weights · act(hidden_weights^T Σ_i x_i + hidden_bias)`.
    MlpPool {
        hidden_weights: Matrix,
        hidden_bias: Matrix,
        out_weights: Matrix,
        out_bias: f64,
        activation: Activation,
    },
    /// Rows are first replaced by `softmax(X A X^T / sqrt(n)) X`, then the
    /// `mlp-pool` head with `tanh` runs on the result.
    BilinearAttn {
        interaction: Matrix,
        hidden_weights: Matrix,
        hidden_bias: Matrix,
        out_weights: Matrix,
        out_bias: f64,
    },
}

impl Head {
    pub fn architecture(&self) -> Architecture {
        match self {
            Head::LinearPool { .. } => Architecture::LinearPool,
            Head::MlpPool { .. } => Architecture::MlpPool,
            Head::BilinearAttn { .. } => Architecture::BilinearAttn,
        }
    }

    /// Random initialization for an `n`-wide input and `hidden` units.
    pub fn init(arch: Architecture, n: usize, hidden: usize, rng: &mut Rng) -> Head {
        let in_std = 1.0 / (n as f64).sqrt();
        let out_std = 1.0 / (hidden as f64).sqrt();
        match arch {
            Architecture::LinearPool => Head::LinearPool {
                weights: sample_gaussian(rng, n, 1, 0.0, in_std),
                bias: 0.0,
            },
            Architecture::MlpPool => Head::MlpPool {
                hidden_weights: sample_gaussian(rng, n, hidden, 0.0, in_std),
                hidden_bias: Matrix::zeros(1, hidden),
                out_weights: sample_gaussian(rng, hidden, 1, 0.0, out_std),
                out_bias: 0.0,
                activation: Activation::Tanh,
            },
            Architecture::BilinearAttn => Head::BilinearAttn {
                interaction: sample_gaussian(rng, n, n, 0.0, in_std),
                hidden_weights: sample_gaussian(rng, n, hidden, 0.0, in_std),
                hidden_bias: Matrix::zeros(1, hidden),
                out_weights: sample_gaussian(rng, hidden, 1, 0.0, out_std),
                out_bias: 0.0,
            },
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let check_mlp = |hw: &Matrix, hb: &Matrix, ow: &Matrix| -> Result<()> {
            let h = hw.cols();
            hw.ensure_shape(n, h, "hidden_weights")?;
            hb.ensure_shape(1, h, "hidden_bias")?;
            ow.ensure_shape(h, 1, "out_weights")
        };
        match self {
            Head::LinearPool { weights, .. } => weights.ensure_shape(n, 1, "weights"),
            Head::MlpPool {
                hidden_weights,
                hidden_bias,
                out_weights,
                ..
            } => check_mlp(hidden_weights, hidden_bias, out_weights),
            Head::BilinearAttn {
                interaction,
                hidden_weights,
                hidden_bias,
                out_weights,
                ..
            } => {
                interaction.ensure_shape(n, n, "interaction")?;
                check_mlp(hidden_weights, hidden_bias, out_weights)
            }
        }
    }

    /// Appends the head to `tape`, returning the `1 × 1` score and the
    /// parameter leaves in a fixed order (see [`Head::params_mut`]).
    fn build(&self, tape: &mut Tape, x: Var) -> (Var, Vec<Var>) {
        let n = tape.value(x).cols();
        match self {
            Head::LinearPool { weights, bias } => {
                let w = tape.leaf(weights.clone());
                let pooled = tape.sum_rows(x);
                let s = tape.matmul(pooled, w);
                (tape.add_scalar(s, *bias), vec![w])
            }
            Head::MlpPool {
                hidden_weights,
                hidden_bias,
                out_weights,
                out_bias,
                activation,
            } => {
                let pooled = tape.sum_rows(x);
                let (s, params) = mlp(
                    tape,
                    pooled,
                    hidden_weights,
                    hidden_bias,
                    out_weights,
                    *out_bias,
                    *activation,
                );
                (s, params)
            }
            Head::BilinearAttn {
                interaction,
                hidden_weights,
                hidden_bias,
                out_weights,
                out_bias,
            } => {
                let a = tape.leaf(interaction.clone());
                let xa = tape.matmul(x, a);
                let xt = tape.transpose(x);
                let scores = tape.matmul(xa, xt);
                let scores = tape.scale(scores, 1.0 / (n as f64).sqrt());
                let attn = tape.row_softmax(scores);
                let mixed = tape.matmul(attn, x);
                let pooled = tape.sum_rows(mixed);
                let (s, mut params) = mlp(
                    tape,
                    pooled,
                    hidden_weights,
                    hidden_bias,
                    out_weights,
                    *out_bias,
                    Activation::Tanh,
                );
                params.insert(0, a);
                (s, params)
            }
        }
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut scratch = self.clone();
        let (params, _) = scratch.params_mut();
        params.iter().map(|p| p.shape()).collect()
    }

    /// Matrix parameters in the order `build` returns their leaves, then the
    /// scalar output bias.
    fn params_mut(&mut self) -> (Vec<&mut Matrix>, &mut f64) {
        match self {
            Head::LinearPool { weights, bias } => (vec![weights], bias),
            Head::MlpPool {
                hidden_weights,
                hidden_bias,
                out_weights,
                out_bias,
                ..
            } => (vec![hidden_weights, hidden_bias, out_weights], out_bias),
            Head::BilinearAttn {
                interaction,
                hidden_weights,
                hidden_bias,
                out_weights,
                out_bias,
            } => (
                vec![interaction, hidden_weights, hidden_bias, out_weights],
                out_bias,
            ),
        }
    }
}

fn mlp(
    tape: &mut Tape,
    pooled: Var,
    hidden_weights: &Matrix,
    hidden_bias: &Matrix,
    out_weights: &Matrix,
    out_bias: f64,
    activation: Activation,
) -> (Var, Vec<Var>) {
    let hw = tape.leaf(hidden_weights.clone());
    let hb = tape.leaf(hidden_bias.clone());
    let ow = tape.leaf(out_weights.clone());
    let z = tape.matmul(pooled, hw);
    let z = tape.add_row(z, hb);
    let a = match activation {
        Activation::Tanh => tape.tanh(z),
        Activation::Identity => z,
    };
    let s = tape.matmul(a, ow);
    (tape.add_scalar(s, out_bias), vec![hw, hb, ow])
}

/// A vocabulary, its `V × n` embedding table, and a scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocabulary: Vocabulary,
    embeddings: Matrix,
    head: Head,
    seed: u64,
}

impl ToyModel {
    pub fn new(vocabulary: Vocabulary, embeddings: Matrix, head: Head, seed: u64) -> Result<Self> {
        if embeddings.rows() != vocabulary.len() {
            return Err(Error::input(format!(
                "embedding table has {} rows but vocabulary has {} tokens",
                embeddings.rows(),
                vocabulary.len()
            )));
        }
        if embeddings.cols() == 0 {
            return Err(Error::input("embedding width must be positive"));
        }
        head.validate(embeddings.cols())?;
        embeddings.ensure_finite("embedding table")?;
        Ok(ToyModel {
            vocabulary,
            embeddings,
            head,
            seed,
        })
    }

    /// Randomly initialized model; the pad row is zero.
    pub fn random(
        arch: Architecture,
        vocabulary: Vocabulary,
        n: usize,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let mut embeddings = sample_gaussian(&mut rng, vocabulary.len(), n, 0.0, EMBEDDING_INIT_STD);
        embeddings.set_row(vocabulary.pad_id(), &vec![0.0; n]);
        let head = Head::init(arch, n, hidden, &mut rng);
        ToyModel::new(vocabulary, embeddings, head, seed)
    }

    pub fn architecture(&self) -> Architecture {
        self.head.architecture()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embedding_row(&self, id: usize) -> &[f64] {
        self.embeddings.row(id)
    }

    /// Replaces one embedding row; used by tests that move the mask token.
    pub fn set_embedding_row(&mut self, id: usize, values: &[f64]) -> Result<()> {
        if id >= self.vocabulary.len() || values.len() != self.width() {
            return Err(Error::input("embedding row index or width out of range"));
        }
        self.embeddings.set_row(id, values);
        Ok(())
    }

    /// Row `i` of the result is the embedding of `tokens[i]`.
    pub fn embed(&self, tokens: &TokenSequence) -> Result<Matrix> {
        let v = self.vocabulary.len();
        let mut x = Matrix::zeros(tokens.len(), self.width());
        for (i, &id) in tokens.ids().iter().enumerate() {
            if id >= v {
                return Err(Error::input(format!("token id {id} out of range for vocabulary of size {v}")));
            }
            x.set_row(i, self.embeddings.row(id));
        }
        Ok(x)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::input("input has no rows"));
        }
        if x.cols() != self.width() {
            return Err(Error::input(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Raw classifier score (the positive-class logit).
    pub fn forward(&self, x: &Matrix) -> Result<f64> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (s, _) = self.head.build(&mut tape, xv);
        let score = tape.value(s).as_scalar();
        if !score.is_finite() {
            return Err(Error::numeric(format!("forward produced {score}")));
        }
        Ok(score)
    }

    /// Exact gradient of [`ToyModel::forward`] with respect to `x`.
    pub fn gradient(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_backward(x)?.1)
    }

    pub fn forward_backward(&self, x: &Matrix) -> Result<(f64, Matrix)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let (s, _) = self.head.build(&mut tape, xv);
        let score = tape.value(s).as_scalar();
        let grad = tape.backward(s, Matrix::scalar(1.0)).take(xv);
        grad.ensure_finite("gradient")?;
        Ok((score, grad))
    }

    /// `(p_negative, p_positive)` under a logistic link, clamped to the open
    /// unit interval.
    pub fn predict_proba(&self, x: &Matrix) -> Result<(f64, f64)> {
        Ok(probabilities(self.forward(x)?))
    }

    pub fn predict_tokens(&self, tokens: &TokenSequence) -> Result<(f64, f64)> {
        self.predict_proba(&self.embed(tokens)?)
    }
}

impl Differentiable for ToyModel {
    fn value(&self, x: &Matrix) -> Result<f64> {
        self.forward(x)
    }

    fn gradient(&self, x: &Matrix) -> Result<Matrix> {
        ToyModel::gradient(self, x)
    }

    fn special_embedding(&self, token: SpecialToken) -> Option<&[f64]> {
        Some(self.embedding_row(self.vocabulary.special_id(token)))
    }

    fn candidate_embeddings(&self) -> Option<&Matrix> {
        Some(&self.embeddings)
    }
}

/// The logit of a fixed class: `sign * score`, with `sign = -1` for the
/// negative class, so larger always means "more of that class".
#[derive(Debug, Clone, Copy)]
pub struct ClassLogit<'a> {
    model: &'a ToyModel,
    sign: f64,
}

impl<'a> ClassLogit<'a> {
    pub fn new(model: &'a ToyModel, class: usize) -> Self {
        ClassLogit {
            model,
            sign: if class == 1 { 1.0 } else { -1.0 },
        }
    }

    /// Targets the class the model predicts for `x`.
    pub fn predicted(model: &'a ToyModel, x: &Matrix) -> Result<Self> {
        let class = predicted_class(model.forward(x)?);
        Ok(Self::new(model, class))
    }

    pub fn class(&self) -> usize {
        if self.sign > 0.0 {
            1
        } else {
            0
        }
    }

    pub fn model(&self) -> &'a ToyModel {
        self.model
    }
}

impl Differentiable for ClassLogit<'_> {
    fn value(&self, x: &Matrix) -> Result<f64> {
        Ok(self.sign * self.model.forward(x)?)
    }

    fn gradient(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.model.gradient(x)?.scale(self.sign))
    }

    fn special_embedding(&self, token: SpecialToken) -> Option<&[f64]> {
        self.model.special_embedding(token)
    }

    fn candidate_embeddings(&self) -> Option<&Matrix> {
        Some(self.model.embeddings())
    }
}

/// Class 1 when the score is non-negative.
pub fn predicted_class(score: f64) -> usize {
    usize::from(score >= 0.0)
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `(p_negative, p_positive)` for a logit, each kept strictly inside (0, 1).
pub fn probabilities(score: f64) -> (f64, f64) {
    let clamp = |p: f64| p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON);
    (clamp(sigmoid(-score)), clamp(sigmoid(score)))
}

const EMBEDDING_INIT_STD: f64 = 0.5;

/// Knobs for [`train_toy_classifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub n: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Whether the `<mask>` row receives gradient updates. `<pad>` never does.
    pub train_mask: bool,
    /// Per-token probability of replacing an input token by `<mask>` in each
    /// epoch. This is what gives the mask row a training signal.
    pub mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::MlpPool,
            n: 16,
            hidden: 16,
            epochs: 150,
            lr: 0.5,
            seed: 0,
            train_mask: true,
            mask_prob: 0.15,
        }
    }
}

/// Summary returned alongside a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
    pub accuracy: f64,
}

/// Full-batch gradient descent on mean logistic loss.
///
/// Deterministic given `config.seed`. The pad row stays at zero throughout.
pub fn train_toy_classifier(corpus: &Corpus, config: &TrainConfig) -> Result<(ToyModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::input("cannot train on an empty corpus"));
    }
    if config.n == 0 || config.hidden == 0 {
        return Err(Error::input("model width and hidden size must be positive"));
    }
    let vocab = corpus.vocabulary().clone();
    let examples = corpus
        .sentences()
        .iter()
        .map(|s| Ok((vocab.encode(&s.tokens)?, s.label)))
        .collect::<Result<Vec<_>>>()?;
    if let Some((_, bad)) = examples.iter().find(|(_, l)| *l > 1) {
        return Err(Error::input(format!("label {bad} is not 0 or 1")));
    }

    let mut model = ToyModel::random(config.architecture, vocab, config.n, config.hidden, config.seed)?;
    // Separate stream for masking so initialization does not depend on it.
    let mut mask_rng = Rng::derive(config.seed, 0x6d61_736b);
    let pad = model.vocabulary.pad_id();
    let mask = model.vocabulary.mask_id();
    if config.train_mask {
        // The mask row starts out neutral and only moves as far as the data asks.
        let n = model.width();
        model.embeddings.set_row(mask, &vec![0.0; n]);
    }
    let count = examples.len() as f64;
    let mut final_loss = f64::NAN;

    for _ in 0..config.epochs {
        let mut emb_grad = Matrix::zeros(model.embeddings.rows(), model.width());
        let mut head_grads: Vec<Matrix> = model
            .head
            .param_shapes()
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        let mut bias_grad = 0.0;
        let mut loss = 0.0;

        for (tokens, label) in &examples {
            let ids: Vec<usize> = tokens
                .ids()
                .iter()
                .map(|&id| {
                    if config.mask_prob > 0.0 && mask_rng.bernoulli(config.mask_prob) {
                        mask
                    } else {
                        id
                    }
                })
                .collect();
            let x = Matrix::from_rows(&ids.iter().map(|&id| model.embeddings.row(id)).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (s, params) = model.head.build(&mut tape, xv);
            let score = tape.value(s).as_scalar();
            let y = *label as f64;
            // softplus(-s) for y=1, softplus(s) for y=0
            let margin = if y > 0.5 { score } else { -score };
            loss += softplus(-margin) / count;
            let dscore = (sigmoid(score) - y) / count;
            let mut grads = tape.backward(s, Matrix::scalar(dscore));
            bias_grad += dscore;
            for (acc, p) in head_grads.iter_mut().zip(&params) {
                acc.axpy(1.0, &grads.take(*p));
            }
            let gx = grads.take(xv);
            for (row, &id) in ids.iter().enumerate() {
                for (e, &g) in emb_grad.row_mut(id).iter_mut().zip(gx.row(row)) {
                    *e += g;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::numeric("training loss diverged"));
        }
        final_loss = loss;

        let (params, bias) = model.head.params_mut();
        for (p, g) in params.into_iter().zip(&head_grads) {
            p.axpy(-config.lr, g);
        }
        *bias -= config.lr * bias_grad;
        for id in 0..model.embeddings.rows() {
            if id == pad || (id == mask && !config.train_mask) {
                continue;
            }
            let g = emb_grad.row(id).to_vec();
            for (e, gv) in model.embeddings.row_mut(id).iter_mut().zip(g) {
                *e -= config.lr * gv;
            }
        }
    }

    let accuracy = accuracy(&model, &examples)?;
    Ok((model, TrainReport { final_loss, accuracy }))
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn accuracy(model: &ToyModel, examples: &[(TokenSequence, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (tokens, label) in examples {
        let score = model.forward(&model.embed(tokens)?)?;
        if predicted_class(score) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Fraction of `corpus` the model labels correctly (unmasked inputs).
pub fn corpus_accuracy(model: &ToyModel, corpus: &Corpus) -> Result<f64> {
    let examples = corpus
        .sentences()
        .iter()
        .map(|s| Ok((model.vocabulary().encode(&s.tokens)?, s.label)))
        .collect::<Result<Vec<_>>>()?;
    if examples.is_empty() {
        return Err(Error::input("empty corpus"));
    }
    accuracy(model, &examples)
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    architecture: Architecture,
    n: usize,
    vocabulary: Vec<String>,
    embedding_table: Vec<Vec<f64>>,
    head: Head,
    seed: u64,
}

impl ToyModel {
    /// JSON document; floats are written in shortest round-trip form, so
    /// `from_json(to_json(m)) == m` bit for bit.
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            architecture: self.architecture(),
            n: self.width(),
            vocabulary: self.vocabulary.tokens().to_vec(),
            embedding_table: self.embeddings.iter_rows().map(<[f64]>::to_vec).collect(),
            head: self.head.clone(),
            seed: self.seed,
        };
        let mut s = serde_json::to_string_pretty(&doc)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        if doc.head.architecture() != doc.architecture {
            return Err(Error::format(format!(
                "architecture field {} does not match head kind {}",
                doc.architecture,
                doc.head.architecture()
            )));
        }
        let vocabulary = Vocabulary::from_tokens(doc.vocabulary)?;
        let embeddings = Matrix::from_rows(&doc.embedding_table)?;
        if embeddings.cols() != doc.n {
            return Err(Error::format(format!(
                "embedding width {} does not match n = {}",
                embeddings.cols(),
                doc.n
            )));
        }
        ToyModel::new(vocabulary, embeddings, doc.head, doc.seed)
    }
}
