//! The hierarchical labeler: a word-level bi-LSTM with attentive pooling
//! encodes each sentence, a sentence-level bi-LSTM contextualizes the sentence
//! vectors across the abstract, and an affine layer produces the emission
//! scores consumed by the CRF.
//!
//! Attention for a sentence with hidden states `h_t`:
//! `u_t = tanh(W h_t + b)`, `α = softmax_t(u_tᵀ c)`, `v = Σ_t α_t h_t`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::corpus::{Abstract, NUM_LABELS};
use crate::crf::{self, CrfParams};
use crate::embeddings::{embed_sentence, EmbeddingTable, Vocab};
use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::math::tanh;
use crate::numeric::lstm::{BiLstmCache, BiLstmParams, INIT_SCALE};
use crate::numeric::rng::seeded;
use crate::numeric::softmax::softmax_slice;
use crate::numeric::{Linear, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub word_hidden: usize,
    pub sentence_hidden: usize,
    pub attention_dim: usize,
    pub num_labels: usize,
    /// When false the sentence-level bi-LSTM is replaced by the identity.
    pub contextualize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(200, 100, 100)
    }
}

impl ModelConfig {
    /// Attention dimension defaults to `2 * word_hidden`.
    pub fn new(embed_dim: usize, word_hidden: usize, sentence_hidden: usize) -> Self {
        Self {
            embed_dim,
            word_hidden,
            sentence_hidden,
            attention_dim: 2 * word_hidden,
            num_labels: NUM_LABELS,
            contextualize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [self.embed_dim, self.word_hidden, self.attention_dim, self.num_labels];
        if sizes.contains(&0) || (self.contextualize && self.sentence_hidden == 0) {
            return Err(Error::Config(alloc::format!("model sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Width of the vectors fed to the emission layer.
    pub fn emission_input(&self) -> usize {
        if self.contextualize {
            2 * self.sentence_hidden
        } else {
            2 * self.word_hidden
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprint::new();
        fp.u64(self.embed_dim as u64)
            .u64(self.word_hidden as u64)
            .u64(self.sentence_hidden as u64)
            .u64(self.attention_dim as u64)
            .u64(self.num_labels as u64)
            .u64(u64::from(self.contextualize));
        fp.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[A, 2H_w]` projection and `[A]` bias.
    pub projection: Linear,
    /// Context vector `[A]`.
    pub context: Tensor,
}

/// All trainable weights. Also used as the gradient container.
///
/// Every mutable access bumps an internal version so that cached forward
/// traces cannot be differentiated against parameters they were not computed
/// with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    word: BiLstmParams,
    attention: AttentionParams,
    sentence: Option<BiLstmParams>,
    emission: Linear,
    crf: CrfParams,
    version: u64,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            word: BiLstmParams::zeros(config.embed_dim, config.word_hidden),
            attention: AttentionParams {
                projection: Linear::zeros(2 * config.word_hidden, config.attention_dim),
                context: Tensor::zeros(&[config.attention_dim]),
            },
            sentence: config
                .contextualize
                .then(|| BiLstmParams::zeros(2 * config.word_hidden, config.sentence_hidden)),
            emission: Linear::zeros(config.emission_input(), config.num_labels),
            crf: CrfParams::zeros(config.num_labels),
            version: 0,
        })
    }

    /// Seeded initialization: uniform in `[-0.1, 0.1]`, LSTM forget-gate biases at 1.
    pub fn initialized(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let s = INIT_SCALE;
        let word = BiLstmParams::initialized(config.embed_dim, config.word_hidden, &mut rng);
        let attention = AttentionParams {
            projection: Linear::uniform(2 * config.word_hidden, config.attention_dim, s, &mut rng),
            context: Tensor::uniform(&[config.attention_dim], -s, s, &mut rng),
        };
        let sentence = config
            .contextualize
            .then(|| BiLstmParams::initialized(2 * config.word_hidden, config.sentence_hidden, &mut rng));
        let emission = Linear::uniform(config.emission_input(), config.num_labels, s, &mut rng);
        let crf = CrfParams::uniform(config.num_labels, s, &mut rng);
        Ok(Self {
            config: config.clone(),
            word,
            attention,
            sentence,
            emission,
            crf,
            version: 0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config was validated at construction")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn word_lstm(&self) -> &BiLstmParams {
        &self.word
    }

    pub fn attention(&self) -> &AttentionParams {
        &self.attention
    }

    pub fn sentence_lstm(&self) -> Option<&BiLstmParams> {
        self.sentence.as_ref()
    }

    pub fn emission(&self) -> &Linear {
        &self.emission
    }

    pub fn crf(&self) -> &CrfParams {
        &self.crf
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Stable tensor names, in [`ModelParams::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let lstm = |prefix: &str| -> Vec<String> {
            ["forward", "backward"]
                .iter()
                .flat_map(|dir| {
                    ["input_weights", "recurrent_weights", "bias"]
                        .iter()
                        .map(move |t| alloc::format!("{prefix}.{dir}.{t}"))
                })
                .collect()
        };
        let mut names = lstm("word_lstm");
        names.extend(["attention.weight", "attention.bias", "attention.context"].map(String::from));
        if self.sentence.is_some() {
            names.extend(lstm("sentence_lstm"));
        }
        names.extend(["emission.weight", "emission.bias", "crf.transitions", "crf.start", "crf.end"].map(String::from));
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.word.tensors().into();
        out.extend([&self.attention.projection.weight, &self.attention.projection.bias, &self.attention.context]);
        if let Some(s) = &self.sentence {
            out.extend(s.tensors());
        }
        out.extend([&self.emission.weight, &self.emission.bias]);
        out.extend(self.crf.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        let mut out: Vec<&mut Tensor> = self.word.tensors_mut().into();
        out.extend([
            &mut self.attention.projection.weight,
            &mut self.attention.projection.bias,
            &mut self.attention.context,
        ]);
        if let Some(s) = &mut self.sentence {
            out.extend(s.tensors_mut());
        }
        out.extend([&mut self.emission.weight, &mut self.emission.bias]);
        out.extend(self.crf.tensors_mut());
        out
    }

    pub fn crf_mut(&mut self) -> &mut CrfParams {
        self.version += 1;
        &mut self.crf
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) -> Result<()> {
        if self.config != other.config {
            return Err(Error::dim("parameter sets built from different model configs"));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, alpha)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        let mut fp = Fingerprint::new();
        fp.u64(self.config.fingerprint());
        for t in self.tensors() {
            fp.f64s(t.data());
        }
        fp.finish()
    }

    /// Flat copy of every parameter in [`ModelParams::tensors`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::dim(alloc::format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Replaces the tensors in order; shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::dim(alloc::format!(
                "{} tensors supplied for {} slots",
                tensors.len(),
                slots.len()
            )));
        }
        for (slot, t) in slots.iter_mut().zip(tensors) {
            slot.same_shape(&t)?;
            **slot = t;
        }
        Ok(())
    }
}

/// Word vectors of one abstract, one `[n_words, D]` tensor per sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInput {
    sentences: Vec<Tensor>,
}

impl EmbeddedInput {
    pub fn new(sentences: Vec<Tensor>) -> Result<Self> {
        let Some(first) = sentences.first() else {
            return Err(Error::EmptyInput("abstract without sentences"));
        };
        let d = first.cols();
        for s in &sentences {
            if s.shape().len() != 2 || s.cols() != d {
                return Err(Error::dim("sentences embedded with different dimensions"));
            }
            if s.rows() == 0 {
                return Err(Error::EmptySentence);
            }
        }
        Ok(Self { sentences })
    }

    pub fn sentences(&self) -> &[Tensor] {
        &self.sentences
    }

    pub fn sentences_mut(&mut self) -> &mut [Tensor] {
        &mut self.sentences
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn dim(&self) -> usize {
        self.sentences[0].cols()
    }

    pub fn num_values(&self) -> usize {
        self.sentences.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            sentences: self.sentences.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.sentences.len() != other.sentences.len() {
            return Err(Error::dim("inputs have different sentence counts"));
        }
        for (a, b) in self.sentences.iter().zip(&other.sentences) {
            a.same_shape(b)?;
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Self, alpha: f64) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.sentences.iter_mut().zip(&other.sentences) {
            a.add_scaled(b, alpha)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.sentences.iter_mut().for_each(|s| s.scale(alpha));
    }

    /// L2 norm over every coordinate of every sentence.
    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.sentences.iter().map(Tensor::norm_sq).sum())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.sentences.iter().flat_map(|s| s.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::dim("flat input has the wrong length"));
        }
        let mut offset = 0;
        for s in &mut self.sentences {
            let n = s.len();
            s.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

pub fn embed_abstract(abs: &Abstract, vocab: &Vocab, table: &EmbeddingTable) -> Result<EmbeddedInput> {
    let sentences = abs
        .sentences
        .iter()
        .map(|s| embed_sentence(&s.tokens, vocab, table))
        .collect::<Result<Vec<_>>>()?;
    EmbeddedInput::new(sentences)
}

/// Dropout rate and whether the model is in training mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub training: bool,
}

impl DropoutSpec {
    pub const EVAL: DropoutSpec = DropoutSpec {
        rate: 0.0,
        training: false,
    };

    pub fn active(&self) -> bool {
        self.training && self.rate > 0.0
    }
}

/// Inverted-dropout masks (entries 0 or `1/(1-rate)`) for the embedded
/// words, the pooled sentence vectors and the contextualized vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    inputs: Vec<Tensor>,
    sentence: Tensor,
    context: Option<Tensor>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(config: &ModelConfig, input: &EmbeddedInput, rate: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(alloc::format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |shape: &[usize]| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
            }
            t
        };
        let inputs = input.sentences.iter().map(|s| draw(s.shape())).collect();
        let n = input.num_sentences();
        let sentence = draw(&[n, 2 * config.word_hidden]);
        let context = config.contextualize.then(|| draw(&[n, 2 * config.sentence_hidden]));
        Ok(Self {
            inputs,
            sentence,
            context,
        })
    }
}

fn apply_mask(x: &Tensor, mask: Option<&Tensor>) -> Tensor {
    match mask {
        None => x.clone(),
        Some(m) => {
            let mut out = x.clone();
            for (v, k) in out.data_mut().iter_mut().zip(m.data()) {
                *v *= k;
            }
            out
        }
    }
}

fn mask_in_place(x: &mut Tensor, mask: Option<&Tensor>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionCache {
    /// `[n, A]` tanh projections.
    projected: Tensor,
    weights: Vec<f64>,
    pooled: Vec<f64>,
}

fn attend(params: &AttentionParams, hidden: &Tensor) -> AttentionCache {
    let n = hidden.rows();
    let a = params.context.len();
    let mut projected = Tensor::zeros(&[n, a]);
    let mut logits = vec![0.0; n];
    for t in 0..n {
        let u = projected.row_mut(t);
        params.projection.apply(hidden.row(t), u);
        u.iter_mut().for_each(|v| *v = tanh(*v));
        logits[t] = crate::math::dot(u, params.context.data());
    }
    let weights = softmax_slice(&logits);
    let mut pooled = vec![0.0; hidden.cols()];
    for (t, w) in weights.iter().enumerate() {
        for (p, h) in pooled.iter_mut().zip(hidden.row(t)) {
            *p += w * h;
        }
    }
    AttentionCache {
        projected,
        weights,
        pooled,
    }
}

fn attend_backward(params: &AttentionParams, hidden: &Tensor, cache: &AttentionCache, d_pooled: &[f64], grads: &mut AttentionParams) -> Tensor {
    let n = hidden.rows();
    let mut d_hidden = Tensor::zeros(hidden.shape());
    let d_weights: Vec<f64> = (0..n).map(|t| crate::math::dot(d_pooled, hidden.row(t))).collect();
    let mean: f64 = cache.weights.iter().zip(&d_weights).map(|(a, d)| a * d).sum();
    let mut dz = vec![0.0; params.context.len()];
    for t in 0..n {
        let alpha = cache.weights[t];
        for (dh, dp) in d_hidden.row_mut(t).iter_mut().zip(d_pooled) {
            *dh += alpha * dp;
        }
        let d_logit = alpha * (d_weights[t] - mean);
        let u = cache.projected.row(t);
        for ((g, ui), (dzi, c)) in grads
            .context
            .data_mut()
            .iter_mut()
            .zip(u)
            .zip(dz.iter_mut().zip(params.context.data()))
        {
            *g += d_logit * ui;
            *dzi = d_logit * c * (1.0 - ui * ui);
        }
        params
            .projection
            .backward_into(hidden.row(t), &dz, &mut grads.projection, d_hidden.row_mut(t));
    }
    d_hidden
}

/// Bi-LSTM over the words of one sentence followed by attentive pooling.
/// Returns the `2H_w` sentence vector and the attention weights.
pub fn encode_sentence(embedded: &Tensor, params: &ModelParams) -> Result<(Tensor, Vec<f64>)> {
    if embedded.rows() == 0 {
        return Err(Error::EmptySentence);
    }
    let cache = params.word.forward(embedded)?;
    let att = attend(&params.attention, cache.output());
    Ok((Tensor::vector(att.pooled), att.weights))
}

/// Sentence-level bi-LSTM over `[S, 2H_w]` sentence vectors (identity when
/// the model is configured without contextualization).
pub fn contextualize(sentence_vectors: &Tensor, params: &ModelParams) -> Result<Tensor> {
    match &params.sentence {
        Some(lstm) => Ok(lstm.forward(sentence_vectors)?.output().clone()),
        None => {
            if sentence_vectors.rows() == 0 {
                return Err(Error::EmptyInput("abstract without sentences"));
            }
            Ok(sentence_vectors.clone())
        }
    }
}

/// Affine map of each contextualized vector to `L` raw label scores.
pub fn emission_scores(contextualized: &Tensor, params: &ModelParams) -> Result<Tensor> {
    if contextualized.rows() == 0 {
        return Err(Error::EmptyInput("abstract without sentences"));
    }
    params.emission.validate()?;
    if contextualized.cols() != params.emission.input_size() {
        return Err(Error::dim(alloc::format!(
            "emission layer expects width {}, got {}",
            params.emission.input_size(),
            contextualized.cols()
        )));
    }
    let l = params.emission.output_size();
    let mut scores = Tensor::zeros(&[contextualized.rows(), l]);
    for t in 0..contextualized.rows() {
        params.emission.apply(contextualized.row(t), scores.row_mut(t));
    }
    Ok(scores)
}

/// Intermediates of one abstract's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    version: u64,
    input: EmbeddedInput,
    masks: Option<DropoutMasks>,
    word_inputs: Vec<Tensor>,
    word_caches: Vec<BiLstmCache>,
    attention: Vec<AttentionCache>,
    sentence_vectors: Tensor,
    sentence_inputs: Tensor,
    sentence_cache: Option<BiLstmCache>,
    contextualized: Tensor,
    emission_inputs: Tensor,
    scores: Tensor,
}

impl ForwardTrace {
    /// `[S, L]` emission scores.
    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn input(&self) -> &EmbeddedInput {
        &self.input
    }

    pub fn attention_weights(&self, sentence: usize) -> &[f64] {
        &self.attention[sentence].weights
    }

    /// Pooled sentence vectors before dropout, `[S, 2H_w]`.
    pub fn sentence_vectors(&self) -> &Tensor {
        &self.sentence_vectors
    }

    /// Contextualized vectors before dropout.
    pub fn contextualized(&self) -> &Tensor {
        &self.contextualized
    }

    pub fn masks(&self) -> Option<&DropoutMasks> {
        self.masks.as_ref()
    }
}

/// Forward pass over already embedded words. `masks` switches dropout on.
pub fn forward_embedded(params: &ModelParams, input: &EmbeddedInput, masks: Option<&DropoutMasks>) -> Result<ForwardTrace> {
    if input.dim() != params.config.embed_dim {
        return Err(Error::dim(alloc::format!(
            "inputs of dimension {} for a model expecting {}",
            input.dim(),
            params.config.embed_dim
        )));
    }
    let n = input.num_sentences();
    let mut word_inputs = Vec::with_capacity(n);
    let mut word_caches = Vec::with_capacity(n);
    let mut attention = Vec::with_capacity(n);
    let mut sentence_vectors = Tensor::zeros(&[n, 2 * params.config.word_hidden]);
    for (i, s) in input.sentences.iter().enumerate() {
        let x = apply_mask(s, masks.map(|m| &m.inputs[i]));
        let cache = params.word.forward(&x)?;
        let att = attend(&params.attention, cache.output());
        sentence_vectors.row_mut(i).copy_from_slice(&att.pooled);
        word_inputs.push(x);
        word_caches.push(cache);
        attention.push(att);
    }
    let sentence_inputs = apply_mask(&sentence_vectors, masks.map(|m| &m.sentence));
    let (sentence_cache, contextualized) = match &params.sentence {
        Some(lstm) => {
            let c = lstm.forward(&sentence_inputs)?;
            let out = c.output().clone();
            (Some(c), out)
        }
        None => (None, sentence_inputs.clone()),
    };
    let emission_inputs = apply_mask(&contextualized, masks.and_then(|m| m.context.as_ref()));
    let scores = emission_scores(&emission_inputs, params)?;
    scores.check_finite("emission scores")?;
    Ok(ForwardTrace {
        version: params.version,
        input: input.clone(),
        masks: masks.cloned(),
        word_inputs,
        word_caches,
        attention,
        sentence_vectors,
        sentence_inputs,
        sentence_cache,
        contextualized,
        emission_inputs,
        scores,
    })
}

/// Embeds `abs` and runs the forward pass, sampling dropout masks from `rng`
/// when `dropout` is active.
pub fn forward_abstract<R: Rng + ?Sized>(
    abs: &Abstract,
    vocab: &Vocab,
    table: &EmbeddingTable,
    params: &ModelParams,
    dropout: &DropoutSpec,
    rng: &mut R,
) -> Result<ForwardTrace> {
    let input = embed_abstract(abs, vocab, table)?;
    let masks = if dropout.active() {
        Some(DropoutMasks::sample(&params.config, &input, dropout.rate, rng)?)
    } else {
        None
    };
    forward_embedded(params, &input, masks.as_ref())
}

/// Exact gradients of `Σ d_scores ⊙ scores` with respect to every parameter
/// (CRF entries left at zero) and to the embedded input words.
pub fn backward_abstract(params: &ModelParams, trace: &ForwardTrace, d_scores: &Tensor) -> Result<(ModelParams, EmbeddedInput)> {
    if trace.version != params.version {
        return Err(Error::State(alloc::format!(
            "trace computed with parameter version {}, parameters are at {}",
            trace.version,
            params.version
        )));
    }
    d_scores.same_shape(&trace.scores)?;
    let mut grads = params.zeros_like();
    let masks = trace.masks.as_ref();

    let n = trace.scores.rows();
    let mut d_emission_inputs = Tensor::zeros(trace.emission_inputs.shape());
    for t in 0..n {
        params.emission.backward_into(
            trace.emission_inputs.row(t),
            d_scores.row(t),
            &mut grads.emission,
            d_emission_inputs.row_mut(t),
        );
    }
    let mut d_context = d_emission_inputs;
    mask_in_place(&mut d_context, masks.and_then(|m| m.context.as_ref()));
    let mut d_sentence = match (&params.sentence, &trace.sentence_cache, &mut grads.sentence) {
        (Some(lstm), Some(cache), Some(g)) => lstm.backward(&trace.sentence_inputs, cache, &d_context, g)?,
        (None, None, None) => d_context,
        _ => return Err(Error::State("trace and parameters disagree on contextualization".into())),
    };
    mask_in_place(&mut d_sentence, masks.map(|m| &m.sentence));

    let mut d_input = trace.input.zeros_like();
    for i in 0..n {
        let cache = &trace.word_caches[i];
        let d_hidden = attend_backward(
            &params.attention,
            cache.output(),
            &trace.attention[i],
            d_sentence.row(i),
            &mut grads.attention,
        );
        let mut dx = params.word.backward(&trace.word_inputs[i], cache, &d_hidden, &mut grads.word)?;
        mask_in_place(&mut dx, masks.map(|m| &m.inputs[i]));
        d_input.sentences[i] = dx;
    }
    Ok((grads, d_input))
}

/// Forward pass, CRF scores and backward in one interface, so that losses
/// and perturbations can be written once for any scorer.
pub trait SequenceModel {
    type Trace;
    type Noise;

    fn crf(&self) -> &CrfParams;

    fn forward(&self, input: &EmbeddedInput, noise: Option<&Self::Noise>) -> Result<Self::Trace>;

    fn scores<'t>(&self, trace: &'t Self::Trace) -> &'t Tensor;

    /// Parameter gradients (CRF part taken from `d_crf`) and input gradients.
    fn backward(&self, trace: &Self::Trace, d_scores: &Tensor, d_crf: &CrfParams) -> Result<(Self, EmbeddedInput)>
    where
        Self: Sized;

    fn zero_grads(&self) -> Self
    where
        Self: Sized;

    fn accumulate(&self, into: &mut Self, other: &Self, alpha: f64) -> Result<()>
    where
        Self: Sized;
}

impl SequenceModel for ModelParams {
    type Trace = ForwardTrace;
    type Noise = DropoutMasks;

    fn crf(&self) -> &CrfParams {
        &self.crf
    }

    fn forward(&self, input: &EmbeddedInput, noise: Option<&DropoutMasks>) -> Result<ForwardTrace> {
        forward_embedded(self, input, noise)
    }

    fn scores<'t>(&self, trace: &'t ForwardTrace) -> &'t Tensor {
        &trace.scores
    }

    fn backward(&self, trace: &ForwardTrace, d_scores: &Tensor, d_crf: &CrfParams) -> Result<(Self, EmbeddedInput)> {
        let (mut grads, d_input) = backward_abstract(self, trace, d_scores)?;
        for (g, d) in grads.crf.tensors_mut().into_iter().zip(d_crf.tensors()) {
            g.add_scaled(d, 1.0)?;
        }
        Ok((grads, d_input))
    }

    fn zero_grads(&self) -> Self {
        self.zeros_like()
    }

    fn accumulate(&self, into: &mut Self, other: &Self, alpha: f64) -> Result<()> {
        into.add_scaled(other, alpha)
    }
}

/// Viterbi labels for one embedded abstract, evaluation mode.
pub fn predict_embedded(params: &ModelParams, input: &EmbeddedInput) -> Result<Vec<usize>> {
    let trace = forward_embedded(params, input, None)?;
    Ok(crf::viterbi(&trace.scores, &params.crf)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{gradient_check, GradCheckConfig};
    use crate::numeric::lstm::bilstm_sequence;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::new(3, 2, 2);
        c.attention_dim = 3;
        c.num_labels = 4;
        c
    }

    fn random_input(shape: &[usize], d: usize, seed: u64) -> EmbeddedInput {
        let mut rng = seeded(seed);
        EmbeddedInput::new(shape.iter().map(|&n| Tensor::uniform(&[n, d], -1.0, 1.0, &mut rng)).collect()).unwrap()
    }

    /// Parameters drawn from a wider range than the initializer.
    fn random_params(config: &ModelConfig, seed: u64) -> ModelParams {
        let mut p = ModelParams::initialized(config, seed).unwrap();
        let mut rng = seeded(seed ^ 0xabcd);
        for t in p.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        p
    }

    #[test]
    fn single_word_attention_is_trivial() {
        let p = random_params(&small_config(), 1);
        let x = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut seeded(2));
        let (v, alpha) = encode_sentence(&x, &p).unwrap();
        assert_eq!(alpha, vec![1.0]);
        let h = bilstm_sequence(&[Tensor::vector(x.row(0).to_vec())], &p.word.forward, &p.word.backward).unwrap();
        assert_eq!(v.data(), h[0].data());
    }

    #[test]
    fn zero_context_gives_uniform_attention() {
        let mut p = random_params(&small_config(), 3);
        p.attention.context.fill(0.0);
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut seeded(4));
        let (v, alpha) = encode_sentence(&x, &p).unwrap();
        for a in &alpha {
            assert!((a - 0.25).abs() < 1e-15);
        }
        let h = p.word.forward(&x).unwrap();
        for j in 0..4 {
            let mean = (0..4).map(|t| h.output().get2(t, j)).sum::<f64>() / 4.0;
            assert!((v.data()[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_hand_unrolled_formulas() {
        let p = random_params(&small_config(), 5);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut seeded(6));
        let (v, alpha) = encode_sentence(&x, &p).unwrap();
        let rows: Vec<Tensor> = (0..2).map(|t| Tensor::vector(x.row(t).to_vec())).collect();
        let h = bilstm_sequence(&rows, &p.word.forward, &p.word.backward).unwrap();
        let w = &p.attention.projection;
        let mut logits = [0.0; 2];
        for t in 0..2 {
            for a in 0..3 {
                let mut z = w.bias.data()[a];
                for j in 0..4 {
                    z += w.weight.get2(a, j) * h[t].data()[j];
                }
                logits[t] += libm::tanh(z) * p.attention.context.data()[a];
            }
        }
        let e0 = libm::exp(logits[0]);
        let e1 = libm::exp(logits[1]);
        let expected_alpha = [e0 / (e0 + e1), e1 / (e0 + e1)];
        for t in 0..2 {
            assert!((alpha[t] - expected_alpha[t]).abs() < 1e-12);
        }
        for j in 0..4 {
            let e = expected_alpha[0] * h[0].data()[j] + expected_alpha[1] * h[1].data()[j];
            assert!((v.data()[j] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let p = random_params(&small_config(), 7);
        let input = random_input(&[5, 1, 3], 3, 8);
        let trace = forward_embedded(&p, &input, None).unwrap();
        for i in 0..3 {
            let w = trace.attention_weights(i);
            assert!(w.iter().all(|a| *a > 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn contextualize_shapes_and_reach() {
        let p = random_params(&small_config(), 9);
        let mut rng = seeded(10);
        for n in 1..=10 {
            let sv = Tensor::uniform(&[n, 4], -1.0, 1.0, &mut rng);
            assert_eq!(contextualize(&sv, &p).unwrap().rows(), n);
        }
        let sv = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let base = contextualize(&sv, &p).unwrap();
        let mut changed = sv.clone();
        changed.row_mut(2)[1] += 0.5;
        let out = contextualize(&changed, &p).unwrap();
        for t in 0..4 {
            assert!(base.row(t).iter().zip(out.row(t)).any(|(a, b)| a != b), "position {t} unchanged");
        }
    }

    #[test]
    fn emission_layer_cases() {
        let mut p = ModelParams::zeros(&small_config()).unwrap();
        p.emission.bias = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let ctx = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut seeded(11));
        let s = emission_scores(&ctx, &p).unwrap();
        for t in 0..3 {
            assert_eq!(s.row(t), p.emission.bias.data());
        }
        p.emission.weight.set2(2, 1, 1.0);
        let unit = Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(emission_scores(&unit, &p).unwrap().row(0), &[1.0, -2.0, 1.5, 3.0]);

        let q = random_params(&small_config(), 12);
        let s = emission_scores(&ctx, &q).unwrap();
        for t in 0..3 {
            for l in 0..4 {
                let mut e = q.emission.bias.data()[l];
                for j in 0..4 {
                    e += q.emission.weight.get2(l, j) * ctx.get2(t, j);
                }
                assert!((s.get2(t, l) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_sentences_keeps_sentence_vectors() {
        let p = random_params(&small_config(), 13);
        let input = random_input(&[2, 3, 4], 3, 14);
        let mut permuted = input.clone();
        permuted.sentences_mut().swap(0, 2);
        let a = forward_embedded(&p, &input, None).unwrap();
        let b = forward_embedded(&p, &permuted, None).unwrap();
        assert_eq!(a.sentence_vectors().row(0), b.sentence_vectors().row(2));
        assert_eq!(a.sentence_vectors().row(1), b.sentence_vectors().row(1));
        assert_ne!(a.contextualized().row(1), b.contextualized().row(1));
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let p = random_params(&ModelConfig { num_labels: 7, ..small_config() }, 15);
        let input = random_input(&[3, 2], 3, 16);
        let a = forward_embedded(&p, &input, None).unwrap();
        let b = forward_embedded(&p, &input, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.scores().shape(), &[2, 7]);
    }

    #[test]
    fn zero_rate_dropout_matches_evaluation() {
        let p = random_params(&small_config(), 17);
        let input = random_input(&[3, 2], 3, 18);
        let masks = DropoutMasks::sample(p.config(), &input, 0.0, &mut seeded(1)).unwrap();
        let a = forward_embedded(&p, &input, Some(&masks)).unwrap();
        let b = forward_embedded(&p, &input, None).unwrap();
        assert_eq!(a.scores(), b.scores());
    }

    fn check_full_gradients(config: &ModelConfig, masks_rate: f64) {
        let p = random_params(config, 19);
        let input = random_input(&[2, 3], config.embed_dim, 20);
        let masks = (masks_rate > 0.0).then(|| DropoutMasks::sample(config, &input, masks_rate, &mut seeded(5)).unwrap());
        let upstream = Tensor::uniform(&[2, config.num_labels], -1.0, 1.0, &mut seeded(21));
        let n_params = p.num_parameters();
        let mut theta = p.to_flat();
        theta.extend(input.to_flat());
        let f = |flat: &[f64]| {
            let mut q = p.clone();
            q.set_flat(&flat[..n_params]).unwrap();
            let mut x = input.clone();
            x.set_flat(&flat[n_params..]).unwrap();
            let trace = forward_embedded(&q, &x, masks.as_ref()).unwrap();
            let loss: f64 = trace.scores().data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
            let (g, dx) = backward_abstract(&q, &trace, &upstream).unwrap();
            let mut grad = g.to_flat();
            grad.extend(dx.to_flat());
            (loss, grad)
        };
        let report = gradient_check(f, &theta, &GradCheckConfig::with_tolerance(1e-4)).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_full_gradients(&small_config(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_with_dropout() {
        check_full_gradients(&small_config(), 0.3);
    }

    #[test]
    fn backward_matches_finite_differences_without_contextualizer() {
        check_full_gradients(&ModelConfig { contextualize: false, ..small_config() }, 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(&small_config(), 22);
        let input = random_input(&[2, 2], 3, 23);
        let trace = forward_embedded(&p, &input, None).unwrap();
        let (g, dx) = backward_abstract(&p, &trace, &Tensor::zeros(&[2, 4])).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        assert!(dx.to_flat().iter().all(|v| *v == 0.0));
        assert_eq!(dx.sentences()[0].shape(), &[2, 3]);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut p = random_params(&small_config(), 24);
        let input = random_input(&[2], 3, 25);
        let trace = forward_embedded(&p, &input, None).unwrap();
        p.tensors_mut()[0].data_mut()[0] += 1.0;
        let err = backward_abstract(&p, &trace, &Tensor::zeros(&[1, 4])).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn tensor_names_line_up() {
        for contextualize in [true, false] {
            let p = ModelParams::zeros(&ModelConfig { contextualize, ..small_config() }).unwrap();
            assert_eq!(p.tensor_names().len(), p.tensors().len());
        }
    }
}
