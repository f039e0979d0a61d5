//! Adversarial and virtual adversarial perturbations of the embedded input
//! and the losses built on them.
//!
//! Both perturbations are normalized over every coordinate of the abstract at
//! once. Perturbations and the clean predictive distribution are constants
//! with respect to the parameters.

use alloc::vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::crf::{self, CrfParams};
use crate::error::{Error, Result};
use crate::model::{EmbeddedInput, SequenceModel};
use crate::numeric::Tensor;

/// Gradients smaller than this give a zero perturbation.
pub const ZERO_GRADIENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbConfig {
    pub epsilon_adv: f64,
    pub epsilon_vat: f64,
    pub xi: f64,
    pub lambda_adv: f64,
    pub lambda_vat: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            epsilon_adv: 1.0,
            epsilon_vat: 1.0,
            xi: 0.1,
            lambda_adv: 1.0,
            lambda_vat: 1.0,
        }
    }
}

impl PerturbConfig {
    /// No adversarial terms: plain CRF likelihood training.
    pub fn baseline() -> Self {
        Self {
            lambda_adv: 0.0,
            lambda_vat: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.epsilon_adv, self.epsilon_vat, self.xi, self.lambda_adv, self.lambda_vat];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(alloc::format!("perturbation settings must be finite and non-negative: {self:?}")));
        }
        if self.lambda_adv > 0.0 && self.epsilon_adv <= 0.0 {
            return Err(Error::Config("epsilon_adv must be positive when lambda_adv > 0".into()));
        }
        if self.lambda_vat > 0.0 && (self.epsilon_vat <= 0.0 || self.xi <= 0.0) {
            return Err(Error::Config("epsilon_vat and xi must be positive when lambda_vat > 0".into()));
        }
        Ok(())
    }
}

/// Offsets added to the embedded words, shaped like the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation(EmbeddedInput);

impl Perturbation {
    pub fn zeros_like(input: &EmbeddedInput) -> Self {
        Self(input.zeros_like())
    }

    /// `scale * g / ‖g‖`, or zero when `‖g‖ < 1e-12`.
    pub fn along(mut g: EmbeddedInput, scale: f64) -> Self {
        let norm = g.norm();
        if norm < ZERO_GRADIENT || scale == 0.0 {
            return Self(g.zeros_like());
        }
        g.scale(scale / norm);
        Self(g)
    }

    pub fn vectors(&self) -> &EmbeddedInput {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_zero(&self) -> bool {
        self.0.to_flat().iter().all(|v| *v == 0.0)
    }

    /// `input + self`
    pub fn apply(&self, input: &EmbeddedInput) -> Result<EmbeddedInput> {
        let mut out = input.clone();
        out.add_scaled(&self.0, 1.0)?;
        Ok(out)
    }
}

/// One abstract of a batch. `noise` (dropout masks) is shared by every
/// forward pass made for this abstract.
pub struct Example<'a, N> {
    pub input: &'a EmbeddedInput,
    pub gold: &'a [usize],
    pub noise: Option<&'a N>,
}

impl<N> Clone for Example<'_, N> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<N> Copy for Example<'_, N> {}

/// `KL(p ‖ q) = Σ p log(p/q)` with `0 log 0 = 0`, clamped at zero.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("distributions of different lengths"));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 || !pi.is_finite() || !qi.is_finite() {
            return Err(Error::Numeric("KL of an invalid distribution".into()));
        }
        if pi > 0.0 {
            if qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            kl += pi * crate::math::ln(pi / qi);
        }
    }
    Ok(kl.max(0.0))
}

/// Sum over positions of the KL between per-position label distributions.
pub fn marginal_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    p.same_shape(q)?;
    (0..p.rows()).map(|t| kl_divergence(p.row(t), q.row(t))).sum()
}

fn check_gold(scores: &Tensor, gold: &[usize]) -> Result<()> {
    if gold.len() != scores.rows() {
        return Err(Error::Validation(alloc::format!(
            "{} gold labels for {} sentences",
            gold.len(),
            scores.rows()
        )));
    }
    if let Some(bad) = gold.iter().find(|&&y| y >= scores.cols()) {
        return Err(Error::Validation(alloc::format!("gold label index {bad} out of range")));
    }
    Ok(())
}

/// Negative log-likelihood at `input`, with parameter and input gradients.
pub fn nll_with_grads<M: SequenceModel>(
    model: &M,
    input: &EmbeddedInput,
    gold: &[usize],
    noise: Option<&M::Noise>,
) -> Result<(f64, M, EmbeddedInput)> {
    let trace = model.forward(input, noise)?;
    let scores = model.scores(&trace);
    check_gold(scores, gold)?;
    let (nll, d_scores, d_crf) = crf::crf_backward(scores, model.crf(), gold)?;
    let (grads, d_input) = model.backward(&trace, &d_scores, &d_crf)?;
    Ok((nll, grads, d_input))
}

/// Negative log-likelihood only.
pub fn nll<M: SequenceModel>(model: &M, input: &EmbeddedInput, gold: &[usize], noise: Option<&M::Noise>) -> Result<f64> {
    let trace = model.forward(input, noise)?;
    let scores = model.scores(&trace);
    check_gold(scores, gold)?;
    Ok(-crf::log_likelihood(scores, model.crf(), gold)?)
}

/// CRF marginals of the model at `input`.
pub fn predictive_marginals<M: SequenceModel>(model: &M, input: &EmbeddedInput, noise: Option<&M::Noise>) -> Result<Tensor> {
    let trace = model.forward(input, noise)?;
    crf::marginals(model.scores(&trace), model.crf())
}

/// `KL(target ‖ q(input))` summed over positions, with gradients of the KL
/// with respect to the parameters and the input. `target` is a constant.
pub fn kl_with_grads<M: SequenceModel>(
    model: &M,
    input: &EmbeddedInput,
    target: &Tensor,
    noise: Option<&M::Noise>,
) -> Result<(f64, M, EmbeddedInput)> {
    let trace = model.forward(input, noise)?;
    let scores = model.scores(&trace);
    let q = crf::marginals(scores, model.crf())?;
    let kl = marginal_kl(target, &q)?;
    // KL = Σ p log p − J, so ∇KL = −∇J.
    let (_, mut d_scores, mut d_crf) = crf::marginal_log_likelihood_backward(scores, model.crf(), target)?;
    d_scores.scale(-1.0);
    for t in d_crf.tensors_mut() {
        t.scale(-1.0);
    }
    let (grads, d_input) = model.backward(&trace, &d_scores, &d_crf)?;
    Ok((kl, grads, d_input))
}

/// Worst-case perturbation of norm `epsilon` for the gold labels: the
/// normalized gradient of the negative log-likelihood.
pub fn adv_perturbation<M: SequenceModel>(
    model: &M,
    input: &EmbeddedInput,
    gold: &[usize],
    epsilon: f64,
    noise: Option<&M::Noise>,
) -> Result<Perturbation> {
    check_epsilon(epsilon)?;
    let (_, _, d_input) = nll_with_grads(model, input, gold, noise)?;
    Ok(Perturbation::along(d_input, epsilon))
}

/// Gaussian probe of norm `xi`, shaped like `input`.
pub fn probe<R: Rng + ?Sized>(input: &EmbeddedInput, xi: f64, rng: &mut R) -> Perturbation {
    let mut d = input.zeros_like();
    for s in d.sentences_mut() {
        for v in s.data_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    Perturbation::along(d, xi)
}

/// Gradient of `KL(p(·|s) ‖ p(·|s + d))` with respect to the probed input,
/// with the KL value. `clean` is `p(·|s)`.
pub fn vat_gradient<M: SequenceModel>(
    model: &M,
    input: &EmbeddedInput,
    clean: &Tensor,
    probe: &Perturbation,
    noise: Option<&M::Noise>,
) -> Result<(f64, EmbeddedInput)> {
    let probed = probe.apply(input)?;
    let (kl, _, d_input) = kl_with_grads(model, &probed, clean, noise)?;
    Ok((kl, d_input))
}

/// Label-free perturbation of norm `epsilon` along which the predictive
/// distribution changes fastest, from one gradient step at a random probe.
pub fn vat_perturbation<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    input: &EmbeddedInput,
    epsilon: f64,
    xi: f64,
    noise: Option<&M::Noise>,
    rng: &mut R,
) -> Result<Perturbation> {
    check_epsilon(epsilon)?;
    let clean = predictive_marginals(model, input, noise)?;
    vat_perturbation_from(model, input, &clean, epsilon, xi, noise, rng)
}

fn vat_perturbation_from<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    input: &EmbeddedInput,
    clean: &Tensor,
    epsilon: f64,
    xi: f64,
    noise: Option<&M::Noise>,
    rng: &mut R,
) -> Result<Perturbation> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::Config(alloc::format!("probe scale xi must be positive, got {xi}")));
    }
    let d = probe(input, xi, rng);
    let (_, g) = vat_gradient(model, input, clean, &d, noise)?;
    Ok(Perturbation::along(g, epsilon))
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(alloc::format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    Ok(())
}

fn check_batch<N>(batch: &[Example<'_, N>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    Ok(())
}

/// Mean negative log-likelihood of the batch.
pub fn classification_loss<M: SequenceModel>(model: &M, batch: &[Example<'_, M::Noise>]) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for ex in batch {
        total += nll(model, ex.input, ex.gold, ex.noise)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean negative log-likelihood at the adversarially perturbed inputs.
pub fn adv_loss<M: SequenceModel>(model: &M, batch: &[Example<'_, M::Noise>], epsilon: f64) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for ex in batch {
        let r = adv_perturbation(model, ex.input, ex.gold, epsilon, ex.noise)?;
        total += nll(model, &r.apply(ex.input)?, ex.gold, ex.noise)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean KL between clean and virtually adversarial predictive marginals.
pub fn vat_loss<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    batch: &[Example<'_, M::Noise>],
    epsilon: f64,
    xi: f64,
    rng: &mut R,
) -> Result<f64> {
    check_batch(batch)?;
    let mut total = 0.0;
    for ex in batch {
        let clean = predictive_marginals(model, ex.input, ex.noise)?;
        let r = vat_perturbation_from(model, ex.input, &clean, epsilon, xi, ex.noise, rng)?;
        let q = predictive_marginals(model, &r.apply(ex.input)?, ex.noise)?;
        total += marginal_kl(&clean, &q)?;
    }
    Ok(total / batch.len() as f64)
}

/// Batch means of each loss term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub classification: f64,
    pub adversarial: f64,
    pub virtual_adversarial: f64,
    pub total: f64,
}

/// `L_cls + λ_adv L_adv + λ_vat L_vat` and the parameter gradient of the
/// total. Terms with a zero weight are skipped and reported as zero.
pub fn combined_loss_grads<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    batch: &[Example<'_, M::Noise>],
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<(LossComponents, M)> {
    check_batch(batch)?;
    config.validate()?;
    let n = batch.len() as f64;
    let mut grads = model.zero_grads();
    let mut parts = LossComponents::default();
    for ex in batch {
        let (cls, g, d_input) = nll_with_grads(model, ex.input, ex.gold, ex.noise)?;
        parts.classification += cls / n;
        model.accumulate(&mut grads, &g, 1.0 / n)?;

        if config.lambda_adv > 0.0 {
            let r = Perturbation::along(d_input, config.epsilon_adv);
            let (adv, g, _) = nll_with_grads(model, &r.apply(ex.input)?, ex.gold, ex.noise)?;
            parts.adversarial += adv / n;
            model.accumulate(&mut grads, &g, config.lambda_adv / n)?;
        }

        if config.lambda_vat > 0.0 {
            let clean = predictive_marginals(model, ex.input, ex.noise)?;
            let r = vat_perturbation_from(model, ex.input, &clean, config.epsilon_vat, config.xi, ex.noise, rng)?;
            let (kl, g, _) = kl_with_grads(model, &r.apply(ex.input)?, &clean, ex.noise)?;
            parts.virtual_adversarial += kl / n;
            model.accumulate(&mut grads, &g, config.lambda_vat / n)?;
        }
    }
    parts.total = parts.classification + config.lambda_adv * parts.adversarial + config.lambda_vat * parts.virtual_adversarial;
    if !parts.total.is_finite() {
        return Err(Error::Numeric(alloc::format!("non-finite training loss {parts:?}")));
    }
    Ok((parts, grads))
}

/// Loss value only; same random draws as [`combined_loss_grads`].
pub fn combined_loss<M: SequenceModel, R: Rng + ?Sized>(
    model: &M,
    batch: &[Example<'_, M::Noise>],
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<LossComponents> {
    check_batch(batch)?;
    config.validate()?;
    let mut parts = LossComponents {
        classification: classification_loss(model, batch)?,
        ..LossComponents::default()
    };
    let n = batch.len() as f64;
    for ex in batch {
        if config.lambda_adv > 0.0 {
            parts.adversarial += adv_loss(model, core::slice::from_ref(ex), config.epsilon_adv)? / n;
        }
        if config.lambda_vat > 0.0 {
            parts.virtual_adversarial += vat_loss(model, core::slice::from_ref(ex), config.epsilon_vat, config.xi, rng)? / n;
        }
    }
    parts.total = parts.classification + config.lambda_adv * parts.adversarial + config.lambda_vat * parts.virtual_adversarial;
    Ok(parts)
}

/// Sequence scorer used to check the perturbations against closed forms:
/// each sentence's score row is `W Σ_words x + b`, under a CRF with all
/// transition, start and end scores at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
    crf: CrfParams,
}

impl LinearProbe {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return Err(Error::dim("probe weight must be [L, D] with an [L] bias"));
        }
        let crf = CrfParams::zeros(weight.rows());
        Ok(Self { weight, bias, crf })
    }
}

impl SequenceModel for LinearProbe {
    type Trace = (EmbeddedInput, Tensor);
    type Noise = ();

    fn crf(&self) -> &CrfParams {
        &self.crf
    }

    fn forward(&self, input: &EmbeddedInput, _noise: Option<&()>) -> Result<Self::Trace> {
        if input.dim() != self.weight.cols() {
            return Err(Error::dim("probe input dimension"));
        }
        let l = self.weight.rows();
        let mut scores = Tensor::zeros(&[input.num_sentences(), l]);
        for (t, s) in input.sentences().iter().enumerate() {
            for k in 0..l {
                let w = self.weight.row(k);
                let mut v = self.bias.data()[k];
                for i in 0..s.rows() {
                    v += crate::math::dot(w, s.row(i));
                }
                scores.set2(t, k, v);
            }
        }
        Ok((input.clone(), scores))
    }

    fn scores<'t>(&self, trace: &'t Self::Trace) -> &'t Tensor {
        &trace.1
    }

    fn backward(&self, trace: &Self::Trace, d_scores: &Tensor, _d_crf: &CrfParams) -> Result<(Self, EmbeddedInput)> {
        let mut grads = self.zero_grads();
        let mut d_input = trace.0.zeros_like();
        for (t, s) in trace.0.sentences().iter().enumerate() {
            let ds = d_scores.row(t);
            let mut dx = vec![0.0; s.cols()];
            for (k, &g) in ds.iter().enumerate() {
                grads.bias.data_mut()[k] += g;
                for (j, w) in self.weight.row(k).iter().enumerate() {
                    dx[j] += g * w;
                }
                for i in 0..s.rows() {
                    for (gw, x) in grads.weight.row_mut(k).iter_mut().zip(s.row(i)) {
                        *gw += g * x;
                    }
                }
            }
            for i in 0..s.rows() {
                d_input.sentences_mut()[t].row_mut(i).copy_from_slice(&dx);
            }
        }
        Ok((grads, d_input))
    }

    fn zero_grads(&self) -> Self {
        Self {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
            crf: self.crf.clone(),
        }
    }

    fn accumulate(&self, into: &mut Self, other: &Self, alpha: f64) -> Result<()> {
        into.weight.add_scaled(&other.weight, alpha)?;
        into.bias.add_scaled(&other.bias, alpha)
    }
}
