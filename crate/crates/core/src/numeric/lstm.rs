//! LSTM cell, unidirectional sequence pass and bi-LSTM, with exact
//! backpropagation through time.
//!
//! Gate blocks inside the `4H` axis are ordered input, forget, cell candidate,
//! output (`i, f, g, o`).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tensor::{matvec_t_acc, outer_acc, Tensor};
use crate::error::{Error, Result};
use crate::math::{sigmoid, tanh};

/// Initial forget-gate bias; every other parameter starts in `[-INIT_SCALE, INIT_SCALE]`.
pub const FORGET_BIAS_INIT: f64 = 1.0;
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// `[4H, D]`
    pub input_weights: Tensor,
    /// `[4H, H]`
    pub recurrent_weights: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input_weights: Tensor::zeros(&[4 * hidden, input]),
            recurrent_weights: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn initialized<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self {
            input_weights: Tensor::uniform(&[4 * hidden, input], -INIT_SCALE, INIT_SCALE, rng),
            recurrent_weights: Tensor::uniform(&[4 * hidden, hidden], -INIT_SCALE, INIT_SCALE, rng),
            bias: Tensor::uniform(&[4 * hidden], -INIT_SCALE, INIT_SCALE, rng),
        };
        p.bias.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS_INIT);
        p
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent_weights.cols()
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size();
        let ok = self.recurrent_weights.shape() == [4 * h, h]
            && self.input_weights.shape().len() == 2
            && self.input_weights.rows() == 4 * h
            && self.bias.shape() == [4 * h];
        if ok {
            Ok(())
        } else {
            Err(Error::dim(alloc::format!(
                "inconsistent LSTM shapes: input {:?}, recurrent {:?}, bias {:?}",
                self.input_weights.shape(),
                self.recurrent_weights.shape(),
                self.bias.shape()
            )))
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.input_weights, &self.recurrent_weights, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.input_weights, &mut self.recurrent_weights, &mut self.bias]
    }
}

/// Activated gates and new cell state of one step.
#[derive(Debug, Clone, PartialEq)]
struct StepCache {
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
}

fn step(params: &LstmCellParams, x: &[f64], h_prev: &[f64], c_prev: &[f64], h_out: &mut [f64]) -> StepCache {
    let h = h_prev.len();
    let d = x.len();
    let mut gates = params.bias.data().to_vec();
    let wx = params.input_weights.data();
    let wh = params.recurrent_weights.data();
    for (r, z) in gates.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (w, v) in wx[r * d..(r + 1) * d].iter().zip(x) {
            acc += w * v;
        }
        for (w, v) in wh[r * h..(r + 1) * h].iter().zip(h_prev) {
            acc += w * v;
        }
        *z += acc;
    }
    let (ifg, o) = gates.split_at_mut(3 * h);
    ifg[..2 * h].iter_mut().for_each(|z| *z = sigmoid(*z));
    ifg[2 * h..].iter_mut().for_each(|z| *z = tanh(*z));
    o.iter_mut().for_each(|z| *z = sigmoid(*z));

    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    for k in 0..h {
        c[k] = gates[h + k] * c_prev[k] + gates[k] * gates[2 * h + k];
        tanh_c[k] = tanh(c[k]);
        h_out[k] = gates[3 * h + k] * tanh_c[k];
    }
    StepCache { gates, c, tanh_c }
}

/// One LSTM step: returns `(h, c)`.
pub fn lstm_step(x: &Tensor, h_prev: &Tensor, c_prev: &Tensor, params: &LstmCellParams) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    let hidden = params.hidden_size();
    if x.len() != params.input_size() || h_prev.len() != hidden || c_prev.len() != hidden {
        return Err(Error::dim(alloc::format!(
            "LSTM step with D={}, H={} got x={}, h={}, c={}",
            params.input_size(),
            hidden,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let mut h = vec![0.0; hidden];
    let cache = step(params, x.data(), h_prev.data(), c_prev.data(), &mut h);
    Ok((Tensor::vector(h), Tensor::vector(cache.c)))
}

/// Cached forward pass of one direction over a `[T, D]` input.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmSequenceCache {
    reverse: bool,
    /// Indexed by time position, not processing order.
    steps: Vec<StepCache>,
    /// `[T, H]` hidden states by time position.
    hidden: Tensor,
}

impl LstmSequenceCache {
    pub fn hidden(&self) -> &Tensor {
        &self.hidden
    }
}

fn order(len: usize, reverse: bool) -> impl Iterator<Item = usize> {
    (0..len).map(move |k| if reverse { len - 1 - k } else { k })
}

fn check_sequence(inputs: &Tensor, params: &LstmCellParams) -> Result<()> {
    params.validate()?;
    if inputs.rows() == 0 {
        return Err(Error::EmptyInput("LSTM input sequence"));
    }
    if inputs.shape().len() != 2 || inputs.cols() != params.input_size() {
        return Err(Error::dim(alloc::format!(
            "sequence {:?} does not match LSTM input size {}",
            inputs.shape(),
            params.input_size()
        )));
    }
    Ok(())
}

/// Runs one direction over `inputs` (`[T, D]`) from zero initial states.
pub fn lstm_sequence(inputs: &Tensor, params: &LstmCellParams, reverse: bool) -> Result<LstmSequenceCache> {
    check_sequence(inputs, params)?;
    let t_len = inputs.rows();
    let h = params.hidden_size();
    let mut hidden = Tensor::zeros(&[t_len, h]);
    let mut steps: Vec<Option<StepCache>> = (0..t_len).map(|_| None).collect();
    let zeros = vec![0.0; h];
    let mut prev: Option<usize> = None;
    for t in order(t_len, reverse) {
        let (h_prev, c_prev) = match prev {
            Some(p) => (hidden.row(p).to_vec(), steps[p].as_ref().map(|s| s.c.clone()).unwrap_or_default()),
            None => (zeros.clone(), zeros.clone()),
        };
        let mut h_out = vec![0.0; h];
        steps[t] = Some(step(params, inputs.row(t), &h_prev, &c_prev, &mut h_out));
        hidden.row_mut(t).copy_from_slice(&h_out);
        prev = Some(t);
    }
    Ok(LstmSequenceCache {
        reverse,
        steps: steps.into_iter().map(|s| s.expect("every position visited")).collect(),
        hidden,
    })
}

/// Backpropagation through time for one direction. `d_hidden` is `[T, H]`;
/// parameter gradients are accumulated into `grads` and `d_inputs` (`[T, D]`)
/// is accumulated in place.
pub fn lstm_sequence_backward(
    params: &LstmCellParams,
    inputs: &Tensor,
    cache: &LstmSequenceCache,
    d_hidden: &Tensor,
    grads: &mut LstmCellParams,
    d_inputs: &mut Tensor,
) -> Result<()> {
    let t_len = inputs.rows();
    let h = params.hidden_size();
    if cache.steps.len() != t_len || d_hidden.shape() != [t_len, h] || d_inputs.shape() != inputs.shape() {
        return Err(Error::State("LSTM cache does not match the sequence being differentiated".into()));
    }
    let zeros = vec![0.0; h];
    let mut dh_rec = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let positions: Vec<usize> = order(t_len, cache.reverse).collect();
    for (k, &t) in positions.iter().enumerate().rev() {
        let prev = if k == 0 { None } else { Some(positions[k - 1]) };
        let (h_prev, c_prev): (&[f64], &[f64]) = match prev {
            Some(p) => (cache.hidden.row(p), &cache.steps[p].c),
            None => (&zeros, &zeros),
        };
        let s = &cache.steps[t];
        let (gi, gf, gg, go) = (&s.gates[..h], &s.gates[h..2 * h], &s.gates[2 * h..3 * h], &s.gates[3 * h..]);
        let up = d_hidden.row(t);
        for j in 0..h {
            let dh = up[j] + dh_rec[j];
            let d_o = dh * s.tanh_c[j];
            let dc = dc_next[j] + dh * go[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
            let d_i = dc * gg[j];
            let d_g = dc * gi[j];
            let d_f = dc * c_prev[j];
            dc_next[j] = dc * gf[j];
            dz[j] = d_i * gi[j] * (1.0 - gi[j]);
            dz[h + j] = d_f * gf[j] * (1.0 - gf[j]);
            dz[2 * h + j] = d_g * (1.0 - gg[j] * gg[j]);
            dz[3 * h + j] = d_o * go[j] * (1.0 - go[j]);
        }
        outer_acc(&mut grads.input_weights, &dz, inputs.row(t));
        outer_acc(&mut grads.recurrent_weights, &dz, h_prev);
        for (b, d) in grads.bias.data_mut().iter_mut().zip(&dz) {
            *b += d;
        }
        matvec_t_acc(&params.input_weights, &dz, d_inputs.row_mut(t));
        dh_rec.fill(0.0);
        matvec_t_acc(&params.recurrent_weights, &dz, &mut dh_rec);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

impl BiLstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            forward: LstmCellParams::zeros(input, hidden),
            backward: LstmCellParams::zeros(input, hidden),
        }
    }

    pub fn initialized<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            forward: LstmCellParams::initialized(input, hidden, rng),
            backward: LstmCellParams::initialized(input, hidden, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    pub fn input_size(&self) -> usize {
        self.forward.input_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.forward.validate()?;
        self.backward.validate()?;
        if self.forward.input_size() != self.backward.input_size()
            || self.forward.hidden_size() != self.backward.hidden_size()
        {
            return Err(Error::dim("forward and backward LSTM sizes differ"));
        }
        Ok(())
    }

    /// Runs both directions; output row `t` is `[h_fwd(t), h_bwd(t)]`.
    pub fn forward(&self, inputs: &Tensor) -> Result<BiLstmCache> {
        self.validate()?;
        let fwd = lstm_sequence(inputs, &self.forward, false)?;
        let bwd = lstm_sequence(inputs, &self.backward, true)?;
        let t_len = inputs.rows();
        let h = self.hidden_size();
        let mut output = Tensor::zeros(&[t_len, 2 * h]);
        for t in 0..t_len {
            let row = output.row_mut(t);
            row[..h].copy_from_slice(fwd.hidden.row(t));
            row[h..].copy_from_slice(bwd.hidden.row(t));
        }
        Ok(BiLstmCache { fwd, bwd, output })
    }

    /// Accumulates parameter gradients into `grads`; returns the gradient
    /// with respect to `inputs`.
    pub fn backward(&self, inputs: &Tensor, cache: &BiLstmCache, d_output: &Tensor, grads: &mut BiLstmParams) -> Result<Tensor> {
        let t_len = inputs.rows();
        let h = self.hidden_size();
        if d_output.shape() != [t_len, 2 * h] {
            return Err(Error::dim(alloc::format!(
                "bi-LSTM upstream gradient {:?}, expected [{t_len}, {}]",
                d_output.shape(),
                2 * h
            )));
        }
        let mut d_fwd = Tensor::zeros(&[t_len, h]);
        let mut d_bwd = Tensor::zeros(&[t_len, h]);
        for t in 0..t_len {
            let row = d_output.row(t);
            d_fwd.row_mut(t).copy_from_slice(&row[..h]);
            d_bwd.row_mut(t).copy_from_slice(&row[h..]);
        }
        let mut d_inputs = inputs.zeros_like();
        lstm_sequence_backward(&self.forward, inputs, &cache.fwd, &d_fwd, &mut grads.forward, &mut d_inputs)?;
        lstm_sequence_backward(&self.backward, inputs, &cache.bwd, &d_bwd, &mut grads.backward, &mut d_inputs)?;
        Ok(d_inputs)
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        let [a, b, c] = self.forward.tensors();
        let [d, e, f] = self.backward.tensors();
        [a, b, c, d, e, f]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        let [a, b, c] = self.forward.tensors_mut();
        let [d, e, f] = self.backward.tensors_mut();
        [a, b, c, d, e, f]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmCache {
    fwd: LstmSequenceCache,
    bwd: LstmSequenceCache,
    output: Tensor,
}

impl BiLstmCache {
    /// `[T, 2H]`
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// Bi-LSTM over a sequence of `D`-vectors; returns one `2H`-vector per position.
pub fn bilstm_sequence(inputs: &[Tensor], fwd: &LstmCellParams, bwd: &LstmCellParams) -> Result<Vec<Tensor>> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("bi-LSTM input sequence"));
    }
    let d = fwd.input_size();
    let rows: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let matrix = Tensor::from_rows(&rows, d)?;
    let params = BiLstmParams {
        forward: fwd.clone(),
        backward: bwd.clone(),
    };
    let cache = params.forward(&matrix)?;
    Ok((0..inputs.len())
        .map(|t| Tensor::vector(cache.output.row(t).to_vec()))
        .collect())
}
