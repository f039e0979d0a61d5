//! Linear-chain CRF over the label sequence of one abstract.
//!
//! A path `y` scores `start[y_1] + Σ_t scores[t, y_t] + Σ_t trans[y_t, y_{t+1}] + end[y_T]`.
//! Every quantity is computed in the log domain.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{exp, ln, log_sum_exp};
use crate::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    /// `transitions[i, j]`: score of label `j` following label `i`.
    pub transitions: Tensor,
    pub start: Tensor,
    pub end: Tensor,
}

impl CrfParams {
    pub fn zeros(labels: usize) -> Self {
        Self {
            transitions: Tensor::zeros(&[labels, labels]),
            start: Tensor::zeros(&[labels]),
            end: Tensor::zeros(&[labels]),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(labels: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            transitions: Tensor::uniform(&[labels, labels], -scale, scale, rng),
            start: Tensor::uniform(&[labels], -scale, scale, rng),
            end: Tensor::uniform(&[labels], -scale, scale, rng),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_labels();
        if self.transitions.shape() != [l, l] || self.end.shape() != [l] || self.start.shape() != [l] {
            return Err(Error::dim(alloc::format!(
                "CRF shapes: transitions {:?}, start {:?}, end {:?}",
                self.transitions.shape(),
                self.start.shape(),
                self.end.shape()
            )));
        }
        for t in self.tensors() {
            t.check_finite("CRF parameters")?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.transitions, &self.start, &self.end]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.transitions, &mut self.start, &mut self.end]
    }
}

fn check(scores: &Tensor, crf: &CrfParams) -> Result<()> {
    crf.validate()?;
    if scores.shape().len() != 2 || scores.rows() == 0 || scores.cols() != crf.num_labels() {
        return Err(Error::dim(alloc::format!(
            "emission scores {:?} for a CRF over {} labels",
            scores.shape(),
            crf.num_labels()
        )));
    }
    scores.check_finite("emission scores")
}

fn check_path(path: &[usize], t_len: usize, labels: usize) -> Result<()> {
    if path.len() != t_len {
        return Err(Error::Validation(alloc::format!(
            "label sequence of length {} for {} positions",
            path.len(),
            t_len
        )));
    }
    if let Some(bad) = path.iter().find(|&&y| y >= labels) {
        return Err(Error::Validation(alloc::format!("label index {bad} out of range 0..{labels}")));
    }
    Ok(())
}

/// Forward (`alpha`, including the emission at `t`) and backward (`beta`,
/// excluding it) log tables.
struct Lattice {
    alpha: Tensor,
    beta: Tensor,
    log_z: f64,
}

fn lattice(scores: &Tensor, crf: &CrfParams) -> Lattice {
    let (t_len, l) = (scores.rows(), scores.cols());
    let trans = &crf.transitions;
    let mut alpha = Tensor::zeros(&[t_len, l]);
    let mut beta = Tensor::zeros(&[t_len, l]);
    let mut buf = vec![0.0; l];
    for j in 0..l {
        alpha.set2(0, j, crf.start.data()[j] + scores.get2(0, j));
    }
    for t in 1..t_len {
        for j in 0..l {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = alpha.get2(t - 1, i) + trans.get2(i, j);
            }
            alpha.set2(t, j, log_sum_exp(&buf) + scores.get2(t, j));
        }
    }
    beta.row_mut(t_len - 1).copy_from_slice(crf.end.data());
    for t in (0..t_len - 1).rev() {
        for i in 0..l {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = trans.get2(i, j) + scores.get2(t + 1, j) + beta.get2(t + 1, j);
            }
            beta.set2(t, i, log_sum_exp(&buf));
        }
    }
    for (j, b) in buf.iter_mut().enumerate() {
        *b = alpha.get2(t_len - 1, j) + crf.end.data()[j];
    }
    let log_z = log_sum_exp(&buf);
    Lattice { alpha, beta, log_z }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(alloc::format!("{what} is not finite")))
    }
}

/// `log Σ_y exp(score(y))` over all `L^T` label paths.
pub fn log_partition(scores: &Tensor, crf: &CrfParams) -> Result<f64> {
    check(scores, crf)?;
    finite(lattice(scores, crf).log_z, "log partition")
}

/// Unnormalized score of one label path.
pub fn path_score(scores: &Tensor, crf: &CrfParams, path: &[usize]) -> Result<f64> {
    check(scores, crf)?;
    check_path(path, scores.rows(), crf.num_labels())?;
    let mut s = crf.start.data()[path[0]] + crf.end.data()[path[path.len() - 1]];
    for (t, &y) in path.iter().enumerate() {
        s += scores.get2(t, y);
        if t > 0 {
            s += crf.transitions.get2(path[t - 1], y);
        }
    }
    Ok(s)
}

/// `log p(gold | scores)`; never positive.
pub fn log_likelihood(scores: &Tensor, crf: &CrfParams, gold: &[usize]) -> Result<f64> {
    let s = path_score(scores, crf, gold)?;
    let ll = s - log_partition(scores, crf)?;
    Ok(ll.min(0.0))
}

/// Highest-scoring path and its score. Ties go to the lower label index.
pub fn viterbi(scores: &Tensor, crf: &CrfParams) -> Result<(Vec<usize>, f64)> {
    check(scores, crf)?;
    let (t_len, l) = (scores.rows(), scores.cols());
    let mut best = Tensor::zeros(&[t_len, l]);
    let mut back = vec![0usize; t_len * l];
    for j in 0..l {
        best.set2(0, j, crf.start.data()[j] + scores.get2(0, j));
    }
    for t in 1..t_len {
        for j in 0..l {
            let mut arg = 0;
            let mut max = f64::NEG_INFINITY;
            for i in 0..l {
                let v = best.get2(t - 1, i) + crf.transitions.get2(i, j);
                if v > max {
                    max = v;
                    arg = i;
                }
            }
            best.set2(t, j, max + scores.get2(t, j));
            back[t * l + j] = arg;
        }
    }
    let mut last = 0;
    let mut max = f64::NEG_INFINITY;
    for j in 0..l {
        let v = best.get2(t_len - 1, j) + crf.end.data()[j];
        if v > max {
            max = v;
            last = j;
        }
    }
    let mut path = vec![0; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = back[t * l + path[t]];
    }
    Ok((path, max))
}

fn node_marginals(lat: &Lattice) -> Tensor {
    let mut m = lat.alpha.clone();
    for (v, b) in m.data_mut().iter_mut().zip(lat.beta.data()) {
        *v = exp(*v + b - lat.log_z);
    }
    m
}

/// Posterior `P(y_t = ℓ | scores)` for every position, `[T, L]`.
pub fn marginals(scores: &Tensor, crf: &CrfParams) -> Result<Tensor> {
    check(scores, crf)?;
    let lat = lattice(scores, crf);
    finite(lat.log_z, "log partition")?;
    Ok(node_marginals(&lat))
}

/// Negative log-likelihood of `gold` and its gradients with respect to the
/// emission scores and every CRF parameter: expected counts minus gold counts.
pub fn crf_backward(scores: &Tensor, crf: &CrfParams, gold: &[usize]) -> Result<(f64, Tensor, CrfParams)> {
    check(scores, crf)?;
    let (t_len, l) = (scores.rows(), scores.cols());
    check_path(gold, t_len, l)?;
    let lat = lattice(scores, crf);
    finite(lat.log_z, "log partition")?;
    let nll = (lat.log_z - path_score(scores, crf, gold)?).max(0.0);

    let mut d_scores = node_marginals(&lat);
    let mut grads = CrfParams::zeros(l);
    for j in 0..l {
        grads.start.data_mut()[j] = d_scores.get2(0, j);
        grads.end.data_mut()[j] = d_scores.get2(t_len - 1, j);
    }
    for t in 0..t_len - 1 {
        for i in 0..l {
            let a = lat.alpha.get2(t, i) - lat.log_z;
            for j in 0..l {
                let p = exp(a + crf.transitions.get2(i, j) + scores.get2(t + 1, j) + lat.beta.get2(t + 1, j));
                let g = grads.transitions.get2(i, j);
                grads.transitions.set2(i, j, g + p);
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        let v = d_scores.get2(t, y);
        d_scores.set2(t, y, v - 1.0);
        if t > 0 {
            let g = grads.transitions.get2(gold[t - 1], y);
            grads.transitions.set2(gold[t - 1], y, g - 1.0);
        }
    }
    grads.start.data_mut()[gold[0]] -= 1.0;
    grads.end.data_mut()[gold[t_len - 1]] -= 1.0;
    Ok((nll, d_scores, grads))
}

/// `J = Σ_{t,ℓ} target[t,ℓ] · log q[t,ℓ]` where `q` are the CRF marginals of
/// `scores`, together with the exact gradient of `J` with respect to the
/// emission scores and the CRF parameters.
///
/// `∂q[t,ℓ]/∂φ` is the covariance of the indicator `[y_t = ℓ]` with the
/// feature counted by `φ`, so `∂J/∂φ = Cov(F, Φ)` with the additive path
/// feature `F(y) = Σ_t w[t, y_t]`, `w = target / q`. Conditional expectations
/// of `F` are propagated through the lattice alongside `alpha` and `beta`.
pub fn marginal_log_likelihood_backward(scores: &Tensor, crf: &CrfParams, target: &Tensor) -> Result<(f64, Tensor, CrfParams)> {
    check(scores, crf)?;
    target.same_shape(scores)?;
    let (t_len, l) = (scores.rows(), scores.cols());
    let lat = lattice(scores, crf);
    finite(lat.log_z, "log partition")?;
    let q = node_marginals(&lat);

    let mut value = 0.0;
    let mut w = Tensor::zeros(&[t_len, l]);
    for (k, (&p, &qv)) in target.data().iter().zip(q.data()).enumerate() {
        if p == 0.0 {
            continue;
        }
        if qv <= 0.0 {
            return Err(Error::Numeric("marginal underflowed to zero under a positive target".into()));
        }
        value += p * ln(qv);
        w.data_mut()[k] = p / qv;
    }

    let trans = &crf.transitions;
    // fa[t, ℓ] = E[Σ_{u ≤ t} w[u, y_u] | y_t = ℓ]
    let mut fa = Tensor::zeros(&[t_len, l]);
    fa.row_mut(0).copy_from_slice(w.row(0));
    for t in 1..t_len {
        for j in 0..l {
            let incoming = lat.alpha.get2(t, j) - scores.get2(t, j);
            let mut acc = 0.0;
            for i in 0..l {
                let pr = exp(lat.alpha.get2(t - 1, i) + trans.get2(i, j) - incoming);
                acc += pr * fa.get2(t - 1, i);
            }
            fa.set2(t, j, w.get2(t, j) + acc);
        }
    }
    // fb[t, ℓ] = E[Σ_{u > t} w[u, y_u] | y_t = ℓ]
    let mut fb = Tensor::zeros(&[t_len, l]);
    for t in (0..t_len - 1).rev() {
        for i in 0..l {
            let mut acc = 0.0;
            for j in 0..l {
                let pr = exp(trans.get2(i, j) + scores.get2(t + 1, j) + lat.beta.get2(t + 1, j) - lat.beta.get2(t, i));
                acc += pr * (w.get2(t + 1, j) + fb.get2(t + 1, j));
            }
            fb.set2(t, i, acc);
        }
    }
    let mean: f64 = (0..l).map(|j| q.get2(t_len - 1, j) * fa.get2(t_len - 1, j)).sum();

    let mut d_scores = Tensor::zeros(&[t_len, l]);
    for t in 0..t_len {
        for j in 0..l {
            let cond = fa.get2(t, j) + fb.get2(t, j);
            d_scores.set2(t, j, q.get2(t, j) * (cond - mean));
        }
    }
    let mut grads = CrfParams::zeros(l);
    grads.start.data_mut().copy_from_slice(d_scores.row(0));
    grads.end.data_mut().copy_from_slice(d_scores.row(t_len - 1));
    for t in 0..t_len - 1 {
        for i in 0..l {
            let a = lat.alpha.get2(t, i) - lat.log_z;
            for j in 0..l {
                let pair = exp(a + trans.get2(i, j) + scores.get2(t + 1, j) + lat.beta.get2(t + 1, j));
                let cond = fa.get2(t, i) + w.get2(t + 1, j) + fb.get2(t + 1, j);
                let g = grads.transitions.get2(i, j);
                grads.transitions.set2(i, j, g + pair * (cond - mean));
            }
        }
    }
    Ok((value, d_scores, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{gradient_check, GradCheckConfig};
    use crate::numeric::rng::seeded;

    /// Every label path of length `t` over `l` labels.
    fn all_paths(t: usize, l: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn naive_score(scores: &Tensor, crf: &CrfParams, path: &[usize]) -> f64 {
        let mut s = crf.start.data()[path[0]];
        for t in 0..path.len() {
            s += scores.get2(t, path[t]);
            if t + 1 < path.len() {
                s += crf.transitions.get2(path[t], path[t + 1]);
            }
        }
        s + crf.end.data()[path[path.len() - 1]]
    }

    fn instance(t: usize, l: usize, seed: u64) -> (Tensor, CrfParams) {
        let mut rng = seeded(seed);
        let scores = Tensor::uniform(&[t, l], -2.0, 2.0, &mut rng);
        (scores, CrfParams::uniform(l, 1.0, &mut rng))
    }

    #[test]
    fn single_position_reduces_to_log_sum_exp() {
        let scores = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let crf = CrfParams::zeros(3);
        let expected = libm::log(libm::exp(0.5) + libm::exp(-1.0) + libm::exp(2.0));
        assert!((log_partition(&scores, &crf).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn all_zero_partition_counts_paths() {
        let crf = CrfParams::zeros(3);
        let lz = log_partition(&Tensor::zeros(&[4, 3]), &crf).unwrap();
        assert!((lz - 4.0 * libm::log(3.0)).abs() < 1e-12);
    }

    #[test]
    fn partition_matches_enumeration() {
        let (scores, crf) = instance(4, 3, 1);
        let brute: Vec<f64> = all_paths(4, 3).iter().map(|p| naive_score(&scores, &crf, p)).collect();
        assert!((log_partition(&scores, &crf).unwrap() - log_sum_exp(&brute)).abs() < 1e-10);
    }

    #[test]
    fn two_label_single_position_likelihood() {
        let scores = Tensor::zeros(&[1, 2]);
        let crf = CrfParams::zeros(2);
        for y in 0..2 {
            let ll = log_likelihood(&scores, &crf, &[y]).unwrap();
            assert!((ll + core::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn likelihood_is_a_distribution() {
        let (scores, crf) = instance(3, 3, 2);
        let total: f64 = all_paths(3, 3)
            .iter()
            .map(|p| libm::exp(log_likelihood(&scores, &crf, p).unwrap()))
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn viterbi_path_is_most_likely() {
        let (scores, crf) = instance(5, 3, 3);
        let (path, best) = viterbi(&scores, &crf).unwrap();
        let ll = log_likelihood(&scores, &crf, &path).unwrap();
        for p in all_paths(5, 3) {
            assert!(naive_score(&scores, &crf, &p) <= best + 1e-12);
            assert!(log_likelihood(&scores, &crf, &p).unwrap() <= ll + 1e-12);
        }
        assert!((naive_score(&scores, &crf, &path) - best).abs() < 1e-12);
    }

    #[test]
    fn viterbi_follows_dominant_emissions() {
        let gold = [2, 0, 1, 1, 2];
        let mut scores = Tensor::zeros(&[5, 3]);
        for (t, &y) in gold.iter().enumerate() {
            scores.set2(t, y, 100.0);
        }
        let crf = CrfParams::uniform(3, 1.0, &mut seeded(4));
        assert_eq!(viterbi(&scores, &crf).unwrap().0, gold);
    }

    #[test]
    fn viterbi_breaks_ties_toward_lower_labels() {
        let (path, _) = viterbi(&Tensor::zeros(&[3, 4]), &CrfParams::zeros(4)).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
    }

    #[test]
    fn single_position_viterbi_includes_boundaries() {
        let scores = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, 0.5]).unwrap();
        let mut crf = CrfParams::zeros(3);
        crf.end.data_mut()[2] = 0.6;
        assert_eq!(viterbi(&scores, &crf).unwrap().0, vec![2]);
    }

    #[test]
    fn marginals_match_enumeration() {
        let (scores, crf) = instance(3, 3, 5);
        let m = marginals(&scores, &crf).unwrap();
        let mut expected = Tensor::zeros(&[3, 3]);
        for p in all_paths(3, 3) {
            let pr = libm::exp(log_likelihood(&scores, &crf, &p).unwrap());
            for (t, &y) in p.iter().enumerate() {
                let v = expected.get2(t, y);
                expected.set2(t, y, v + pr);
            }
        }
        for (a, b) in m.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_inputs_give_uniform_marginals() {
        let m = marginals(&Tensor::zeros(&[4, 5]), &CrfParams::zeros(5)).unwrap();
        assert!(m.data().iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn non_finite_scores_are_rejected() {
        let mut scores = Tensor::zeros(&[2, 2]);
        scores.set2(1, 1, f64::INFINITY);
        assert!(matches!(log_partition(&scores, &CrfParams::zeros(2)), Err(Error::Numeric(_))));
        assert!(matches!(marginals(&scores, &CrfParams::zeros(2)), Err(Error::Numeric(_))));
    }

    #[test]
    fn out_of_range_gold_is_rejected() {
        let err = log_likelihood(&Tensor::zeros(&[2, 3]), &CrfParams::zeros(3), &[0, 3]);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn large_emissions_do_not_overflow() {
        let mut rng = seeded(6);
        let scores = Tensor::uniform(&[6, 7], -1000.0, 1000.0, &mut rng);
        let crf = CrfParams::uniform(7, 1.0, &mut rng);
        let lz = log_partition(&scores, &crf).unwrap();
        assert!(lz.is_finite());
        let m = marginals(&scores, &crf).unwrap();
        for t in 0..6 {
            assert!((m.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn flat(scores: &Tensor, crf: &CrfParams) -> Vec<f64> {
        let mut v = scores.data().to_vec();
        for t in crf.tensors() {
            v.extend_from_slice(t.data());
        }
        v
    }

    fn unflat(v: &[f64], t: usize, l: usize) -> (Tensor, CrfParams) {
        let n = t * l;
        let scores = Tensor::from_vec(&[t, l], v[..n].to_vec()).unwrap();
        let crf = CrfParams {
            transitions: Tensor::from_vec(&[l, l], v[n..n + l * l].to_vec()).unwrap(),
            start: Tensor::vector(v[n + l * l..n + l * l + l].to_vec()),
            end: Tensor::vector(v[n + l * l + l..].to_vec()),
        };
        (scores, crf)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (scores, crf) = instance(3, 3, 7);
        let gold = [1, 0, 2];
        let f = |v: &[f64]| {
            let (s, c) = unflat(v, 3, 3);
            let (nll, ds, dc) = crf_backward(&s, &c, &gold).unwrap();
            (nll, flat(&ds, &dc))
        };
        let report = gradient_check(f, &flat(&scores, &crf), &GradCheckConfig::with_tolerance(1e-6)).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn score_gradient_rows_sum_to_zero() {
        let (scores, crf) = instance(4, 3, 8);
        let (_, ds, _) = crf_backward(&scores, &crf, &[0, 1, 1, 2]).unwrap();
        for t in 0..4 {
            assert!(ds.row(t).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gold_has_vanishing_gradient() {
        let gold = [1, 2, 0];
        let mut scores = Tensor::zeros(&[3, 3]);
        for (t, &y) in gold.iter().enumerate() {
            scores.set2(t, y, 60.0);
        }
        let (nll, ds, dc) = crf_backward(&scores, &CrfParams::zeros(3), &gold).unwrap();
        assert!(nll < 1e-20);
        assert!(ds.data().iter().chain(dc.transitions.data()).all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn marginal_log_likelihood_gradient_matches_finite_differences() {
        let (scores, crf) = instance(4, 3, 9);
        let target = marginals(&instance(4, 3, 10).0, &crf).unwrap();
        let f = |v: &[f64]| {
            let (s, c) = unflat(v, 4, 3);
            let (j, ds, dc) = marginal_log_likelihood_backward(&s, &c, &target).unwrap();
            (j, flat(&ds, &dc))
        };
        let report = gradient_check(f, &flat(&scores, &crf), &GradCheckConfig::with_tolerance(1e-6)).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn marginal_log_likelihood_single_position_is_softmax_cross_entropy() {
        let scores = Tensor::from_vec(&[1, 2], vec![0.3, -0.4]).unwrap();
        let target = Tensor::from_vec(&[1, 2], vec![0.8, 0.2]).unwrap();
        let crf = CrfParams::zeros(2);
        let (j, ds, _) = marginal_log_likelihood_backward(&scores, &crf, &target).unwrap();
        let q = marginals(&scores, &crf).unwrap();
        let expected = 0.8 * libm::log(q.data()[0]) + 0.2 * libm::log(q.data()[1]);
        assert!((j - expected).abs() < 1e-14);
        // d/dz Σ p log softmax(z) = p - q
        for k in 0..2 {
            assert!((ds.data()[k] - (target.data()[k] - q.data()[k])).abs() < 1e-14);
        }
    }
}
