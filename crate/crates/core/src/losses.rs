//! The continual-learning objective and its parts.
//!
//! During an increment the batch is split into rows of previously learned
//! ("old") classes and rows of the classes being added ("new"). Three terms
//! act on the logits:
//!
//! - `loss_old`: cross-entropy of the old labels against the
//!   temperature-scaled softmax over the old-class columns (retention),
//! - `loss_new`: KL divergence of the one-hot new labels from the softmax
//!   over the new-class columns (plasticity),
//! - `loss_md`: cross-entropy of the old labels against a Bayes posterior
//!   that fuses two likelihoods over the old classes — the per-old-sample
//!   soft probabilities and the batch-mean soft probabilities that the new
//!   samples assign to the old classes (mutual structure).
//!
//! `loss_cl` combines them as `alpha * L_n + beta * L_md + gamma * L_o`.
//!
//! Every function returns the scalar together with its exact gradient with
//! respect to the logits, so the whole objective can be verified against
//! central finite differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::softmax_temp;

/// Floor applied inside logarithms so underflow cannot produce `-inf`.
const LOG_CLAMP: f64 = 1e-12;

/// Row indices of a batch split by old/new class membership.
///
/// `old_rows` hold samples with `label < c_o`; `new_rows` hold the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPartition {
    pub old_rows: Vec<usize>,
    pub new_rows: Vec<usize>,
    pub c_o: usize,
    pub c_n: usize,
}

impl BatchPartition {
    /// Splits `labels` by the old/new boundary `c_o`.
    pub fn from_labels(labels: &[usize], c_o: usize, c_n: usize) -> Result<Self> {
        let total = c_o + c_n;
        let mut old_rows = Vec::new();
        let mut new_rows = Vec::new();
        for (r, &lab) in labels.iter().enumerate() {
            if lab >= total {
                return Err(Error::Domain(format!(
                    "label {lab} at row {r} exceeds {total} known classes"
                )));
            }
            if lab < c_o {
                old_rows.push(r);
            } else {
                new_rows.push(r);
            }
        }
        Ok(BatchPartition { old_rows, new_rows, c_o, c_n })
    }

    pub fn has_old(&self) -> bool {
        !self.old_rows.is_empty()
    }

    pub fn has_new(&self) -> bool {
        !self.new_rows.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.c_o + self.c_n
    }
}

/// Weights of the combined objective plus the distillation temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.25, beta: 0.45, gamma: 0.30, tau: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Domain("loss weights must be >= 0".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Prior probabilities over the old classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior(Vec<f64>);

impl ClassPrior {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("prior must cover at least one class".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("prior entries must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("prior must sum to 1, got {sum}")));
        }
        Ok(ClassPrior(probs))
    }

    pub fn uniform(c_o: usize) -> Result<Self> {
        if c_o == 0 {
            return Err(Error::Domain("uniform prior needs c_o >= 1".into()));
        }
        Ok(ClassPrior(vec![1.0 / c_o as f64; c_o]))
    }

    /// Empirical old-class frequency over the given rows; classes absent from
    /// the batch fall back to the uniform share before renormalizing.
    pub fn empirical(labels: &[usize], old_rows: &[usize], c_o: usize) -> Result<Self> {
        if c_o == 0 {
            return Err(Error::Domain("empirical prior needs c_o >= 1".into()));
        }
        let mut counts = vec![0usize; c_o];
        for &r in old_rows {
            let lab = labels[r];
            if lab >= c_o {
                return Err(Error::Domain(format!("row {r} labelled {lab} is not an old class")));
            }
            counts[lab] += 1;
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Self::uniform(c_o);
        }
        let uniform = 1.0 / c_o as f64;
        let mut probs: Vec<f64> = counts
            .iter()
            .map(|&c| if c == 0 { uniform } else { c as f64 / total as f64 })
            .collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(ClassPrior(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// Retention term: temperature-scaled cross-entropy on the old-class slice
/// of the old rows, averaged over the old rows.
///
/// The gradient is zero on new rows and on new-class columns.
pub fn loss_old(
    logits: &Matrix,
    part: &BatchPartition,
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Matrix)> {
    if part.c_o == 0 {
        return Err(Error::Domain("loss_old needs at least one old class".into()));
    }
    if !part.has_old() {
        return Err(Error::EmptyPartition { side: "old" });
    }
    check_logits(logits, part, labels)?;
    let n = part.old_rows.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for &r in &part.old_rows {
        let target = labels[r];
        debug_assert!(target < part.c_o);
        let p = softmax_temp(logits.row(r), tau, 0..part.c_o)?;
        total += -clamped_ln(p[target]);
        let gr = grad.row_mut(r);
        for (j, pj) in p.iter().enumerate() {
            let indicator = if j == target { 1.0 } else { 0.0 };
            gr[j] = (pj - indicator) / (tau * n);
        }
    }
    Ok((total / n, grad))
}

/// Plasticity term: KL of the one-hot new labels from the predicted
/// distribution of the new rows (unscaled logits), averaged over new rows.
///
/// With one-hot targets the divergence reduces to `-log p(true class)`.
///
/// The predicted distribution spans the full head rather than only the
/// new-class columns: a softmax over a single new class is constantly one,
/// so slice-local normalization would leave increments that add one class
/// with no training signal at all, and the full span is also what makes old
/// and new logits comparable for whole-head inference.
pub fn loss_new(logits: &Matrix, part: &BatchPartition, labels: &[usize]) -> Result<(f64, Matrix)> {
    if part.c_n == 0 {
        return Err(Error::Domain("loss_new needs at least one new class".into()));
    }
    if !part.has_new() {
        return Err(Error::EmptyPartition { side: "new" });
    }
    check_logits(logits, part, labels)?;
    let classes = part.total_classes();
    let n = part.new_rows.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for &r in &part.new_rows {
        let target = labels[r];
        let p = softmax_temp(logits.row(r), 1.0, 0..classes)?;
        total += -clamped_ln(p[target]);
        let gr = grad.row_mut(r);
        for (j, pj) in p.iter().enumerate() {
            let indicator = if j == target { 1.0 } else { 0.0 };
            gr[j] = (pj - indicator) / n;
        }
    }
    Ok((total / n, grad))
}

/// Plain categorical cross-entropy over the full head, averaged over all
/// rows. Used at the first increment (no old classes to retain) and by the
/// naive fine-tuning baseline.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() == 0 {
        return Err(Error::Domain("cross_entropy on an empty batch".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let target = labels[r];
        if target >= classes {
            return Err(Error::Domain(format!("label {target} exceeds head size {classes}")));
        }
        let p = softmax_temp(logits.row(r), 1.0, 0..classes)?;
        total += -clamped_ln(p[target]);
        let gr = grad.row_mut(r);
        for (j, pj) in p.iter().enumerate() {
            let indicator = if j == target { 1.0 } else { 0.0 };
            gr[j] = (pj - indicator) / n;
        }
    }
    Ok((total / n, grad))
}

/// Normalized product of two likelihood vectors and a prior:
/// `post_i = l1_i * l2_i * prior_i / sum_k l1_k * l2_k * prior_k`.
///
/// Symmetric in the two likelihood arguments and invariant to positive
/// rescaling of either.
pub fn bayes_posterior(l1: &[f64], l2: &[f64], prior: &ClassPrior) -> Result<Vec<f64>> {
    if l1.len() != l2.len() || l1.len() != prior.len() {
        return Err(Error::Shape(format!(
            "likelihoods of length {}/{} against prior of length {}",
            l1.len(),
            l2.len(),
            prior.len()
        )));
    }
    if l1.iter().chain(l2.iter()).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Domain("likelihoods must be finite and >= 0".into()));
    }
    let weights: Vec<f64> = l1
        .iter()
        .zip(l2.iter())
        .zip(prior.probs().iter())
        .map(|((a, b), p)| a * b * p)
        .collect();
    let norm: f64 = weights.iter().sum();
    if !(norm > 0.0) {
        return Err(Error::DegenerateEvidence);
    }
    Ok(weights.into_iter().map(|w| w / norm).collect())
}

/// Mutual-distillation term.
///
/// For each old row the posterior over old classes is the Bayes combination
/// of (1) that row's temperature-scaled softmax restricted to the old-class
/// columns and (2) the batch mean of the new rows' temperature-scaled
/// softmax over the same columns. The loss is the mean negative log
/// posterior at the true old class; gradients flow through both likelihood
/// paths.
pub fn loss_md(
    logits: &Matrix,
    part: &BatchPartition,
    labels: &[usize],
    tau: f64,
    prior: &ClassPrior,
) -> Result<(f64, Matrix)> {
    if part.c_o == 0 {
        return Err(Error::Domain("loss_md needs at least one old class".into()));
    }
    if !part.has_old() {
        return Err(Error::EmptyPartition { side: "old" });
    }
    if !part.has_new() {
        return Err(Error::EmptyPartition { side: "new" });
    }
    if prior.len() != part.c_o {
        return Err(Error::Shape(format!(
            "prior covers {} classes, expected {}",
            prior.len(),
            part.c_o
        )));
    }
    check_logits(logits, part, labels)?;
    let c_o = part.c_o;
    let n_old = part.old_rows.len() as f64;
    let n_new = part.new_rows.len() as f64;
    let pi = prior.probs();

    // likelihood-2: batch-mean old-class mass of the new rows
    let new_soft: Vec<Vec<f64>> = part
        .new_rows
        .iter()
        .map(|&r| softmax_temp(logits.row(r), tau, 0..c_o))
        .collect::<Result<_>>()?;
    let mut mean_new = vec![0.0; c_o];
    for soft in &new_soft {
        for (m, s) in mean_new.iter_mut().zip(soft.iter()) {
            *m += s / n_new;
        }
    }

    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    // accumulated d(loss)/d(mean_new), fed back through every new row
    let mut g_mean = vec![0.0; c_o];
    let mut total = 0.0;

    for &r in &part.old_rows {
        let target = labels[r];
        let own = softmax_temp(logits.row(r), tau, 0..c_o)?;
        let weights: Vec<f64> = (0..c_o).map(|i| own[i] * mean_new[i] * pi[i]).collect();
        let norm: f64 = weights.iter().sum();
        if !(norm > 0.0) {
            return Err(Error::DegenerateEvidence);
        }
        total += clamped_ln(norm) - clamped_ln(weights[target]);

        // d/d(own_i) and d/d(mean_i) of  ln(norm) - ln(w_target)
        let target_live = weights[target] > LOG_CLAMP;
        let mut g_own = vec![0.0; c_o];
        for i in 0..c_o {
            g_own[i] = mean_new[i] * pi[i] / norm;
            g_mean[i] += (own[i] * pi[i] / norm) / n_old;
        }
        if target_live {
            g_own[target] -= 1.0 / own[target];
            g_mean[target] -= (1.0 / mean_new[target]) / n_old;
        }
        // chain through this row's softmax: dz_j = own_j (g_j - sum_i own_i g_i) / tau
        let dot: f64 = own.iter().zip(g_own.iter()).map(|(a, g)| a * g).sum();
        let gr = grad.row_mut(r);
        for j in 0..c_o {
            gr[j] += own[j] * (g_own[j] - dot) / (tau * n_old);
        }
    }

    // push the accumulated mean-path gradient through each new row's softmax
    for (soft, &r) in new_soft.iter().zip(part.new_rows.iter()) {
        let dot: f64 = soft.iter().zip(g_mean.iter()).map(|(b, h)| b * h).sum();
        let gr = grad.row_mut(r);
        for j in 0..c_o {
            gr[j] += soft[j] * (g_mean[j] - dot) / (tau * n_new);
        }
    }

    Ok((total / n_old, grad))
}

/// Per-term values of the combined objective, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_o: f64,
    pub l_n: f64,
    /// `None` when the mutual-distillation term is disabled (`beta == 0`).
    pub l_md: Option<f64>,
}

/// Combined continual-learning objective
/// `alpha * L_n + beta * L_md + gamma * L_o`.
///
/// With `beta == 0` the mutual-distillation term is skipped entirely, so the
/// gradient is exactly `alpha * grad(L_n) + gamma * grad(L_o)`.
pub fn loss_cl(
    logits: &Matrix,
    part: &BatchPartition,
    labels: &[usize],
    weights: &LossWeights,
    prior: &ClassPrior,
) -> Result<(f64, LossComponents, Matrix)> {
    weights.validate()?;
    let (l_o, g_o) = loss_old(logits, part, labels, weights.tau)?;
    let (l_n, g_n) = loss_new(logits, part, labels)?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let data = grad.data_mut();
    for (d, (a, b)) in data.iter_mut().zip(g_n.data().iter().zip(g_o.data().iter())) {
        *d = weights.alpha * a + weights.gamma * b;
    }
    let l_md = if weights.beta > 0.0 {
        let (l_md, g_md) = loss_md(logits, part, labels, weights.tau, prior)?;
        for (d, g) in grad.data_mut().iter_mut().zip(g_md.data().iter()) {
            *d += weights.beta * g;
        }
        Some(l_md)
    } else {
        None
    };
    let scalar =
        weights.alpha * l_n + weights.gamma * l_o + weights.beta * l_md.unwrap_or(0.0);
    Ok((scalar, LossComponents { l_o, l_n, l_md }, grad))
}

fn check_logits(logits: &Matrix, part: &BatchPartition, labels: &[usize]) -> Result<()> {
    if logits.cols() != part.total_classes() {
        return Err(Error::Shape(format!(
            "logits have {} columns for {} classes",
            logits.cols(),
            part.total_classes()
        )));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    Ok(())
}
