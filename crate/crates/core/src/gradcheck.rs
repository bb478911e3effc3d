//! Central finite-difference verification of the loss gradients.
//!
//! For random small models the analytic parameter gradient of each loss term
//! (obtained by backpropagating the loss's logit gradient) is compared
//! entry-wise against `(L(p + eps) - L(p - eps)) / (2 eps)`.
//!
//! ReLU kinks would poison the comparison, so candidate configurations are
//! re-drawn until every hidden pre-activation sits at a safe margin from
//! zero; the parameter probes move pre-activations by orders of magnitude
//! less than that margin.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::{loss_cl, loss_md, loss_new, loss_old, BatchPartition, ClassPrior, LossWeights};
use crate::matrix::Matrix;
use crate::nn::Model;
use crate::seed::derive_seed;

/// Probe size for the central differences.
pub const FD_EPSILON: f64 = 1e-5;
/// Maximum relative error accepted for any gradient entry.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Minimum |pre-activation| required of a candidate configuration.
const RELU_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct LossCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    pub configs: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err <= self.tolerance)
    }
}

struct CheckCase {
    model: Model,
    batch: Matrix,
    labels: Vec<usize>,
    part: BatchPartition,
    prior: ClassPrior,
    weights: LossWeights,
}

fn draw_case(seed: u64) -> Result<CheckCase> {
    for attempt in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck-case", attempt));
        let input_dim = rng.random_range(3..7usize);
        let n_hidden = rng.random_range(1..3usize);
        let hidden: Vec<usize> = (0..n_hidden).map(|_| rng.random_range(4..9usize)).collect();
        let c_o = rng.random_range(1..4usize);
        let c_n = rng.random_range(1..3usize);
        let model = Model::new(input_dim, &hidden, rng.random())?
            .expand_head(c_o, 0, rng.random())?
            .expand_head(c_n, 1, rng.random())?;

        let n_old = rng.random_range(1..4usize);
        let n_new = rng.random_range(1..4usize);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let rows = n_old + n_new;
        let data: Vec<f64> = (0..rows * input_dim).map(|_| normal.sample(&mut rng)).collect();
        let batch = Matrix::from_vec(rows, input_dim, data)?;
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..n_old {
            labels.push(rng.random_range(0..c_o));
        }
        for _ in 0..n_new {
            labels.push(c_o + rng.random_range(0..c_n));
        }
        let part = BatchPartition::from_labels(&labels, c_o, c_n)?;
        let prior = ClassPrior::empirical(&labels, &part.old_rows, c_o)?;
        let tau = rng.random_range(1.05..2.45);
        let weights = LossWeights { tau, ..LossWeights::default() };

        if relu_margin_ok(&model, &batch)? {
            return Ok(CheckCase { model, batch, labels, part, prior, weights });
        }
    }
    Err(Error::Domain("could not draw a kink-free gradcheck configuration".into()))
}

fn relu_margin_ok(model: &Model, batch: &Matrix) -> Result<bool> {
    let (_, cache) = model.forward(batch)?;
    Ok(cache_min_abs_pre(model, &cache) > RELU_MARGIN)
}

fn cache_min_abs_pre(model: &Model, cache: &crate::nn::ForwardCache) -> f64 {
    // only hidden (ReLU) layers have kinks
    let mut min = f64::INFINITY;
    for (li, layer) in model.layers().iter().enumerate() {
        if layer.activation == crate::nn::Activation::Relu {
            for v in cache.pre_layer(li).iter() {
                min = min.min(v.abs());
            }
        }
    }
    min
}

type LossFn<'a> = dyn Fn(&Matrix) -> Result<(f64, Matrix)> + 'a;

/// Max relative error between the analytic parameter gradient and central
/// finite differences for one loss on one case.
fn check_case(case: &CheckCase, loss: &LossFn, corrupt: bool) -> Result<f64> {
    let (logits, cache) = case.model.forward(&case.batch)?;
    let (_, d_logits) = loss(&logits)?;
    let grads = case.model.backward(&cache, &d_logits)?;
    let mut analytic = Model::flatten_grads(&grads);
    if corrupt {
        analytic[0] += 1e-2;
    }

    let mut max_rel = 0.0f64;
    let mut probe = case.model.clone();
    for i in 0..probe.num_params() {
        let original = probe.param(i);
        probe.set_param(i, original + FD_EPSILON);
        let (logits_hi, _) = probe.forward(&case.batch)?;
        let (hi, _) = loss(&logits_hi)?;
        probe.set_param(i, original - FD_EPSILON);
        let (logits_lo, _) = probe.forward(&case.batch)?;
        let (lo, _) = loss(&logits_lo)?;
        probe.set_param(i, original);
        let numeric = (hi - lo) / (2.0 * FD_EPSILON);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// Verifies the analytic gradients of the retention, plasticity, mutual
/// distillation, and combined losses over `n_configs` random configurations.
///
/// `corrupt` injects a deliberate error into the first analytic gradient
/// entry of every check, forcing a failure; it exists so the failure path is
/// testable.
pub fn run_gradcheck(seed: u64, n_configs: usize, corrupt: bool) -> Result<GradcheckReport> {
    let mut maxima = [0.0f64; 4];
    for k in 0..n_configs {
        let case = draw_case(derive_seed(seed, "gradcheck", k as u64))?;
        let tau = case.weights.tau;

        let losses: [(usize, Box<LossFn>); 4] = [
            (0, Box::new(|l: &Matrix| loss_old(l, &case.part, &case.labels, tau))),
            (1, Box::new(|l: &Matrix| loss_new(l, &case.part, &case.labels))),
            (2, Box::new(|l: &Matrix| loss_md(l, &case.part, &case.labels, tau, &case.prior))),
            (3, Box::new(|l: &Matrix| {
                let (v, _, g) = loss_cl(l, &case.part, &case.labels, &case.weights, &case.prior)?;
                Ok((v, g))
            })),
        ];
        for (slot, loss) in &losses {
            let rel = check_case(&case, loss.as_ref(), corrupt)?;
            maxima[*slot] = maxima[*slot].max(rel);
        }
    }
    Ok(GradcheckReport {
        checks: vec![
            LossCheck { name: "L_o", max_rel_err: maxima[0] },
            LossCheck { name: "L_n", max_rel_err: maxima[1] },
            LossCheck { name: "L_md", max_rel_err: maxima[2] },
            LossCheck { name: "L_cl", max_rel_err: maxima[3] },
        ],
        configs: n_configs,
        tolerance: FD_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = run_gradcheck(42, 8, false).unwrap();
        assert!(report.passed(), "report: {report:?}");
        for check in &report.checks {
            assert!(check.max_rel_err <= FD_TOLERANCE, "{}: {}", check.name, check.max_rel_err);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let report = run_gradcheck(42, 2, true).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn report_lists_all_four_losses() {
        let report = run_gradcheck(1, 1, false).unwrap();
        let names: Vec<&str> = report.checks.iter().map(|c| c.name).collect();
        assert_eq!(names, vec!["L_o", "L_n", "L_md", "L_cl"]);
    }
}
