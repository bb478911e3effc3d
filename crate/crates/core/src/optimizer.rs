//! ADADELTA optimizer.
//!
//! Learning-rate free: per parameter it keeps decaying averages of squared
//! gradients and squared updates,
//!
//! - `E[g^2]  <- rho E[g^2]  + (1 - rho) g^2`
//! - `dx      = -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g`
//! - `E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Gradients, Model};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerAccum {
    sq_grad_w: Matrix,
    sq_update_w: Matrix,
    sq_grad_b: Vec<f64>,
    sq_update_b: Vec<f64>,
}

/// Per-parameter accumulators mirroring the model's shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdadeltaState {
    layers: Vec<LayerAccum>,
    rho: f64,
    epsilon: f64,
}

impl AdadeltaState {
    pub fn new(model: &Model, rho: f64, epsilon: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::Domain(format!("rho must be in [0, 1), got {rho}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(AdadeltaState {
            layers: model
                .layers()
                .iter()
                .map(|l| LayerAccum {
                    sq_grad_w: Matrix::zeros(l.out_dim(), l.in_dim()),
                    sq_update_w: Matrix::zeros(l.out_dim(), l.in_dim()),
                    sq_grad_b: vec![0.0; l.out_dim()],
                    sq_update_b: vec![0.0; l.out_dim()],
                })
                .collect(),
            rho,
            epsilon,
        })
    }

    pub fn with_defaults(model: &Model) -> Self {
        Self::new(model, DEFAULT_RHO, DEFAULT_EPSILON).expect("default hyperparameters are valid")
    }

    /// Grows accumulators after a head expansion. Existing entries keep their
    /// history; rows for the new classes start at zero.
    pub fn resize_to(&mut self, model: &Model) -> Result<()> {
        if self.layers.len() != model.layers().len() {
            return Err(Error::Shape("optimizer state has a different layer count".into()));
        }
        for (acc, layer) in self.layers.iter_mut().zip(model.layers()) {
            let (have, want) = (acc.sq_grad_w.rows(), layer.out_dim());
            if acc.sq_grad_w.cols() != layer.in_dim() || have > want {
                return Err(Error::Shape("optimizer state cannot shrink to model shape".into()));
            }
            if have < want {
                let extra = want - have;
                let zeros = vec![0.0; extra * layer.in_dim()];
                acc.sq_grad_w.append_rows(extra, &zeros)?;
                acc.sq_update_w.append_rows(extra, &zeros)?;
                acc.sq_grad_b.extend(std::iter::repeat(0.0).take(extra));
                acc.sq_update_b.extend(std::iter::repeat(0.0).take(extra));
            }
        }
        Ok(())
    }
}

fn step_slice(
    params: &mut [f64],
    grads: &[f64],
    sq_grad: &mut [f64],
    sq_update: &mut [f64],
    rho: f64,
    eps: f64,
    path: &str,
) -> Result<()> {
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(Error::NonFinite { path: format!("{path}[{i}] gradient") });
        }
        sq_grad[i] = rho * sq_grad[i] + (1.0 - rho) * g * g;
        let dx = -((sq_update[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * g;
        sq_update[i] = rho * sq_update[i] + (1.0 - rho) * dx * dx;
        params[i] += dx;
    }
    Ok(())
}

/// Applies one ADADELTA update in place. Deterministic given inputs.
pub fn adadelta_step(model: &mut Model, grads: &Gradients, state: &mut AdadeltaState) -> Result<()> {
    if grads.layers.len() != state.layers.len() {
        return Err(Error::Shape("gradient/state layer count mismatch".into()));
    }
    let (rho, eps) = (state.rho, state.epsilon);
    for (li, (layer, (gw, gb))) in
        model.layers_mut().iter_mut().zip(grads.layers.iter()).enumerate()
    {
        let acc = &mut state.layers[li];
        if gw.rows() != layer.weight.rows() || gw.cols() != layer.weight.cols() {
            return Err(Error::Shape(format!("layer {li} weight gradient shape mismatch")));
        }
        step_slice(
            layer.weight.data_mut(),
            gw.data(),
            acc.sq_grad_w.data_mut(),
            acc.sq_update_w.data_mut(),
            rho,
            eps,
            &format!("layer {li} weight"),
        )?;
        step_slice(
            &mut layer.bias,
            gb,
            &mut acc.sq_grad_b,
            &mut acc.sq_update_b,
            rho,
            eps,
            &format!("layer {li} bias"),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        Model::new(2, &[], 0).unwrap().expand_head(1, 0, 1).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut state = AdadeltaState::with_defaults(&m);
        let grads = Gradients::zeros_like(&m);
        adadelta_step(&mut m, &grads, &mut state).unwrap();
        for i in 0..m.num_params() {
            assert_eq!(m.param(i).to_bits(), before.param(i).to_bits());
        }
    }

    #[test]
    fn scalar_first_step_matches_hand_computation() {
        // fresh state, rho = 0.95, eps = 1e-6, g = 1:
        // E[g^2] = 0.05, dx = -sqrt(1e-6)/sqrt(0.05 + 1e-6) = -4.4720912e-3
        let mut m = tiny_model();
        let before = m.param(0);
        let mut state = AdadeltaState::with_defaults(&m);
        let mut grads = Gradients::zeros_like(&m);
        grads.layers.last_mut().unwrap().0.set(0, 0, 1.0);
        adadelta_step(&mut m, &grads, &mut state).unwrap();
        let dx = m.param(0) - before;
        assert!((dx - (-4.4720912e-3)).abs() < 1e-5, "dx = {dx}");
    }

    #[test]
    fn two_runs_are_bitwise_identical() {
        let run = || {
            let mut m = tiny_model();
            let mut state = AdadeltaState::with_defaults(&m);
            for step in 0..25u32 {
                let mut grads = Gradients::zeros_like(&m);
                let head = grads.layers.last_mut().unwrap();
                head.0.set(0, 0, f64::from(step) * 0.1 - 1.0);
                head.0.set(0, 1, 0.5);
                head.1[0] = -0.25;
                adadelta_step(&mut m, &grads, &mut state).unwrap();
            }
            (0..m.num_params()).map(|i| m.param(i).to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_reports_path() {
        let mut m = tiny_model();
        let mut state = AdadeltaState::with_defaults(&m);
        let mut grads = Gradients::zeros_like(&m);
        grads.layers.last_mut().unwrap().0.set(0, 1, f64::NAN);
        let err = adadelta_step(&mut m, &grads, &mut state).unwrap_err();
        match err {
            Error::NonFinite { path } => assert!(path.contains("weight"), "path = {path}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn resize_preserves_history_and_zeros_new_rows() {
        let m = Model::new(3, &[4], 5).unwrap().expand_head(2, 0, 6).unwrap();
        let mut state = AdadeltaState::with_defaults(&m);
        // take one step so accumulators are nonzero
        let mut m2 = m.clone();
        let mut grads = Gradients::zeros_like(&m2);
        grads.layers.last_mut().unwrap().0.set(0, 0, 1.0);
        adadelta_step(&mut m2, &grads, &mut state).unwrap();
        let kept = state.layers.last().unwrap().sq_grad_w.get(0, 0);
        let m3 = m2.expand_head(1, 1, 7).unwrap();
        state.resize_to(&m3).unwrap();
        let acc = state.layers.last().unwrap();
        assert_eq!(acc.sq_grad_w.rows(), 3);
        assert_eq!(acc.sq_grad_w.get(0, 0), kept);
        assert_eq!(acc.sq_grad_w.get(2, 0), 0.0);
        assert_eq!(acc.sq_update_b[2], 0.0);
    }
}
