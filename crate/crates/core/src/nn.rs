//! Dense feed-forward classifier with explicit forward/backward passes,
//! an expandable output head, and temperature-scaled softmax.
//!
//! The final layer is the class head: logits are `w * f(x) + b` where `f(x)`
//! is the activation of the last hidden layer. The head starts with zero
//! classes and grows by [`Model::expand_head`] as increments add classes.

use std::ops::Range;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer. Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Dense feed-forward classifier with per-class domain tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
    head_classes: usize,
    class_domains: Vec<usize>,
    rng_seed: u64,
}

/// Per-layer pre-activations and activations for one batch, kept for backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    pre: Vec<Matrix>,
    act: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_rows(&self) -> usize {
        self.input.rows()
    }

    /// Pre-activations of layer `li` for the cached batch.
    pub fn pre_layer(&self, li: usize) -> &Matrix {
        &self.pre[li]
    }
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.out_dim(), l.in_dim()), vec![0.0; l.out_dim()]))
                .collect(),
        }
    }
}

fn init_uniform_rows(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // fan-in uniform: keeps fresh logits small so existing class posteriors
    // are not disrupted when the head grows
    let limit = (6.0 / in_dim as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid uniform range");
    (0..out_dim * in_dim).map(|_| dist.sample(rng)).collect()
}

impl Model {
    /// Builds a classifier with ReLU hidden layers and an empty head.
    ///
    /// The head is the final (identity) layer; it starts with zero classes
    /// and grows via [`Model::expand_head`].
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Domain("input_dim must be >= 1".into()));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::Domain("hidden layer sizes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut in_dim = input_dim;
        for &h in hidden {
            let weight = Matrix::from_vec(h, in_dim, init_uniform_rows(h, in_dim, &mut rng))?;
            layers.push(Layer { weight, bias: vec![0.0; h], activation: Activation::Relu });
            in_dim = h;
        }
        layers.push(Layer {
            weight: Matrix::zeros(0, in_dim),
            bias: Vec::new(),
            activation: Activation::Identity,
        });
        Ok(Model { layers, head_classes: 0, class_domains: Vec::new(), rng_seed: seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn head_classes(&self) -> usize {
        self.head_classes
    }

    pub fn class_domains(&self) -> &[usize] {
        &self.class_domains
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Feature dimension entering the head.
    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("model has layers").in_dim()
    }

    /// Runs the batch through every layer.
    ///
    /// Returns the logits `(batch_rows x head_classes)` and the cache needed
    /// by [`Model::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "layer 0 expects input dim {}, batch has {} cols",
                self.input_dim(),
                batch.cols()
            )));
        }
        let b = batch.rows();
        let mut pre: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        let mut act: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let current: &Matrix = if li == 0 { batch } else { &act[li - 1] };
            if current.cols() != layer.in_dim() {
                return Err(Error::Shape(format!(
                    "layer {} expects input dim {}, got {}",
                    li,
                    layer.in_dim(),
                    current.cols()
                )));
            }
            let out = layer.out_dim();
            let mut z = Matrix::zeros(b, out);
            for r in 0..b {
                let x = current.row(r);
                let zr = z.row_mut(r);
                for (o, zo) in zr.iter_mut().enumerate() {
                    let w = layer.weight.row(o);
                    let mut acc = layer.bias[o];
                    for (wi, xi) in w.iter().zip(x.iter()) {
                        acc += wi * xi;
                    }
                    *zo = acc;
                }
            }
            let mut a = z.clone();
            for v in a.data_mut() {
                *v = layer.activation.apply(*v);
            }
            pre.push(z);
            act.push(a);
        }
        let logits = act.last().expect("model has layers").clone();
        Ok((logits, ForwardCache { input: batch.clone(), pre, act }))
    }

    /// Backpropagates `d_logits` (the gradient of a scalar loss with respect
    /// to the logits) through the cached pass.
    ///
    /// The chain rule sums per-sample contributions, so when `d_logits`
    /// carries a batch-mean loss the result is the batch-mean gradient.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<Gradients> {
        let b = cache.input.rows();
        let head = self.layers.last().expect("model has layers");
        if d_logits.rows() != b || d_logits.cols() != head.out_dim() {
            return Err(Error::Shape(format!(
                "d_logits is {}x{}, expected {}x{}",
                d_logits.rows(),
                d_logits.cols(),
                b,
                head.out_dim()
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        // delta = dL/d(pre-activation) of the current layer
        let mut delta = d_logits.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            for r in 0..b {
                let dz = delta.row_mut(r);
                let z = cache.pre[li].row(r);
                for (d, zv) in dz.iter_mut().zip(z.iter()) {
                    *d *= layer.activation.derivative(*zv);
                }
            }
            let input_act: &Matrix = if li == 0 { &cache.input } else { &cache.act[li - 1] };
            let (gw, gb) = &mut grads.layers[li];
            for r in 0..b {
                let dz = delta.row(r);
                let x = input_act.row(r);
                for (o, dzo) in dz.iter().enumerate() {
                    gb[o] += dzo;
                    let gwr = gw.row_mut(o);
                    for (gwi, xi) in gwr.iter_mut().zip(x.iter()) {
                        *gwi += dzo * xi;
                    }
                }
            }
            if li > 0 {
                let mut prev = Matrix::zeros(b, layer.in_dim());
                for r in 0..b {
                    let dz = delta.row(r);
                    let pr = prev.row_mut(r);
                    for (o, dzo) in dz.iter().enumerate() {
                        let w = layer.weight.row(o);
                        for (pi, wi) in pr.iter_mut().zip(w.iter()) {
                            *pi += dzo * wi;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(grads)
    }

    /// Grows the head by `n_new` classes tagged with `domain`.
    ///
    /// Existing parameters are untouched bit for bit. New head rows are drawn
    /// uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]` from `seed`; new biases
    /// are zero.
    pub fn expand_head(&self, n_new: usize, domain: usize, seed: u64) -> Result<Model> {
        if n_new == 0 {
            return Err(Error::Domain("expand_head needs n_new >= 1".into()));
        }
        let mut out = self.clone();
        let head = out.layers.last_mut().expect("model has layers");
        let fan_in = head.in_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = init_uniform_rows(n_new, fan_in, &mut rng);
        head.weight.append_rows(n_new, &rows)?;
        head.bias.extend(std::iter::repeat(0.0).take(n_new));
        out.head_classes += n_new;
        out.class_domains.extend(std::iter::repeat(domain).take(n_new));
        Ok(out)
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    /// Flat parameter read: weights row-major then biases, layer by layer.
    pub fn param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            let nw = l.weight.data().len();
            if idx < nw {
                return l.weight.data()[idx];
            }
            idx -= nw;
            if idx < l.bias.len() {
                return l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter write, mirroring [`Model::param`].
    pub fn set_param(&mut self, mut idx: usize, v: f64) {
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            if idx < nw {
                l.weight.data_mut()[idx] = v;
                return;
            }
            idx -= nw;
            if idx < l.bias.len() {
                l.bias[idx] = v;
                return;
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flattens gradients in the same order as [`Model::param`].
    pub fn flatten_grads(grads: &Gradients) -> Vec<f64> {
        let mut flat = Vec::new();
        for (w, b) in &grads.layers {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b);
        }
        flat
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// Temperature-scaled softmax over `slice` of one logits row.
///
/// Computed with max-subtraction; the output sums to 1 and every entry is
/// strictly positive.
pub fn softmax_temp(logits_row: &[f64], tau: f64, slice: Range<usize>) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
    }
    if slice.is_empty() {
        return Err(Error::Domain("softmax over an empty slice".into()));
    }
    if slice.end > logits_row.len() {
        return Err(Error::Domain(format!(
            "softmax slice {}..{} out of bounds for row of length {}",
            slice.start,
            slice.end,
            logits_row.len()
        )));
    }
    let scaled: Vec<f64> = logits_row[slice].iter().map(|l| l / tau).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    // clamp the exponent so entries stay strictly positive even for extreme gaps
    let mut out: Vec<f64> = scaled.iter().map(|s| (s - max).max(-700.0).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer_model(weight: Matrix, bias: Vec<f64>) -> Model {
        let head = weight.rows();
        let mut m = Model::new(weight.cols(), &[], 0).unwrap();
        m.layers_mut()[0].weight = weight;
        m.layers_mut()[0].bias = bias;
        m.head_classes = head;
        m.class_domains = vec![0; head];
        m
    }

    #[test]
    fn forward_identity_layer() {
        let m = single_layer_model(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.0, 0.0],
        );
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        assert_eq!(logits.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn forward_zero_weights() {
        let m = single_layer_model(Matrix::zeros(3, 2), vec![0.0; 3]);
        let x = Matrix::from_rows(&[vec![4.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        assert!(logits.iter().all(|v| v == 0.0));
    }

    #[test]
    fn forward_shape_error_names_layer() {
        let m = Model::new(4, &[3], 7).unwrap();
        let x = Matrix::zeros(2, 5);
        let err = m.forward(&x).unwrap_err();
        assert!(matches!(err, Error::Shape(ref s) if s.contains("layer 0")));
    }

    /// Independent oracle: a hand-rolled forward pass written as plain loops
    /// over `Vec<Vec<f64>>`, sharing no code with `Model::forward`.
    fn naive_forward(model: &Model, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in model.layers() {
            let mut next = vec![0.0; layer.out_dim()];
            for (o, n) in next.iter_mut().enumerate() {
                let mut acc = layer.bias[o];
                for i in 0..layer.in_dim() {
                    acc += layer.weight.get(o, i) * cur[i];
                }
                *n = match layer.activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn forward_matches_independent_reimplementation() {
        let m = Model::new(5, &[8, 6], 42).unwrap().expand_head(4, 0, 43).unwrap();
        let x = Matrix::from_rows(&[
            vec![0.3, -1.2, 0.7, 2.0, -0.4],
            vec![1.0, 1.0, -1.0, 0.25, 0.0],
        ])
        .unwrap();
        let (logits, _) = m.forward(&x).unwrap();
        for r in 0..x.rows() {
            let expect = naive_forward(&m, x.row(r));
            for (a, b) in logits.row(r).iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_zero_dlogits_gives_zero_grads() {
        let m = Model::new(4, &[6], 1).unwrap().expand_head(3, 0, 2).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -0.5, 0.25, 2.0]]).unwrap();
        let (logits, cache) = m.forward(&x).unwrap();
        let grads = m.backward(&cache, &Matrix::zeros(1, logits.cols())).unwrap();
        for (w, b) in &grads.layers {
            assert!(w.iter().all(|v| v == 0.0));
            assert!(b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn backward_linear_squared_error_closed_form() {
        // single linear layer, L = (w x + b - y)^2, dL/dlogit = 2 (w x + b - y)
        let m = single_layer_model(Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap(), vec![0.25]);
        let x = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let y = 1.5;
        let (logits, cache) = m.forward(&x).unwrap();
        let r = logits.get(0, 0) - y;
        let mut d = Matrix::zeros(1, 1);
        d.set(0, 0, 2.0 * r);
        let grads = m.backward(&cache, &d).unwrap();
        let (gw, gb) = &grads.layers[0];
        assert!((gw.get(0, 0) - 2.0 * r * 2.0).abs() < 1e-12);
        assert!((gw.get(0, 1) - 2.0 * r * 3.0).abs() < 1e-12);
        assert!((gb[0] - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_bad_shape() {
        let m = Model::new(3, &[4], 9).unwrap().expand_head(2, 0, 10).unwrap();
        let x = Matrix::zeros(2, 3);
        let (_, cache) = m.forward(&x).unwrap();
        assert!(m.backward(&cache, &Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn softmax_temp_hand_value() {
        let p = softmax_temp(&[2.0, 0.0], 1.0, 0..2).unwrap();
        // e^2 / (e^2 + 1)
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_temp_infinite_temperature_is_uniform() {
        let p = softmax_temp(&[5.0, -3.0, 0.7, 2.2], 1e6, 0..4).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_temp_domain_errors() {
        assert!(softmax_temp(&[1.0], 0.0, 0..1).is_err());
        assert!(softmax_temp(&[1.0], -2.0, 0..1).is_err());
        assert!(softmax_temp(&[1.0, 2.0], 1.0, 1..1).is_err());
        assert!(softmax_temp(&[1.0, 2.0], 1.0, 0..3).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let row = [0.3, -2.0, 5.5, 1.1, -0.7];
        let p = softmax_temp(&row, 1.7, 0..5).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = row.iter().map(|v| v + 123.0).collect();
        let q = softmax_temp(&shifted, 1.7, 0..5).unwrap();
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expand_head_preserves_existing_parameters_bitwise() {
        let m = Model::new(4, &[5], 11).unwrap().expand_head(2, 0, 12).unwrap();
        let grown = m.expand_head(1, 1, 99).unwrap();
        assert_eq!(grown.head_classes(), 3);
        assert_eq!(grown.class_domains(), &[0, 0, 1]);
        let old_head = &m.layers().last().unwrap().weight;
        let new_head = &grown.layers().last().unwrap().weight;
        for r in 0..old_head.rows() {
            for c in 0..old_head.cols() {
                assert_eq!(old_head.get(r, c).to_bits(), new_head.get(r, c).to_bits());
            }
        }
        assert_eq!(grown.layers().last().unwrap().bias[2], 0.0);
        // hidden layers untouched
        assert_eq!(m.layers()[0].weight, grown.layers()[0].weight);
    }

    #[test]
    fn expand_head_is_deterministic() {
        let m = Model::new(4, &[5], 11).unwrap();
        let a = m.expand_head(3, 0, 77).unwrap();
        let b = m.expand_head(3, 0, 77).unwrap();
        assert_eq!(a.layers().last().unwrap().weight, b.layers().last().unwrap().weight);
    }

    #[test]
    fn expand_head_schedule_reaches_seven() {
        let mut m = Model::new(4, &[5], 3).unwrap();
        for (i, n) in [2usize, 1, 1, 1, 1, 1].iter().enumerate() {
            m = m.expand_head(*n, 0, i as u64).unwrap();
        }
        assert_eq!(m.head_classes(), 7);
    }

    #[test]
    fn expand_head_rows_within_fan_in_limit() {
        let m = Model::new(4, &[8], 5).unwrap().expand_head(3, 0, 6).unwrap();
        let head = &m.layers().last().unwrap().weight;
        let limit = (6.0f64 / 8.0).sqrt();
        for r in 0..head.rows() {
            for c in 0..head.cols() {
                assert!(head.get(r, c).abs() <= limit);
            }
        }
    }
}
