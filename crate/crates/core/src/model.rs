//! The classifier `head(encoder(x))`, its losses, gradients and SGD updates.
//!
//! A head with one output row is the scalar ±1 predictor: squared loss is
//! `(y - z)^2 / 2` and cross-entropy is the logistic loss `ln(1 + e^{-yz})`.
//! A head with one row per class uses one-hot targets.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::linalg::Matrix;
use crate::math;
use crate::rng;
use crate::synthdata::{class_index, CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Squared,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Encoder {
    Identity { dim: usize },
    /// `tanh(weights x + bias)`; `weights` is hidden x input.
    Mlp { weights: Matrix, bias: Vec<f64> },
}

impl Encoder {
    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp { weights, .. } => weights.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp { weights, .. } => weights.rows(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Encoder::Mlp { .. })
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            bail!(Dimension, "input has {} columns, encoder expects {}", x.cols(), self.input_dim());
        }
        match self {
            Encoder::Identity { .. } => Ok(x.clone()),
            Encoder::Mlp { weights, bias } => {
                let mut h = x.matmul_t(weights)?;
                for r in 0..h.rows() {
                    for (v, b) in h.row_mut(r).iter_mut().zip(bias) {
                        *v = math::tanh(*v + b);
                    }
                }
                Ok(h)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EncoderSpec {
    Identity,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One real output scored against ±1 targets.
    Single,
    /// One output per class.
    PerClass,
}

/// Architecture choices for [`Classifier::init`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub head: HeadKind,
    pub loss: LossKind,
    pub bias: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { encoder: EncoderSpec::Identity, head: HeadKind::Single, loss: LossKind::Squared, bias: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: Matrix,
    pub head_bias: Option<Vec<f64>>,
    pub loss: LossKind,
}

/// Gradient with the same layout as the classifier's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub head: Matrix,
    pub head_bias: Option<Vec<f64>>,
    /// `(weights, bias)` of an MLP encoder.
    pub encoder: Option<(Matrix, Vec<f64>)>,
}

impl Gradient {
    pub fn is_finite(&self) -> bool {
        self.head.is_finite()
            && self.head_bias.as_deref().map_or(true, math::all_finite)
            && self.encoder.as_ref().map_or(true, |(w, b)| w.is_finite() && math::all_finite(b))
    }
}

impl Classifier {
    /// Zero-initialised head on top of `encoder`.
    pub fn new(encoder: Encoder, outputs: usize, loss: LossKind, bias: bool) -> Result<Self> {
        if outputs != 1 && outputs != CLASSES.len() {
            bail!(Config, "head must have 1 or {} outputs, got {}", CLASSES.len(), outputs);
        }
        let d = encoder.output_dim();
        Ok(Self { encoder, head: Matrix::zeros(outputs, d), head_bias: bias.then(|| vec![0.0; outputs]), loss })
    }

    /// Identity encoders start from a zero head; MLP weights start Gaussian with fan-in scaling.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, input_dim: usize, rng: &mut R) -> Result<Self> {
        let outputs = match spec.head {
            HeadKind::Single => 1,
            HeadKind::PerClass => CLASSES.len(),
        };
        match spec.encoder {
            EncoderSpec::Identity => Self::new(Encoder::Identity { dim: input_dim }, outputs, spec.loss, spec.bias),
            EncoderSpec::Mlp { hidden } => {
                if hidden == 0 {
                    bail!(Config, "hidden width must be positive");
                }
                let mut weights = Matrix::zeros(hidden, input_dim);
                let s = 1.0 / math::sqrt(input_dim as f64);
                weights.data_mut().iter_mut().for_each(|w| *w = s * rng::normal(rng));
                let mut c = Self::new(Encoder::Mlp { weights, bias: vec![0.0; hidden] }, outputs, spec.loss, spec.bias)?;
                let s = 1.0 / math::sqrt(hidden as f64);
                c.head.data_mut().iter_mut().for_each(|w| *w = s * rng::normal(rng));
                Ok(c)
            }
        }
    }

    pub fn outputs(&self) -> usize {
        self.head.rows()
    }

    pub fn is_single_output(&self) -> bool {
        self.head.rows() == 1
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.encoder.encode(x)
    }

    /// Logits for already-encoded rows.
    pub fn head_logits(&self, h: &Matrix) -> Result<Matrix> {
        let mut z = h.matmul_t(&self.head)?;
        if let Some(b) = &self.head_bias {
            for r in 0..z.rows() {
                for (v, bb) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        Ok(z)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.head_logits(&self.embed(x)?)
    }

    /// ±1 predictions: the sign of a single output (zero maps to +1), otherwise the argmax.
    pub fn predict_labels(&self, x: &Matrix) -> Result<Vec<i32>> {
        let z = self.predict(x)?;
        Ok(z.row_iter().map(|r| self.label_of(r)).collect())
    }

    fn label_of(&self, logits: &[f64]) -> i32 {
        if logits.len() == 1 {
            if logits[0] >= 0.0 { 1 } else { -1 }
        } else {
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            CLASSES[best]
        }
    }

    /// Softmax class probabilities, one column per class in [`CLASSES`] order.
    /// A single output `z` is read as class scores `(-z, z)`.
    pub fn class_probabilities(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.predict(x)?;
        let mut p = Matrix::zeros(z.rows(), CLASSES.len());
        for r in 0..z.rows() {
            let row = p.row_mut(r);
            if z.cols() == 1 {
                row[0] = -z[(r, 0)];
                row[1] = z[(r, 0)];
            } else {
                row.copy_from_slice(z.row(r));
            }
            math::softmax(row);
        }
        Ok(p)
    }

    fn row_loss(&self, logits: &[f64], label: i32) -> f64 {
        match (logits.len(), self.loss) {
            (1, LossKind::Squared) => {
                let r = f64::from(label) - logits[0];
                0.5 * r * r
            }
            (1, LossKind::CrossEntropy) => math::softplus(-f64::from(label) * logits[0]),
            (_, LossKind::Squared) => {
                let c = class_index(label);
                logits.iter().enumerate().map(|(i, z)| {
                    let r = if i == c { 1.0 } else { 0.0 } - z;
                    0.5 * r * r
                }).sum()
            }
            (_, LossKind::CrossEntropy) => math::log_sum_exp(logits) - logits[class_index(label)],
        }
    }

    /// Derivative of the row loss with respect to the logits.
    fn row_loss_grad(&self, logits: &[f64], label: i32, out: &mut [f64]) {
        match (logits.len(), self.loss) {
            (1, LossKind::Squared) => out[0] = logits[0] - f64::from(label),
            (1, LossKind::CrossEntropy) => {
                let y = f64::from(label);
                out[0] = -y * math::sigmoid(-y * logits[0]);
            }
            (_, LossKind::Squared) => {
                let c = class_index(label);
                for (i, (o, z)) in out.iter_mut().zip(logits).enumerate() {
                    *o = z - if i == c { 1.0 } else { 0.0 };
                }
            }
            (_, LossKind::CrossEntropy) => {
                out.copy_from_slice(logits);
                math::softmax(out);
                out[class_index(label)] -= 1.0;
            }
        }
    }

    /// Per-row loss values.
    pub fn row_losses(&self, x: &Matrix, labels: &[i32]) -> Result<Vec<f64>> {
        check_batch(x, labels)?;
        let z = self.predict(x)?;
        Ok(z.row_iter().zip(labels).map(|(r, &y)| self.row_loss(r, y)).collect())
    }

    /// Mean loss, or the weight-normalised mean when `weights` is given.
    pub fn batch_loss(&self, x: &Matrix, labels: &[i32], weights: Option<&[f64]>) -> Result<f64> {
        let losses = self.row_losses(x, labels)?;
        let w = normalized_weights(labels.len(), weights)?;
        Ok(losses.iter().zip(&w).map(|(l, w)| l * w).sum())
    }

    /// `d loss / d logits` for each row, already scaled by the row's normalised weight.
    fn scaled_logit_grads(&self, z: &Matrix, labels: &[i32], weights: Option<&[f64]>) -> Result<Matrix> {
        let w = normalized_weights(labels.len(), weights)?;
        let mut g = Matrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            let out = g.row_mut(r);
            self.row_loss_grad(z.row(r), labels[r], out);
            out.iter_mut().for_each(|v| *v *= w[r]);
        }
        Ok(g)
    }

    /// Gradient of the mean batch loss with respect to the head weights only.
    pub fn last_layer_gradient(&self, x: &Matrix, labels: &[i32], weights: Option<&[f64]>) -> Result<Matrix> {
        check_batch(x, labels)?;
        let h = self.embed(x)?;
        let z = self.head_logits(&h)?;
        let dz = self.scaled_logit_grads(&z, labels, weights)?;
        dz.transpose().matmul(&h)
    }

    /// Gradient of the mean batch loss with respect to every trainable parameter.
    pub fn gradient(&self, x: &Matrix, labels: &[i32], weights: Option<&[f64]>) -> Result<Gradient> {
        check_batch(x, labels)?;
        let h = self.embed(x)?;
        let z = self.head_logits(&h)?;
        let dz = self.scaled_logit_grads(&z, labels, weights)?;
        let head = dz.transpose().matmul(&h)?;
        let head_bias = self.head_bias.as_ref().map(|_| column_sums(&dz));
        let encoder = match &self.encoder {
            Encoder::Identity { .. } => None,
            Encoder::Mlp { .. } => {
                let mut da = dz.matmul(&self.head)?;
                for r in 0..da.rows() {
                    for (d, hv) in da.row_mut(r).iter_mut().zip(h.row(r)) {
                        *d *= 1.0 - hv * hv;
                    }
                }
                Some((da.transpose().matmul(x)?, column_sums(&da)))
            }
        };
        Ok(Gradient { head, head_bias, encoder })
    }

    /// One step of `param -= lr * (grad + weight_decay * param)` on a copy.
    pub fn sgd_step(&self, grad: &Gradient, lr: f64, weight_decay: f64) -> Result<Classifier> {
        if !(lr > 0.0) || !(weight_decay >= 0.0) {
            bail!(Config, "need lr > 0 and weight_decay >= 0 (got {}, {})", lr, weight_decay);
        }
        if !grad.is_finite() {
            bail!(Numerical, "non-finite gradient");
        }
        if grad.head.shape() != self.head.shape() {
            bail!(Dimension, "head gradient {:?} vs head {:?}", grad.head.shape(), self.head.shape());
        }
        let mut next = self.clone();
        descend(next.head.data_mut(), grad.head.data(), lr, weight_decay);
        if let (Some(b), Some(g)) = (next.head_bias.as_mut(), grad.head_bias.as_ref()) {
            descend(b, g, lr, weight_decay);
        }
        if let (Encoder::Mlp { weights, bias }, Some((gw, gb))) = (&mut next.encoder, grad.encoder.as_ref()) {
            if gw.shape() != weights.shape() {
                bail!(Dimension, "encoder gradient {:?} vs weights {:?}", gw.shape(), weights.shape());
            }
            descend(weights.data_mut(), gw.data(), lr, weight_decay);
            descend(bias, gb, lr, weight_decay);
        }
        Ok(next)
    }

    /// All trainable parameters flattened: head, head bias, encoder weights, encoder bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.head.data().to_vec();
        if let Some(b) = &self.head_bias {
            p.extend_from_slice(b);
        }
        if let Encoder::Mlp { weights, bias } = &self.encoder {
            p.extend_from_slice(weights.data());
            p.extend_from_slice(bias);
        }
        p
    }

    /// Inverse of [`Classifier::params`].
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params().len() {
            bail!(Dimension, "{} parameters supplied, model has {}", p.len(), self.params().len());
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&p[at..at + dst.len()]);
            at += dst.len();
        };
        take(self.head.data_mut());
        if let Some(b) = self.head_bias.as_mut() {
            take(b);
        }
        if let Encoder::Mlp { weights, bias } = &mut self.encoder {
            take(weights.data_mut());
            take(bias);
        }
        Ok(())
    }
}

impl Gradient {
    /// Flattened in the same order as [`Classifier::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut p = self.head.data().to_vec();
        if let Some(b) = &self.head_bias {
            p.extend_from_slice(b);
        }
        if let Some((w, b)) = &self.encoder {
            p.extend_from_slice(w.data());
            p.extend_from_slice(b);
        }
        p
    }
}

fn descend(param: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * (g + wd * *p);
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for r in m.row_iter() {
        for (a, b) in s.iter_mut().zip(r) {
            *a += b;
        }
    }
    s
}

fn check_batch(x: &Matrix, labels: &[i32]) -> Result<()> {
    if labels.is_empty() {
        bail!(Empty, "empty batch");
    }
    if x.rows() != labels.len() {
        bail!(Dimension, "{} rows but {} labels", x.rows(), labels.len());
    }
    Ok(())
}

/// Weights summing to one: uniform when none are given.
pub fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / n as f64; n]),
        Some(w) => {
            if w.len() != n {
                bail!(Dimension, "{} weights for {} rows", w.len(), n);
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                bail!(Config, "weights must be finite and non-negative");
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                bail!(Config, "weights sum to zero");
            }
            Ok(w.iter().map(|v| v / total).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theory(weights: &[f64]) -> Classifier {
        let mut c = Classifier::new(Encoder::Identity { dim: weights.len() }, 1, LossKind::Squared, false).unwrap();
        c.head = Matrix::row_vector(weights);
        c
    }

    #[test]
    fn identity_selector_reproduces_inputs() {
        let mut c = Classifier::new(Encoder::Identity { dim: 2 }, 2, LossKind::CrossEntropy, true).unwrap();
        c.head = Matrix::identity(2);
        let x = Matrix::from_rows(&[vec![0.3, -1.5], vec![2.0, 4.0]]).unwrap();
        assert_eq!(c.predict(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_zero_logits() {
        let c = theory(&[0.0; 4]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        assert_eq!(c.predict(&x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn theory_logit_by_hand() {
        // mu = (0.5, -1), gamma = (2): 0.5*1 - 1*2 + 2*0.25 = -1.0
        let c = theory(&[0.5, -1.0, 2.0]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 0.25]]).unwrap();
        assert!((c.predict(&x).unwrap()[(0, 0)] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn squared_loss_small_batch() {
        // logits (0.5, -0.2), labels (+1, -1): (0.25 + 0.64) / 2 / 2 under the half convention.
        let c = theory(&[1.0]);
        let x = Matrix::from_rows(&[vec![0.5], vec![-0.2]]).unwrap();
        assert!((c.batch_loss(&x, &[1, -1], None).unwrap() - 0.2225).abs() < 1e-15);
        let u = c.batch_loss(&x, &[1, -1], Some(&[3.0, 3.0])).unwrap();
        assert!((u - 0.2225).abs() < 1e-15);
        assert_eq!(theory(&[1.0]).batch_loss(&Matrix::from_rows(&[vec![1.0]]).unwrap(), &[1], None).unwrap(), 0.0);
        assert!(c.batch_loss(&Matrix::zeros(0, 1), &[], None).is_err());
    }

    #[test]
    fn theory_gradient_is_negated_residual_correlation() {
        let c = theory(&[0.3, -0.1]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 1.0], vec![0.2, 0.2]]).unwrap();
        let y = [1, -1, 1];
        let g = c.last_layer_gradient(&x, &y, None).unwrap();
        let r: Vec<f64> = (0..3).map(|i| f64::from(y[i]) - (0.3 * x[(i, 0)] - 0.1 * x[(i, 1)])).collect();
        let m = x.t_matvec(&r).unwrap();
        for j in 0..2 {
            assert!((-g[(0, j)] - m[j] / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let c = theory(&[0.0, 0.0]);
        let g = Gradient { head: Matrix::row_vector(&[0.5, -2.0]), head_bias: None, encoder: None };
        assert_eq!(c.sgd_step(&g, 1.0, 0.0).unwrap().head.data(), &[-0.5, 2.0]);
        let c = theory(&[1.0, -4.0]);
        let zero = Gradient { head: Matrix::zeros(1, 2), head_bias: None, encoder: None };
        assert_eq!(c.sgd_step(&zero, 0.1, 0.0).unwrap(), c);
        let d = c.sgd_step(&zero, 0.1, 0.5).unwrap();
        assert_eq!(d.head.data(), &[1.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
        let bad = Gradient { head: Matrix::row_vector(&[f64::NAN, 0.0]), head_bias: None, encoder: None };
        assert!(c.sgd_step(&bad, 0.1, 0.0).is_err());
    }
}
