//! Network architectures: translator, discriminator, classifier.

pub mod checkpoint;
pub mod classifier;
pub mod layers;
pub mod patchgan;
pub mod unet;

pub use classifier::Classifier;
pub use patchgan::PatchGan;
pub use unet::UNet;

use crate::error::Result;
use crate::tensor::{ops, Tensor};

/// Anything that maps image batches to class logits and lets gradients flow
/// back into a tracked input. Attack code is written against this surface so
/// it works for both the real classifier and analytically solvable models.
pub trait DifferentiableModel {
    fn num_classes(&self) -> usize;

    /// Logits [n, classes]. Must honor the input's tape: if `x` is tracked,
    /// the returned logits are differentiable with respect to it.
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl DifferentiableModel for Classifier {
    fn num_classes(&self) -> usize {
        Classifier::num_classes(self)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_eval(x)
    }
}

/// Linear classifier on raw pixels: logits = W x + b with one full-image
/// kernel per class. Its optimal attacks have closed forms, which makes it
/// the reference model for attack correctness tests.
pub struct LinearModel {
    /// [classes, 3, h, w]
    pub weight: Tensor,
    /// [classes]
    pub bias: Tensor,
}

impl LinearModel {
    pub fn new(weight: Tensor, bias: Tensor) -> LinearModel {
        let (k, _, _, _) = weight.dims4();
        assert_eq!(bias.shape(), &[k], "linear model: bias shape");
        LinearModel { weight, bias }
    }

    /// Weight row for one class as a flat slice.
    pub fn class_weights(&self, class: usize) -> &[f32] {
        let row = self.weight.numel() / self.weight.shape()[0];
        &self.weight.data()[class * row..(class + 1) * row]
    }
}

impl DifferentiableModel for LinearModel {
    fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, _, _) = x.dims4();
        let out = ops::conv2d(x, &self.weight, &self.bias, 1, 0);
        Ok(ops::reshape(&out, vec![n, self.num_classes()]))
    }
}

/// Fraction of samples whose argmax logit disagrees with the label.
pub fn error_rate(model: &dyn DifferentiableModel, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.logits(x)?;
    let (n, k) = logits.dims2();
    assert_eq!(labels.len(), n, "error_rate: label count mismatch");
    let mut wrong = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if pred != labels[i] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn linear_model_matches_dot_product() {
        let w = Tensor::from_vec(vec![2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        let b = Tensor::from_vec(vec![2], vec![0.5, -0.5]);
        let m = LinearModel::new(w, b);
        let x = Tensor::from_vec(vec![1, 3, 1, 1], vec![2.0, 3.0, 4.0]);
        let l = m.logits(&x).unwrap();
        assert_eq!(l.to_vec(), vec![2.5, 6.5]);
    }

    #[test]
    fn linear_model_input_gradient_is_class_weight_difference() {
        let w = Tensor::from_vec(vec![2, 3, 1, 1], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let b = Tensor::zeros(vec![2]);
        let m = LinearModel::new(w, b);
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![1, 3, 1, 1], vec![0.1, 0.2, 0.3]));
        let logits = m.logits(&x).unwrap();
        // d(z1 - z0)/dx = w1 - w0.
        let diff = ops::sub(
            &ops::gather_class(&logits, &[1]),
            &ops::gather_class(&logits, &[0]),
        );
        let loss = ops::sum_all(&diff);
        tape.backward(&loss);
        assert_eq!(tape.grad(&x).unwrap(), vec![-2.0, -2.0, -2.0]);
    }

    #[test]
    fn error_rate_counts_mismatches() {
        let w = Tensor::from_vec(vec![2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let m = LinearModel::new(w, Tensor::zeros(vec![2]));
        let x = Tensor::from_vec(vec![2, 3, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(error_rate(&m, &x, &[0, 1]).unwrap(), 0.0);
        assert_eq!(error_rate(&m, &x, &[1, 1]).unwrap(), 0.5);
    }
}
