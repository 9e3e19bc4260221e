//! Building blocks shared by the translator, discriminator, and classifier.

use crate::rng::Rng;
use crate::tensor::ops;
use crate::tensor::optim::Parameter;
use crate::tensor::{Tape, Tensor};

/// Weight initialization family.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Zero-mean gaussian with fixed standard deviation (GAN convention).
    Normal(f32),
    /// He initialization scaled for relu fan-in.
    KaimingRelu,
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Conv2d {
        let std = match init {
            Init::Normal(s) => s,
            Init::KaimingRelu => (2.0 / (cin * k * k) as f32).sqrt(),
        };
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), Tensor::randn(vec![cout, cin, k, k], std, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            stride,
            padding,
        }
    }

    /// Apply the convolution. Weights are tracked when a tape is supplied;
    /// the input contributes gradients whenever it is tracked itself.
    pub fn forward(&self, x: &Tensor, tape: Option<&Tape>) -> Tensor {
        match tape {
            Some(t) => ops::conv2d(x, &self.weight.tracked(t), &self.bias.tracked(t), self.stride, self.padding),
            None => ops::conv2d(x, self.weight.value(), self.bias.value(), self.stride, self.padding),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut Rng,
    ) -> ConvTranspose2d {
        let std = match init {
            Init::Normal(s) => s,
            Init::KaimingRelu => (2.0 / (cin * k * k) as f32).sqrt(),
        };
        ConvTranspose2d {
            weight: Parameter::new(format!("{name}.weight"), Tensor::randn(vec![cin, cout, k, k], std, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: Option<&Tape>) -> Tensor {
        match tape {
            Some(t) => ops::conv_transpose2d(
                x,
                &self.weight.tracked(t),
                &self.bias.tracked(t),
                self.stride,
                self.padding,
            ),
            None => ops::conv_transpose2d(x, self.weight.value(), self.bias.value(), self.stride, self.padding),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Batch normalization with running statistics.
///
/// Training forwards normalize with current batch statistics and fold them
/// into the running estimates; eval forwards are a fixed affine map, so the
/// output for one image never depends on its batch peers.
#[derive(Clone)]
pub struct BatchNorm2d {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    name: String,
}

impl BatchNorm2d {
    pub fn new(name: &str, c: usize) -> BatchNorm2d {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(vec![c], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(vec![c])),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: 1e-5,
            momentum: 0.1,
            name: name.to_string(),
        }
    }

    pub fn forward_train(&mut self, x: &Tensor, tape: Option<&Tape>) -> Tensor {
        let (out, stats) = match tape {
            Some(t) => ops::batch_norm_train(x, &self.gamma.tracked(t), &self.beta.tracked(t), self.eps),
            None => ops::batch_norm_train(x, self.gamma.value(), self.beta.value(), self.eps),
        };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
            self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * stats.var[c];
        }
        out
    }

    pub fn forward_eval(&self, x: &Tensor, tape: Option<&Tape>) -> Tensor {
        match tape {
            Some(t) => ops::batch_norm_eval(
                x,
                &self.gamma.tracked(t),
                &self.beta.tracked(t),
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
            None => ops::batch_norm_eval(
                x,
                self.gamma.value(),
                self.beta.value(),
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    /// Running statistics as named checkpoint buffers.
    pub fn buffers(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        vec![
            (
                format!("{}.running_mean", self.name),
                vec![self.running_mean.len()],
                self.running_mean.clone(),
            ),
            (
                format!("{}.running_var", self.name),
                vec![self.running_var.len()],
                self.running_var.clone(),
            ),
        ]
    }

    pub fn buffer_names(&self) -> Vec<String> {
        vec![
            format!("{}.running_mean", self.name),
            format!("{}.running_var", self.name),
        ]
    }

    pub fn set_buffer(&mut self, name: &str, data: &[f32]) -> bool {
        if name == format!("{}.running_mean", self.name) && data.len() == self.running_mean.len() {
            self.running_mean.copy_from_slice(data);
            true
        } else if name == format!("{}.running_var", self.name) && data.len() == self.running_var.len() {
            self.running_var.copy_from_slice(data);
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::ops;

    #[test]
    fn conv_layer_tracks_weights_only_with_tape() {
        let mut rng = rng_from_seed(1);
        let layer = Conv2d::new("c", 3, 4, 3, 1, 1, Init::KaimingRelu, &mut rng);
        let x = Tensor::randn(vec![1, 3, 8, 8], 1.0, &mut rng);

        let tape = Tape::new();
        let y = layer.forward(&x, Some(&tape));
        let loss = ops::mean_all(&y);
        tape.backward(&loss);
        let g = tape.grad(&layer.weight.tracked(&tape));
        assert!(g.is_some());

        let y2 = layer.forward(&x, None);
        assert_eq!(y.to_vec(), y2.to_vec());
    }

    #[test]
    fn batch_norm_eval_is_per_sample() {
        let mut rng = rng_from_seed(2);
        let mut bn = BatchNorm2d::new("bn", 3);
        let batch = Tensor::randn(vec![4, 3, 4, 4], 1.0, &mut rng);
        let _ = bn.forward_train(&batch, None);

        // Eval output of sample 0 alone matches its slice inside the batch.
        let full = bn.forward_eval(&batch, None);
        let single = bn.forward_eval(&batch.select_sample(0), None);
        assert_eq!(&full.to_vec()[..single.numel()], &single.to_vec()[..]);
    }

    #[test]
    fn batch_norm_running_stats_move_toward_batch() {
        let mut rng = rng_from_seed(3);
        let mut bn = BatchNorm2d::new("bn", 2);
        let shifted = ops::add_scalar(&Tensor::randn(vec![8, 2, 4, 4], 0.1, &mut rng), 5.0);
        for _ in 0..50 {
            let _ = bn.forward_train(&shifted, None);
        }
        assert!(bn.running_mean.iter().all(|&m| (m - 5.0).abs() < 0.5), "{:?}", bn.running_mean);
    }
}
