//! All-convolutional classifier with batch normalization.
//!
//! Six conv layers, two stride-2 reductions, global average pooling into
//! class logits. Training forwards use batch statistics; eval forwards are
//! deterministic per sample, which also makes them the right surface for
//! gradient-based attacks.

use std::path::Path;

use super::checkpoint::{self, Entry};
use super::layers::{BatchNorm2d, Conv2d, Init};
use crate::error::{Result, VitaError};
use crate::rng::Rng;
use crate::tensor::ops;
use crate::tensor::optim::Parameter;
use crate::tensor::{Tape, Tensor};

#[derive(Clone)]
pub struct Classifier {
    width: usize,
    num_classes: usize,
    c0: Conv2d,
    bn0: BatchNorm2d,
    c1: Conv2d,
    bn1: BatchNorm2d,
    c2: Conv2d,
    bn2: BatchNorm2d,
    c3: Conv2d,
    bn3: BatchNorm2d,
    c4: Conv2d,
    bn4: BatchNorm2d,
    head: Conv2d,
}

impl Classifier {
    pub fn new(width: usize, num_classes: usize, rng: &mut Rng) -> Classifier {
        assert!(width >= 1 && num_classes >= 2, "classifier: bad width or class count");
        let init = Init::KaimingRelu;
        Classifier {
            width,
            num_classes,
            c0: Conv2d::new("c0", 3, width, 3, 1, 1, init, rng),
            bn0: BatchNorm2d::new("bn0", width),
            c1: Conv2d::new("c1", width, 2 * width, 3, 2, 1, init, rng),
            bn1: BatchNorm2d::new("bn1", 2 * width),
            c2: Conv2d::new("c2", 2 * width, 2 * width, 3, 1, 1, init, rng),
            bn2: BatchNorm2d::new("bn2", 2 * width),
            c3: Conv2d::new("c3", 2 * width, 4 * width, 3, 2, 1, init, rng),
            bn3: BatchNorm2d::new("bn3", 4 * width),
            c4: Conv2d::new("c4", 4 * width, 4 * width, 3, 1, 1, init, rng),
            bn4: BatchNorm2d::new("bn4", 4 * width),
            head: Conv2d::new("head", 4 * width, num_classes, 1, 1, 0, init, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(VitaError::Shape(format!("classifier expects 3 channels, got {c}")));
        }
        if h != w || h % 4 != 0 || h < 4 {
            return Err(VitaError::Shape(format!(
                "classifier needs square extents divisible by 4, got {h}x{w}"
            )));
        }
        Ok((h, w))
    }

    /// Training-mode logits [n, classes]. Updates batch-norm running stats.
    pub fn forward_train(&mut self, x: &Tensor, tape: Option<&Tape>) -> Result<Tensor> {
        let (h, _) = self.check_input(x)?;
        let a = ops::relu(&self.bn0.forward_train(&self.c0.forward(x, tape), tape));
        let a = ops::relu(&self.bn1.forward_train(&self.c1.forward(&a, tape), tape));
        let a = ops::relu(&self.bn2.forward_train(&self.c2.forward(&a, tape), tape));
        let a = ops::relu(&self.bn3.forward_train(&self.c3.forward(&a, tape), tape));
        let a = ops::relu(&self.bn4.forward_train(&self.c4.forward(&a, tape), tape));
        let a = self.head.forward(&a, tape);
        let pooled = ops::avg_pool2d(&a, h / 4);
        let n = pooled.shape()[0];
        Ok(ops::reshape(&pooled, vec![n, self.num_classes]))
    }

    /// Inference-mode logits using running statistics. Gradients flow into
    /// `x` when it is tracked; weights stay frozen.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let (h, _) = self.check_input(x)?;
        let a = ops::relu(&self.bn0.forward_eval(&self.c0.forward(x, None), None));
        let a = ops::relu(&self.bn1.forward_eval(&self.c1.forward(&a, None), None));
        let a = ops::relu(&self.bn2.forward_eval(&self.c2.forward(&a, None), None));
        let a = ops::relu(&self.bn3.forward_eval(&self.c3.forward(&a, None), None));
        let a = ops::relu(&self.bn4.forward_eval(&self.c4.forward(&a, None), None));
        let a = self.head.forward(&a, None);
        let pooled = ops::avg_pool2d(&a, h / 4);
        let n = pooled.shape()[0];
        Ok(ops::reshape(&pooled, vec![n, self.num_classes]))
    }

    /// Argmax class per sample from inference-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_eval(x)?;
        let (n, k) = logits.dims2();
        Ok((0..n)
            .map(|i| {
                let row = &logits.data()[i * k..(i + 1) * k];
                // Ties go to the lowest class index.
                let mut best = 0usize;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    fn norms(&self) -> Vec<&BatchNorm2d> {
        vec![&self.bn0, &self.bn1, &self.bn2, &self.bn3, &self.bn4]
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        vec![&mut self.bn0, &mut self.bn1, &mut self.bn2, &mut self.bn3, &mut self.bn4]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = Vec::new();
        out.extend(self.c0.params());
        out.extend(self.bn0.params());
        out.extend(self.c1.params());
        out.extend(self.bn1.params());
        out.extend(self.c2.params());
        out.extend(self.bn2.params());
        out.extend(self.c3.params());
        out.extend(self.bn3.params());
        out.extend(self.c4.params());
        out.extend(self.bn4.params());
        out.extend(self.head.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        out.extend(self.c0.params_mut());
        out.extend(self.bn0.params_mut());
        out.extend(self.c1.params_mut());
        out.extend(self.bn1.params_mut());
        out.extend(self.c2.params_mut());
        out.extend(self.bn2.params_mut());
        out.extend(self.c3.params_mut());
        out.extend(self.bn3.params_mut());
        out.extend(self.c4.params_mut());
        out.extend(self.bn4.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    pub fn arch_descriptor(&self) -> String {
        format!("classifier;width={};classes={}", self.width, self.num_classes)
    }

    pub fn state_entries(&self) -> Vec<Entry> {
        let mut entries: Vec<Entry> = self
            .parameters()
            .into_iter()
            .map(|p| Entry::new(p.name.clone(), p.value().shape().to_vec(), p.value().to_vec()))
            .collect();
        for bn in self.norms() {
            for (name, shape, data) in bn.buffers() {
                entries.push(Entry::new(name, shape, data));
            }
        }
        entries
    }

    pub fn save(&self, path: &Path, extra: &str) -> Result<()> {
        let desc = if extra.is_empty() {
            self.arch_descriptor()
        } else {
            format!("{};{extra}", self.arch_descriptor())
        };
        checkpoint::save(path, &desc, &self.state_entries())
    }

    pub fn load(path: &Path) -> Result<Classifier> {
        let (desc, entries) = checkpoint::load(path)?;
        let (kind, fields) = checkpoint::parse_descriptor(&desc);
        if kind != "classifier" {
            return Err(VitaError::Data(format!(
                "checkpoint descriptor '{desc}' does not describe a classifier"
            )));
        }
        let width = checkpoint::descriptor_usize(&fields, "width", &desc)?;
        let classes = checkpoint::descriptor_usize(&fields, "classes", &desc)?;
        let mut rng = crate::rng::rng_from_seed(0);
        let mut net = Classifier::new(width, classes, &mut rng);
        net.load_entries(entries)?;
        Ok(net)
    }

    pub fn load_entries(&mut self, entries: Vec<Entry>) -> Result<()> {
        let mut expected: Vec<String> = self.parameters().iter().map(|p| p.name.clone()).collect();
        let n_params = expected.len();
        for bn in self.norms() {
            expected.extend(bn.buffer_names());
        }
        let mut staged: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        checkpoint::apply_entries(entries, &expected, |name, shape, data| {
            staged.push((name.to_string(), shape.to_vec(), data));
            Ok(())
        })?;
        for ((name, shape, data), p) in staged[..n_params].iter().zip(self.parameters_mut()) {
            if shape != p.value().shape() {
                return Err(VitaError::Data(format!(
                    "checkpoint tensor '{name}' has shape {shape:?}, expected {:?}",
                    p.value().shape()
                )));
            }
            p.set_value(Tensor::from_vec(shape.clone(), data.clone()));
        }
        for (name, _, data) in &staged[n_params..] {
            let applied = self.norms_mut().into_iter().any(|bn| bn.set_buffer(name, data));
            if !applied {
                return Err(VitaError::Data(format!(
                    "checkpoint buffer '{name}' does not fit any normalization layer"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn logit_shapes() {
        let mut rng = rng_from_seed(12);
        let mut net = Classifier::new(4, 3, &mut rng);
        let x = Tensor::randn(vec![5, 3, 16, 16], 0.3, &mut rng).clamp01();
        assert_eq!(net.forward_train(&x, None).unwrap().shape(), &[5, 3]);
        assert_eq!(net.forward_eval(&x).unwrap().shape(), &[5, 3]);
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let mut rng = rng_from_seed(13);
        let mut net = Classifier::new(4, 2, &mut rng);
        let warm = Tensor::randn(vec![8, 3, 8, 8], 0.3, &mut rng).clamp01();
        let _ = net.forward_train(&warm, None).unwrap();

        let batch = Tensor::randn(vec![4, 3, 8, 8], 0.3, &mut rng).clamp01();
        let all = net.forward_eval(&batch).unwrap();
        let one = net.forward_eval(&batch.select_sample(2)).unwrap();
        for j in 0..2 {
            assert!((all.data()[2 * 2 + j] - one.data()[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn trains_on_a_trivial_rule() {
        // Bright vs dark images: a few steps should separate them.
        let mut rng = rng_from_seed(14);
        let mut net = Classifier::new(4, 2, &mut rng);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..16 {
            let bright = i % 2 == 0;
            let base = if bright { 0.8 } else { 0.2 };
            let img = crate::tensor::ops::add_scalar(&Tensor::randn(vec![1, 3, 8, 8], 0.05, &mut rng), base).clamp01();
            xs.push(img);
            ys.push(usize::from(!bright));
        }
        let x = Tensor::stack_samples(&xs);
        for _ in 0..30 {
            let tape = Tape::new();
            let logits = net.forward_train(&x, Some(&tape)).unwrap();
            let loss = ops::cross_entropy(&logits, &ys).unwrap();
            tape.backward(&loss);
            for p in net.parameters_mut() {
                p.accumulate_grad_from(&tape);
                p.sgd_momentum_step(0.05, 0.9);
                p.zero_grad();
            }
        }
        let preds = net.predict(&x).unwrap();
        let correct = preds.iter().zip(&ys).filter(|(p, y)| p == y).count();
        assert!(correct >= 15, "only {correct}/16 correct");
    }

    #[test]
    fn checkpoint_preserves_running_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut rng = rng_from_seed(15);
        let mut net = Classifier::new(4, 2, &mut rng);
        let warm = Tensor::randn(vec![8, 3, 8, 8], 0.3, &mut rng).clamp01();
        let _ = net.forward_train(&warm, None).unwrap();
        net.save(&path, "epoch=1").unwrap();

        let restored = Classifier::load(&path).unwrap();
        let x = Tensor::randn(vec![2, 3, 8, 8], 0.3, &mut rng).clamp01();
        assert_eq!(
            net.forward_eval(&x).unwrap().to_vec(),
            restored.forward_eval(&x).unwrap().to_vec()
        );
    }
}
