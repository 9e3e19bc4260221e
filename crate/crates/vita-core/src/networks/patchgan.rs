//! Conditional PatchGAN discriminator with 1x1 receptive fields.
//!
//! The candidate image is concatenated with its conditioning image along
//! channels and judged pixel by pixel: every output cell is a probability
//! that the candidate pixel is real given the condition pixel. 1x1 kernels
//! keep the decision purely local, which is enough to police per-pixel
//! plausibility and keeps the discriminator from memorizing layout.

use std::path::Path;

use super::checkpoint::{self, Entry};
use super::layers::{Conv2d, Init};
use crate::error::{Result, VitaError};
use crate::rng::Rng;
use crate::tensor::ops;
use crate::tensor::optim::Parameter;
use crate::tensor::{Tape, Tensor};

#[derive(Clone)]
pub struct PatchGan {
    width: usize,
    c0: Conv2d,
    c1: Conv2d,
    head: Conv2d,
}

impl PatchGan {
    pub fn new(width: usize, rng: &mut Rng) -> PatchGan {
        assert!(width >= 1, "patchgan: width must be positive");
        let init = Init::Normal(0.02);
        PatchGan {
            width,
            c0: Conv2d::new("c0", 6, width, 1, 1, 0, init, rng),
            c1: Conv2d::new("c1", width, 2 * width, 1, 1, 0, init, rng),
            head: Conv2d::new("head", 2 * width, 1, 1, 1, 0, init, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Per-pixel real/fake probabilities, shape [n, 1, h, w].
    pub fn forward(&self, condition: &Tensor, candidate: &Tensor, tape: Option<&Tape>) -> Result<Tensor> {
        let (n, c, h, w) = condition.dims4();
        let (n2, c2, h2, w2) = candidate.dims4();
        if c != 3 || c2 != 3 {
            return Err(VitaError::Shape(format!(
                "patchgan expects 3-channel images, got {c} and {c2}"
            )));
        }
        if (n, h, w) != (n2, h2, w2) {
            return Err(VitaError::Shape(format!(
                "patchgan: condition {:?} and candidate {:?} disagree",
                condition.shape(),
                candidate.shape()
            )));
        }
        let x = ops::concat_channels(condition, candidate);
        let x = ops::leaky_relu(&self.c0.forward(&x, tape), 0.2);
        let x = ops::leaky_relu(&self.c1.forward(&x, tape), 0.2);
        Ok(ops::sigmoid(&self.head.forward(&x, tape)))
    }

    /// Zero the head so every output is exactly 0.5: the loss calibration
    /// point for a maximally uncertain discriminator.
    pub fn neutralize_head(&mut self) {
        let w = self.head.weight.value().shape().to_vec();
        self.head.weight.set_value(Tensor::zeros(w));
        let b = self.head.bias.value().shape().to_vec();
        self.head.bias.set_value(Tensor::zeros(b));
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        [&self.c0, &self.c1, &self.head].into_iter().flat_map(Conv2d::params).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.c0.params_mut();
        out.extend(self.c1.params_mut());
        out.extend(self.head.params_mut());
        out
    }

    pub fn arch_descriptor(&self) -> String {
        format!("patchgan;width={}", self.width)
    }

    pub fn state_entries(&self) -> Vec<Entry> {
        self.parameters()
            .into_iter()
            .map(|p| Entry::new(p.name.clone(), p.value().shape().to_vec(), p.value().to_vec()))
            .collect()
    }

    pub fn save(&self, path: &Path, extra: &str) -> Result<()> {
        let desc = if extra.is_empty() {
            self.arch_descriptor()
        } else {
            format!("{};{extra}", self.arch_descriptor())
        };
        checkpoint::save(path, &desc, &self.state_entries())
    }

    pub fn load(path: &Path) -> Result<PatchGan> {
        let (desc, entries) = checkpoint::load(path)?;
        let (kind, fields) = checkpoint::parse_descriptor(&desc);
        if kind != "patchgan" {
            return Err(VitaError::Data(format!(
                "checkpoint descriptor '{desc}' does not describe a patchgan"
            )));
        }
        let width = checkpoint::descriptor_usize(&fields, "width", &desc)?;
        let mut rng = crate::rng::rng_from_seed(0);
        let mut net = PatchGan::new(width, &mut rng);
        net.load_entries(entries)?;
        Ok(net)
    }

    pub fn load_entries(&mut self, entries: Vec<Entry>) -> Result<()> {
        let expected: Vec<String> = self.parameters().iter().map(|p| p.name.clone()).collect();
        let mut staged: Vec<(Vec<usize>, Vec<f32>)> = Vec::new();
        checkpoint::apply_entries(entries, &expected, |_, shape, data| {
            staged.push((shape.to_vec(), data));
            Ok(())
        })?;
        for ((shape, data), p) in staged.into_iter().zip(self.parameters_mut()) {
            if shape != p.value().shape() {
                return Err(VitaError::Data(format!(
                    "checkpoint tensor '{}' has shape {shape:?}, expected {:?}",
                    p.name,
                    p.value().shape()
                )));
            }
            p.set_value(Tensor::from_vec(shape, data));
        }
        Ok(())
    }
}
