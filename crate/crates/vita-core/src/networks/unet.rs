//! U-Net translator.
//!
//! `depth` downsampling stages with skip connections, instance
//! normalization, and a sigmoid output so translated images stay inside
//! [0, 1]. The network maps a perturbed image back onto the clean-image
//! manifold; it never changes spatial extent, so inputs must be divisible
//! by 2^depth.

use std::path::Path;

use super::checkpoint::{self, Entry};
use super::layers::{Conv2d, ConvTranspose2d, Init};
use crate::error::{Result, VitaError};
use crate::rng::Rng;
use crate::tensor::ops;
use crate::tensor::optim::Parameter;
use crate::tensor::{Tape, Tensor};

const LRELU_SLOPE: f32 = 0.2;
const NORM_EPS: f32 = 1e-5;

#[derive(Clone)]
pub struct UNet {
    base: usize,
    depth: usize,
    /// Stride-1 feature convs, one per resolution, finest first.
    encs: Vec<Conv2d>,
    /// Stride-2 downsamplers between resolutions.
    downs: Vec<Conv2d>,
    mid: Conv2d,
    /// Stride-2 upsamplers, coarsest first.
    ups: Vec<ConvTranspose2d>,
    /// Post-concat convs matching `ups`.
    decs: Vec<Conv2d>,
    out: Conv2d,
}

impl UNet {
    /// Build with GAN-style N(0, 0.02) weights. `base` is the channel count
    /// at full resolution; each deeper stage doubles it.
    pub fn new(base: usize, depth: usize, rng: &mut Rng) -> UNet {
        assert!(base >= 1, "unet: base channels must be positive");
        assert!(depth >= 1, "unet: depth must be at least 1");
        let init = Init::Normal(0.02);
        let ch = |i: usize| base << i;

        let mut encs = Vec::with_capacity(depth);
        let mut downs = Vec::with_capacity(depth);
        for i in 0..depth {
            let cin = if i == 0 { 3 } else { ch(i) };
            encs.push(Conv2d::new(&format!("enc{i}"), cin, ch(i), 3, 1, 1, init, rng));
            downs.push(Conv2d::new(&format!("down{i}"), ch(i), ch(i + 1), 3, 2, 1, init, rng));
        }
        let mid = Conv2d::new("mid", ch(depth), ch(depth), 3, 1, 1, init, rng);
        let mut ups = Vec::with_capacity(depth);
        let mut decs = Vec::with_capacity(depth);
        for i in (0..depth).rev() {
            ups.push(ConvTranspose2d::new(&format!("up{i}"), ch(i + 1), ch(i), 2, 2, 0, init, rng));
            decs.push(Conv2d::new(&format!("dec{i}"), 2 * ch(i), ch(i), 3, 1, 1, init, rng));
        }
        let out = Conv2d::new("out", base, 3, 3, 1, 1, init, rng);
        UNet { base, depth, encs, downs, mid, ups, decs, out }
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn forward(&self, x: &Tensor, tape: Option<&Tape>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        if c != 3 {
            return Err(VitaError::Shape(format!("unet expects 3 channels, got {c}")));
        }
        let m = 1usize << self.depth;
        if h % m != 0 || w % m != 0 || h < m || w < m {
            let pad = |v: usize| v.div_ceil(m) * m.max(1);
            return Err(VitaError::Shape(format!(
                "unet of depth {} needs spatial extents divisible by {m}, got {h}x{w}; \
                 pad to {}x{}",
                self.depth,
                pad(h),
                pad(w)
            )));
        }
        let act_enc = |t: &Tensor| ops::leaky_relu(&ops::instance_norm(t, NORM_EPS), LRELU_SLOPE);
        let act_dec = |t: &Tensor| ops::relu(&ops::instance_norm(t, NORM_EPS));

        let mut skips = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for i in 0..self.depth {
            let skip = act_enc(&self.encs[i].forward(&cur, tape));
            cur = act_enc(&self.downs[i].forward(&skip, tape));
            skips.push(skip);
        }
        cur = act_enc(&self.mid.forward(&cur, tape));
        for (j, i) in (0..self.depth).rev().enumerate() {
            let up = act_dec(&self.ups[j].forward(&cur, tape));
            let cat = ops::concat_channels(&up, &skips[i]);
            cur = act_dec(&self.decs[j].forward(&cat, tape));
        }
        Ok(ops::sigmoid(&self.out.forward(&cur, tape)))
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for i in 0..self.depth {
            out.extend(self.encs[i].params());
            out.extend(self.downs[i].params());
        }
        out.extend(self.mid.params());
        for j in 0..self.depth {
            out.extend(self.ups[j].params());
            out.extend(self.decs[j].params());
        }
        out.extend(self.out.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = Vec::new();
        for (enc, down) in self.encs.iter_mut().zip(self.downs.iter_mut()) {
            out.extend(enc.params_mut());
            out.extend(down.params_mut());
        }
        out.extend(self.mid.params_mut());
        for (up, dec) in self.ups.iter_mut().zip(self.decs.iter_mut()) {
            out.extend(up.params_mut());
            out.extend(dec.params_mut());
        }
        out.extend(self.out.params_mut());
        out
    }

    pub fn arch_descriptor(&self) -> String {
        format!("unet;base={};depth={}", self.base, self.depth)
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

    pub fn load(path: &Path) -> Result<UNet> {
        let (desc, entries) = checkpoint::load(path)?;
        let (kind, fields) = checkpoint::parse_descriptor(&desc);
        if kind != "unet" {
            return Err(VitaError::Data(format!(
                "checkpoint descriptor '{desc}' does not describe a unet"
            )));
        }
        let base = checkpoint::descriptor_usize(&fields, "base", &desc)?;
        let depth = checkpoint::descriptor_usize(&fields, "depth", &desc)?;
        let mut rng = crate::rng::rng_from_seed(0);
        let mut net = UNet::new(base, depth, &mut rng);
        net.load_entries(entries)?;
        Ok(net)
    }

    pub fn load_entries(&mut self, entries: Vec<Entry>) -> Result<()> {
        let expected: Vec<String> = self.parameters().iter().map(|p| p.name.clone()).collect();
        let mut staged: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        checkpoint::apply_entries(entries, &expected, |name, shape, data| {
            staged.push((name.to_string(), shape.to_vec(), data));
            Ok(())
        })?;
        for ((name, shape, data), p) in staged.into_iter().zip(self.parameters_mut()) {
            debug_assert_eq!(name, p.name);
            if shape != p.value().shape() {
                return Err(VitaError::Data(format!(
                    "checkpoint tensor '{name}' has shape {shape:?}, expected {:?}",
                    p.value().shape()
                )));
            }
            p.set_value(Tensor::from_vec(shape, data));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn forward_preserves_shape_and_range() {
        let mut rng = rng_from_seed(5);
        let net = UNet::new(8, 2, &mut rng);
        let x = Tensor::randn(vec![2, 3, 16, 16], 0.3, &mut rng).clamp01();
        let y = net.forward(&x, None).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn depth_three_works_on_divisible_extents() {
        let mut rng = rng_from_seed(9);
        let net = UNet::new(4, 3, &mut rng);
        let x = Tensor::randn(vec![1, 3, 32, 32], 0.3, &mut rng).clamp01();
        let y = net.forward(&x, None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        assert_eq!(net.parameters().len(), 2 * (3 + 3 + 1 + 3 + 3 + 1));
    }

    #[test]
    fn rejects_bad_extents_with_padding_hint() {
        let mut rng = rng_from_seed(5);
        let net = UNet::new(4, 2, &mut rng);
        let x = Tensor::zeros(vec![1, 3, 18, 18]);
        let err = net.forward(&x, None).unwrap_err().to_string();
        assert!(err.contains("pad to 20x20"), "got: {err}");
        let x = Tensor::zeros(vec![1, 4, 16, 16]);
        assert!(net.forward(&x, None).is_err());
        // Depth 3 rejects extents a depth-2 net would accept.
        let net3 = UNet::new(4, 3, &mut rng);
        let x = Tensor::zeros(vec![1, 3, 20, 20]);
        let err = net3.forward(&x, None).unwrap_err().to_string();
        assert!(err.contains("divisible by 8"), "got: {err}");
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut rng = rng_from_seed(6);
        let mut net = UNet::new(4, 2, &mut rng);
        let x = Tensor::randn(vec![1, 3, 8, 8], 0.3, &mut rng).clamp01();
        let tape = Tape::new();
        let y = net.forward(&x, Some(&tape)).unwrap();
        let loss = ops::mean_all(&y);
        tape.backward(&loss);
        for p in net.parameters_mut() {
            p.accumulate_grad_from(&tape);
            let norm = p.grad_l2_norm();
            assert!(norm.is_finite(), "{}: non-finite grad", p.name);
            assert!(norm > 0.0, "{}: zero grad", p.name);
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut rng = rng_from_seed(7);
        let net = UNet::new(4, 3, &mut rng);
        let x = Tensor::randn(vec![1, 3, 8, 8], 0.3, &mut rng).clamp01();
        let y = net.forward(&x, None).unwrap();
        net.save(&path, "epoch=3").unwrap();

        let restored = UNet::load(&path).unwrap();
        assert_eq!(restored.depth(), 3);
        let y2 = restored.forward(&x, None).unwrap();
        assert_eq!(y.to_vec(), y2.to_vec());
    }
}
