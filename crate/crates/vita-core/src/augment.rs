//! Weak augmentations used as vicinal sources during training. Each kind
//! applies a mild geometric or photometric change; the result is always
//! pushed through an L2 difference budget so no augmentation moves an image
//! further than `epsilon2` from its original.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitaError};
use crate::imageops::{affine_warp, resize_bilinear};
use crate::rng::{derive_seed_indexed, rng_from_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakAugKind {
    Rotation,
    Shearing,
    Translating,
    Cropping,
    Scaling,
    Solarize,
    Posterize,
}

impl WeakAugKind {
    pub const ALL: [WeakAugKind; 7] = [
        WeakAugKind::Rotation,
        WeakAugKind::Shearing,
        WeakAugKind::Translating,
        WeakAugKind::Cropping,
        WeakAugKind::Scaling,
        WeakAugKind::Solarize,
        WeakAugKind::Posterize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeakAugKind::Rotation => "rotation",
            WeakAugKind::Shearing => "shearing",
            WeakAugKind::Translating => "translating",
            WeakAugKind::Cropping => "cropping",
            WeakAugKind::Scaling => "scaling",
            WeakAugKind::Solarize => "solarize",
            WeakAugKind::Posterize => "posterize",
        }
    }

    pub fn from_name(s: &str) -> Option<WeakAugKind> {
        WeakAugKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// One augmentation draw: the kind plus the seed that fixes its parameters.
#[derive(Clone, Copy, Debug)]
pub struct WeakAugSpec {
    pub kind: WeakAugKind,
    pub seed: u64,
}

/// Whole-image L2 budget on the augmentation difference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub epsilon2: f32,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig { epsilon2: 0.5 }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon2 > 0.0 {
            Ok(())
        } else {
            Err(VitaError::Config(format!(
                "augmentation budget epsilon2 must be positive, got {}",
                self.epsilon2
            )))
        }
    }
}

fn dims3(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(VitaError::Shape(format!(
            "weak_augment expects a CHW image, got shape {other:?}"
        ))),
    }
}

/// Invert a 2x2 forward map so it can be fed to the inverse-sampling warp.
fn invert2(m: [f32; 4]) -> [f32; 4] {
    let det = m[0] * m[3] - m[1] * m[2];
    [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]
}

fn mild_scale(rng: &mut Rng) -> f32 {
    rng.random_range(0.95f32..=0.96)
}

/// Apply one weak augmentation. Deterministic in `spec.seed`; every
/// continuous parameter is drawn fresh from that seed.
pub fn weak_augment(img: &Tensor, spec: &WeakAugSpec) -> Result<Tensor> {
    let (c, h, w) = dims3(img)?;
    let src = img.data();
    let mut rng = rng_from_seed(spec.seed);
    let out = match spec.kind {
        WeakAugKind::Rotation => {
            let deg = rng.random_range(-5.0f32..=5.0);
            let s = mild_scale(&mut rng);
            let th = deg.to_radians();
            let (sin, cos) = th.sin_cos();
            // Forward map scales by s and rotates by th; warp wants its inverse.
            let m = invert2([s * cos, -s * sin, s * sin, s * cos]);
            affine_warp(src, c, h, w, m, [0.0, 0.0])
        }
        WeakAugKind::Shearing => {
            let deg = rng.random_range(-2.0f32..=2.0);
            let s = mild_scale(&mut rng);
            let k = deg.to_radians().tan();
            let fwd = if rng.random::<bool>() {
                [s, s * k, 0.0, s]
            } else {
                [s, 0.0, s * k, s]
            };
            affine_warp(src, c, h, w, invert2(fwd), [0.0, 0.0])
        }
        WeakAugKind::Translating => {
            let ty = rng.random_range(-0.05f32..=0.05) * h as f32;
            let tx = rng.random_range(-0.05f32..=0.05) * w as f32;
            let s = mild_scale(&mut rng);
            // Forward: dst = s * src + t, so src = (dst - t) / s.
            affine_warp(src, c, h, w, [1.0 / s, 0.0, 0.0, 1.0 / s], [-ty / s, -tx / s])
        }
        WeakAugKind::Cropping => {
            let area = rng.random_range(0.80f32..=0.85);
            let side = area.sqrt();
            let ch = ((h as f32 * side).round() as usize).clamp(1, h);
            let cw = ((w as f32 * side).round() as usize).clamp(1, w);
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            let mut crop = vec![0.0f32; c * ch * cw];
            for chn in 0..c {
                for y in 0..ch {
                    let row = &src[(chn * h + y0 + y) * w + x0..][..cw];
                    crop[(chn * ch + y) * cw..][..cw].copy_from_slice(row);
                }
            }
            resize_bilinear(&crop, c, ch, cw, h, w)
        }
        WeakAugKind::Scaling => {
            let s = rng.random_range(1.05f32..=1.10);
            affine_warp(src, c, h, w, [1.0 / s, 0.0, 0.0, 1.0 / s], [0.0, 0.0])
        }
        WeakAugKind::Solarize => {
            let t = 128.0 / 255.0;
            src.iter().map(|&v| if v > t { 1.0 - v } else { v }).collect()
        }
        WeakAugKind::Posterize => posterize(src, 4),
    };
    Ok(Tensor::from_vec(img.shape().to_vec(), out))
}

/// Keep the top `bits` bits of each 8-bit channel value.
fn posterize(src: &[f32], bits: u32) -> Vec<f32> {
    let mask = (0xffu32 << (8 - bits)) & 0xff;
    src.iter()
        .map(|&v| {
            let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u32;
            (byte & mask) as f32 / 255.0
        })
        .collect()
}

/// Project `x_aug` onto the L2 ball of radius `epsilon2` around `x`, then
/// clamp to [0, 1]. Clamping moves coordinates toward `x` (which is already
/// in range), so it never grows the difference norm.
pub fn enforce_difference_budget(
    x: &Tensor,
    x_aug: &Tensor,
    budget: &BudgetConfig,
) -> Result<Tensor> {
    budget.validate()?;
    if x.shape() != x_aug.shape() {
        return Err(VitaError::Shape(format!(
            "budget enforcement on mismatched shapes {:?} vs {:?}",
            x.shape(),
            x_aug.shape()
        )));
    }
    if x.numel() == 0 {
        return Err(VitaError::Shape("budget enforcement on an empty image".into()));
    }
    let a = x.data();
    let b = x_aug.data();
    let norm: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&p, &q)| ((q - p) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm <= budget.epsilon2 as f64 {
        return Ok(x_aug.clone());
    }
    let scale = budget.epsilon2 as f32 / norm as f32;
    let out: Vec<f32> = a
        .iter()
        .zip(b.iter())
        .map(|(&p, &q)| (p + scale * (q - p)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}

/// Augment a batch [n, c, h, w]: each image gets an independently drawn kind
/// and parameters, then budget enforcement. Seeds derive from `seed` and the
/// image index, so the result is independent of evaluation order.
pub fn augment_batch(x: &Tensor, budget: &BudgetConfig, seed: u64) -> Result<Tensor> {
    budget.validate()?;
    let (n, c, h, w) = x.dims4();
    let src = x.data_arc();
    let stride = c * h * w;
    let mut out = vec![0.0f32; x.numel()];
    let results: Vec<Result<()>> = out
        .par_chunks_mut(stride)
        .enumerate()
        .map(|(i, slot)| {
            let img_seed = derive_seed_indexed(seed, "augment/image", i as u64);
            let mut rng = rng_from_seed(img_seed);
            let kind = WeakAugKind::ALL[rng.random_range(0..WeakAugKind::ALL.len())];
            let img = Tensor::from_vec(
                vec![c, h, w],
                src[i * stride..(i + 1) * stride].to_vec(),
            );
            let spec = WeakAugSpec { kind, seed: derive_seed_indexed(img_seed, "params", 0) };
            let aug = weak_augment(&img, &spec)?;
            let bounded = enforce_difference_budget(&img, &aug, budget)?;
            slot.copy_from_slice(bounded.data());
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    let _ = n;
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}
