//! The corruption battery: fifteen image corruptions at five severities.
//!
//! Generators are pure functions of (image, parameters, seed); the same cell
//! of the severity grid always produces the same pixels for the same seed.
//! Corruptions are evaluation-only and must never leak into training-time
//! augmentation, which lives in [`crate::augment`].

pub mod diamond;
pub mod jpeg;
pub mod severity;
pub mod suite;

pub use severity::SeverityTable;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitaError};
use crate::imageops::{
    bilinear_reflect, convolve2d_reflect, gaussian_blur, luma, reflect_index,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Severity levels, mildest first.
pub const SEVERITIES: [usize; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Noise,
    Blur,
    Weather,
    Digital,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Noise => "noise",
            Category::Blur => "blur",
            Category::Weather => "weather",
            Category::Digital => "digital",
        }
    }
}

impl CorruptionKind {
    /// Canonical evaluation order.
    pub const ALL: [CorruptionKind; 15] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GlassBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::ZoomBlur,
        CorruptionKind::Snow,
        CorruptionKind::Frost,
        CorruptionKind::Fog,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Elastic,
        CorruptionKind::Pixelate,
        CorruptionKind::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GlassBlur => "glass_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::ZoomBlur => "zoom_blur",
            CorruptionKind::Snow => "snow",
            CorruptionKind::Frost => "frost",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Elastic => "elastic",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Jpeg => "jpeg",
        }
    }

    pub fn from_name(s: &str) -> Option<CorruptionKind> {
        CorruptionKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn category(self) -> Category {
        use CorruptionKind::*;
        match self {
            GaussianNoise | ShotNoise | ImpulseNoise => Category::Noise,
            DefocusBlur | GlassBlur | MotionBlur | ZoomBlur => Category::Blur,
            Snow | Frost | Fog | Brightness => Category::Weather,
            Contrast | Elastic | Pixelate | Jpeg => Category::Digital,
        }
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Seed for one image in one grid cell: stable under reordering of the
/// evaluation loop and independent across cells.
pub fn corruption_seed(global: u64, kind: CorruptionKind, severity: usize, index: usize) -> u64 {
    crate::rng::derive_seed_indexed(
        derive_seed(global, &format!("corruption/{}/s{severity}", kind.name())),
        "image",
        index as u64,
    )
}

/// Corrupt one CHW image (3 channels, values in [0, 1]). The output is
/// clamped back into [0, 1].
pub fn apply_corruption(
    img: &[f32],
    h: usize,
    w: usize,
    kind: CorruptionKind,
    params: &[f32],
    seed: u64,
) -> Vec<f32> {
    let (arity, _) = severity::param_layout(kind);
    assert_eq!(params.len(), arity, "{}: wrong parameter count", kind.name());
    assert_eq!(img.len(), 3 * h * w, "{}: expected 3x{h}x{w} image", kind.name());
    let mut rng = rng_from_seed(seed);
    let out = match kind {
        CorruptionKind::GaussianNoise => gaussian_noise(img, params[0], &mut rng),
        CorruptionKind::ShotNoise => shot_noise(img, params[0], &mut rng),
        CorruptionKind::ImpulseNoise => impulse_noise(img, params[0], &mut rng),
        CorruptionKind::DefocusBlur => defocus_blur(img, h, w, params[0]),
        CorruptionKind::GlassBlur => glass_blur(img, h, w, params[0], params[1] as isize, params[2] as usize, &mut rng),
        CorruptionKind::MotionBlur => {
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            motion_blur(img, h, w, params[0], angle)
        }
        CorruptionKind::ZoomBlur => zoom_blur(img, h, w, params[0]),
        CorruptionKind::Snow => snow(img, h, w, params, &mut rng),
        CorruptionKind::Frost => frost(img, h, w, params, &mut rng),
        CorruptionKind::Fog => fog(img, h, w, params[0], params[1], &mut rng),
        CorruptionKind::Brightness => img.iter().map(|&v| v + params[0]).collect(),
        CorruptionKind::Contrast => contrast(img, h, w, params[0]),
        CorruptionKind::Elastic => elastic(img, h, w, params[0], params[1], &mut rng),
        CorruptionKind::Pixelate => pixelate(img, h, w, params[0] as usize),
        CorruptionKind::Jpeg => jpeg::jpeg_roundtrip(img, h, w, params[0] as u32),
    };
    out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Corrupt every image of a batch [n, 3, h, w] with per-image seeds derived
/// from `(seed, kind, severity, image index)`.
pub fn corrupt_batch(
    x: &Tensor,
    kind: CorruptionKind,
    severity: usize,
    table: &SeverityTable,
    seed: u64,
) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4();
    if c != 3 {
        return Err(VitaError::Shape(format!("corrupt_batch expects 3 channels, got {c}")));
    }
    let params = table.params(kind, severity)?.to_vec();
    let src = x.data_arc();
    let stride = 3 * h * w;
    let mut out = vec![0.0f32; x.numel()];
    out.par_chunks_mut(stride).enumerate().for_each(|(i, slot)| {
        let s = corruption_seed(seed, kind, severity, i);
        let corrupted =
            apply_corruption(&src[i * stride..(i + 1) * stride], h, w, kind, &params, s);
        slot.copy_from_slice(&corrupted);
    });
    let _ = n;
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

fn gaussian_noise(img: &[f32], sigma: f32, rng: &mut Rng) -> Vec<f32> {
    let normal = Normal::new(0.0f32, sigma).expect("sigma validated");
    img.iter().map(|&v| v + normal.sample(rng)).collect()
}

fn shot_noise(img: &[f32], photons: f32, rng: &mut Rng) -> Vec<f32> {
    img.iter()
        .map(|&v| {
            let lam = (v.max(0.0) * photons) as f64;
            if lam <= 0.0 {
                0.0
            } else {
                let p = Poisson::new(lam).expect("lambda positive");
                (p.sample(rng) as f32) / photons
            }
        })
        .collect()
}

fn impulse_noise(img: &[f32], prob: f32, rng: &mut Rng) -> Vec<f32> {
    img.iter()
        .map(|&v| {
            if rng.random::<f32>() < prob {
                if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Blur
// ---------------------------------------------------------------------------

fn disk_kernel(radius: f32) -> (Vec<f32>, usize) {
    let r = radius.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k = vec![0.0f32; size * size];
    for y in -r..=r {
        for x in -r..=r {
            let d = ((y * y + x * x) as f32).sqrt();
            // Soft-edged disk: full weight inside, linear falloff at the rim.
            let wgt = (radius + 0.5 - d).clamp(0.0, 1.0);
            k[((y + r) * size as isize + (x + r)) as usize] = wgt;
        }
    }
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    (k, size)
}

fn defocus_blur(img: &[f32], h: usize, w: usize, radius: f32) -> Vec<f32> {
    let (k, size) = disk_kernel(radius);
    convolve2d_reflect(img, 3, h, w, &k, size, size)
}

fn glass_blur(
    img: &[f32],
    h: usize,
    w: usize,
    sigma: f32,
    max_delta: isize,
    iters: usize,
    rng: &mut Rng,
) -> Vec<f32> {
    let mut out = gaussian_blur(img, 3, h, w, sigma);
    let plane = h * w;
    for _ in 0..iters {
        for y in 0..h {
            for x in 0..w {
                let d = max_delta as i64;
                let dy = rng.random_range(-d..=d) as isize;
                let dx = rng.random_range(-d..=d) as isize;
                let sy = reflect_index(y as isize + dy, h);
                let sx = reflect_index(x as isize + dx, w);
                for c in 0..3 {
                    out.swap(c * plane + y * w + x, c * plane + sy * w + sx);
                }
            }
        }
    }
    out
}

/// Bilinearly rasterized line kernel of the given length and angle.
fn line_kernel(length: f32, angle: f32) -> (Vec<f32>, usize) {
    let half = (length - 1.0) / 2.0;
    let r = half.ceil() as isize;
    let size = (2 * r + 1) as usize;
    let mut k = vec![0.0f32; size * size];
    let steps = (length.ceil() as usize * 4).max(2);
    let (s, c) = angle.sin_cos();
    for i in 0..steps {
        let t = -half + (2.0 * half) * i as f32 / (steps - 1) as f32;
        let y = r as f32 + t * s;
        let x = r as f32 + t * c;
        let (y0, x0) = (y.floor() as isize, x.floor() as isize);
        let (fy, fx) = (y - y0 as f32, x - x0 as f32);
        let mut splat = |yy: isize, xx: isize, wgt: f32| {
            if yy >= 0 && yy < size as isize && xx >= 0 && xx < size as isize {
                k[(yy * size as isize + xx) as usize] += wgt;
            }
        };
        splat(y0, x0, (1.0 - fy) * (1.0 - fx));
        splat(y0, x0 + 1, (1.0 - fy) * fx);
        splat(y0 + 1, x0, fy * (1.0 - fx));
        splat(y0 + 1, x0 + 1, fy * fx);
    }
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    (k, size)
}

fn motion_blur(img: &[f32], h: usize, w: usize, length: f32, angle: f32) -> Vec<f32> {
    let (k, size) = line_kernel(length, angle);
    convolve2d_reflect(img, 3, h, w, &k, size, size)
}

fn zoom_blur(img: &[f32], h: usize, w: usize, max_zoom: f32) -> Vec<f32> {
    const STEPS: usize = 8;
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut acc = vec![0.0f32; img.len()];
    for s in 0..STEPS {
        let z = 1.0 + (max_zoom - 1.0) * s as f32 / (STEPS - 1) as f32;
        for c in 0..3 {
            let plane = &img[c * h * w..][..h * w];
            for y in 0..h {
                for x in 0..w {
                    let ys = cy + (y as f32 - cy) / z;
                    let xs = cx + (x as f32 - cx) / z;
                    acc[(c * h + y) * w + x] += bilinear_reflect(plane, h, w, ys, xs);
                }
            }
        }
    }
    acc.iter_mut().for_each(|v| *v /= STEPS as f32);
    acc
}

// ---------------------------------------------------------------------------
// Weather
// ---------------------------------------------------------------------------

fn snow(img: &[f32], h: usize, w: usize, p: &[f32], rng: &mut Rng) -> Vec<f32> {
    let (loc, scale, threshold, blur_len, blend) = (p[0], p[1], p[2], p[3], p[4]);
    let normal = Normal::new(loc, scale).expect("scale validated");
    let mut layer: Vec<f32> = (0..h * w)
        .map(|_| {
            let v: f32 = normal.sample(rng);
            if v > threshold {
                v
            } else {
                0.0
            }
        })
        .collect();
    // Streak the flakes along a falling direction.
    let angle = rng.random_range(-3.0 * std::f32::consts::FRAC_PI_4..-std::f32::consts::FRAC_PI_4);
    layer = convolve2d_reflect(&layer, 1, h, w, &line_kernel(blur_len, angle).0, {
        let half = ((blur_len - 1.0) / 2.0).ceil() as usize;
        2 * half + 1
    }, {
        let half = ((blur_len - 1.0) / 2.0).ceil() as usize;
        2 * half + 1
    });

    // Whiten the scene a little, then lay the flakes on top.
    let lum = luma(img, h, w);
    let plane = h * w;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for i in 0..plane {
            let x = img[c * plane + i];
            let whitened = x.max(lum[i] * 1.5 + 0.5);
            out[c * plane + i] = blend * x + (1.0 - blend) * whitened + layer[i];
        }
    }
    out
}

/// Smallest diamond-square grid (2^k + 1) covering both extents, cropped.
fn plasma(h: usize, w: usize, roughness: f32, seed: u64) -> Vec<f32> {
    let mut n = 3;
    while n < h.max(w) {
        n = (n - 1) * 2 + 1;
    }
    let field = diamond::diamond_square(n, roughness, seed);
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        out[y * w..(y + 1) * w].copy_from_slice(&field[y * n..y * n + w]);
    }
    out
}

fn frost(img: &[f32], h: usize, w: usize, p: &[f32], rng: &mut Rng) -> Vec<f32> {
    let (keep, add, threshold, roughness) = (p[0], p[1], p[2], p[3]);
    let field = plasma(h, w, roughness, rng.random::<u64>());
    let plane = h * w;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for i in 0..plane {
            let crystal = ((field[i] - threshold) / (1.0 - threshold)).clamp(0.0, 1.0);
            out[c * plane + i] = keep * img[c * plane + i] + add * crystal;
        }
    }
    out
}

fn fog(img: &[f32], h: usize, w: usize, alpha: f32, roughness: f32, rng: &mut Rng) -> Vec<f32> {
    let field = plasma(h, w, roughness, rng.random::<u64>());
    let plane = h * w;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for i in 0..plane {
            let x = img[c * plane + i];
            out[c * plane + i] = x + alpha * field[i] * (1.0 - x);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Digital
// ---------------------------------------------------------------------------

fn contrast(img: &[f32], h: usize, w: usize, factor: f32) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        let slice = &img[c * plane..(c + 1) * plane];
        let mean: f32 = slice.iter().sum::<f32>() / plane as f32;
        for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(slice) {
            *o = (v - mean) * factor + mean;
        }
    }
    out
}

fn elastic(img: &[f32], h: usize, w: usize, alpha: f32, sigma: f32, rng: &mut Rng) -> Vec<f32> {
    let mut dy: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    let mut dx: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    dy = gaussian_blur(&dy, 1, h, w, sigma);
    dx = gaussian_blur(&dx, 1, h, w, sigma);
    // Smoothing shrinks the amplitude; rescale so the peak displacement is
    // alpha pixels.
    for d in [&mut dy, &mut dx] {
        let peak = d.iter().fold(0.0f32, |a, &v| a.max(v.abs())).max(1e-6);
        let s = alpha / peak;
        d.iter_mut().for_each(|v| *v *= s);
    }
    let plane = h * w;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        let src = &img[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                out[c * plane + i] = bilinear_reflect(src, h, w, y as f32 + dy[i], x as f32 + dx[i]);
            }
        }
    }
    out
}

fn pixelate(img: &[f32], h: usize, w: usize, factor: usize) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0f32; img.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = (y / factor) * factor;
                let sx = (x / factor) * factor;
                out[c * plane + y * w + x] = img[c * plane + sy * w + sx];
            }
        }
    }
    out
}
