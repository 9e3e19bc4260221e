//! Plain image-space helpers shared by augmentations and corruptions.
//!
//! Everything here operates on untracked CHW f32 slices; gradients never
//! flow through data generation, only through the networks consuming it.

/// Reflect an index into [0, n) without repeating the border sample
/// (symmetric padding: -1 maps to 0, n maps to n - 1).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let n = n as isize;
    let period = 2 * n;
    let mut j = i % period;
    if j < 0 {
        j += period;
    }
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Clamp an index into [0, n).
#[inline]
pub fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Bilinear sample of one plane at fractional coordinates with symmetric
/// reflection outside the grid.
pub fn bilinear_reflect(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let get = |yy: isize, xx: isize| plane[reflect_index(yy, h) * w + reflect_index(xx, w)];
    let a = get(y0, x0);
    let b = get(y0, x0 + 1);
    let c = get(y0 + 1, x0);
    let d = get(y0 + 1, x0 + 1);
    a * (1.0 - fy) * (1.0 - fx) + b * (1.0 - fy) * fx + c * fy * (1.0 - fx) + d * fy * fx
}

/// One-dimensional gaussian taps with radius ceil(3 sigma), normalized.
pub fn gaussian_kernel1d(sigma: f32) -> Vec<f32> {
    assert!(sigma > 0.0, "gaussian_kernel1d: sigma must be positive");
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let denom = 2.0 * sigma * sigma;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        k.push((-d * d / denom).exp());
    }
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable gaussian blur of a CHW image with symmetric borders.
pub fn gaussian_blur(img: &[f32], c: usize, h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel1d(sigma);
    let radius = k.len() / 2;
    let mut tmp = vec![0.0f32; img.len()];
    // Horizontal pass.
    for ch in 0..c {
        for y in 0..h {
            let row = &img[(ch * h + y) * w..][..w];
            let out = &mut tmp[(ch * h + y) * w..][..w];
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let xx = x as isize + t as isize - radius as isize;
                    acc += kv * row[reflect_index(xx, w)];
                }
                out[x] = acc;
            }
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; img.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let yy = y as isize + t as isize - radius as isize;
                    acc += kv * tmp[(ch * h + reflect_index(yy, h)) * w + x];
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Convolve a CHW image with an arbitrary 2d kernel, symmetric borders.
pub fn convolve2d_reflect(img: &[f32], c: usize, h: usize, w: usize, kernel: &[f32], kh: usize, kw: usize) -> Vec<f32> {
    assert_eq!(kernel.len(), kh * kw, "convolve2d_reflect: kernel size");
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let mut out = vec![0.0f32; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let yy = y as isize + ky as isize - ry;
                        let xx = x as isize + kx as isize - rx;
                        acc += kernel[ky * kw + kx] * plane[reflect_index(yy, h) * w + reflect_index(xx, w)];
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    out
}

/// Warp a CHW image through the inverse affine map
/// `(ys, xs) = m * (y - cy, x - cx) + (ty, tx) + (cy, cx)`, sampling with
/// bilinear interpolation and symmetric borders. `m` is row-major 2x2 and
/// coordinates are centered on the image midpoint.
pub fn affine_warp(
    img: &[f32],
    c: usize,
    h: usize,
    w: usize,
    m: [f32; 4],
    translate: [f32; 2],
) -> Vec<f32> {
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; img.len()];
    for ch in 0..c {
        let plane = &img[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let ys = m[0] * dy + m[1] * dx + translate[0] + cy;
                let xs = m[2] * dy + m[3] * dx + translate[1] + cx;
                out[(ch * h + y) * w + x] = bilinear_reflect(plane, h, w, ys, xs);
            }
        }
    }
    out
}

/// Bilinear resize of a CHW image to (oh, ow) using align-corners-false
/// sampling (pixel centers at half-integers).
pub fn resize_bilinear(img: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert!(oh > 0 && ow > 0, "resize_bilinear: empty target");
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &img[ch * h * w..][..h * w];
        for y in 0..oh {
            let ys = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..ow {
                let xs = (x as f32 + 0.5) * sx - 0.5;
                out[(ch * oh + y) * ow + x] = bilinear_reflect(plane, h, w, ys, xs);
            }
        }
    }
    out
}

/// Per-pixel luma (Rec. 601) of an RGB CHW image.
pub fn luma(img: &[f32], h: usize, w: usize) -> Vec<f32> {
    let plane = h * w;
    assert!(img.len() >= 3 * plane, "luma: expected 3 channels");
    (0..plane)
        .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
        .collect()
}

/// Mean absolute difference between two equally sized buffers.
pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}
