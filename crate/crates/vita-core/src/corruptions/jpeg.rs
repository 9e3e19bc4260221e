//! JPEG compression artifacts via the real transform pipeline: YCbCr
//! conversion, 8x8 block DCT, quality-scaled quantization, and inverse.
//! Entropy coding is lossless so it is skipped; the artifacts come entirely
//! from quantization.

/// Annex K luminance quantization table, row-major.
const LUMA_QTABLE: [f32; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0,
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0,
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0,
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0,
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0,
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0,
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0,
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Annex K chrominance quantization table, row-major.
const CHROMA_QTABLE: [f32; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0,
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0,
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// libjpeg quality scaling: map quality 1..=100 onto a table multiplier and
/// clamp each scaled entry into [1, 255].
fn scaled_qtable(base: &[f32; 64], quality: u32) -> [f32; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0f32; 64];
    for i in 0..64 {
        let v = ((base[i] as u32 * scale + 50) / 100).clamp(1, 255);
        out[i] = v as f32;
    }
    out
}

/// Orthonormal 8x8 DCT-II basis factor c(u).
#[inline]
fn alpha(u: usize) -> f32 {
    if u == 0 {
        std::f32::consts::FRAC_1_SQRT_2
    } else {
        1.0
    }
}

fn dct8x8(block: &[f32; 64]) -> [f32; 64] {
    let mut out = [0.0f32; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0f32;
            for x in 0..8 {
                for y in 0..8 {
                    acc += block[x * 8 + y]
                        * ((2 * x + 1) as f32 * u as f32 * std::f32::consts::PI / 16.0).cos()
                        * ((2 * y + 1) as f32 * v as f32 * std::f32::consts::PI / 16.0).cos();
                }
            }
            out[u * 8 + v] = 0.25 * alpha(u) * alpha(v) * acc;
        }
    }
    out
}

fn idct8x8(coef: &[f32; 64]) -> [f32; 64] {
    let mut out = [0.0f32; 64];
    for x in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0f32;
            for u in 0..8 {
                for v in 0..8 {
                    acc += alpha(u)
                        * alpha(v)
                        * coef[u * 8 + v]
                        * ((2 * x + 1) as f32 * u as f32 * std::f32::consts::PI / 16.0).cos()
                        * ((2 * y + 1) as f32 * v as f32 * std::f32::consts::PI / 16.0).cos();
                }
            }
            out[x * 8 + y] = 0.25 * acc;
        }
    }
    out
}

/// Compress one plane (values around [-128, 127] after level shift) in
/// place using the given quantization table.
fn compress_plane(plane: &mut [f32], h: usize, w: usize, qtable: &[f32; 64]) {
    debug_assert!(h % 8 == 0 && w % 8 == 0);
    let mut block = [0.0f32; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for i in 0..8 {
                for j in 0..8 {
                    block[i * 8 + j] = plane[(by + i) * w + bx + j];
                }
            }
            let mut coef = dct8x8(&block);
            for (cv, &qv) in coef.iter_mut().zip(qtable.iter()) {
                *cv = (*cv / qv).round() * qv;
            }
            let rec = idct8x8(&coef);
            for i in 0..8 {
                for j in 0..8 {
                    plane[(by + i) * w + bx + j] = rec[i * 8 + j];
                }
            }
        }
    }
}

/// Round-trip an RGB CHW image in [0, 1] through JPEG-style compression at
/// the given quality (1..=100), 4:4:4 sampling.
pub fn jpeg_roundtrip(img: &[f32], h: usize, w: usize, quality: u32) -> Vec<f32> {
    assert_eq!(img.len(), 3 * h * w, "jpeg_roundtrip: expected 3xHxW");
    let luma_q = scaled_qtable(&LUMA_QTABLE, quality);
    let chroma_q = scaled_qtable(&CHROMA_QTABLE, quality);

    // Pad to block multiples by edge replication.
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let plane = h * w;
    let pplane = ph * pw;

    // RGB -> YCbCr (JFIF), level-shifted by -128.
    let mut y_p = vec![0.0f32; pplane];
    let mut cb_p = vec![0.0f32; pplane];
    let mut cr_p = vec![0.0f32; pplane];
    for yy in 0..ph {
        for xx in 0..pw {
            let sy = yy.min(h - 1);
            let sx = xx.min(w - 1);
            let r = img[sy * w + sx] * 255.0;
            let g = img[plane + sy * w + sx] * 255.0;
            let b = img[2 * plane + sy * w + sx] * 255.0;
            let i = yy * pw + xx;
            y_p[i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            cb_p[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
            cr_p[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        }
    }

    compress_plane(&mut y_p, ph, pw, &luma_q);
    compress_plane(&mut cb_p, ph, pw, &chroma_q);
    compress_plane(&mut cr_p, ph, pw, &chroma_q);

    // YCbCr -> RGB, crop, rescale to [0, 1].
    let mut out = vec![0.0f32; 3 * plane];
    for yy in 0..h {
        for xx in 0..w {
            let i = yy * pw + xx;
            let y_v = y_p[i] + 128.0;
            let cb = cb_p[i];
            let cr = cr_p[i];
            let r = y_v + 1.402 * cr;
            let g = y_v - 0.344_136 * cb - 0.714_136 * cr;
            let b = y_v + 1.772 * cb;
            out[yy * w + xx] = (r / 255.0).clamp(0.0, 1.0);
            out[plane + yy * w + xx] = (g / 255.0).clamp(0.0, 1.0);
            out[2 * plane + yy * w + xx] = (b / 255.0).clamp(0.0, 1.0);
        }
    }
    out
}
