//! Diamond-square plasma fields for the fog and frost generators.

use rand::Rng as _;

use crate::rng::Rng;

/// Raw diamond-square field on an n x n grid (n = 2^k + 1) without
/// normalization. `amplitude` is the initial noise half-range, multiplied by
/// `roughness` after every subdivision; with amplitude 0 the recursion is a
/// pure midpoint average.
pub fn diamond_square_with(
    n: usize,
    roughness: f32,
    amplitude: f32,
    corners: [f32; 4],
    rng: &mut Rng,
) -> Vec<f32> {
    assert!(n >= 3 && (n - 1).is_power_of_two(), "diamond_square: n must be 2^k + 1, got {n}");
    let mut g = vec![0.0f32; n * n];
    g[0] = corners[0];
    g[n - 1] = corners[1];
    g[(n - 1) * n] = corners[2];
    g[(n - 1) * n + n - 1] = corners[3];

    let mut step = n - 1;
    let mut amp = amplitude;
    while step >= 2 {
        let half = step / 2;
        // Diamond step: centers of squares get the corner average.
        for y in (half..n).step_by(step) {
            for x in (half..n).step_by(step) {
                let sum = g[(y - half) * n + (x - half)]
                    + g[(y - half) * n + (x + half)]
                    + g[(y + half) * n + (x - half)]
                    + g[(y + half) * n + (x + half)];
                let noise = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                g[y * n + x] = sum * 0.25 + noise;
            }
        }
        // Square step: edge midpoints get the average of their in-grid
        // axial neighbors (3 at the borders, 4 inside).
        for y in (0..n).step_by(half) {
            let x0 = if (y / half) % 2 == 0 { half } else { 0 };
            for x in (x0..n).step_by(step) {
                let mut sum = 0.0f32;
                let mut cnt = 0.0f32;
                if y >= half {
                    sum += g[(y - half) * n + x];
                    cnt += 1.0;
                }
                if y + half < n {
                    sum += g[(y + half) * n + x];
                    cnt += 1.0;
                }
                if x >= half {
                    sum += g[y * n + (x - half)];
                    cnt += 1.0;
                }
                if x + half < n {
                    sum += g[y * n + (x + half)];
                    cnt += 1.0;
                }
                let noise = if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
                g[y * n + x] = sum / cnt + noise;
            }
        }
        step = half;
        amp *= roughness;
    }
    g
}

/// Seeded plasma field normalized to [0, 1]. Constant fields (possible only
/// with zero amplitude) collapse to 0.5.
pub fn diamond_square(n: usize, roughness: f32, seed: u64) -> Vec<f32> {
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut corners = [0.0f32; 4];
    for c in corners.iter_mut() {
        *c = rng.random_range(0.0..=1.0);
    }
    let g = diamond_square_with(n, roughness, 0.5, corners, &mut rng);
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &g {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        return vec![0.5; g.len()];
    }
    let scale = 1.0 / (hi - lo);
    g.into_iter().map(|v| (v - lo) * scale).collect()
}
