//! Differentiable operations.
//!
//! Every op computes its output eagerly and, when any input is attached to a
//! tape, records a backward closure producing per-input gradients. Shape
//! violations are programming errors and panic; label or normalization
//! problems driven by runtime data return [`VitaError`](crate::error::VitaError).

use std::sync::Arc;

use rayon::prelude::*;

use super::tape::record;
use super::Tensor;
use crate::error::{Result, VitaError};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: mismatched shapes {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    record(&[a, b], a.shape().to_vec(), Arc::new(data), |g, needs| {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.to_vec()),
        ]
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    record(&[a, b], a.shape().to_vec(), Arc::new(data), |g, needs| {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|v| -v).collect()),
        ]
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (da, db) = (a.data_arc(), b.data_arc());
    record(&[a, b], a.shape().to_vec(), Arc::new(data), move |g, needs| {
        vec![
            needs[0].then(|| g.iter().zip(db.iter()).map(|(v, y)| v * y).collect()),
            needs[1].then(|| g.iter().zip(da.iter()).map(|(v, x)| v * x).collect()),
        ]
    })
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x * s).collect();
    record(&[a], a.shape().to_vec(), Arc::new(data), move |g, _| {
        vec![Some(g.iter().map(|v| v * s).collect())]
    })
}

pub fn add_scalar(a: &Tensor, s: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|x| x + s).collect();
    record(&[a], a.shape().to_vec(), Arc::new(data), |g, _| {
        vec![Some(g.to_vec())]
    })
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

pub fn relu(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x.max(0.0)).collect();
    let da = a.data_arc();
    record(&[a], a.shape().to_vec(), Arc::new(data), move |g, _| {
        vec![Some(
            g.iter()
                .zip(da.iter())
                .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                .collect(),
        )]
    })
}

pub fn leaky_relu(a: &Tensor, slope: f32) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect();
    let da = a.data_arc();
    record(&[a], a.shape().to_vec(), Arc::new(data), move |g, _| {
        vec![Some(
            g.iter()
                .zip(da.iter())
                .map(|(v, &x)| if x > 0.0 { *v } else { slope * v })
                .collect(),
        )]
    })
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data = Arc::new(a.data().iter().map(|x| x.tanh()).collect::<Vec<f32>>());
    let y = Arc::clone(&data);
    record(&[a], a.shape().to_vec(), data, move |g, _| {
        vec![Some(
            g.iter().zip(y.iter()).map(|(v, t)| v * (1.0 - t * t)).collect(),
        )]
    })
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    fn sig(x: f32) -> f32 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }
    let data = Arc::new(a.data().iter().map(|&x| sig(x)).collect::<Vec<f32>>());
    let y = Arc::clone(&data);
    record(&[a], a.shape().to_vec(), data, move |g, _| {
        vec![Some(
            g.iter().zip(y.iter()).map(|(v, s)| v * s * (1.0 - s)).collect(),
        )]
    })
}

pub fn exp(a: &Tensor) -> Tensor {
    let data = Arc::new(a.data().iter().map(|x| x.exp()).collect::<Vec<f32>>());
    let y = Arc::clone(&data);
    record(&[a], a.shape().to_vec(), data, move |g, _| {
        vec![Some(g.iter().zip(y.iter()).map(|(v, e)| v * e).collect())]
    })
}

/// Natural log with the argument clamped to at least `LN_FLOOR`, keeping GAN
/// losses finite when a discriminator saturates.
pub const LN_FLOOR: f32 = 1e-12;

pub fn ln(a: &Tensor) -> Tensor {
    let data: Vec<f32> = a.data().iter().map(|&x| x.max(LN_FLOOR).ln()).collect();
    let da = a.data_arc();
    record(&[a], a.shape().to_vec(), Arc::new(data), move |g, _| {
        vec![Some(
            g.iter().zip(da.iter()).map(|(v, &x)| v / x.max(LN_FLOOR)).collect(),
        )]
    })
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

pub fn reshape(a: &Tensor, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    assert_eq!(numel, a.numel(), "reshape: {:?} -> {:?}", a.shape(), shape);
    record(&[a], shape, a.data_arc(), |g, _| vec![Some(g.to_vec())])
}

/// Concatenate two rank-4 tensors along the channel dimension.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: mismatched extents");
    let plane = h * w;
    let mut data = Vec::with_capacity((ca + cb) * n * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    record(
        &[a, b],
        vec![n, ca + cb, h, w],
        Arc::new(data),
        move |g, needs| {
            let split = |take_first: bool| -> Vec<f32> {
                let (len, off, other) = if take_first {
                    (ca * plane, 0, cb * plane)
                } else {
                    (cb * plane, ca * plane, ca * plane)
                };
                let _ = other;
                let mut out = Vec::with_capacity(n * len);
                for i in 0..n {
                    let base = i * (ca + cb) * plane + off;
                    out.extend_from_slice(&g[base..base + len]);
                }
                out
            };
            vec![
                needs[0].then(|| split(true)),
                needs[1].then(|| split(false)),
            ]
        },
    )
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Tensor) -> Tensor {
    let s = a.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
    let n = a.numel();
    record(&[a], vec![1], Arc::new(vec![s]), move |g, _| {
        vec![Some(vec![g[0]; n])]
    })
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.numel();
    let s = (a.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32;
    record(&[a], vec![1], Arc::new(vec![s]), move |g, _| {
        vec![Some(vec![g[0] / n as f32; n])]
    })
}

/// Sum every non-batch dimension, producing one value per sample.
pub fn sum_per_sample(a: &Tensor) -> Tensor {
    assert!(!a.shape().is_empty(), "sum_per_sample on rank-0 tensor");
    let n = a.shape()[0];
    let row = a.numel() / n;
    let data: Vec<f32> = (0..n)
        .map(|i| a.data()[i * row..(i + 1) * row].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    record(&[a], vec![n], Arc::new(data), move |g, _| {
        let mut dx = vec![0.0f32; n * row];
        for i in 0..n {
            dx[i * row..(i + 1) * row].fill(g[i]);
        }
        vec![Some(dx)]
    })
}

/// Weighted sum of a vector with constant per-element weights.
pub fn weighted_sum(a: &Tensor, weights: &[f32]) -> Tensor {
    assert_eq!(a.shape().len(), 1, "weighted_sum expects rank 1");
    assert_eq!(a.numel(), weights.len(), "weighted_sum: weight count mismatch");
    let s = a.data().iter().zip(weights).map(|(&x, &w)| x as f64 * w as f64).sum::<f64>() as f32;
    let w = weights.to_vec();
    record(&[a], vec![1], Arc::new(vec![s]), move |g, _| {
        vec![Some(w.iter().map(|wi| g[0] * wi).collect())]
    })
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Row-wise log-softmax over a [n, k] tensor, max-subtracted for stability.
pub fn log_softmax(a: &Tensor) -> Tensor {
    let (n, k) = a.dims2();
    let mut data = vec![0.0f32; n * k];
    for i in 0..n {
        let row = &a.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f32>().ln();
        for j in 0..k {
            data[i * k + j] = row[j] - lse;
        }
    }
    let data = Arc::new(data);
    let y = Arc::clone(&data);
    record(&[a], vec![n, k], data, move |g, _| {
        let mut dx = vec![0.0f32; n * k];
        for i in 0..n {
            let gs: f32 = g[i * k..(i + 1) * k].iter().sum();
            for j in 0..k {
                let idx = i * k + j;
                dx[idx] = g[idx] - y[idx].exp() * gs;
            }
        }
        vec![Some(dx)]
    })
}

/// Mean negative log-likelihood of integer labels under row-wise softmax.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = logits.dims2();
    if labels.len() != n {
        return Err(VitaError::Data(format!(
            "cross_entropy: {} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
        return Err(VitaError::Data(format!(
            "cross_entropy: label {y} at row {i} out of range for {k} classes"
        )));
    }
    let mut softmax = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = row.iter().map(|&x| ((x - m) as f64).exp()).sum();
        let lse = m as f64 + z.ln();
        loss += lse - row[labels[i]] as f64;
        for j in 0..k {
            softmax[i * k + j] = (((row[j] as f64) - lse).exp()) as f32;
        }
    }
    let loss = (loss / n as f64) as f32;
    let labels = labels.to_vec();
    Ok(record(
        &[logits],
        vec![1],
        Arc::new(vec![loss]),
        move |g, _| {
            let mut dx = softmax.clone();
            for (i, &y) in labels.iter().enumerate() {
                dx[i * k + y] -= 1.0;
            }
            let scale = g[0] / n as f32;
            dx.iter_mut().for_each(|v| *v *= scale);
            vec![Some(dx)]
        },
    ))
}

/// Mean over rows of sum_k exp(log_p) * (log_p - log_q).
///
/// Both arguments must hold log-probabilities: each row's logsumexp has to
/// sit within 1e-5 of zero or the call is rejected, naming the bad row.
pub fn kl_divergence(log_p: &Tensor, log_q: &Tensor) -> Result<Tensor> {
    assert_same_shape(log_p, log_q, "kl_divergence");
    let (n, k) = log_p.dims2();
    for (name, t) in [("first", log_p), ("second", log_q)] {
        for i in 0..n {
            let row = &t.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
            let lse = m + row.iter().map(|&x| ((x as f64) - m).exp()).sum::<f64>().ln();
            if lse.abs() > 1e-5 {
                return Err(VitaError::Numeric(format!(
                    "kl_divergence: row {i} of {name} argument is not log-normalized (logsumexp = {lse:.3e})"
                )));
            }
        }
    }
    let mut total = 0.0f64;
    for (lp, lq) in log_p.data().iter().zip(log_q.data()) {
        total += (*lp as f64).exp() * ((*lp - *lq) as f64);
    }
    let val = (total / n as f64) as f32;
    let (pa, qa) = (log_p.data_arc(), log_q.data_arc());
    Ok(record(
        &[log_p, log_q],
        vec![1],
        Arc::new(vec![val]),
        move |g, needs| {
            let scale = g[0] / n as f32;
            vec![
                needs[0].then(|| {
                    pa.iter()
                        .zip(qa.iter())
                        .map(|(&lp, &lq)| scale * lp.exp() * (lp - lq + 1.0))
                        .collect()
                }),
                needs[1].then(|| pa.iter().map(|&lp| -scale * lp.exp()).collect()),
            ]
        },
    ))
}

// ---------------------------------------------------------------------------
// Per-class selections (margin losses)
// ---------------------------------------------------------------------------

/// Pick each row's logit at its label: out[i] = logits[i, labels[i]].
pub fn gather_class(logits: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = logits.dims2();
    assert_eq!(labels.len(), n, "gather_class: label count mismatch");
    assert!(labels.iter().all(|&y| y < k), "gather_class: label out of range");
    let data: Vec<f32> = labels.iter().enumerate().map(|(i, &y)| logits.data()[i * k + y]).collect();
    let labels = labels.to_vec();
    record(&[logits], vec![n], Arc::new(data), move |g, _| {
        let mut dx = vec![0.0f32; n * k];
        for (i, &y) in labels.iter().enumerate() {
            dx[i * k + y] = g[i];
        }
        vec![Some(dx)]
    })
}

/// Row-wise maximum over all classes except the label, with the subgradient
/// routed to the (first) argmax.
pub fn max_excluding(logits: &Tensor, labels: &[usize]) -> Tensor {
    let (n, k) = logits.dims2();
    assert_eq!(labels.len(), n, "max_excluding: label count mismatch");
    assert!(k >= 2, "max_excluding needs at least 2 classes");
    assert!(labels.iter().all(|&y| y < k), "max_excluding: label out of range");
    let mut data = vec![0.0f32; n];
    let mut arg = vec![0usize; n];
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut best = f32::NEG_INFINITY;
        let mut best_j = usize::MAX;
        for (j, &v) in row.iter().enumerate() {
            if j != labels[i] && v > best {
                best = v;
                best_j = j;
            }
        }
        data[i] = best;
        arg[i] = best_j;
    }
    record(&[logits], vec![n], Arc::new(data), move |g, _| {
        let mut dx = vec![0.0f32; n * k];
        for (i, &j) in arg.iter().enumerate() {
            dx[i * k + j] = g[i];
        }
        vec![Some(dx)]
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Instance normalization without affine parameters: each (sample, channel)
/// plane is standardized with biased variance.
pub fn instance_norm(x: &Tensor, eps: f32) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let mut data = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; n * c];
    for p in 0..n * c {
        let xs = &x.data()[p * plane..(p + 1) * plane];
        let mean = xs.iter().sum::<f32>() / plane as f32;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / plane as f32;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        for (o, &v) in data[p * plane..(p + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    let data = Arc::new(data);
    let y = Arc::clone(&data);
    record(&[x], vec![n, c, h, w], data, move |g, _| {
        // dx = inv_std * (g - mean(g) - y * mean(g * y)) per plane.
        let mut dx = vec![0.0f32; y.len()];
        for p in 0..n * c {
            let gs = &g[p * plane..(p + 1) * plane];
            let ys = &y[p * plane..(p + 1) * plane];
            let m = plane as f32;
            let mean_g = gs.iter().sum::<f32>() / m;
            let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f32>() / m;
            for ((d, &gv), &yv) in dx[p * plane..(p + 1) * plane].iter_mut().zip(gs).zip(ys) {
                *d = inv_std[p] * (gv - mean_g - yv * mean_gy);
            }
        }
        vec![Some(dx)]
    })
}

/// Batch statistics produced by [`batch_norm_train`], reused by the caller
/// to refresh running estimates.
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Batch normalization in training form: per-channel statistics over
/// (n, h, w), biased variance, gradients flowing through the statistics.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> (Tensor, BatchStats) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.shape(), &[c], "batch_norm_train: gamma shape");
    assert_eq!(beta.shape(), &[c], "batch_norm_train: beta shape");
    let plane = h * w;
    let m = (n * plane) as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f32;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            s += x.data()[base..base + plane].iter().sum::<f32>();
        }
        mean[ch] = s / m;
        let mut v = 0.0f32;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            v += x.data()[base..base + plane]
                .iter()
                .map(|&u| (u - mean[ch]) * (u - mean[ch]))
                .sum::<f32>();
        }
        var[ch] = v / m;
    }
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut data = vec![0.0f32; x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let (g0, b0) = (gamma.data()[ch], beta.data()[ch]);
            for j in 0..plane {
                let xhat = (x.data()[base + j] - mean[ch]) * inv_std[ch];
                data[base + j] = g0 * xhat + b0;
            }
        }
    }
    let stats = BatchStats { mean: mean.clone(), var: var.clone() };
    let xa = x.data_arc();
    let ga = gamma.data_arc();
    let out = record(
        &[x, gamma, beta],
        vec![n, c, h, w],
        Arc::new(data),
        move |g, needs| {
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            let mut sum_g = vec![0.0f32; c];
            let mut sum_gx = vec![0.0f32; c];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * plane;
                    for j in 0..plane {
                        let xhat = (xa[base + j] - mean[ch]) * inv_std[ch];
                        let gv = g[base + j];
                        dbeta[ch] += gv;
                        dgamma[ch] += gv * xhat;
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xhat;
                    }
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; xa.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let k = ga[ch] * inv_std[ch];
                        for j in 0..plane {
                            let xhat = (xa[base + j] - mean[ch]) * inv_std[ch];
                            dx[base + j] = k * (g[base + j] - sum_g[ch] / m - xhat * sum_gx[ch] / m);
                        }
                    }
                }
                dx
            });
            vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
        },
    );
    (out, stats)
}

/// Batch normalization in inference form: a fixed per-channel affine map
/// driven by running statistics, so outputs do not depend on batch peers.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.shape(), &[c], "batch_norm_eval: gamma shape");
    assert_eq!(beta.shape(), &[c], "batch_norm_eval: beta shape");
    assert_eq!(running_mean.len(), c, "batch_norm_eval: running mean length");
    assert_eq!(running_var.len(), c, "batch_norm_eval: running var length");
    let plane = h * w;
    let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let rm = running_mean.to_vec();
    let mut data = vec![0.0f32; x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * plane;
            let (g0, b0) = (gamma.data()[ch], beta.data()[ch]);
            for j in 0..plane {
                data[base + j] = g0 * (x.data()[base + j] - rm[ch]) * inv_std[ch] + b0;
            }
        }
    }
    let xa = x.data_arc();
    let ga = gamma.data_arc();
    record(
        &[x, gamma, beta],
        vec![n, c, h, w],
        Arc::new(data),
        move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; xa.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let k = ga[ch] * inv_std[ch];
                        for j in 0..plane {
                            dx[base + j] = g[base + j] * k;
                        }
                    }
                }
                dx
            });
            let dgamma = needs[1].then(|| {
                let mut dg = vec![0.0f32; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in 0..plane {
                            dg[ch] += g[base + j] * (xa[base + j] - rm[ch]) * inv_std[ch];
                        }
                    }
                }
                dg
            });
            let dbeta = needs[2].then(|| {
                let mut db = vec![0.0f32; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in 0..plane {
                            db[ch] += g[base + j];
                        }
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        },
    )
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

/// Output index range [lo, hi) such that 0 <= o * stride + shift < limit.
#[inline]
fn span(limit: usize, out_len: usize, stride: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let max_i = limit as isize - 1 - shift;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// 2d cross-correlation with zero padding.
///
/// Shapes: x [n, c_in, h, w], weight [c_out, c_in, kh, kw], bias [c_out].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Tensor {
    assert!(stride >= 1, "conv2d: stride must be positive");
    let (n, cin, h, w) = x.dims4();
    let (cout, cin_w, kh, kw) = weight.dims4();
    assert_eq!(cin, cin_w, "conv2d: channel mismatch");
    assert_eq!(bias.shape(), &[cout], "conv2d: bias shape");
    assert!(
        h + 2 * padding >= kh && w + 2 * padding >= kw,
        "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"
    );
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;

    let xs = x.data();
    let ws = weight.data();
    let bs = bias.data();
    let mut out = vec![0.0f32; n * cout * oh * ow];
    out.par_chunks_mut(cout * oh * ow).enumerate().for_each(|(i, out_i)| {
        for co in 0..cout {
            out_i[co * oh * ow..(co + 1) * oh * ow].fill(bs[co]);
        }
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = ws[((co * cin + ci) * kh + ki) * kw + kj];
                        let shift_w = kj as isize - padding as isize;
                        let (lo, hi) = span(w, ow, stride, shift_w);
                        for oi in 0..oh {
                            let ih = (oi * stride + ki) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let x_row = &xs[((i * cin + ci) * h + ih as usize) * w..][..w];
                            let o_row = &mut out_i[(co * oh + oi) * ow..][..ow];
                            for oj in lo..hi {
                                let iw = (oj * stride) as isize + shift_w;
                                o_row[oj] += wv * x_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });

    let xa = x.data_arc();
    let wa = weight.data_arc();
    record(
        &[x, weight, bias],
        vec![n, cout, oh, ow],
        Arc::new(out),
        move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; xa.len()];
                dx.par_chunks_mut(cin * h * w).enumerate().for_each(|(i, dx_i)| {
                    for co in 0..cout {
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let wv = wa[((co * cin + ci) * kh + ki) * kw + kj];
                                    let shift_w = kj as isize - padding as isize;
                                    let (lo, hi) = span(w, ow, stride, shift_w);
                                    for oi in 0..oh {
                                        let ih = (oi * stride + ki) as isize - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let dx_row = &mut dx_i[(ci * h + ih as usize) * w..][..w];
                                        let g_row = &g[((i * cout + co) * oh + oi) * ow..][..ow];
                                        for oj in lo..hi {
                                            let iw = (oj * stride) as isize + shift_w;
                                            dx_row[iw as usize] += wv * g_row[oj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0f32; wa.len()];
                dw.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, dw_co)| {
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let shift_w = kj as isize - padding as isize;
                                let (lo, hi) = span(w, ow, stride, shift_w);
                                let mut acc = 0.0f32;
                                for i in 0..n {
                                    for oi in 0..oh {
                                        let ih = (oi * stride + ki) as isize - padding as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        let x_row = &xa[((i * cin + ci) * h + ih as usize) * w..][..w];
                                        let g_row = &g[((i * cout + co) * oh + oi) * ow..][..ow];
                                        for oj in lo..hi {
                                            let iw = (oj * stride) as isize + shift_w;
                                            acc += g_row[oj] * x_row[iw as usize];
                                        }
                                    }
                                }
                                dw_co[(ci * kh + ki) * kw + kj] = acc;
                            }
                        }
                    }
                });
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0f32; cout];
                for i in 0..n {
                    for co in 0..cout {
                        db[co] += g[((i * cout + co) * oh) * ow..][..oh * ow].iter().sum::<f32>();
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    )
}

/// Transposed 2d convolution (fractionally strided).
///
/// Shapes: x [n, c_in, h, w], weight [c_in, c_out, kh, kw], bias [c_out].
/// Output spatial size is (h - 1) * stride + kh - 2 * padding.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Tensor {
    assert!(stride >= 1, "conv_transpose2d: stride must be positive");
    let (n, cin, h, w) = x.dims4();
    let (cin_w, cout, kh, kw) = weight.dims4();
    assert_eq!(cin, cin_w, "conv_transpose2d: channel mismatch");
    assert_eq!(bias.shape(), &[cout], "conv_transpose2d: bias shape");
    let oh_full = (h - 1) * stride + kh;
    let ow_full = (w - 1) * stride + kw;
    assert!(
        oh_full > 2 * padding && ow_full > 2 * padding,
        "conv_transpose2d: padding {padding} swallows the whole output"
    );
    let oh = oh_full - 2 * padding;
    let ow = ow_full - 2 * padding;

    let xs = x.data();
    let ws = weight.data();
    let bs = bias.data();
    let mut out = vec![0.0f32; n * cout * oh * ow];
    out.par_chunks_mut(cout * oh * ow).enumerate().for_each(|(i, out_i)| {
        for co in 0..cout {
            out_i[co * oh * ow..(co + 1) * oh * ow].fill(bs[co]);
        }
        for ci in 0..cin {
            for co in 0..cout {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = ws[((ci * cout + co) * kh + ki) * kw + kj];
                        let shift_w = kj as isize - padding as isize;
                        let (lo, hi) = span(ow, w, stride, shift_w);
                        for ii in 0..h {
                            let oi = (ii * stride + ki) as isize - padding as isize;
                            if oi < 0 || oi >= oh as isize {
                                continue;
                            }
                            let x_row = &xs[((i * cin + ci) * h + ii) * w..][..w];
                            let o_row = &mut out_i[(co * oh + oi as usize) * ow..][..ow];
                            for ij in lo..hi {
                                let ow_j = (ij * stride) as isize + shift_w;
                                o_row[ow_j as usize] += wv * x_row[ij];
                            }
                        }
                    }
                }
            }
        }
    });

    let xa = x.data_arc();
    let wa = weight.data_arc();
    record(
        &[x, weight, bias],
        vec![n, cout, oh, ow],
        Arc::new(out),
        move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; xa.len()];
                dx.par_chunks_mut(cin * h * w).enumerate().for_each(|(i, dx_i)| {
                    for ci in 0..cin {
                        for co in 0..cout {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let wv = wa[((ci * cout + co) * kh + ki) * kw + kj];
                                    let shift_w = kj as isize - padding as isize;
                                    let (lo, hi) = span(ow, w, stride, shift_w);
                                    for ii in 0..h {
                                        let oi = (ii * stride + ki) as isize - padding as isize;
                                        if oi < 0 || oi >= oh as isize {
                                            continue;
                                        }
                                        let dx_row = &mut dx_i[(ci * h + ii) * w..][..w];
                                        let g_row = &g[((i * cout + co) * oh + oi as usize) * ow..][..ow];
                                        for ij in lo..hi {
                                            let ow_j = (ij * stride) as isize + shift_w;
                                            dx_row[ij] += wv * g_row[ow_j as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0f32; wa.len()];
                dw.par_chunks_mut(cout * kh * kw).enumerate().for_each(|(ci, dw_ci)| {
                    for co in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let shift_w = kj as isize - padding as isize;
                                let (lo, hi) = span(ow, w, stride, shift_w);
                                let mut acc = 0.0f32;
                                for i in 0..n {
                                    for ii in 0..h {
                                        let oi = (ii * stride + ki) as isize - padding as isize;
                                        if oi < 0 || oi >= oh as isize {
                                            continue;
                                        }
                                        let x_row = &xa[((i * cin + ci) * h + ii) * w..][..w];
                                        let g_row = &g[((i * cout + co) * oh + oi as usize) * ow..][..ow];
                                        for ij in lo..hi {
                                            let ow_j = (ij * stride) as isize + shift_w;
                                            acc += x_row[ij] * g_row[ow_j as usize];
                                        }
                                    }
                                }
                                dw_ci[(co * kh + ki) * kw + kj] = acc;
                            }
                        }
                    }
                });
                dw
            });
            let db = needs[2].then(|| {
                let mut db = vec![0.0f32; cout];
                for i in 0..n {
                    for co in 0..cout {
                        db[co] += g[((i * cout + co) * oh) * ow..][..oh * ow].iter().sum::<f32>();
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    )
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

/// Non-overlapping k x k average pooling. Spatial extents must divide by k.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool2d: {h}x{w} not divisible by {k}");
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f32;
    let mut data = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let xs = &x.data()[p * h * w..(p + 1) * h * w];
        let os = &mut data[p * oh * ow..(p + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut s = 0.0f32;
                for di in 0..k {
                    for dj in 0..k {
                        s += xs[(oi * k + di) * w + oj * k + dj];
                    }
                }
                os[oi * ow + oj] = s * inv;
            }
        }
    }
    record(&[x], vec![n, c, oh, ow], Arc::new(data), move |g, _| {
        let mut dx = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            let gs = &g[p * oh * ow..(p + 1) * oh * ow];
            let ds = &mut dx[p * h * w..(p + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let v = gs[oi * ow + oj] * inv;
                    for di in 0..k {
                        for dj in 0..k {
                            ds[(oi * k + di) * w + oj * k + dj] = v;
                        }
                    }
                }
            }
        }
        vec![Some(dx)]
    })
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn nearest_upsample(x: &Tensor, k: usize) -> Tensor {
    assert!(k >= 1, "nearest_upsample: factor must be positive");
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h * k, w * k);
    let mut data = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let xs = &x.data()[p * h * w..(p + 1) * h * w];
        let os = &mut data[p * oh * ow..(p + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                os[oi * ow + oj] = xs[(oi / k) * w + oj / k];
            }
        }
    }
    record(&[x], vec![n, c, oh, ow], Arc::new(data), move |g, _| {
        let mut dx = vec![0.0f32; n * c * h * w];
        for p in 0..n * c {
            let gs = &g[p * oh * ow..(p + 1) * oh * ow];
            let ds = &mut dx[p * h * w..(p + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    ds[(oi / k) * w + oj / k] += gs[oi * ow + oj];
                }
            }
        }
        vec![Some(dx)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff::check_gradients;
    use crate::tensor::Tape;

    #[test]
    fn add_mul_values() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]);
        assert_eq!(add(&a, &b).to_vec(), vec![4.0, 6.0]);
        assert_eq!(mul(&a, &b).to_vec(), vec![3.0, 8.0]);
        assert_eq!(sub(&a, &b).to_vec(), vec![-2.0, -2.0]);
        assert_eq!(scale(&a, 2.0).to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = log_softmax(&x);
        for i in 0..2 {
            let s: f64 = y.sample(i).iter().map(|&v| (v as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        // Uniform logits over k classes give loss ln(k).
        let x = Tensor::zeros(vec![4, 5]);
        let loss = cross_entropy(&x, &[0, 1, 2, 3]).unwrap();
        assert!((loss.item() as f64 - (5.0f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let x = Tensor::zeros(vec![2, 3]);
        assert!(cross_entropy(&x, &[0]).is_err());
        assert!(cross_entropy(&x, &[0, 3]).is_err());
    }

    #[test]
    fn kl_requires_log_normalized_rows() {
        let p = log_softmax(&Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, -1.0]));
        let raw = Tensor::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let err = kl_divergence(&p, &raw).unwrap_err();
        assert!(err.to_string().contains("row 0"), "{err}");
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let p = log_softmax(&Tensor::from_vec(vec![2, 4], vec![0.3, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0]));
        let v = kl_divergence(&p, &p).unwrap().item();
        assert!(v.abs() < 1e-7);
    }

    #[test]
    fn conv2d_hand_computed() {
        // 1x1x3x3 input, single 2x2 kernel of ones, stride 1, no padding.
        let x = Tensor::from_vec(vec![1, 1, 3, 3], (1..=9).map(|v| v as f32).collect());
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let b = Tensor::from_vec(vec![1], vec![0.5]);
        let y = conv2d(&x, &w, &b, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let x = Tensor::zeros(vec![2, 3, 32, 32]);
        let w = Tensor::zeros(vec![8, 3, 3, 3]);
        let b = Tensor::zeros(vec![8]);
        assert_eq!(conv2d(&x, &w, &b, 1, 1).shape(), &[2, 8, 32, 32]);
        assert_eq!(conv2d(&x, &w, &b, 2, 1).shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = conv_transpose2d(&x, &w, &b, 2, 0);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // Each input pixel tiles its own 2x2 block.
        assert_eq!(
            y.to_vec(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(avg_pool2d(&x, 2).to_vec(), vec![4.0]);
        let up = nearest_upsample(&x, 2);
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        assert_eq!(up.data()[0], 1.0);
        assert_eq!(up.data()[3], 3.0);
    }

    #[test]
    fn instance_norm_standardizes_planes() {
        let x = Tensor::from_vec(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
        let y = instance_norm(&x, 1e-5);
        for p in 0..2 {
            let pl = &y.data()[p * 4..(p + 1) * 4];
            let mean: f32 = pl.iter().sum::<f32>() / 4.0;
            let var: f32 = pl.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_train_standardizes_channels() {
        let mut rng = crate::rng::rng_from_seed(3);
        let x = Tensor::randn(vec![4, 2, 3, 3], 2.0, &mut rng);
        let gamma = Tensor::full(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        let (y, stats) = batch_norm_train(&x, &gamma, &beta, 1e-5);
        for ch in 0..2 {
            let mut vals = Vec::new();
            for i in 0..4 {
                vals.extend_from_slice(&y.data()[(i * 2 + ch) * 9..(i * 2 + ch + 1) * 9]);
            }
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let var: f32 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-2);
            assert!(stats.var[ch] > 0.0);
        }
    }

    #[test]
    fn gather_and_max_excluding() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.1, 0.9, 0.3, 5.0, -2.0, 4.0]);
        assert_eq!(gather_class(&x, &[1, 0]).to_vec(), vec![0.9, 5.0]);
        assert_eq!(max_excluding(&x, &[1, 0]).to_vec(), vec![0.3, 4.0]);
    }

    #[test]
    fn quick_gradcheck_core_ops() {
        // Fuller coverage lives in the dedicated gradient test suite; this is
        // a smoke check that backward closures are wired at all.
        let mut rng = crate::rng::rng_from_seed(11);
        let x0 = Tensor::randn(vec![2, 3, 6, 6], 1.0, &mut rng);
        let w0 = Tensor::randn(vec![4, 3, 3, 3], 0.5, &mut rng);
        let b0 = Tensor::randn(vec![4], 0.5, &mut rng);
        let f = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let x = tape.watch(&inputs[0]);
            let w = tape.watch(&inputs[1]);
            let b = tape.watch(&inputs[2]);
            let y = relu(&conv2d(&x, &w, &b, 2, 1));
            let loss = mean_all(&y);
            (tape, vec![x, w, b], loss)
        };
        check_gradients(&[x0, w0, b0], f, 2e-2, 1e-3).unwrap();
    }
}
