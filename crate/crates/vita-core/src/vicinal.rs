//! Vicinal difference transfer: subtract originals from their vicinal
//! samples, shuffle the differences across the batch, recombine them with a
//! scale factor, and optionally project the raw composition through the
//! translator.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VitaError};
use crate::networks::UNet;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffSource {
    Augmentation,
    Adversarial,
}

/// A batch of vicinal differences with per-row provenance and cached norms.
#[derive(Clone, Debug)]
pub struct DifferenceBatch {
    pub diffs: Tensor,
    pub source: Vec<DiffSource>,
    pub norms: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub lambda: f32,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { lambda: 1.0 }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda > 0.0 {
            Ok(())
        } else {
            Err(VitaError::Config(format!(
                "transfer lambda must be positive, got {}",
                self.lambda
            )))
        }
    }
}

impl DifferenceBatch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Recompute row norms and compare with the cache.
    pub fn norms_consistent(&self, tol: f32) -> bool {
        let n = self.len();
        let stride = self.diffs.numel() / n.max(1);
        (0..n).all(|i| {
            let row = &self.diffs.data()[i * stride..(i + 1) * stride];
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            (norm - self.norms[i]).abs() <= tol
        })
    }
}

/// Elementwise x_v - x with cached per-row L2 norms. All rows carry the same
/// source tag, since a harvest pass produces one kind of vicinal sample.
pub fn vicinal_difference(x: &Tensor, x_v: &Tensor, source: DiffSource) -> Result<DifferenceBatch> {
    if x.shape() != x_v.shape() {
        return Err(VitaError::Shape(format!(
            "vicinal difference on mismatched shapes {:?} vs {:?}",
            x.shape(),
            x_v.shape()
        )));
    }
    let (n, _, _, _) = x.dims4();
    let stride = x.numel() / n;
    let diffs: Vec<f32> = x_v
        .data()
        .iter()
        .zip(x.data().iter())
        .map(|(&v, &o)| v - o)
        .collect();
    let norms: Vec<f32> = (0..n)
        .map(|i| {
            diffs[i * stride..(i + 1) * stride]
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt()
        })
        .collect();
    Ok(DifferenceBatch {
        diffs: Tensor::from_vec(x.shape().to_vec(), diffs),
        source: vec![source; n],
        norms,
    })
}

/// Permute the difference rows by a uniformly drawn permutation. Tags and
/// cached norms move with their rows.
pub fn shuffle_differences(d: &DifferenceBatch, seed: u64) -> DifferenceBatch {
    let n = d.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    apply_permutation(d, &perm)
}

/// Reorder rows so that output row i is input row perm[i].
pub fn apply_permutation(d: &DifferenceBatch, perm: &[usize]) -> DifferenceBatch {
    let n = d.len();
    assert_eq!(perm.len(), n, "permutation length mismatch");
    let stride = d.diffs.numel() / n.max(1);
    let src = d.diffs.data();
    let mut out = vec![0.0f32; d.diffs.numel()];
    for (i, &p) in perm.iter().enumerate() {
        out[i * stride..(i + 1) * stride].copy_from_slice(&src[p * stride..(p + 1) * stride]);
    }
    DifferenceBatch {
        diffs: Tensor::from_vec(d.diffs.shape().to_vec(), out),
        source: perm.iter().map(|&p| d.source[p]).collect(),
        norms: perm.iter().map(|&p| d.norms[p]).collect(),
    }
}

/// The seeded permutation used by [`shuffle_differences`], exposed so batch
/// composition can log which rows donated their differences.
pub fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    perm
}

/// clamp(x + lambda * d, 0, 1).
pub fn transfer_compose(x: &Tensor, d: &DifferenceBatch, cfg: &TransferConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape() != d.diffs.shape() {
        return Err(VitaError::Shape(format!(
            "transfer_compose on mismatched shapes {:?} vs {:?}",
            x.shape(),
            d.diffs.shape()
        )));
    }
    let out: Vec<f32> = x
        .data()
        .iter()
        .zip(d.diffs.data().iter())
        .map(|(&o, &dd)| (o + cfg.lambda * dd).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), out))
}

/// Project the raw composition x + lambda * d onto the learned manifold.
/// Labels are carried by the caller: the transform is label-preserving, so
/// generated rows keep the labels of `x`.
pub fn generate_via_translator(
    t: &UNet,
    x: &Tensor,
    d: &DifferenceBatch,
    cfg: &TransferConfig,
) -> Result<Tensor> {
    let raw = transfer_compose(x, d, cfg)?;
    t.forward(&raw, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data: Vec<f32> = (0..n * 3 * 4 * 4).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(vec![n, 3, 4, 4], data)
    }

    #[test]
    fn difference_examples() {
        let x = batch(1, 3);
        let same = vicinal_difference(&x, &x, DiffSource::Augmentation).unwrap();
        assert!(same.diffs.data().iter().all(|&v| v == 0.0));
        assert!(same.norms.iter().all(|&v| v == 0.0));

        let shifted = Tensor::from_vec(
            vec![1, 1, 2, 2],
            vec![0.1, 0.1, 0.1, 0.1],
        );
        let base = Tensor::zeros(vec![1, 1, 2, 2]);
        let d = vicinal_difference(&base, &shifted, DiffSource::Adversarial).unwrap();
        assert!((d.norms[0] - 0.2).abs() < 1e-6);
        assert!(d.norms_consistent(1e-6));

        let wrong = Tensor::zeros(vec![2, 3, 4, 4]);
        assert!(vicinal_difference(&x, &wrong, DiffSource::Augmentation).is_err());
    }

    #[test]
    fn reconstruction_is_exact() {
        let x = batch(2, 4);
        let xv = batch(3, 4);
        let d = vicinal_difference(&x, &xv, DiffSource::Augmentation).unwrap();
        for i in 0..4 {
            for (j, (&o, &dd)) in x.sample(i).iter().zip(d.diffs.sample(i)).enumerate() {
                let back = o + dd;
                assert!(
                    (back - xv.sample(i)[j]).abs() < 1e-6,
                    "row {i} coord {j} fails to reconstruct"
                );
            }
        }
    }

    #[test]
    fn shuffle_preserves_rows_and_pins_permutation() {
        let x = batch(4, 4);
        let xv = batch(5, 4);
        let mut d = vicinal_difference(&x, &xv, DiffSource::Augmentation).unwrap();
        d.source = vec![
            DiffSource::Augmentation,
            DiffSource::Adversarial,
            DiffSource::Augmentation,
            DiffSource::Adversarial,
        ];
        let s = shuffle_differences(&d, 17);

        // Multiset of rows, tags, norms preserved bitwise.
        let mut before: Vec<Vec<u32>> = (0..4)
            .map(|i| d.diffs.sample(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut after: Vec<Vec<u32>> = (0..4)
            .map(|i| s.diffs.sample(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);

        // Golden permutation for this seed, pinned so the shuffled stream
        // can never drift silently.
        let golden = shuffle_permutation(4, 17);
        assert_eq!(golden, vec![2, 1, 3, 0]);
        let manual = apply_permutation(&d, &golden);
        assert_eq!(manual.diffs.to_vec(), s.diffs.to_vec());
        assert_eq!(manual.source, s.source);

        // Single row shuffles to itself.
        let one = vicinal_difference(
            &batch(6, 1),
            &batch(7, 1),
            DiffSource::Adversarial,
        )
        .unwrap();
        let so = shuffle_differences(&one, 99);
        assert_eq!(so.diffs.to_vec(), one.diffs.to_vec());
    }

    #[test]
    fn compose_reconstructs_and_scales() {
        let x = batch(8, 3);
        let xv = batch(9, 3);
        let d = vicinal_difference(&x, &xv, DiffSource::Augmentation).unwrap();
        let cfg = TransferConfig::default();
        let back = transfer_compose(&x, &d, &cfg).unwrap();
        // Inputs are in [0,1] and diffs reconstruct xv exactly, so clamping
        // is inactive and equality is exact up to f32 rounding.
        for (a, b) in back.data().iter().zip(xv.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }

        let zero = vicinal_difference(&x, &x, DiffSource::Augmentation).unwrap();
        let same = transfer_compose(&x, &zero, &TransferConfig { lambda: 123.0 }).unwrap();
        assert_eq!(same.to_vec(), x.to_vec());

        let half = transfer_compose(&x, &d, &TransferConfig { lambda: 0.5 }).unwrap();
        let hd = vicinal_difference(&x, &half, DiffSource::Augmentation).unwrap();
        for (h, f) in hd.norms.iter().zip(d.norms.iter()) {
            assert!((h - 0.5 * f).abs() < 1e-5, "half norm {h} vs full {f}");
        }

        assert!(TransferConfig { lambda: 0.0 }.validate().is_err());
    }

    #[test]
    fn translator_path_keeps_shape_and_range() {
        let t = UNet::new(4, 2, &mut rng_from_seed(77));
        let x = batch(10, 2);
        let d = vicinal_difference(&x, &batch(11, 2), DiffSource::Adversarial).unwrap();
        let g = generate_via_translator(&t, &x, &d, &TransferConfig::default()).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert!(g.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
