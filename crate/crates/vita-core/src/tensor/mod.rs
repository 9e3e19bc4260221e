//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable shaped buffer. Gradients are obtained by
//! running ops on tensors attached to a [`Tape`]: the tape records one node
//! per op and replays them in reverse. Tapes are rebuilt for every forward
//! pass, so graphs never persist across steps.

mod tape;

pub mod finite_diff;
pub mod ops;
pub mod optim;

pub use tape::Tape;

use std::sync::Arc;

use crate::rng::Rng;

/// Shaped, reference-counted f32 buffer, optionally attached to a tape node.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Tape handle plus node id when this value participates in a graph.
    node: Option<(Tape, usize)>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::from_arc(shape, Arc::new(data))
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f32>>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} wants {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data, node: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel])
    }

    /// Elementwise standard normal draws scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.as_ref().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Shape as (n, c, h, w), panicking unless rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank 4, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Shape as (n, k), panicking unless rank 2.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank 2, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Same data with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Elementwise map producing a fresh untracked tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Clamp all elements into [0, 1]. Untracked; used when composing images.
    pub fn clamp01(&self) -> Tensor {
        self.map(|x| x.clamp(0.0, 1.0))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows of a batched tensor: sample `n` as a contiguous slice.
    pub fn sample(&self, n: usize) -> &[f32] {
        let row = self.numel() / self.shape[0];
        &self.data[n * row..(n + 1) * row]
    }

    /// Extract sample `n` of a batched tensor as its own tensor.
    pub fn select_sample(&self, n: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_vec(shape, self.sample(n).to_vec())
    }

    /// Stack single-sample tensors along the batch dimension.
    pub fn stack_samples(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cannot stack zero tensors");
        let inner = &parts[0].shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        let mut total_n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], inner, "stack_samples: mismatched shapes");
            total_n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![total_n];
        shape.extend_from_slice(inner);
        Tensor::from_vec(shape, data)
    }

    pub(crate) fn node(&self) -> Option<&(Tape, usize)> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(mut self, tape: Tape, id: usize) -> Tensor {
        self.node = Some((tape, id));
        self
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        if self.node.is_some() {
            write!(f, " (tracked)")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn construction_and_accessors() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.sample(1), &[4.0, 5.0, 6.0]);
        let (n, k) = t.dims2();
        assert_eq!((n, k), (2, 3));
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn from_vec_rejects_wrong_length() {
        let _ = Tensor::from_vec(vec![2, 2], vec![0.0; 3]);
    }

    #[test]
    fn stack_roundtrip() {
        let a = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let s = Tensor::stack_samples(&[a, b]);
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.select_sample(2).to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn randn_is_seeded() {
        let mut r1 = rng_from_seed(9);
        let mut r2 = rng_from_seed(9);
        let a = Tensor::randn(vec![4, 4], 0.5, &mut r1);
        let b = Tensor::randn(vec![4, 4], 0.5, &mut r2);
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn clamp_and_norm() {
        let t = Tensor::from_vec(vec![3], vec![-1.0, 0.5, 2.0]);
        assert_eq!(t.clamp01().to_vec(), vec![0.0, 0.5, 1.0]);
        let n = Tensor::from_vec(vec![2], vec![3.0, 4.0]).l2_norm();
        assert!((n - 5.0).abs() < 1e-12);
    }
}
