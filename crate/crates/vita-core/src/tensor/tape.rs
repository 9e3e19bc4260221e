//! Gradient tape: records the op graph during a forward pass and replays it
//! in reverse to accumulate gradients.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Node backward functions map the upstream gradient of the node's output to
/// one gradient buffer per recorded parent, in parent order.
type BackwardFn = Box<dyn Fn(&[f32]) -> Vec<Vec<f32>>>;

struct Node {
    parents: Vec<usize>,
    backward: BackwardFn,
}

struct TapeInner {
    id: u64,
    nodes: Vec<Node>,
    /// Gradients accumulated across backward() calls, indexed by node id.
    grads: Vec<Option<Vec<f32>>>,
}

/// Shared handle to a recording. Cheap to clone; not thread-safe by design
/// (graphs are built on one thread, kernels parallelize internally).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    /// Stable identifier used to detect ops mixing tensors from two tapes.
    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attach a tensor as a differentiable leaf of this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push_node(Vec::new(), Box::new(|_| Vec::new()));
        t.detach().with_node(self.clone(), id)
    }

    pub(crate) fn push_node(&self, parents: Vec<usize>, backward: BackwardFn) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { parents, backward });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    /// Run reverse-mode accumulation from a scalar root. May be called more
    /// than once per tape; gradients add up across calls.
    pub fn backward(&self, root: &Tensor) {
        let (tape, rid) = root
            .node()
            .expect("backward: root tensor is not attached to a tape");
        assert_eq!(tape.id(), self.id(), "backward: root recorded on a different tape");
        assert_eq!(root.numel(), 1, "backward: root must be scalar, got {:?}", root.shape());

        let mut inner = self.inner.borrow_mut();
        let rid = *rid;
        let mut pass: Vec<Option<Vec<f32>>> = vec![None; inner.nodes.len()];
        pass[rid] = Some(vec![1.0]);
        for i in (0..=rid).rev() {
            let Some(g) = pass[i].take() else { continue };
            {
                let node = &inner.nodes[i];
                let contribs = (node.backward)(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (&p, c) in node.parents.iter().zip(contribs) {
                    debug_assert!(p < i, "tape order violated: parent {p} of node {i}");
                    match &mut pass[p] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&c) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(c),
                    }
                }
            }
            match &mut inner.grads[i] {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }

    /// Accumulated gradient of a tensor recorded on this tape, if any
    /// backward pass has reached it.
    pub fn grad(&self, t: &Tensor) -> Option<Vec<f32>> {
        let (tape, id) = t.node()?;
        assert_eq!(tape.id(), self.id(), "grad: tensor recorded on a different tape");
        self.inner.borrow().grads[*id].clone()
    }

    pub(crate) fn grad_of_id(&self, id: usize) -> Option<Vec<f32>> {
        self.inner.borrow().grads[id].clone()
    }
}

/// Record one op. `backward(upstream, needs)` must return one entry per
/// input; entries for inputs with `needs[i] == false` may be `None` and are
/// dropped. Inputs without nodes are constants, and when no input is tracked
/// the result is a plain tensor with nothing recorded.
pub(crate) fn record(
    inputs: &[&Tensor],
    shape: Vec<usize>,
    data: std::sync::Arc<Vec<f32>>,
    backward: impl Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + 'static,
) -> Tensor {
    let mut tape: Option<Tape> = None;
    for t in inputs {
        if let Some((tp, _)) = t.node() {
            match &tape {
                None => tape = Some(tp.clone()),
                Some(existing) => assert_eq!(
                    existing.id(),
                    tp.id(),
                    "op mixes tensors recorded on different tapes"
                ),
            }
        }
    }
    let out = Tensor::from_arc(shape, data);
    let Some(tape) = tape else {
        return out;
    };

    let needs: Vec<bool> = inputs.iter().map(|t| t.node().is_some()).collect();
    let parents: Vec<usize> = inputs
        .iter()
        .filter_map(|t| t.node().map(|(_, id)| *id))
        .collect();
    let wrapped = {
        let needs = needs.clone();
        move |g: &[f32]| -> Vec<Vec<f32>> {
            let full = backward(g, &needs);
            assert_eq!(full.len(), needs.len(), "backward arity mismatch");
            full.into_iter()
                .zip(&needs)
                .filter(|(_, &n)| n)
                .map(|(c, _)| c.expect("missing gradient for tracked input"))
                .collect()
        }
    };
    let id = tape.push_node(parents, Box::new(wrapped));
    out.with_node(tape, id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn watch_then_backward_on_identity_chain() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![3], vec![1.0, -2.0, 3.0]));
        let s = ops::sum_all(&x);
        tape.backward(&s);
        assert_eq!(tape.grad(&x).unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![2], vec![2.0, 5.0]));
        let s = ops::sum_all(&x);
        tape.backward(&s);
        tape.backward(&s);
        assert_eq!(tape.grad(&x).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let tape = Tape::new();
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![2], vec![3.0, 4.0]);
        let before = tape.len();
        let c = ops::add(&a, &b);
        assert_eq!(tape.len(), before);
        assert!(c.node().is_none());
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // s = sum(x * x + x * x) so ds/dx = 4x.
        let tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![2], vec![3.0, -1.0]));
        let p = ops::mul(&x, &x);
        let q = ops::mul(&x, &x);
        let s = ops::sum_all(&ops::add(&p, &q));
        tape.backward(&s);
        assert_eq!(tape.grad(&x).unwrap(), vec![12.0, -4.0]);
    }

    #[test]
    #[should_panic(expected = "different tapes")]
    fn cross_tape_mixing_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.watch(&Tensor::zeros(vec![2]));
        let b = t2.watch(&Tensor::zeros(vec![2]));
        let _ = ops::add(&a, &b);
    }

    #[test]
    #[should_panic(expected = "must be scalar")]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::zeros(vec![3]));
        tape.backward(&x);
    }
}
