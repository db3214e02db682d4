use std::cell::RefCell;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Takes the upstream gradient of a node's output and returns one gradient
/// buffer per recorded input, in recording order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>> + Send + Sync>;

struct Node<T: Scalar> {
    op: &'static str,
    inputs: Vec<usize>,
    out_len: usize,
    backward: BackwardFn<T>,
}

/// Recording tape. Handles are cheap clones of a shared append-only node
/// list; ops on tensors from two different tapes are a contract violation.
pub struct Tape<T: Scalar> {
    inner: Arc<Mutex<Vec<Node<T>>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> Clone for NodeRef<T> {
    fn clone(&self) -> Self {
        NodeRef {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn ptr_eq(a: &Tape<T>, b: &Tape<T>) -> bool {
        Arc::ptr_eq(&a.inner, &b.inner)
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a tracked leaf and returns the tracked handle.
    /// The buffer is shared with the input, not copied.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.record("leaf", vec![], t.numel(), Box::new(|_| Vec::new()));
        t.detach().with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    pub(crate) fn record(
        &self,
        op: &'static str,
        inputs: Vec<usize>,
        out_len: usize,
        backward: BackwardFn<T>,
    ) -> usize {
        let backward = if fault_matches(op) {
            corrupt_backward(backward)
        } else {
            backward
        };
        let mut nodes = self.inner.lock().unwrap();
        let id = nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id), "tape inputs must precede node");
        nodes.push(Node {
            op,
            inputs,
            out_len,
            backward,
        });
        id
    }
}

/// Gradients produced by one `backward` call, keyed by tracked tensors.
pub struct Gradients<T: Scalar> {
    tape: Tape<T>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `t`, shaped like `t`. `None` when `t` is not
    /// tracked on the same tape or no gradient reached it.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let node = t.node_ref()?;
        if !Tape::ptr_eq(&node.tape, &self.tape) {
            return None;
        }
        let g = self.grads.get(node.id)?.as_ref()?;
        debug_assert_eq!(g.len(), t.numel());
        Some(Tensor::from_data(t.shape().to_vec(), g.clone()))
    }
}

/// Reverse sweep from a scalar loss. Seeds the loss gradient with 1 and
/// accumulates into every node it reaches; fan-out (a tensor consumed by
/// several ops) sums naturally because all uses share one node slot.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<Gradients<T>> {
    let node = loss
        .node_ref()
        .ok_or_else(|| Error::contract("backward: loss tensor is not tracked on a tape"))?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward: loss must hold a single value, shape is {:?}",
            loss.shape()
        )));
    }
    let tape = node.tape.clone();
    let nodes = tape.inner.lock().unwrap();
    let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
    grads[node.id] = Some(vec![T::one()]);

    for id in (0..=node.id).rev() {
        if grads[id].is_none() {
            continue;
        }
        let n = &nodes[id];
        if n.inputs.is_empty() {
            continue;
        }
        let (before, tail) = grads.split_at_mut(id);
        let up = tail[0].as_ref().unwrap();
        debug_assert_eq!(up.len(), n.out_len);
        let gs = (n.backward)(up);
        assert_eq!(
            gs.len(),
            n.inputs.len(),
            "backward of `{}` produced {} gradients for {} inputs",
            n.op,
            gs.len(),
            n.inputs.len()
        );
        for (&inp, g) in n.inputs.iter().zip(gs) {
            assert_eq!(
                g.len(),
                nodes[inp].out_len,
                "backward of `{}` produced a wrong-sized gradient",
                n.op
            );
            match &mut before[inp] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }
    drop(nodes);
    Ok(Gradients { tape, grads })
}

thread_local! {
    static BACKWARD_FAULT: RefCell<Option<String>> = const { RefCell::new(None) };
}

/// Diagnostic hook: when set to an op name, every subsequently recorded node
/// of that op gets its backward outputs scaled by 1.5. Used to demonstrate
/// that the finite-difference checker detects a broken derivative rule.
pub fn set_backward_fault(op: Option<&str>) {
    BACKWARD_FAULT.with(|f| *f.borrow_mut() = op.map(str::to_owned));
}

fn fault_matches(op: &str) -> bool {
    BACKWARD_FAULT.with(|f| f.borrow().as_deref() == Some(op))
}

fn corrupt_backward<T: Scalar>(inner: BackwardFn<T>) -> BackwardFn<T> {
    let factor = T::from_f64(1.5);
    Box::new(move |up| {
        inner(up)
            .into_iter()
            .map(|g| g.into_iter().map(|v| v * factor).collect())
            .collect()
    })
}
