//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to row-major f64 storage plus an
//! optional gradient buffer. Differentiable operations live in [`ops`]; each
//! one computes its output eagerly and, when a recording [`Tape`] is passed,
//! pushes a node that knows how to push adjoints back to its inputs.
//!
//! Gradient semantics follow the usual autograd convention: [`backward`]
//! accumulates (`+=`) into the `grad` buffer of every tensor with
//! `requires_grad`, and repeated backward calls without
//! [`Tensor::zero_grad`] sum their contributions. Within one backward pass
//! the working adjoints are fresh, so two identical passes double the stored
//! gradients exactly.
//!
//! Tensors are immutable after creation except for their grad buffer and the
//! explicit in-place parameter update performed by the optimizer. A `Tape` is
//! single-threaded; independent tapes may live on different threads.

pub mod adam;
pub mod ops;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorData {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// Transient adjoint used only inside a backward pass.
    adjoint: Option<Vec<f64>>,
}

/// Handle to an n-dimensional f64 array. Cloning is O(1) and shares storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..4]={:?})",
            d.shape,
            d.requires_grad,
            &d.data[..d.data.len().min(4)]
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                requires_grad: false,
                grad: None,
                adjoint: None,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), vec![0.0; numel_of(shape)]).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape.to_vec(), vec![value; numel_of(shape)]).expect("valid shape")
    }

    /// 0-dimensional tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![], vec![value]).expect("scalar")
    }

    /// Mark as a differentiation target (builder style).
    pub fn requires_grad(self, yes: bool) -> Tensor {
        self.inner.borrow_mut().requires_grad = yes;
        self
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the raw data. Panics if a conflicting mutable borrow is live.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a 0-d or single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.borrow();
        assert_eq!(d.data.len(), 1, "item() on tensor with {} elements", d.data.len());
        d.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// In-place overwrite of the data (optimizer update, buffer update).
    /// Length must match; shape is unchanged.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(d.data.len(), new.len(), "set_data length mismatch");
        d.data.copy_from_slice(new);
    }

    /// Identity for deduplication in backward and optimizer bookkeeping.
    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn detached_copy(&self) -> Tensor {
        let d = self.inner.borrow();
        Tensor::from_vec(d.shape.clone(), d.data.clone()).expect("copy")
    }

    /// Interpret the same data under a new shape (row-major, no grad link).
    pub(crate) fn with_shape_of_data(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).expect("internal reshape")
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected 4-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn accumulate_adjoint(&self, contribution: &[f64]) {
        let mut d = self.inner.borrow_mut();
        match d.adjoint.as_mut() {
            Some(a) => {
                for (ai, &ci) in a.iter_mut().zip(contribution) {
                    *ai += ci;
                }
            }
            None => d.adjoint = Some(contribution.to_vec()),
        }
    }

    fn adjoint_clone(&self) -> Option<Vec<f64>> {
        self.inner.borrow().adjoint.clone()
    }

    fn clear_adjoint(&self) {
        self.inner.borrow_mut().adjoint = None;
    }

    fn flush_adjoint_to_grad(&self) {
        let mut d = self.inner.borrow_mut();
        if !d.requires_grad {
            return;
        }
        if let Some(adj) = d.adjoint.as_ref() {
            match d.grad.as_mut() {
                Some(g) => {
                    for (gi, &ai) in g.iter_mut().zip(adj.iter()) {
                        *gi += ai;
                    }
                }
                None => {
                    let adj = adj.clone();
                    d.grad = Some(adj);
                }
            }
        }
    }
}

/// Adjoint sink handed to node backward functions: push a contribution to one
/// input's adjoint buffer.
pub(crate) struct Sink;

impl Sink {
    pub(crate) fn add(&self, t: &Tensor, contribution: &[f64]) {
        t.accumulate_adjoint(contribution);
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &Sink)>;

struct Node {
    inputs: Vec<Tensor>,
    output: Tensor,
    backward: BackwardFn,
}

/// Records the forward graph for one differentiable computation.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A non-recording tape: ops run forward-only and their outputs are
    /// detached (no gradient flows through them later).
    pub fn inference() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a node. Called by ops after computing `output`.
    pub(crate) fn push(&mut self, inputs: Vec<Tensor>, output: Tensor, backward: BackwardFn) {
        self.nodes.push(Node {
            inputs,
            output,
            backward,
        });
    }

    /// Whether an op should record: tape on and some input carries grad.
    pub(crate) fn wants(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.needs_grad())
    }
}

/// Reverse-mode sweep from `loss` over everything recorded on `tape`.
///
/// Adjoints are computed fresh for this call and then added into the `grad`
/// buffer of every tensor with `requires_grad` (leaves and intermediates
/// alike). The tape is left intact; running backward twice doubles the
/// accumulated gradients exactly.
pub fn backward(tape: &Tape, loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Shape(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let loss_id = loss.ptr_id();
    if !tape.nodes.iter().any(|n| n.output.ptr_id() == loss_id) {
        return Err(Error::Value(
            "loss tensor was not produced on this tape".to_string(),
        ));
    }

    // Fresh working adjoints.
    for node in &tape.nodes {
        node.output.clear_adjoint();
        for t in &node.inputs {
            t.clear_adjoint();
        }
    }
    loss.accumulate_adjoint(&[1.0]);

    let sink = Sink;
    for node in tape.nodes.iter().rev() {
        let adj = match node.output.adjoint_clone() {
            Some(a) => a,
            None => continue, // output did not influence the loss
        };
        (node.backward)(&adj, &sink);
    }

    // One flush per distinct tensor.
    let mut seen = std::collections::HashSet::new();
    for node in &tape.nodes {
        for t in node.inputs.iter().chain(std::iter::once(&node.output)) {
            if seen.insert(t.ptr_id()) {
                t.flush_adjoint_to_grad();
            }
        }
    }
    for node in &tape.nodes {
        node.output.clear_adjoint();
        for t in &node.inputs {
            t.clear_adjoint();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn from_vec_validates_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_one_element() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), Vec::<usize>::new());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 3], (0..6).map(|i| i as f64).collect())
            .unwrap()
            .requires_grad(true);
        let s = ops::sum(&mut tape, &x).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar_and_tape_membership() {
        let mut tape = Tape::new();
        let x = Tensor::zeros(&[2]).requires_grad(true);
        let y = ops::scale(&mut tape, &x, 2.0).unwrap();
        assert!(backward(&tape, &y).is_err()); // not scalar
        let off_tape = Tensor::scalar(1.0).requires_grad(true);
        assert!(backward(&tape, &off_tape).is_err());
    }

    #[test]
    fn double_backward_doubles_grads() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5])
            .unwrap()
            .requires_grad(true);
        let y = ops::mul(&mut tape, &x, &x).unwrap();
        let s = ops::sum(&mut tape, &y).unwrap();
        backward(&tape, &s).unwrap();
        let g1 = x.grad().unwrap();
        backward(&tape, &s).unwrap();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn fanout_sums_path_gradients() {
        // y = x*x + 3x  =>  dy/dx = 2x + 3
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![1], vec![4.0]).unwrap().requires_grad(true);
        let sq = ops::mul(&mut tape, &x, &x).unwrap();
        let tripled = ops::scale(&mut tape, &x, 3.0).unwrap();
        let y = ops::add(&mut tape, &sq, &tripled).unwrap();
        let s = ops::sum(&mut tape, &y).unwrap();
        backward(&tape, &s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0 * 4.0 + 3.0]);
    }

    #[test]
    fn inference_tape_detaches() {
        let mut tape = Tape::inference();
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().requires_grad(true);
        let y = ops::scale(&mut tape, &x, 5.0).unwrap();
        assert!(!y.needs_grad());
        assert!(tape.is_empty());
    }
}
