//! Dense f64 tensors with tape-free reverse-mode differentiation.
//!
//! Every op builds a node holding its output values plus a closure that maps
//! the output gradient onto its parents. The graph is rebuilt on each forward
//! pass and dropped with its last handle. Leaf tensors that require grad
//! accumulate into a persistent buffer; intermediate gradients only live for
//! the duration of one [`Tensor::backward`] call.

mod conv;
mod ops;
mod optim;
mod param;

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

pub use conv::conv2d;
pub use ops::*;
pub use optim::{OptimizerKind, OptimizerState, ADAM_BETAS, ADAM_EPS};
pub use param::{ParamVector, WireError, PARAM_MAGIC, PARAM_WIRE_VERSION};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

type BackwardFn = dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync;

struct GradFn {
    name: &'static str,
    parents: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

/// Shared handle to an immutable value in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad);
        if let Some(g) = &self.node.grad_fn {
            s.field("op", &g.name);
        }
        if self.numel() <= 16 {
            s.field("data", &self.node.data);
        }
        s.finish()
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn validate_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(shape_err(op, format!("zero extent in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(shape_err(
            op,
            format!("shape {shape:?} holds {n} values but {len} were given"),
        ));
    }
    Ok(())
}

impl Tensor {
    /// Constant leaf (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, data, true)
    }

    pub fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        validate_shape("leaf", shape, data.len())?;
        check_finite("leaf", &data)?;
        Ok(Tensor {
            node: Arc::new(Node {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn: None,
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Self::new(&[1], vec![value])
    }

    /// Builds an op output. Parents that do not require grad are dropped from
    /// the graph; if none require grad the result is a constant.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Tensor],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync + 'static,
    ) -> Result<Tensor> {
        validate_shape(name, &shape, data.len())?;
        check_finite(name, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let grad_fn = requires_grad.then(|| GradFn {
            name,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Box::new(backward),
        });
        Ok(Tensor {
            node: Arc::new(Node {
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.node.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    pub(crate) fn set_grad(&self, grad: Option<Vec<f64>>) {
        *self.node.grad.lock().expect("grad lock") = grad;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.shape(), self.data().to_vec()).expect("detach of a valid tensor")
    }

    /// Deep copy of a leaf: fresh storage, same requires_grad, no grad.
    pub fn deep_copy(&self) -> Tensor {
        Tensor::leaf(self.shape(), self.data().to_vec(), self.requires_grad())
            .expect("copy of a valid tensor")
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.node, &other.node)
    }

    /// Overwrites leaf values, reusing storage when this handle is unique.
    /// The accumulated grad is carried over.
    pub(crate) fn assign(&mut self, f: impl FnOnce(&mut [f64])) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::Contract("assign on a non-leaf tensor".into()));
        }
        if let Some(node) = Arc::get_mut(&mut self.node) {
            f(&mut node.data);
            return check_finite("assign", &node.data);
        }
        let mut data = self.data().to_vec();
        f(&mut data);
        let fresh = Tensor::leaf(self.shape(), data, self.requires_grad())?;
        fresh.set_grad(self.grad());
        *self = fresh;
        Ok(())
    }

    /// Reverse pass from a one-element loss. Leaf gradients accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward called on non-scalar of shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let key = |t: &Tensor| Arc::as_ptr(&t.node) as usize;
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(key(self), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&key(t)) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let contribs = (gf.backward)(&g, &needs);
                    debug_assert_eq!(contribs.len(), gf.parents.len(), "{}", gf.name);
                    for ((p, c), need) in gf.parents.iter().zip(contribs).zip(needs) {
                        let Some(c) = c else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(c.len(), p.numel(), "{}", gf.name);
                        match pending.get_mut(&key(p)) {
                            Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(key(p), c);
                            }
                        }
                    }
                }
                None => {
                    check_finite("backward", &g)?;
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require grad (parents before children).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut visited = std::collections::HashSet::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let k = Arc::as_ptr(&t.node) as usize;
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(k) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.node.grad_fn {
                for p in gf.parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&(Arc::as_ptr(&p.node) as usize)) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
