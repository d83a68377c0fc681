use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::{AutodiffError, Result};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub id: u64,
    /// `None` once a backward pass without retention has released it.
    pub op: RefCell<Option<Op>>,
    pub is_leaf: bool,
}

/// Stride/padding of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const SAME_3X3: Conv2dSpec = Conv2dSpec { stride: 1, pad: 1 };
}

/// Dense row-major `f64` array with an optional handle into the differentiation graph.
#[derive(Clone)]
pub struct Tensor {
    shape: Rc<[usize]>,
    data: Rc<[f64]>,
    node: Option<Rc<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &&*self.shape);
        if self.data.len() <= 16 {
            s.field("data", &&*self.data);
        }
        s.field("tracked", &self.node.is_some()).finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Untracked tensor. Fails when the value count does not match the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::Shape {
                op: "new",
                detail: format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: "new" });
        }
        Ok(Tensor { shape: shape.into(), data: data.into(), node: None })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.into(), data: vec![0.0; numel(shape)].into(), node: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor { shape: shape.into(), data: vec![v; numel(shape)].into(), node: None }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Tracked leaf: a differentiable input such as a network parameter.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::new(shape, data)?.into_leaf())
    }

    /// Same values as a fresh tracked leaf, cut off from any existing history.
    pub fn into_leaf(self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data,
            node: Some(Rc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                op: RefCell::new(None),
                is_leaf: true,
            })),
        }
    }

    /// Same values with no graph handle.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Option<Op>, name: &'static str) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let node = op.map(|op| {
            Rc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                op: RefCell::new(Some(op)),
                is_leaf: false,
            })
        });
        Ok(Tensor { shape: shape.into(), data: data.into(), node })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.as_ref().is_some_and(|n| n.is_leaf)
    }

    /// The single value of a tensor holding exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape.to_vec()));
        }
        Ok(self.data[0])
    }

    pub(crate) fn node(&self) -> Option<&Rc<Node>> {
        self.node.as_ref()
    }

    pub(crate) fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}
