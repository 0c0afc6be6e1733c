//! Dense `f64` arrays with reverse-mode automatic differentiation.
//!
//! A [`Value`] is an immutable node in a computation graph. Operations
//! produce new values that remember their operands; [`backward`] walks the
//! graph from a scalar root and returns a [`GradStore`] holding
//! `d root / d v` for every reachable value with `requires_grad`.
//!
//! Gradients live in the returned store rather than on the values, so each
//! backward call starts from zero and two calls never accumulate into each
//! other.

mod grad;
mod ops;
mod param;

pub use grad::{backward, GradStore};
pub use param::{sgd_step, ParamStore};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Provenance of a value, kept only when some operand requires a gradient.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    Offset(Value),
    MatMul(Value, Value),
    Conv2d {
        input: Value,
        weight: Value,
        bias: Option<Value>,
        stride: usize,
        padding: usize,
    },
    Relu(Value),
    Sigmoid(Value),
    Log { input: Value, floor: Option<f64> },
    Abs(Value),
    Powf(Value, f64),
    Sum(Value),
    Mean(Value),
    Reshape(Value),
    Permute(Value, Vec<usize>),
    GatherRows(Value, Vec<usize>),
    SmoothL1(Value, f64),
}

impl Op {
    pub(crate) fn operands(&self) -> Vec<&Value> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log { input: a, .. }
            | Op::Abs(a)
            | Op::Powf(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::GatherRows(a, _)
            | Op::SmoothL1(a, _) => vec![a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log { .. } => "log",
            Op::Abs(_) => "abs",
            Op::Powf(..) => "powf",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::GatherRows(..) => "gather_rows",
            Op::SmoothL1(..) => "smooth_l1",
        }
    }
}

pub(crate) struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// A dense array node in the computation graph.
///
/// Cloning is cheap (reference counted). Values are `Send + Sync` and never
/// mutated after construction.
#[derive(Clone)]
pub struct Value(Arc<Node>);

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Value")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("op", &self.0.op.name())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Value {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Value {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        // Constant subgraphs do not need their provenance.
        let op = if requires_grad { op } else { Op::Leaf };
        Value(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    fn derived(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Value {
        let requires_grad = op.operands().iter().any(|v| v.requires_grad());
        Value::build(shape, data, requires_grad, op)
    }

    /// Constant array (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Value> {
        check_len(shape, &data, "new")?;
        Ok(Value::build(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf (gradient tracked).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Value> {
        check_len(shape, &data, "param")?;
        Ok(Value::build(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn scalar(x: f64) -> Value {
        Value::build(vec![], vec![x], false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Value {
        let n = shape.iter().product();
        Value::build(shape.to_vec(), vec![0.0; n], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], x: f64) -> Value {
        let n = shape.iter().product();
        Value::build(shape.to_vec(), vec![x; n], false, Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn op(&self) -> &Op {
        &self.0.op
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.shape().iter().all(|&d| d == 1)
    }

    /// The single element of a scalar-shaped value.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.0.data[0])
        } else {
            Err(Error::shape("item", format!("expected scalar, got {:?}", self.shape())))
        }
    }

    /// Same data, cut out of the graph: never receives or passes on a gradient.
    pub fn stop_gradient(&self) -> Value {
        Value::build(self.0.shape.clone(), self.0.data.clone(), false, Op::Leaf)
    }

    /// Copy of this value as a trainable leaf with the same data.
    pub fn to_param(&self) -> Value {
        Value::build(self.0.shape.clone(), self.0.data.clone(), true, Op::Leaf)
    }
}

/// Free-function form of [`Value::stop_gradient`].
pub fn stop_gradient(v: &Value) -> Value {
    v.stop_gradient()
}

fn check_len(shape: &[usize], data: &[f64], op: &'static str) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::shape(
            op,
            format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
        ));
    }
    Ok(())
}
