//! Dense row-major tensors and a tape-based reverse-mode autodiff engine.
//!
//! Every operation is recorded on a [`Tape`] as a [`Node`] holding its input
//! ids, its output id and the op kind that selects the backward rule.
//! [`Tape::backward`] walks the nodes in exact reverse recording order and
//! accumulates gradients into every leaf created with `requires_grad`.
//!
//! The op set is deliberately small: what an MLP-scale multitask model needs
//! (matmul, bias add, elementwise arithmetic, ReLU, sigmoid), the four task
//! losses and the soft-threshold operator used for pruning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {0:?}: dimensions must be positive and match the value count")]
    InvalidShape(Vec<usize>),
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("{0}: degenerate input")]
    Degenerate(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional tensor of `f64` values with an optional gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != values.len()
        {
            return Err(TensorError::InvalidShape(shape));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![n], values).expect("vector must be non-empty")
    }

    /// Row-major matrix from nested rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::InvalidShape(vec![r, c]));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|x| x.iter().copied()).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// View as a matrix: 1-D tensors are a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Plain row-major matrix product without recording, `a[m×k] · b[k×n]`.
pub fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Sign with `sign(0) == 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Abs,
    Sign,
    Scale(ScaleBits),
}

/// Bit pattern of a scale constant so the op kind stays `Eq + Hash`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScaleBits(pub u64);

impl ElementwiseOp {
    pub fn scale(c: f64) -> Self {
        Self::Scale(ScaleBits(c.to_bits()))
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

impl FromStr for ElementwiseOp {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "relu" => Self::Relu,
            "sigmoid" => Self::Sigmoid,
            "abs" => Self::Abs,
            "sign" => Self::Sign,
            other => match other.strip_prefix("scale:").map(str::parse::<f64>) {
                Some(Ok(c)) => Self::scale(c),
                _ => return Err(TensorError::UnknownOp(other.to_string())),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[serde(alias = "ce")]
    CrossEntropy,
    L1,
    NegativeCosine,
    #[serde(alias = "mse")]
    MeanSquaredError,
}

impl FromStr for LossKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-entropy" | "ce" => Ok(Self::CrossEntropy),
            "l1" => Ok(Self::L1),
            "negative-cosine" => Ok(Self::NegativeCosine),
            "mean-squared-error" | "mse" => Ok(Self::MeanSquaredError),
            other => Err(TensorError::UnknownOp(other.to_string())),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CrossEntropy => "cross-entropy",
            Self::L1 => "l1",
            Self::NegativeCosine => "negative-cosine",
            Self::MeanSquaredError => "mean-squared-error",
        })
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    MatMul(TensorId, TensorId),
    Elementwise(ElementwiseOp, TensorId, Option<TensorId>),
    AddBias(TensorId, TensorId),
    Sum(TensorId),
    SoftThreshold { w: TensorId, theta: TensorId },
    Loss(LossKind, TensorId, TensorId),
    WeightedSum(Vec<(TensorId, f64)>),
}

/// One recorded operation.
#[derive(Debug, Clone)]
pub struct Node {
    op: Op,
    out: TensorId,
}

impl Node {
    pub fn inputs(&self) -> Vec<TensorId> {
        match &self.op {
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Loss(_, a, b) => vec![*a, *b],
            Op::Elementwise(_, a, b) => std::iter::once(*a).chain(*b).collect(),
            Op::Sum(a) => vec![*a],
            Op::SoftThreshold { w, theta } => vec![*w, *theta],
            Op::WeightedSum(terms) => terms.iter().map(|(id, _)| *id).collect(),
        }
    }

    pub fn output(&self) -> TensorId {
        self.out
    }
}

/// Records operations and replays them backward.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    leaf: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a leaf tensor. Its `requires_grad` flag decides whether
    /// `backward` stores a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.tensors.push(t);
        self.leaf.push(true);
        TensorId(self.tensors.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> TensorId {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn get(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        self.tensors[id.0].values()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.tensors[id.0].shape()
    }

    fn record(&mut self, op: Op, out: Tensor, name: &'static str) -> Result<TensorId> {
        if !out.values().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(name));
        }
        self.tensors.push(out);
        self.leaf.push(false);
        let id = TensorId(self.tensors.len() - 1);
        self.nodes.push(Node { op, out: id });
        Ok(id)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_values(self.value(a), self.value(b), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.record(Op::MatMul(a, b), t, "matmul")
    }

    pub fn elementwise(
        &mut self,
        kind: ElementwiseOp,
        a: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId> {
        let av = self.value(a);
        let out: Vec<f64> = if kind.is_binary() {
            let b = b.ok_or(TensorError::Invalid(format!("{kind:?} needs two operands")))?;
            if self.shape(a) != self.shape(b) {
                return Err(TensorError::Shape {
                    op: "elementwise",
                    left: self.shape(a).to_vec(),
                    right: self.shape(b).to_vec(),
                });
            }
            let bv = self.value(b);
            let f: fn(f64, f64) -> f64 = match kind {
                ElementwiseOp::Add => |x, y| x + y,
                ElementwiseOp::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        } else {
            if b.is_some() {
                return Err(TensorError::Invalid(format!("{kind:?} is unary")));
            }
            match kind {
                ElementwiseOp::Relu => av.iter().map(|x| x.max(0.0)).collect(),
                ElementwiseOp::Sigmoid => av.iter().map(|x| sigmoid(*x)).collect(),
                ElementwiseOp::Abs => av.iter().map(|x| x.abs()).collect(),
                ElementwiseOp::Sign => av.iter().map(|x| sign(*x)).collect(),
                ElementwiseOp::Scale(c) => {
                    let c = f64::from_bits(c.0);
                    av.iter().map(|x| x * c).collect()
                }
                _ => unreachable!(),
            }
        };
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.record(Op::Elementwise(kind, a, b), t, "elementwise")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(ElementwiseOp::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(ElementwiseOp::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise(ElementwiseOp::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.elementwise(ElementwiseOp::Relu, a, None)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.elementwise(ElementwiseOp::Sigmoid, a, None)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        self.elementwise(ElementwiseOp::scale(c), a, None)
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, c) = self.get(x).rows_cols();
        if self.get(bias).len() != c {
            return Err(TensorError::Shape {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(bv)
                .for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.record(Op::AddBias(x, bias), t, "add_bias")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.value(a).iter().sum();
        self.record(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    /// `sign(w) * max(|w| - sigmoid(theta), 0)` with `theta` a scalar
    /// tensor. Gradients flow to both `w` (masked by the indicator) and
    /// `theta` (through the threshold).
    pub fn soft_threshold(&mut self, w: TensorId, theta: TensorId) -> Result<TensorId> {
        if !self.get(theta).is_scalar() {
            return Err(TensorError::Shape {
                op: "soft_threshold",
                left: self.shape(w).to_vec(),
                right: self.shape(theta).to_vec(),
            });
        }
        let alpha = sigmoid(self.get(theta).item());
        let out = self
            .value(w)
            .iter()
            .map(|x| soft_threshold_scalar(*x, alpha))
            .collect();
        let t = Tensor::new(self.shape(w).to_vec(), out)?;
        self.record(Op::SoftThreshold { w, theta }, t, "soft_threshold")
    }

    /// Scalar loss averaged over rows (the leading batch dimension).
    pub fn loss(&mut self, kind: LossKind, pred: TensorId, target: TensorId) -> Result<TensorId> {
        let v = loss_value(kind, self.get(pred), self.get(target))?;
        self.record(Op::Loss(kind, pred, target), Tensor::scalar(v), "loss")
    }

    /// `Σ c_i · x_i` over scalar tensors with constant coefficients.
    pub fn weighted_sum(&mut self, terms: &[(TensorId, f64)]) -> Result<TensorId> {
        if terms.is_empty() {
            return Err(TensorError::Invalid("weighted_sum of no terms".into()));
        }
        let mut s = 0.0;
        for (id, c) in terms {
            if !self.get(*id).is_scalar() {
                return Err(TensorError::NotScalar(self.shape(*id).to_vec()));
            }
            s += c * self.get(*id).item();
        }
        self.record(Op::WeightedSum(terms.to_vec()), Tensor::scalar(s), "weighted_sum")
    }

    /// Propagates `d root / d leaf` into every `requires_grad` leaf.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if !self.get(root).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        grads[root.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.out.0].take() else {
                continue;
            };
            for (input, local) in self.local_grads(node, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(local),
                }
            }
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let t = &mut self.tensors[i];
                if self.leaf[i] && t.requires_grad {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(TensorError::NonFinite("backward"));
                    }
                    t.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Result<Vec<(TensorId, Vec<f64>)>> {
        Ok(match &node.op {
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose(self.value(*b), k, n);
                let at = transpose(self.value(*a), m, k);
                vec![
                    (*a, matmul_values(g, &bt, m, n, k)),
                    (*b, matmul_values(&at, g, k, m, n)),
                ]
            }
            Op::Elementwise(kind, a, b) => {
                let av = self.value(*a);
                match kind {
                    ElementwiseOp::Add => vec![(*a, g.to_vec()), (b.unwrap(), g.to_vec())],
                    ElementwiseOp::Sub => {
                        vec![(*a, g.to_vec()), (b.unwrap(), g.iter().map(|x| -x).collect())]
                    }
                    ElementwiseOp::Mul => {
                        let b = b.unwrap();
                        let bv = self.value(b);
                        vec![
                            (*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                            (b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
                        ]
                    }
                    ElementwiseOp::Relu => vec![(
                        *a,
                        g.iter()
                            .zip(av)
                            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    )],
                    ElementwiseOp::Sigmoid => {
                        let out = self.value(node.out);
                        vec![(*a, g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect())]
                    }
                    ElementwiseOp::Abs => {
                        vec![(*a, g.iter().zip(av).map(|(g, x)| g * sign(*x)).collect())]
                    }
                    ElementwiseOp::Sign => vec![(*a, vec![0.0; g.len()])],
                    ElementwiseOp::Scale(c) => {
                        let c = f64::from_bits(c.0);
                        vec![(*a, g.iter().map(|x| x * c).collect())]
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let c = self.get(*bias).len();
                let mut gb = vec![0.0; c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.get(*a).len()])],
            Op::SoftThreshold { w, theta } => {
                let th = self.get(*theta).item();
                let alpha = sigmoid(th);
                let wv = self.value(*w);
                let mut gw = Vec::with_capacity(wv.len());
                let mut acc = 0.0;
                for (x, gi) in wv.iter().zip(g) {
                    if x.abs() > alpha {
                        gw.push(*gi);
                        acc += sign(*x) * gi;
                    } else {
                        gw.push(0.0);
                    }
                }
                vec![(*w, gw), (*theta, vec![-sigmoid_prime(th) * acc])]
            }
            Op::Loss(kind, pred, target) => {
                let gp = loss_grad(*kind, self.get(*pred), self.get(*target))?;
                vec![(*pred, gp.into_iter().map(|x| x * g[0]).collect())]
            }
            Op::WeightedSum(terms) => terms.iter().map(|(id, c)| (*id, vec![c * g[0]])).collect(),
        })
    }
}

pub fn soft_threshold_scalar(w: f64, alpha: f64) -> f64 {
    sign(w) * (w.abs() - alpha).max(0.0)
}

enum CeTarget<'a> {
    Classes(&'a [f64]),
    Dense(&'a [f64]),
}

fn ce_target<'a>(pred: &Tensor, target: &'a Tensor) -> Result<CeTarget<'a>> {
    let (r, c) = pred.rows_cols();
    if target.shape() == pred.shape() {
        return Ok(CeTarget::Dense(target.values()));
    }
    if target.len() == r {
        for &cls in target.values() {
            if cls < 0.0 || cls.fract() != 0.0 || cls as usize >= c {
                return Err(TensorError::Invalid(format!(
                    "class index {cls} outside [0, {c})"
                )));
            }
        }
        return Ok(CeTarget::Classes(target.values()));
    }
    Err(TensorError::Shape {
        op: "cross-entropy",
        left: pred.shape().to_vec(),
        right: target.shape().to_vec(),
    })
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn check_same_shape(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.len() != target.len() {
        return Err(TensorError::Shape {
            op,
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward value of a loss, averaged over rows for CE and cosine and over
/// all elements for L1 and MSE.
pub fn loss_value(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (r, c) = pred.rows_cols();
    let p = pred.values();
    match kind {
        LossKind::CrossEntropy => {
            let t = ce_target(pred, target)?;
            let mut total = 0.0;
            for i in 0..r {
                let ls = log_softmax_row(&p[i * c..(i + 1) * c]);
                total -= match t {
                    CeTarget::Classes(cls) => ls[cls[i] as usize],
                    CeTarget::Dense(d) => dot(&ls, &d[i * c..(i + 1) * c]),
                };
            }
            Ok(total / r as f64)
        }
        LossKind::L1 => {
            check_same_shape("l1", pred, target)?;
            let s: f64 = p.iter().zip(target.values()).map(|(a, b)| (a - b).abs()).sum();
            Ok(s / p.len() as f64)
        }
        LossKind::MeanSquaredError => {
            check_same_shape("mse", pred, target)?;
            let s: f64 = p.iter().zip(target.values()).map(|(a, b)| (a - b).powi(2)).sum();
            Ok(s / p.len() as f64)
        }
        LossKind::NegativeCosine => {
            check_same_shape("negative-cosine", pred, target)?;
            let t = target.values();
            let mut total = 0.0;
            for i in 0..r {
                let (pr, tr) = (&p[i * c..(i + 1) * c], &t[i * c..(i + 1) * c]);
                let (np, nt) = (norm(pr), norm(tr));
                if np == 0.0 || nt == 0.0 {
                    return Err(TensorError::Degenerate("negative-cosine"));
                }
                total -= dot(pr, tr) / (np * nt);
            }
            Ok(total / r as f64)
        }
    }
}

fn loss_grad(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = pred.rows_cols();
    let p = pred.values();
    let t = target.values();
    match kind {
        LossKind::CrossEntropy => {
            let tgt = ce_target(pred, target)?;
            let mut g = vec![0.0; p.len()];
            for i in 0..r {
                let ls = log_softmax_row(&p[i * c..(i + 1) * c]);
                let row_sum = match tgt {
                    CeTarget::Classes(_) => 1.0,
                    CeTarget::Dense(d) => d[i * c..(i + 1) * c].iter().sum(),
                };
                for j in 0..c {
                    let y = match tgt {
                        CeTarget::Classes(cls) => f64::from(u8::from(cls[i] as usize == j)),
                        CeTarget::Dense(d) => d[i * c + j],
                    };
                    g[i * c + j] = (ls[j].exp() * row_sum - y) / r as f64;
                }
            }
            Ok(g)
        }
        LossKind::L1 => {
            let n = p.len() as f64;
            Ok(p.iter().zip(t).map(|(a, b)| sign(a - b) / n).collect())
        }
        LossKind::MeanSquaredError => {
            let n = p.len() as f64;
            Ok(p.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / n).collect())
        }
        LossKind::NegativeCosine => {
            let mut g = vec![0.0; p.len()];
            for i in 0..r {
                let (pr, tr) = (&p[i * c..(i + 1) * c], &t[i * c..(i + 1) * c]);
                let (np, nt) = (norm(pr), norm(tr));
                if np == 0.0 || nt == 0.0 {
                    return Err(TensorError::Degenerate("negative-cosine"));
                }
                let cos = dot(pr, tr) / (np * nt);
                for j in 0..c {
                    // d cos / d p = t/(|p||t|) - cos * p/|p|^2
                    let d = tr[j] / (np * nt) - cos * pr[j] / (np * np);
                    g[i * c + j] = -d / r as f64;
                }
            }
            Ok(g)
        }
    }
}
