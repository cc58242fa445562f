//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it executes, keeping whatever the
//! backward rule needs. [`Tape::backward`] then walks the record in exact
//! reverse order and accumulates gradients additively into every leaf that
//! was created with `requires_grad`.
//!
//! ```
//! use sigshot::autodiff::Tape;
//! use sigshot::linalg::Mat;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Mat::from_rows(&[[3.0, 4.0]]), true);
//! let n = tape.frobenius_norm(a).unwrap();
//! let loss = tape.mul_self(n).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(a).unwrap(), &Mat::from_rows(&[[6.0, 8.0]]));
//! ```
//!
//! Conventions at non-differentiable points: `relu` uses subgradient 0 at 0,
//! `sqrt`, `frobenius_norm` and row norms use gradient 0 at 0.

use crate::dtw::{self, DtwError, DtwMode};
use crate::linalg::Mat;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op} produced a non-finite value")]
    NonFiniteResult { op: &'static str },
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("softmin temperature must be positive, got {0}")]
    InvalidGamma(f64),
    #[error("index ({row}, {col}) out of range for shape {shape:?}")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        shape: (usize, usize),
    },
    #[error("empty operand list for {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Dtw(#[from] DtwError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    RowSqnorm(Var),
    Sqrt(Var),
    FrobeniusNorm(Var),
    SqEuclideanRows(Var, Var),
    Softmin3([Var; 3], f64),
    Log(Var),
    Exp(Var),
    Negate(Var),
    Mean(Var),
    Sum(Var),
    AddRowBias(Var, Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Element(Var, usize, usize),
    Dtw {
        cost: Var,
        tau: usize,
        mode: DtwMode,
        cumulative: Mat,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of one computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    disconnected: Vec<Var>,
}

impl Gradients {
    /// Gradient for a `requires_grad` leaf. Leaves the loss does not depend
    /// on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Mat> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Trainable leaves that did not reach the loss.
    pub fn disconnected(&self) -> &[Var] {
        &self.disconnected
    }
}

fn shape_check(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// `-γ·ln(e^{-a/γ} + e^{-b/γ} + e^{-c/γ})`, evaluated with a max shift.
/// `+∞` arguments contribute nothing; all-infinite input yields `+∞`.
pub fn softmin3(a: f64, b: f64, c: f64, gamma: f64) -> f64 {
    let lo = a.min(b).min(c);
    if lo == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = [a, b, c]
        .iter()
        .filter(|x| x.is_finite())
        .map(|&x| (-(x - lo) / gamma).exp())
        .sum();
    lo - gamma * s.ln()
}

/// Weights `∂softmin3/∂(a, b, c)`, given the already computed value.
pub fn softmin3_weights(args: [f64; 3], value: f64, gamma: f64) -> [f64; 3] {
    args.map(|x| {
        if x.is_finite() {
            ((value - x) / gamma).exp()
        } else {
            0.0
        }
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Mat, op: Op, allow_inf: bool) -> Result<Var> {
        let bad = if allow_inf {
            value.has_nan()
        } else {
            !value.is_finite()
        };
        if bad {
            return Err(AutodiffError::NonFiniteResult { op: op_name });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::SqEuclideanRows(a, b)
            | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::RowSqnorm(a)
            | Op::Sqrt(a)
            | Op::FrobeniusNorm(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Negate(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::GatherRows(a, _)
            | Op::Element(a, _, _) => vec![*a],
            Op::Softmin3(args, _) => args.to_vec(),
            Op::ConcatCols(vs) => vs.clone(),
            Op::Dtw { cost, .. } => vec![*cost],
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = av.matmul(bv);
        self.push("matmul", out, Op::MatMul(a, b), false)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_check("add", self.value(a), self.value(b))?;
        let out = self.value(a).add(self.value(b));
        self.push("add", out, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_check("sub", self.value(a), self.value(b))?;
        let out = self.value(a).sub(self.value(b));
        self.push("sub", out, Op::Sub(a, b), false)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_check("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), false)
    }

    pub fn mul_self(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push("scale", out, Op::Scale(a, s), false)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), false)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a), false)
    }

    /// Per-row sum of squares, as an `m×1` column.
    pub fn row_sqnorm(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = Mat::from_fn(av.rows(), 1, |r, _| av.row(r).iter().map(|v| v * v).sum());
        self.push("row_sqnorm", out, Op::RowSqnorm(a), false)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(a), false)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Result<Var> {
        let out = Mat::scalar(self.value(a).frobenius_norm());
        self.push("frobenius_norm", out, Op::FrobeniusNorm(a), false)
    }

    /// Pairwise squared Euclidean distances between the rows of `a` and `b`.
    pub fn squared_euclidean_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "squared_euclidean_rows",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = Mat::from_fn(av.rows(), bv.rows(), |i, j| {
            av.row(i)
                .iter()
                .zip(bv.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        });
        self.push("squared_euclidean_rows", out, Op::SqEuclideanRows(a, b), false)
    }

    /// Soft minimum of three `1×1` tensors; see [`softmin3`].
    pub fn softmin3(&mut self, a: Var, b: Var, c: Var, gamma: f64) -> Result<Var> {
        if gamma <= 0.0 || gamma.is_nan() {
            return Err(AutodiffError::InvalidGamma(gamma));
        }
        for v in [a, b, c] {
            if self.shape(v) != (1, 1) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmin3",
                    left: self.shape(v),
                    right: (1, 1),
                });
            }
        }
        let out = softmin3(self.scalar(a), self.scalar(b), self.scalar(c), gamma);
        self.push("softmin3", Mat::scalar(out), Op::Softmin3([a, b, c], gamma), true)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", out, Op::Log(a), false)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), false)
    }

    pub fn negate(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| -v);
        self.push("negate", out, Op::Negate(a), false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(AutodiffError::Empty("mean"));
        }
        let out = Mat::scalar(av.sum() / av.len() as f64);
        self.push("mean", out, Op::Mean(a), false)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Mat::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), false)
    }

    /// Adds the `1×n` row `bias` to every row of the `m×n` matrix `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_bias",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let out = Mat::from_fn(av.rows(), av.cols(), |r, c| av[(r, c)] + bv[(0, c)]);
        self.push("add_row_bias", out, Op::AddRowBias(a, bias), false)
    }

    /// Stacks the selected rows of `a` (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(AutodiffError::IndexOutOfRange {
                row: bad,
                col: 0,
                shape: av.shape(),
            });
        }
        let out = Mat::from_fn(rows.len(), av.cols(), |r, c| av[(rows[r], c)]);
        self.push("gather_rows", out, Op::GatherRows(a, rows.to_vec()), false)
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat_cols"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
            cols += self.shape(p).1;
        }
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), false)
    }

    pub fn element(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let av = self.value(a);
        if row >= av.rows() || col >= av.cols() {
            return Err(AutodiffError::IndexOutOfRange {
                row,
                col,
                shape: av.shape(),
            });
        }
        let out = Mat::scalar(av[(row, col)]);
        self.push("element", out, Op::Element(a, row, col), false)
    }

    /// Cumulative DTW distance of a cost matrix as a `1×1` tensor.
    ///
    /// Soft mode is differentiable everywhere; hard mode back-propagates the
    /// indicator of the argmin path (a subgradient, wrong at ties).
    pub fn dtw(&mut self, cost: Var, tau: usize, mode: DtwMode) -> Result<Var> {
        let ev = self.value(cost);
        let cumulative = dtw::cumulative_table(ev, tau, mode)?;
        let distance = dtw::terminal_distance(&cumulative)?;
        self.push(
            "dtw",
            Mat::scalar(distance),
            Op::Dtw {
                cost,
                tau,
                mode,
                cumulative,
            },
            false,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let mut disconnected = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let trainable_leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !trainable_leaf {
                grads[i] = None;
            } else if grads[i].is_none() {
                log::warn!("leaf {i} does not reach the loss; gradient set to zero");
                grads[i] = Some(Mat::zeros(node.value.rows(), node.value.cols()));
                disconnected.push(Var(i));
            }
        }
        Ok(Gradients {
            grads,
            disconnected,
        })
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(val(*b)));
                acc(*b, val(*a).t_matmul(g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        d[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::RowSqnorm(a) => {
                let av = val(*a);
                acc(*a, Mat::from_fn(av.rows(), av.cols(), |r, c| 2.0 * av[(r, c)] * g[(r, 0)]));
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |gv, s| if s > 0.0 { gv / (2.0 * s) } else { 0.0 }));
            }
            Op::FrobeniusNorm(a) => {
                let norm = node.value[(0, 0)];
                let av = val(*a);
                if norm > 0.0 {
                    acc(*a, av.scale(g[(0, 0)] / norm));
                } else {
                    acc(*a, Mat::zeros(av.rows(), av.cols()));
                }
            }
            Op::SqEuclideanRows(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = Mat::zeros(av.rows(), av.cols());
                let mut db = Mat::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for j in 0..bv.rows() {
                        let w = 2.0 * g[(i, j)];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..av.cols() {
                            let diff = w * (av[(i, k)] - bv[(j, k)]);
                            da[(i, k)] += diff;
                            db[(j, k)] -= diff;
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Softmin3(args, gamma) => {
                let xs = args.map(|v| val(v)[(0, 0)]);
                let w = softmin3_weights(xs, node.value[(0, 0)], *gamma);
                for (v, wk) in args.iter().zip(w) {
                    acc(*v, Mat::scalar(g[(0, 0)] * wk));
                }
            }
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |gv, x| gv / x)),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y)),
            Op::Negate(a) => acc(*a, g.scale(-1.0)),
            Op::Mean(a) => {
                let av = val(*a);
                acc(*a, Mat::filled(av.rows(), av.cols(), g[(0, 0)] / av.len() as f64));
            }
            Op::Sum(a) => {
                let av = val(*a);
                acc(*a, Mat::filled(av.rows(), av.cols(), g[(0, 0)]));
            }
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone());
                let col_sums = Mat::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g[(r, c)]).sum());
                acc(*b, col_sums);
            }
            Op::GatherRows(a, rows) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for (r, &src) in rows.iter().enumerate() {
                    for (dst, gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *dst += gv;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    acc(p, Mat::from_fn(g.rows(), cols, |r, c| g[(r, offset + c)]));
                    offset += cols;
                }
            }
            Op::Element(a, row, col) => {
                let av = val(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                d[(*row, *col)] = g[(0, 0)];
                acc(*a, d);
            }
            Op::Dtw {
                cost,
                tau,
                mode,
                cumulative,
            } => {
                let d = dtw::cost_gradient(val(*cost), cumulative, *tau, *mode);
                acc(*cost, d.scale(g[(0, 0)]));
            }
        }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one trainable leaf per entry of `params`,
/// and must return a `1×1` loss. The relative error of each entry is
/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, params: &[Mat], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Mat]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Mat> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("trainable leaf");
        for k in 0..params[pi].len() {
            let orig = params[pi].values()[k];
            probe[pi].values_mut()[k] = orig + step;
            let plus = eval(&probe)?;
            probe[pi].values_mut()[k] = orig - step;
            let minus = eval(&probe)?;
            probe[pi].values_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.values()[k];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > report.max_relative_error {
                report = GradCheck {
                    max_relative_error: err,
                    worst: (pi, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_zero_row_is_uniform() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(1, 3));
        let s = t.softmax_rows(a).unwrap();
        for &v in t.value(s).values() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmin3_closed_forms() {
        for gamma in [0.01, 0.5, 1.0, 3.0] {
            assert!(close(softmin3(1.0, 1.0, 1.0, gamma), 1.0 - gamma * 3f64.ln(), 1e-12));
            assert_eq!(softmin3(0.0, f64::INFINITY, f64::INFINITY, gamma), 0.0);
        }
        assert_eq!(
            softmin3(f64::INFINITY, f64::INFINITY, f64::INFINITY, 1.0),
            f64::INFINITY
        );
    }

    #[test]
    fn softmin3_on_tape_drops_infinite_candidates() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::scalar(0.5), true);
        let b = t.leaf(Mat::scalar(f64::INFINITY), true);
        let c = t.leaf(Mat::scalar(f64::INFINITY), true);
        let s = t.softmin3(a, b, c, 0.1).unwrap();
        assert_eq!(t.scalar(s), 0.5);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap()[(0, 0)], 1.0);
        assert_eq!(g.get(b).unwrap()[(0, 0)], 0.0);
        assert!(matches!(
            t.softmin3(a, b, c, 0.0),
            Err(AutodiffError::InvalidGamma(_))
        ));
    }

    #[test]
    fn frobenius_squared_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[[3.0, 4.0]]), true);
        let n = t.frobenius_norm(a).unwrap();
        let l = t.mul_self(n).unwrap();
        assert!(close(t.scalar(l), 25.0, 1e-12));
        let g = t.backward(l).unwrap();
        let ga = g.get(a).unwrap();
        assert!(close(ga[(0, 0)], 6.0, 1e-12) && close(ga[(0, 1)], 8.0, 1e-12));
    }

    #[test]
    fn relu_mean_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[[-1.0, 2.0]]), true);
        let r = t.relu(a).unwrap();
        let l = t.mean(r).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &Mat::from_rows(&[[0.0, 0.5]]));
    }

    #[test]
    fn relu_and_sqrt_use_zero_subgradient_at_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[[0.0, 0.0]]), true);
        let r = t.relu(a).unwrap();
        let q = t.row_sqnorm(r).unwrap();
        let s = t.sqrt(q).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &Mat::zeros(1, 2));
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Mat::scalar(2.0), true);
        let unused = t.leaf(Mat::zeros(2, 2), true);
        let l = t.mul_self(a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Mat::zeros(2, 2));
        assert_eq!(g.disconnected(), &[unused]);
    }

    #[test]
    fn shape_and_nan_errors() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(2, 3));
        let b = t.constant(Mat::zeros(2, 2));
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(t.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        let neg = t.constant(Mat::scalar(-1.0));
        assert!(matches!(t.log(neg), Err(AutodiffError::NonFiniteResult { .. })));
        assert!(matches!(t.backward(a), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // l = sum(a + a + a) -> dl/da = 3
        let mut t = Tape::new();
        let a = t.leaf(Mat::from_rows(&[[1.0, -2.0]]), true);
        let b = t.add(a, a).unwrap();
        let c = t.add(b, a).unwrap();
        let l = t.sum(c).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap(), &Mat::filled(1, 2, 3.0));
    }

    #[test]
    fn grad_check_sum_of_squares_is_exact() {
        let p = Mat::from_rows(&[[0.3, -1.2, 2.0], [0.7, 0.1, -0.4]]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul_self(v[0])?;
                t.sum(sq)
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-10, "{r:?}");
    }

    #[test]
    fn grad_check_each_primitive() {
        let a = Mat::from_rows(&[[0.3, -1.2, 0.9], [0.7, 0.15, -0.4]]);
        let b = Mat::from_rows(&[[0.5, 0.2, -0.3], [-0.6, 1.1, 0.25], [0.05, -0.9, 0.8]]);
        let bias = Mat::from_rows(&[[0.1, -0.2, 0.3]]);
        let r = grad_check(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?;
                let ab = t.add_row_bias(ab, v[2])?;
                let act = t.relu(ab)?;
                let att = t.softmax_rows(ab)?;
                let mixed = t.add(act, att)?;
                let bt = t.transpose(v[1])?;
                let bb = t.matmul(bt, v[1])?;
                let cost = t.squared_euclidean_rows(mixed, bb)?;
                let scaled = t.scale(cost, -0.1)?;
                let ex = t.exp(scaled)?;
                let lg = t.log(ex)?;
                let norms = t.row_sqnorm(mixed)?;
                let roots = t.sqrt(norms)?;
                let g = t.gather_rows(mixed, &[1, 0, 1])?;
                let cat = t.concat_cols(&[g, g])?;
                let fro = t.frobenius_norm(cat)?;
                let e = t.element(lg, 1, 2)?;
                let e2 = t.element(lg, 0, 0)?;
                let e3 = t.element(roots, 1, 0)?;
                let sm = t.softmin3(e, e2, e3, 0.3)?;
                let s1 = t.sum(roots)?;
                let m1 = t.mean(lg)?;
                let n1 = t.negate(m1)?;
                let x = t.add(fro, sm)?;
                let y = t.add(x, s1)?;
                t.sub(y, n1)
            },
            &[a, b, bias],
            1e-5,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }
}
