//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Tape`] evaluates eagerly: every primitive computes its value when it
//! is pushed, so the tape doubles as the forward pass. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints; a node used by
//! several consumers receives the sum of their contributions.
//!
//! The primitive set is exactly what projector training needs: matmul,
//! (broadcast) add, scaling by a constant or by a scalar node, `exp`,
//! row-mean, full sum, relu, gelu, row L2-normalization, transpose and the
//! diagonal-target softmax cross-entropy.
//!
//! [`grad_check`] compares reverse-mode gradients against central finite
//! differences and refuses to judge points that sit within `step` of a
//! primitive's singularity (a relu kink, a vanishing row norm).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};
use core::fmt;

use thiserror::Error;

use crate::matrix::{dot, norm, Matrix};

/// Norm floor for row normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Row norms below `L2_UNSTABLE_FACTOR * step` make finite differences through
/// row normalization unreliable.
pub const L2_UNSTABLE_FACTOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Add,
    Scale,
    ScaleBy,
    Exp,
    MeanRows,
    Sum,
    Relu,
    Gelu,
    L2NormalizeRows,
    Transpose,
    CrossEntropyDiag,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("non-finite value at node {node} ({primitive})")]
    NonFinite { node: usize, primitive: Primitive },
    #[error("backward requires a 1x1 loss, got {0}x{1}")]
    NotScalar(usize, usize),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    MeanRows(Var),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    L2NormalizeRows(Var),
    Transpose(Var),
    CrossEntropyDiag(Var),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::Scale(..) => Primitive::Scale,
            Op::ScaleBy(..) => Primitive::ScaleBy,
            Op::Exp(_) => Primitive::Exp,
            Op::MeanRows(_) => Primitive::MeanRows,
            Op::Sum(_) => Primitive::Sum,
            Op::Relu(_) => Primitive::Relu,
            Op::Gelu(_) => Primitive::Gelu,
            Op::L2NormalizeRows(_) => Primitive::L2NormalizeRows,
            Op::Transpose(_) => Primitive::Transpose,
            Op::CrossEntropyDiag(_) => Primitive::CrossEntropyDiag,
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
    // Distance of this node's input to the primitive's non-smooth point.
    margin: Option<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_non_finite: Option<usize>,
}

/// Adjoints of every node that required a gradient.
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adjoints[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.adjoints[v.0].take()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// Mean over rows of `logsumexp(row_i) − row_i[i]`, with its softmax.
fn cross_entropy_diag(logits: &Matrix) -> (f64, Matrix) {
    let (b, c) = logits.shape();
    assert!(c >= b, "cross-entropy needs a target column for every row");
    let mut probs = Matrix::zeros(b, c);
    // Running mean, so identical rows average to exactly their common value.
    let mut mean = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
            *p = libm::exp(v - m);
            s += *p;
        }
        for p in probs.row_mut(i) {
            *p /= s;
        }
        let term = (m - row[i]) + libm::log(s);
        mean += (term - mean) / (i + 1) as f64;
    }
    (mean, probs)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn primitive(&self, v: Var) -> Primitive {
        self.nodes[v.0].op.primitive()
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool, margin: Option<f64>) -> Var {
        let idx = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            margin,
        });
        Var(idx)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true, None)
    }

    /// A leaf treated as data.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, ng, None)
    }

    /// `a + b`, where `b` is either the same shape as `a` or a `1 × cols` row
    /// broadcast over every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "add column mismatch");
        assert!(
            bv.rows() == av.rows() || bv.rows() == 1,
            "add expects equal shapes or a broadcast row"
        );
        let mut out = av.clone();
        for i in 0..out.rows() {
            let bi = if bv.rows() == 1 { 0 } else { i };
            for (o, x) in out.row_mut(i).iter_mut().zip(bv.row(bi)) {
                *o += x;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng, None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scaled(factor);
        let ng = self.ng(a);
        self.push(Op::Scale(a, factor), v, ng, None)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            self.value(s).shape(),
            (1, 1),
            "scale_by expects a scalar node"
        );
        let v = self.value(a).scaled(self.scalar(s));
        let ng = self.ng(a) || self.ng(s);
        self.push(Op::ScaleBy(a, s), v, ng, None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::exp);
        let ng = self.ng(a);
        self.push(Op::Exp(a), v, ng, None)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), v, ng, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(Op::Sum(a), v, ng, None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let margin = x
            .as_slice()
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let v = x.map(|t| t.max(0.0));
        let ng = self.ng(a);
        self.push(Op::Relu(a), v, ng, Some(margin))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(Op::Gelu(a), v, ng, None)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let margin = (0..x.rows()).fold(f64::INFINITY, |m, i| m.min(norm(x.row(i))));
        let v = x.normalize_rows(NORM_EPS);
        let ng = self.ng(a);
        self.push(
            Op::L2NormalizeRows(a),
            v,
            ng,
            Some(margin / L2_UNSTABLE_FACTOR),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(Op::Transpose(a), v, ng, None)
    }

    /// Mean cross-entropy of each row's softmax against target column `i`.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Var {
        let (loss, _) = cross_entropy_diag(self.value(logits));
        let ng = self.ng(logits);
        self.push(
            Op::CrossEntropyDiag(logits),
            Matrix::filled(1, 1, loss),
            ng,
            None,
        )
    }

    /// The node closest to a non-smooth point, as `(node, primitive, margin)`.
    ///
    /// Relu margins are the smallest absolute pre-activation; normalization
    /// margins are the smallest row norm divided by [`L2_UNSTABLE_FACTOR`].
    pub fn min_margin(&self) -> Option<(Var, Primitive, f64)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.margin.map(|m| (Var(i), n.op.primitive(), m)))
            .min_by(|a, b| a.2.total_cmp(&b.2))
    }

    pub fn check_finite(&self) -> Result<(), GradError> {
        match self.first_non_finite {
            Some(node) => Err(GradError::NonFinite {
                node,
                primitive: self.nodes[node].op.primitive(),
            }),
            None => Ok(()),
        }
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Reverse pass seeded with `d loss = seed`.
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients, GradError> {
        self.check_finite()?;
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(GradError::NotScalar(shape.0, shape.1));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::filled(1, 1, seed));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their adjoint; it is the result.
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else {
                continue;
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(a) {
                        let da = g.matmul_t(self.value(b));
                        accumulate(&mut adj, a, da);
                    }
                    if self.ng(b) {
                        let db = self.value(a).t_matmul(&g);
                        accumulate(&mut adj, b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(b) {
                        let db = if self.value(b).rows() == 1 && g.rows() != 1 {
                            let mut s = Matrix::zeros(1, g.cols());
                            for i in 0..g.rows() {
                                for (o, x) in s.row_mut(0).iter_mut().zip(g.row(i)) {
                                    *o += x;
                                }
                            }
                            s
                        } else {
                            g.clone()
                        };
                        accumulate(&mut adj, b, db);
                    }
                    if self.ng(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, g.scaled(c)),
                Op::ScaleBy(a, s) => {
                    if self.ng(s) {
                        let ds = dot(g.as_slice(), self.value(a).as_slice());
                        accumulate(&mut adj, s, Matrix::filled(1, 1, ds));
                    }
                    if self.ng(a) {
                        accumulate(&mut adj, a, g.scaled(self.scalar(s)));
                    }
                }
                Op::Exp(a) => {
                    let mut d = g;
                    for (x, y) in d.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *x *= y;
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::MeanRows(a) => {
                    let r = self.value(a).rows();
                    let mut d = Matrix::zeros(r, g.cols());
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = x * inv;
                        }
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(a).shape();
                    accumulate(&mut adj, a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (x, &v) in d.as_mut_slice().iter_mut().zip(self.value(a).as_slice()) {
                        if v <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    for (x, &v) in d.as_mut_slice().iter_mut().zip(self.value(a).as_slice()) {
                        *x *= gelu_grad(v);
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let n = norm(x.row(i));
                        let gi = g.row(i);
                        let di = d.row_mut(i);
                        if n >= NORM_EPS {
                            let yg = dot(y.row(i), gi);
                            for ((o, &gv), &yv) in di.iter_mut().zip(gi).zip(y.row(i)) {
                                *o = (gv - yv * yg) / n;
                            }
                        } else {
                            for (o, &gv) in di.iter_mut().zip(gi) {
                                *o = gv / NORM_EPS;
                            }
                        }
                    }
                    accumulate(&mut adj, a, d);
                }
                Op::Transpose(a) => accumulate(&mut adj, a, g.transpose()),
                Op::CrossEntropyDiag(a) => {
                    let (_, mut p) = cross_entropy_diag(self.value(a));
                    let b = p.rows();
                    for i in 0..b {
                        p[(i, i)] -= 1.0;
                    }
                    let factor = g[(0, 0)] / b as f64;
                    accumulate(&mut adj, a, p.scaled(factor));
                }
            }
        }

        for (i, a) in adj.iter().enumerate() {
            if let Some(m) = a {
                if !m.is_finite() {
                    return Err(GradError::NonFinite {
                        node: i,
                        primitive: self.nodes[i].op.primitive(),
                    });
                }
            }
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// A named trainable matrix with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut_slice().fill(0.0);
    }
}

/// Builds a tape over `params`, runs the reverse pass and stores each
/// parameter's gradient in `Param::grad`. Returns the loss.
pub fn forward_backward<F>(params: &mut [Param], build: F) -> Result<f64, GradError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    for p in params.iter_mut() {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.value.clone())).collect();
    let loss = build(&mut tape, &vars);
    let mut grads = tape.backward(loss)?;
    for (p, v) in params.iter_mut().zip(&vars) {
        if let Some(g) = grads.take(*v) {
            p.grad = g;
        }
    }
    Ok(tape.scalar(loss))
}

/// Evaluates the loss without a reverse pass.
pub fn forward_only<F>(params: &[Param], build: F) -> Result<f64, GradError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.constant(p.value.clone()))
        .collect();
    let loss = build(&mut tape, &vars);
    tape.check_finite()?;
    Ok(tape.scalar(loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `max |analytic − numeric| / max(‖analytic‖_∞, ‖numeric‖_∞)`.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckStatus {
    Passed,
    Failed,
    /// A primitive input lies within `step` of its singular point.
    Unstable {
        node: usize,
        primitive: Primitive,
        margin: f64,
    },
    Error(GradError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub status: CheckStatus,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Passed
    }
}

/// Central-difference gradient check of every parameter entry.
pub fn grad_check<F>(params: &[Param], build: F, step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        tolerance,
        status: CheckStatus::Passed,
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.value.clone())).collect();
    let loss = build(&mut tape, &vars);
    if let Some((node, primitive, margin)) = tape.min_margin() {
        if margin < step {
            report.status = CheckStatus::Unstable {
                node: node.index(),
                primitive,
                margin,
            };
            return report;
        }
    }
    let grads = match tape.backward(loss) {
        Ok(g) => g,
        Err(e) => {
            report.status = CheckStatus::Error(e);
            return report;
        }
    };

    let mut work: Vec<Param> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let (r, c) = params[pi].value.shape();
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(r, c));
        let mut numeric = Matrix::zeros(r, c);
        for k in 0..r * c {
            let orig = work[pi].value.as_slice()[k];
            work[pi].value.as_mut_slice()[k] = orig + step;
            let plus = forward_only(&work, &build);
            work[pi].value.as_mut_slice()[k] = orig - step;
            let minus = forward_only(&work, &build);
            work[pi].value.as_mut_slice()[k] = orig;
            match (plus, minus) {
                (Ok(p), Ok(m)) => numeric.as_mut_slice()[k] = (p - m) / (2.0 * step),
                (Err(e), _) | (_, Err(e)) => {
                    report.status = CheckStatus::Error(e);
                    return report;
                }
            }
        }
        let scale = analytic.max_abs().max(numeric.max_abs());
        let diff = analytic
            .as_slice()
            .iter()
            .zip(numeric.as_slice())
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        report.max_rel_error = report.max_rel_error.max(rel);
        report.params.push(ParamCheck {
            name: params[pi].name.clone(),
            max_rel_error: rel,
        });
    }
    if !(report.max_rel_error < tolerance) {
        report.status = CheckStatus::Failed;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut p = [Param::new(
            "w",
            Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]),
        )];
        let loss = forward_backward(&mut p, |t, v| t.sum(v[0])).unwrap();
        assert_eq!(loss, 2.5);
        assert_eq!(p[0].grad, Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_value() {
        let w = Matrix::from_rows(&[&[1.0, -2.0, 0.25]]);
        let mut p = [Param::new("w", w.clone())];
        // ½‖W‖² = ½ · W Wᵀ
        let loss = forward_backward(&mut p, |t, v| {
            let wt = t.transpose(v[0]);
            let sq = t.matmul(v[0], wt);
            t.scale(sq, 0.5)
        })
        .unwrap();
        assert!((loss - 0.5 * 5.0625).abs() < 1e-15);
        assert_eq!(p[0].grad, w);
    }

    #[test]
    fn zero_seed_gives_zero_grads() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[&[0.3, -0.7], &[1.1, 0.2]]));
        let h = t.gelu(w);
        let n = t.l2_normalize_rows(h);
        let l = t.cross_entropy_diag(n);
        let g = t.backward_with_seed(l, 0.0).unwrap();
        assert_eq!(g.get(w).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn shared_param_accumulates_both_paths() {
        // loss = sum(W) + sum(3 W) → grad = 4
        let mut p = [Param::new("w", Matrix::from_rows(&[&[0.1, 0.2, 0.3]]))];
        forward_backward(&mut p, |t, v| {
            let a = t.sum(v[0]);
            let s = t.scale(v[0], 3.0);
            let b = t.sum(s);
            t.add(a, b)
        })
        .unwrap();
        assert_eq!(p[0].grad, Matrix::filled(1, 3, 4.0));
    }

    #[test]
    fn non_finite_reports_first_node() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[&[800.0]]));
        let e = t.exp(w);
        let s = t.sum(e);
        assert_eq!(
            t.backward(s).err(),
            Some(GradError::NonFinite {
                node: 1,
                primitive: Primitive::Exp
            })
        );
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 2));
        assert_eq!(t.backward(w).err(), Some(GradError::NotScalar(2, 2)));
    }

    #[test]
    fn quadratic_check_is_tight() {
        let p = [Param::new(
            "w",
            Matrix::from_rows(&[&[0.4, -1.3], &[2.0, 0.7]]),
        )];
        let r = grad_check(
            &p,
            |t, v| {
                let wt = t.transpose(v[0]);
                let sq = t.matmul(wt, v[0]);
                let s = t.sum(sq);
                t.scale(s, 0.5)
            },
            1e-3,
            1e-6,
        );
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn near_zero_row_is_flagged_unstable() {
        let p = [Param::new(
            "w",
            Matrix::from_rows(&[&[1e-5, -2e-5], &[1.0, 0.5]]),
        )];
        let r = grad_check(
            &p,
            |t, v| {
                let n = t.l2_normalize_rows(v[0]);
                t.cross_entropy_diag(n)
            },
            1e-3,
            1e-4,
        );
        assert!(matches!(
            r.status,
            CheckStatus::Unstable {
                primitive: Primitive::L2NormalizeRows,
                ..
            }
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_log_b() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::filled(4, 4, 2.5));
        let ce = t.cross_entropy_diag(l);
        assert!((t.scalar(ce) - libm::log(4.0)).abs() < 1e-15);
    }
}
