//! Vision and text projector stacks.
//!
//! A token projector maps each token row through a linear branch plus a
//! two-layer GELU branch: `y = x·W_lin + gelu(x·W1 + b1)·W2`. The vision side
//! projects local (patch) tokens with one shared projector, averages them, and
//! adds the CLS token projected by its own projector. The text side projects
//! tokens, averages them, and passes the mean through a global two-layer MLP.
//! Both outputs are L2-normalized once, after the sum.
//!
//! Any slot may be the identity, which passes its input through unchanged
//! (and therefore requires matching dimensions).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{self, Param, Tape, Var};
use crate::matrix::{norm, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectorError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("bundle has neither local tokens nor a CLS token")]
    EmptyBundle,
    #[error("pooled-only vision bundle has no CLS token")]
    MissingCls,
    #[error("zero-norm projected embedding")]
    ZeroOutput,
    #[error("checkpoint payload has {actual} values, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("non-finite projector parameter {0}")]
    NonFinite(String),
}

/// Output-norm floor below which a projected embedding is rejected.
pub const OUTPUT_NORM_FLOOR: f64 = 1e-12;

/// `gelu(x·w1 + b1)·w2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
}

impl TwoLayer {
    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut h = x.matmul(&self.w1);
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(self.b1.row(0)) {
                *v = grad::gelu(*v + b);
            }
        }
        h.matmul(&self.w2)
    }

    fn on_tape(&self, tape: &mut Tape, vars: &[Var; 3], x: Var) -> Var {
        let xw = tape.matmul(x, vars[0]);
        let pre = tape.add(xw, vars[1]);
        let h = tape.gelu(pre);
        tape.matmul(h, vars[2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenProjectorParams {
    pub w_lin: Matrix,
    pub branch: TwoLayer,
}

impl TokenProjectorParams {
    pub fn input_dim(&self) -> usize {
        self.w_lin.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_lin.cols()
    }
}

/// Row-wise `x·W_lin + gelu(x·W1 + b1)·W2`.
pub fn token_project(p: &TokenProjectorParams, x: &Matrix) -> Result<Matrix, ProjectorError> {
    if x.cols() != p.input_dim() {
        return Err(ProjectorError::DimensionMismatch {
            what: "token projector input",
            expected: p.input_dim(),
            actual: x.cols(),
        });
    }
    let mut y = x.matmul(&p.w_lin);
    y.add_assign(&p.branch.apply(x));
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotKind {
    Identity,
    /// Two-layer branch only, no linear residual.
    Mlp,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalKind {
    Identity,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenSlot {
    Identity,
    Mlp(TwoLayer),
    Token(TokenProjectorParams),
}

impl TokenSlot {
    pub fn kind(&self) -> SlotKind {
        match self {
            TokenSlot::Identity => SlotKind::Identity,
            TokenSlot::Mlp(_) => SlotKind::Mlp,
            TokenSlot::Token(_) => SlotKind::Token,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix, ProjectorError> {
        match self {
            TokenSlot::Identity => Ok(x.clone()),
            TokenSlot::Mlp(m) => {
                if x.cols() != m.input_dim() {
                    return Err(ProjectorError::DimensionMismatch {
                        what: "mlp projector input",
                        expected: m.input_dim(),
                        actual: x.cols(),
                    });
                }
                Ok(m.apply(x))
            }
            TokenSlot::Token(p) => token_project(p, x),
        }
    }

    fn output_dim(&self, input: usize) -> usize {
        match self {
            TokenSlot::Identity => input,
            TokenSlot::Mlp(m) => m.output_dim(),
            TokenSlot::Token(p) => p.output_dim(),
        }
    }

    fn matrices(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            TokenSlot::Identity => Vec::new(),
            TokenSlot::Mlp(m) => alloc::vec![("w1", &m.w1), ("b1", &m.b1), ("w2", &m.w2)],
            TokenSlot::Token(p) => alloc::vec![
                ("w_lin", &p.w_lin),
                ("w1", &p.branch.w1),
                ("b1", &p.branch.b1),
                ("w2", &p.branch.w2)
            ],
        }
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            TokenSlot::Identity => Vec::new(),
            TokenSlot::Mlp(m) => alloc::vec![&mut m.w1, &mut m.b1, &mut m.w2],
            TokenSlot::Token(p) => alloc::vec![
                &mut p.w_lin,
                &mut p.branch.w1,
                &mut p.branch.b1,
                &mut p.branch.w2
            ],
        }
    }

    fn on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        match self {
            TokenSlot::Identity => x,
            TokenSlot::Mlp(m) => m.on_tape(tape, &[vars[0], vars[1], vars[2]], x),
            TokenSlot::Token(p) => {
                let lin = tape.matmul(x, vars[0]);
                let nl = p.branch.on_tape(tape, &[vars[1], vars[2], vars[3]], x);
                tape.add(lin, nl)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GlobalSlot {
    Identity,
    Mlp(TwoLayer),
}

impl GlobalSlot {
    pub fn kind(&self) -> GlobalKind {
        match self {
            GlobalSlot::Identity => GlobalKind::Identity,
            GlobalSlot::Mlp(_) => GlobalKind::Mlp,
        }
    }
}

/// Which projector occupies each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackLayout {
    pub vision_local: SlotKind,
    pub vision_cls: SlotKind,
    pub text_local: SlotKind,
    pub text_global: GlobalKind,
}

impl Default for StackLayout {
    fn default() -> Self {
        Self {
            vision_local: SlotKind::Token,
            vision_cls: SlotKind::Token,
            text_local: SlotKind::Token,
            text_global: GlobalKind::Mlp,
        }
    }
}

impl StackLayout {
    pub fn all_identity() -> Self {
        Self {
            vision_local: SlotKind::Identity,
            vision_cls: SlotKind::Identity,
            text_local: SlotKind::Identity,
            text_global: GlobalKind::Identity,
        }
    }

    pub fn is_all_identity(&self) -> bool {
        *self == Self::all_identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackDims {
    pub d_in_vision: usize,
    pub d_in_text: usize,
    pub d_out: usize,
    pub hidden: usize,
}

impl StackDims {
    /// Hidden width defaults to twice the joint dimension.
    pub fn new(d_in_vision: usize, d_in_text: usize, d_out: usize) -> Self {
        Self {
            d_in_vision,
            d_in_text,
            d_out,
            hidden: 2 * d_out,
        }
    }
}

/// The local tokens of one item plus its optional CLS token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    locals: Matrix,
    cls: Option<Matrix>,
}

impl TokenBundle {
    pub fn new(locals: Matrix, cls: Option<Matrix>) -> Result<Self, ProjectorError> {
        if let Some(c) = &cls {
            if c.rows() != 1 {
                return Err(ProjectorError::DimensionMismatch {
                    what: "cls rows",
                    expected: 1,
                    actual: c.rows(),
                });
            }
            if locals.rows() > 0 && c.cols() != locals.cols() {
                return Err(ProjectorError::DimensionMismatch {
                    what: "cls width",
                    expected: locals.cols(),
                    actual: c.cols(),
                });
            }
        } else if locals.rows() == 0 {
            return Err(ProjectorError::EmptyBundle);
        }
        Ok(Self { locals, cls })
    }

    /// A pooled vision embedding, carried as the CLS token.
    pub fn pooled_vision(v: &[f64]) -> Self {
        Self {
            locals: Matrix::zeros(0, v.len()),
            cls: Some(Matrix::from_vec(1, v.len(), v.to_vec())),
        }
    }

    /// A pooled sentence embedding, carried as a single local token.
    pub fn pooled_text(v: &[f64]) -> Self {
        Self {
            locals: Matrix::from_vec(1, v.len(), v.to_vec()),
            cls: None,
        }
    }

    pub fn locals(&self) -> &Matrix {
        &self.locals
    }

    pub fn cls(&self) -> Option<&Matrix> {
        self.cls.as_ref()
    }

    pub fn token_count(&self) -> usize {
        self.locals.rows()
    }

    pub fn dim(&self) -> usize {
        self.cls.as_ref().map_or(self.locals.cols(), |c| c.cols())
    }

    // Text side: the tokens averaged by the local projector.
    fn text_tokens(&self) -> &Matrix {
        if self.locals.rows() > 0 {
            &self.locals
        } else {
            self.cls.as_ref().expect("validated bundle")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorStack {
    pub dims: StackDims,
    pub vision_local: TokenSlot,
    pub vision_cls: TokenSlot,
    pub text_local: TokenSlot,
    pub text_global: GlobalSlot,
    /// Vision uses the CLS token alone; text treats its pooled vector as one token.
    pub pooled_only: bool,
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| (2.0 * rng.random::<f64>() - 1.0) * bound)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn init_two_layer(
    rng: &mut ChaCha8Rng,
    d_in: usize,
    hidden: usize,
    d_out: usize,
    zero_out: bool,
) -> TwoLayer {
    let b_in = 1.0 / libm::sqrt(d_in as f64);
    let w1 = uniform(rng, d_in, hidden, b_in);
    let b1 = uniform(rng, 1, hidden, b_in);
    let w2 = if zero_out {
        Matrix::zeros(hidden, d_out)
    } else {
        uniform(rng, hidden, d_out, 1.0 / libm::sqrt(hidden as f64))
    };
    TwoLayer { w1, b1, w2 }
}

fn init_slot(
    rng: &mut ChaCha8Rng,
    kind: SlotKind,
    d_in: usize,
    d_out: usize,
    hidden: usize,
    what: &'static str,
) -> Result<TokenSlot, ProjectorError> {
    Ok(match kind {
        SlotKind::Identity => {
            if d_in != d_out {
                return Err(ProjectorError::DimensionMismatch {
                    what,
                    expected: d_out,
                    actual: d_in,
                });
            }
            TokenSlot::Identity
        }
        SlotKind::Mlp => TokenSlot::Mlp(init_two_layer(rng, d_in, hidden, d_out, false)),
        SlotKind::Token => {
            let w_lin = uniform(rng, d_in, d_out, 1.0 / libm::sqrt(d_in as f64));
            let branch = init_two_layer(rng, d_in, hidden, d_out, true);
            TokenSlot::Token(TokenProjectorParams { w_lin, branch })
        }
    })
}

/// Seeded initialization. Token projectors start with a zero second layer,
/// so a fresh stack is linear in its token inputs.
pub fn init_stack(
    dims: StackDims,
    layout: StackLayout,
    pooled_only: bool,
    seed: u64,
) -> Result<ProjectorStack, ProjectorError> {
    let StackDims {
        d_in_vision,
        d_in_text,
        d_out,
        hidden,
    } = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vision_local = init_slot(
        &mut rng,
        layout.vision_local,
        d_in_vision,
        d_out,
        hidden,
        "vision local identity",
    )?;
    let vision_cls = init_slot(
        &mut rng,
        layout.vision_cls,
        d_in_vision,
        d_out,
        hidden,
        "vision cls identity",
    )?;
    let text_local = init_slot(
        &mut rng,
        layout.text_local,
        d_in_text,
        d_out,
        hidden,
        "text local identity",
    )?;
    let mid = text_local.output_dim(d_in_text);
    let text_global = match layout.text_global {
        GlobalKind::Identity => {
            if mid != d_out {
                return Err(ProjectorError::DimensionMismatch {
                    what: "text global identity",
                    expected: d_out,
                    actual: mid,
                });
            }
            GlobalSlot::Identity
        }
        GlobalKind::Mlp => GlobalSlot::Mlp(init_two_layer(&mut rng, mid, hidden, d_out, false)),
    };
    Ok(ProjectorStack {
        dims,
        vision_local,
        vision_cls,
        text_local,
        text_global,
        pooled_only,
        seed,
    })
}

fn normalized_row(m: &Matrix) -> Result<Vec<f64>, ProjectorError> {
    let v = m.row(0).to_vec();
    let n = norm(&v);
    if !(n >= OUTPUT_NORM_FLOOR) {
        return Err(ProjectorError::ZeroOutput);
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Tape handles for one stack's parameters, in declared order.
pub struct BoundStack<'a> {
    stack: &'a ProjectorStack,
    vision_local: Vec<Var>,
    vision_cls: Vec<Var>,
    text_local: Vec<Var>,
    text_global: Vec<Var>,
}

/// Token rows of a batch stacked into one matrix plus the `b × Σt` matrix
/// that averages each item's rows.
#[derive(Debug, Clone)]
pub struct StackedTokens {
    pub tokens: Matrix,
    pub averager: Matrix,
}

impl StackedTokens {
    fn build<'b>(parts: impl ExactSizeIterator<Item = &'b Matrix>, dim: usize) -> Self {
        let b = parts.len();
        let parts: Vec<&Matrix> = parts.collect();
        let total: usize = parts.iter().map(|m| m.rows()).sum();
        let mut averager = Matrix::zeros(b, total);
        let mut offset = 0;
        for (i, m) in parts.iter().enumerate() {
            let t = m.rows();
            for k in 0..t {
                averager[(i, offset + k)] = 1.0 / t as f64;
            }
            offset += t;
        }
        let tokens = if parts.is_empty() {
            Matrix::zeros(0, dim)
        } else {
            Matrix::vstack(&parts)
        };
        Self { tokens, averager }
    }
}

/// A batch of vision bundles prepared for the tape.
#[derive(Debug, Clone)]
pub struct VisionBatch {
    pub locals: Option<StackedTokens>,
    pub cls: Option<Matrix>,
}

/// A batch of text bundles prepared for the tape.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub tokens: StackedTokens,
}

impl ProjectorStack {
    pub fn layout(&self) -> StackLayout {
        StackLayout {
            vision_local: self.vision_local.kind(),
            vision_cls: self.vision_cls.kind(),
            text_local: self.text_local.kind(),
            text_global: self.text_global.kind(),
        }
    }

    /// Named parameter matrices in declared (checkpoint) order.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (slot, name) in [
            (&self.vision_local, "vision_local"),
            (&self.vision_cls, "vision_cls"),
            (&self.text_local, "text_local"),
        ] {
            for (p, m) in slot.matrices() {
                out.push((format!("{name}.{p}"), m));
            }
        }
        if let GlobalSlot::Mlp(m) = &self.text_global {
            out.push(("text_global.w1".into(), &m.w1));
            out.push(("text_global.b1".into(), &m.b1));
            out.push(("text_global.w2".into(), &m.w2));
        }
        out
    }

    fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        out.extend(self.vision_local.matrices_mut());
        out.extend(self.vision_cls.matrices_mut());
        out.extend(self.text_local.matrices_mut());
        if let GlobalSlot::Mlp(m) = &mut self.text_global {
            out.push(&mut m.w1);
            out.push(&mut m.b1);
            out.push(&mut m.w2);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_matrices()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }

    pub fn to_params(&self) -> Vec<Param> {
        self.named_matrices()
            .into_iter()
            .map(|(n, m)| Param::new(n, m.clone()))
            .collect()
    }

    /// Copies parameter values back, in declared order.
    pub fn load_params(&mut self, params: &[Param]) {
        let slots = self.matrices_mut();
        assert_eq!(slots.len(), params.len(), "parameter count mismatch");
        for (dst, p) in slots.into_iter().zip(params) {
            assert_eq!(dst.shape(), p.value.shape(), "parameter shape mismatch");
            dst.clone_from(&p.value);
        }
    }

    /// All parameter values concatenated in declared order.
    pub fn to_payload(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, m) in self.named_matrices() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Rebuilds a stack from its layout and a payload written by [`to_payload`](Self::to_payload).
    pub fn from_payload(
        dims: StackDims,
        layout: StackLayout,
        pooled_only: bool,
        seed: u64,
        payload: &[f64],
    ) -> Result<Self, ProjectorError> {
        let mut stack = init_stack(dims, layout, pooled_only, seed)?;
        let expected = stack.num_params();
        if payload.len() != expected {
            return Err(ProjectorError::PayloadLength {
                expected,
                actual: payload.len(),
            });
        }
        let names: Vec<String> = stack.named_matrices().into_iter().map(|(n, _)| n).collect();
        let mut offset = 0;
        for (m, name) in stack.matrices_mut().into_iter().zip(names) {
            let len = m.rows() * m.cols();
            let src = &payload[offset..offset + len];
            if src.iter().any(|v| !v.is_finite()) {
                return Err(ProjectorError::NonFinite(name));
            }
            m.as_mut_slice().copy_from_slice(src);
            offset += len;
        }
        Ok(stack)
    }

    fn check_dim(
        &self,
        what: &'static str,
        expected: usize,
        actual: usize,
    ) -> Result<(), ProjectorError> {
        if expected != actual {
            return Err(ProjectorError::DimensionMismatch {
                what,
                expected,
                actual,
            });
        }
        Ok(())
    }

    /// Un-normalized global vision embedding.
    pub fn vision_embedding(&self, bundle: &TokenBundle) -> Result<Matrix, ProjectorError> {
        self.check_dim("vision bundle", self.dims.d_in_vision, bundle.dim())?;
        if self.pooled_only {
            let cls = bundle.cls().ok_or(ProjectorError::MissingCls)?;
            return self.vision_cls.apply(cls);
        }
        let mut g: Option<Matrix> = None;
        if bundle.token_count() > 0 {
            g = Some(self.vision_local.apply(bundle.locals())?.mean_rows());
        }
        if let Some(cls) = bundle.cls() {
            let c = self.vision_cls.apply(cls)?;
            g = Some(match g {
                Some(mut s) => {
                    s.add_assign(&c);
                    s
                }
                None => c,
            });
        }
        g.ok_or(ProjectorError::MissingCls)
    }

    /// Unit-norm joint-space embedding of a vision bundle.
    pub fn project_vision(&self, bundle: &TokenBundle) -> Result<Vec<f64>, ProjectorError> {
        normalized_row(&self.vision_embedding(bundle)?)
    }

    /// Un-normalized global text embedding.
    pub fn text_embedding(&self, bundle: &TokenBundle) -> Result<Matrix, ProjectorError> {
        self.check_dim("text bundle", self.dims.d_in_text, bundle.dim())?;
        let m = self.text_local.apply(bundle.text_tokens())?.mean_rows();
        Ok(match &self.text_global {
            GlobalSlot::Identity => m,
            GlobalSlot::Mlp(mlp) => mlp.apply(&m),
        })
    }

    pub fn project_text(&self, bundle: &TokenBundle) -> Result<Vec<f64>, ProjectorError> {
        normalized_row(&self.text_embedding(bundle)?)
    }

    /// Joint-space patch embeddings: each patch through the local projector
    /// plus the projected CLS token, rows normalized.
    pub fn project_patches(
        &self,
        patches: &Matrix,
        cls: &Matrix,
    ) -> Result<Matrix, ProjectorError> {
        self.check_dim("patches", self.dims.d_in_vision, patches.cols())?;
        self.check_dim("cls", self.dims.d_in_vision, cls.cols())?;
        let mut p = self.vision_local.apply(patches)?;
        let c = self.vision_cls.apply(cls)?;
        for i in 0..p.rows() {
            for (v, x) in p.row_mut(i).iter_mut().zip(c.row(0)) {
                *v += x;
            }
            if norm(p.row(i)) < OUTPUT_NORM_FLOOR {
                return Err(ProjectorError::ZeroOutput);
            }
        }
        Ok(p.normalize_rows(OUTPUT_NORM_FLOOR))
    }

    pub fn vision_batch(&self, bundles: &[&TokenBundle]) -> Result<VisionBatch, ProjectorError> {
        let d = self.dims.d_in_vision;
        for b in bundles {
            self.check_dim("vision bundle", d, b.dim())?;
            if self.pooled_only && b.cls().is_none() {
                return Err(ProjectorError::MissingCls);
            }
        }
        let any_cls = bundles.iter().any(|b| b.cls().is_some());
        let cls = if any_cls {
            let rows: Result<Vec<&Matrix>, _> = bundles
                .iter()
                .map(|b| b.cls().ok_or(ProjectorError::MissingCls))
                .collect();
            Some(Matrix::vstack(&rows?))
        } else {
            None
        };
        let any_locals = !self.pooled_only && bundles.iter().any(|b| b.token_count() > 0);
        let locals =
            any_locals.then(|| StackedTokens::build(bundles.iter().map(|b| b.locals()), d));
        Ok(VisionBatch { locals, cls })
    }

    pub fn text_batch(&self, bundles: &[&TokenBundle]) -> Result<TextBatch, ProjectorError> {
        for b in bundles {
            self.check_dim("text bundle", self.dims.d_in_text, b.dim())?;
        }
        Ok(TextBatch {
            tokens: StackedTokens::build(
                bundles.iter().map(|b| b.text_tokens()),
                self.dims.d_in_text,
            ),
        })
    }

    /// Binds tape variables (in [`named_matrices`](Self::named_matrices) order) to slots.
    pub fn bind<'a>(&'a self, vars: &[Var]) -> BoundStack<'a> {
        let mut it = vars.iter().copied();
        let mut take = |n: usize| -> Vec<Var> { (&mut it).take(n).collect() };
        let count = |s: &TokenSlot| s.matrices().len();
        let vision_local = take(count(&self.vision_local));
        let vision_cls = take(count(&self.vision_cls));
        let text_local = take(count(&self.text_local));
        let text_global = take(if matches!(self.text_global, GlobalSlot::Mlp(_)) {
            3
        } else {
            0
        });
        BoundStack {
            stack: self,
            vision_local,
            vision_cls,
            text_local,
            text_global,
        }
    }
}

impl BoundStack<'_> {
    /// `b × d_out` normalized vision embeddings.
    pub fn vision(&self, tape: &mut Tape, batch: &VisionBatch) -> Var {
        let mut g = None;
        if let Some(st) = &batch.locals {
            let x = tape.constant(st.tokens.clone());
            let y = self.stack.vision_local.on_tape(tape, &self.vision_local, x);
            let avg = tape.constant(st.averager.clone());
            g = Some(tape.matmul(avg, y));
        }
        if let Some(cls) = &batch.cls {
            let x = tape.constant(cls.clone());
            let c = self.stack.vision_cls.on_tape(tape, &self.vision_cls, x);
            g = Some(match g {
                Some(l) => tape.add(l, c),
                None => c,
            });
        }
        let g = g.expect("vision batch has neither locals nor cls");
        tape.l2_normalize_rows(g)
    }

    /// `b × d_out` normalized text embeddings.
    pub fn text(&self, tape: &mut Tape, batch: &TextBatch) -> Var {
        let x = tape.constant(batch.tokens.tokens.clone());
        let y = self.stack.text_local.on_tape(tape, &self.text_local, x);
        let avg = tape.constant(batch.tokens.averager.clone());
        let mut m = tape.matmul(avg, y);
        if let GlobalSlot::Mlp(mlp) = &self.stack.text_global {
            let v = &self.text_global;
            m = mlp.on_tape(tape, &[v[0], v[1], v[2]], m);
        }
        tape.l2_normalize_rows(m)
    }
}
