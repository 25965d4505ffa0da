//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The tape records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] walks the list in reverse, accumulating gradients into
//! every tracked leaf. Single-threaded and sequential, so gradients are
//! bitwise reproducible for identical inputs.
//!
//! Memory discipline: backward consumes intermediate values as it goes
//! (a node's value can only be needed by consumers recorded after it), so
//! peak memory stays close to the forward pass. Read any values you need
//! before calling `backward`.

use std::rc::Rc;

use ndarray::Axis;

use crate::linalg::{col_softmax, row_softmax, Csr, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Sparse matrix together with its transpose, shared across tape nodes so the
/// transpose is built once per training run.
#[derive(Debug)]
pub struct SparsePair {
    pub fwd: Csr,
    pub bwd: Csr,
}

impl SparsePair {
    pub fn new(fwd: Csr) -> Rc<Self> {
        let bwd = fwd.transpose();
        Rc::new(SparsePair { fwd, bwd })
    }
}

enum Value {
    Owned(Mat),
    Shared(Rc<Mat>),
    Freed,
}

impl Value {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Shared(m) => m,
            Value::Freed => panic!("tape value read after backward consumed it"),
        }
    }

    fn free(&mut self) {
        *self = Value::Freed;
    }
}

enum Op {
    Leaf { tracked: bool },
    /// op(a)·op(b) with optional transposes.
    Gemm { a: VarId, b: VarId, ta: bool, tb: bool },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    ScaleConst(VarId, f64),
    /// acc + coeffs[0, idx] · m — the building block of the propagation
    /// series, giving the hop-weight row a gradient.
    AddScaled {
        acc: VarId,
        m: VarId,
        coeffs: VarId,
        idx: usize,
    },
    Relu(VarId),
    RowSoftmax(VarId),
    ColSoftmax(VarId),
    /// s.fwd · x for a constant sparse matrix.
    Spmm { s: Rc<SparsePair>, x: VarId },
    /// x ⊙ mask with the keep-probability scaling folded into the mask.
    Dropout { x: VarId, mask: Rc<Mat> },
    /// x + broadcast of a 1×d bias row.
    AddRowBias { x: VarId, b: VarId },
    /// 1×d column means.
    MeanRows(VarId),
    /// −(1/|rows|) Σ_i ln(max(probs[rows_i, targets_i], clamp)) as 1×1.
    CrossEntropy {
        probs: VarId,
        rows: Rc<Vec<usize>>,
        targets: Rc<Vec<usize>>,
        clamp: f64,
    },
}

struct Node {
    value: Value,
    grad: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            grad: None,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: VarId) -> &Mat {
        self.nodes[id.0].value.get()
    }

    /// Gradient of the loss w.r.t. a tracked leaf; available after backward.
    pub fn grad(&self, id: VarId) -> Option<&Mat> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: VarId) -> Option<Mat> {
        self.nodes[id.0].grad.take()
    }

    // -- leaves --------------------------------------------------------------

    /// Untracked constant.
    pub fn constant(&mut self, value: Mat) -> VarId {
        self.push(value, Op::Leaf { tracked: false }, false)
    }

    /// Untracked constant shared by reference (no copy for large inputs).
    pub fn constant_shared(&mut self, value: Rc<Mat>) -> VarId {
        self.nodes.push(Node {
            value: Value::Shared(value),
            grad: None,
            op: Op::Leaf { tracked: false },
            needs_grad: false,
        });
        VarId(self.nodes.len() - 1)
    }

    /// Tracked parameter: receives a gradient in backward.
    pub fn param(&mut self, value: Mat) -> VarId {
        self.push(value, Op::Leaf { tracked: true }, true)
    }

    // -- ops -----------------------------------------------------------------

    pub fn gemm(&mut self, a: VarId, ta: bool, b: VarId, tb: bool) -> VarId {
        let av = self.value(a);
        let bv = self.value(b);
        let value = match (ta, tb) {
            (false, false) => av.dot(bv),
            (true, false) => av.t().dot(bv),
            (false, true) => av.dot(&bv.t()),
            (true, true) => av.t().dot(&bv.t()),
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Gemm { a, b, ta, tb }, needs)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        self.gemm(a, false, b, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a) + self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let value = self.value(a) - self.value(b);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn scale_const(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.value(a) * c;
        let needs = self.needs(a);
        self.push(value, Op::ScaleConst(a, c), needs)
    }

    /// `acc + coeffs[0, idx] · m`; `coeffs` is a 1×L parameter row.
    pub fn add_scaled(&mut self, acc: VarId, m: VarId, coeffs: VarId, idx: usize) -> VarId {
        let c = self.value(coeffs)[[0, idx]];
        let value = self.value(acc) + &(self.value(m) * c);
        let needs = self.needs(acc) || self.needs(m) || self.needs(coeffs);
        self.push(value, Op::AddScaled { acc, m, coeffs, idx }, needs)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs)
    }

    pub fn row_softmax(&mut self, a: VarId) -> VarId {
        let value = row_softmax(self.value(a));
        let needs = self.needs(a);
        self.push(value, Op::RowSoftmax(a), needs)
    }

    pub fn col_softmax(&mut self, a: VarId) -> VarId {
        let value = col_softmax(self.value(a));
        let needs = self.needs(a);
        self.push(value, Op::ColSoftmax(a), needs)
    }

    pub fn spmm(&mut self, s: &Rc<SparsePair>, x: VarId) -> VarId {
        let value = s.fwd.matmul_dense(self.value(x));
        let needs = self.needs(x);
        self.push(value, Op::Spmm { s: Rc::clone(s), x }, needs)
    }

    pub fn dropout(&mut self, x: VarId, mask: Rc<Mat>) -> VarId {
        let value = self.value(x) * mask.as_ref();
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    pub fn add_row_bias(&mut self, x: VarId, b: VarId) -> VarId {
        let bias = self.value(b).row(0).to_owned();
        let value = self.value(x) + &bias;
        let needs = self.needs(x) || self.needs(b);
        self.push(value, Op::AddRowBias { x, b }, needs)
    }

    pub fn mean_rows(&mut self, x: VarId) -> VarId {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let value = (xv.sum_axis(Axis(0)) / n).insert_axis(Axis(0));
        let needs = self.needs(x);
        self.push(value, Op::MeanRows(x), needs)
    }

    pub fn cross_entropy(
        &mut self,
        probs: VarId,
        rows: Rc<Vec<usize>>,
        targets: Rc<Vec<usize>>,
        clamp: f64,
    ) -> VarId {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "cross entropy over an empty mask");
        let p = self.value(probs);
        let mut acc = 0.0;
        for (&r, &t) in rows.iter().zip(targets.iter()) {
            acc -= p[[r, t]].max(clamp).ln();
        }
        let value = Mat::from_elem((1, 1), acc / rows.len() as f64);
        let needs = self.needs(probs);
        self.push(value, Op::CrossEntropy { probs, rows, targets, clamp }, needs)
    }

    // -- backward ------------------------------------------------------------

    fn add_grad(&mut self, id: VarId, delta: Mat) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g = &*g + &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a 1×1 loss node. Frees intermediate values; leaf
    /// gradients remain readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: VarId) {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        self.nodes[loss.0].grad = Some(Mat::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                // Not on any path to the loss; still release its value.
                if !matches!(self.nodes[i].op, Op::Leaf { .. }) {
                    self.nodes[i].value.free();
                }
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf { tracked } => {
                    if *tracked {
                        // Keep the gradient for the caller.
                        self.nodes[i].grad = Some(g);
                    }
                    continue;
                }
                Op::Gemm { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    if self.needs(a) {
                        let bv = self.value(b);
                        let da = match (ta, tb) {
                            (false, false) => g.dot(&bv.t()),
                            (false, true) => g.dot(bv),
                            (true, false) => bv.dot(&g.t()),
                            (true, true) => bv.t().dot(&g.t()),
                        };
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let av = self.value(a);
                        let db = match (ta, tb) {
                            (false, false) => av.t().dot(&g),
                            (true, false) => av.dot(&g),
                            (false, true) => g.t().dot(av),
                            (true, true) => g.t().dot(&av.t()),
                        };
                        self.add_grad(b, db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.add_grad(a, g.clone());
                    }
                    if self.needs(b) {
                        self.add_grad(b, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.add_grad(a, g.clone());
                    }
                    if self.needs(b) {
                        self.add_grad(b, -g);
                    }
                }
                Op::ScaleConst(a, c) => {
                    let (a, c) = (*a, *c);
                    self.add_grad(a, g * c);
                }
                Op::AddScaled { acc, m, coeffs, idx } => {
                    let (acc, m, coeffs, idx) = (*acc, *m, *coeffs, *idx);
                    let c = self.value(coeffs)[[0, idx]];
                    if self.needs(coeffs) {
                        let mv = self.value(m);
                        let dot: f64 = g.iter().zip(mv.iter()).map(|(x, y)| x * y).sum();
                        let len = self.value(coeffs).ncols();
                        let mut dc = Mat::zeros((1, len));
                        dc[[0, idx]] = dot;
                        self.add_grad(coeffs, dc);
                    }
                    if self.needs(m) {
                        self.add_grad(m, &g * c);
                    }
                    if self.needs(acc) {
                        self.add_grad(acc, g);
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    // y > 0 exactly where x > 0; use our own output value.
                    let y = self.nodes[i].value.get();
                    let mut dx = g;
                    dx.zip_mut_with(y, |d, &yv| {
                        if yv <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    self.add_grad(a, dx);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.get();
                    let mut dx = g;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d = yv * (*d - dot);
                        }
                    }
                    self.add_grad(a, dx);
                }
                Op::ColSoftmax(a) => {
                    let a = *a;
                    let y = self.nodes[i].value.get();
                    let mut dx = g;
                    for (mut dcol, ycol) in dx.columns_mut().into_iter().zip(y.columns()) {
                        let dot: f64 = dcol.iter().zip(ycol.iter()).map(|(d, y)| d * y).sum();
                        for (d, &yv) in dcol.iter_mut().zip(ycol.iter()) {
                            *d = yv * (*d - dot);
                        }
                    }
                    self.add_grad(a, dx);
                }
                Op::Spmm { s, x } => {
                    let x = *x;
                    let dx = s.bwd.matmul_dense(&g);
                    self.add_grad(x, dx);
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let dx = g * mask.as_ref();
                    self.add_grad(x, dx);
                }
                Op::AddRowBias { x, b } => {
                    let (x, b) = (*x, *b);
                    if self.needs(b) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.add_grad(b, db);
                    }
                    if self.needs(x) {
                        self.add_grad(x, g);
                    }
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let n = self.value(x).nrows();
                    let scale = 1.0 / n as f64;
                    let row = g.row(0).to_owned() * scale;
                    let dx = Mat::from_shape_fn((n, row.len()), |(_, j)| row[j]);
                    self.add_grad(x, dx);
                }
                Op::CrossEntropy { probs, rows, targets, clamp } => {
                    let probs = *probs;
                    let (rows, targets, clamp) = (Rc::clone(rows), Rc::clone(targets), *clamp);
                    let scale = g[[0, 0]] / rows.len() as f64;
                    let p = self.value(probs);
                    let mut dp = Mat::zeros(p.dim());
                    for (&r, &t) in rows.iter().zip(targets.iter()) {
                        let v = p[[r, t]];
                        // ln(max(p, clamp)) is flat below the clamp.
                        if v > clamp {
                            dp[[r, t]] -= scale / v;
                        }
                    }
                    self.add_grad(probs, dp);
                }
            }
            self.nodes[i].value.free();
        }
    }
}
