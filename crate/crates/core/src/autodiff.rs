//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! The op set is closed: exactly what the GSAN and GCN forward passes need.
//! Nodes are appended to a [`Tape`] in creation order, so the tape is already
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use gsan_core::autodiff::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.constant(array![[1.0, 2.0]]);
//! let w = tape.parameter(array![[3.0], [4.0]]);
//! let y = tape.matmul(x, w).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &array![[1.0], [2.0]]);
//! ```

use std::cell::OnceCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{mismatch, GsanError, Result};
use crate::graph::SparseOperator;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

/// Names of the registered ops, used to target fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    SpMM,
    AbsPow,
    LeakyRelu,
    ConcatCols,
    SoftmaxRows,
    Column,
    RowScale,
    MaskedCrossEntropy,
    Add,
    Sub,
    Scale,
    MulConst,
    SumAll,
    AddRowBias,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::MatMul,
        OpKind::SpMM,
        OpKind::AbsPow,
        OpKind::LeakyRelu,
        OpKind::ConcatCols,
        OpKind::SoftmaxRows,
        OpKind::Column,
        OpKind::RowScale,
        OpKind::MaskedCrossEntropy,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::MulConst,
        OpKind::SumAll,
        OpKind::AddRowBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::SpMM => "spmm",
            OpKind::AbsPow => "abs_pow",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::Column => "column",
            OpKind::RowScale => "row_scale",
            OpKind::MaskedCrossEntropy => "masked_cross_entropy",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::MulConst => "mul_const",
            OpKind::SumAll => "sum_all",
            OpKind::AddRowBias => "add_row_bias",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    SpMM(Arc<SparseOperator>, Tensor),
    AbsPow(Tensor, f64),
    LeakyRelu(Tensor, f64),
    ConcatCols(Tensor, Tensor),
    SoftmaxRows(Tensor),
    Column(Tensor, usize),
    RowScale(Tensor, Tensor),
    MaskedCrossEntropy {
        logits: Tensor,
        // (row, label) for every supervised node.
        targets: Vec<(usize, usize)>,
        probs: Array2<f64>,
    },
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Scale(Tensor, f64),
    MulConst(Tensor, Array2<f64>),
    SumAll(Tensor),
    AddRowBias(Tensor, Tensor),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::SpMM(..) => OpKind::SpMM,
            Op::AbsPow(..) => OpKind::AbsPow,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::Column(..) => OpKind::Column,
            Op::RowScale(..) => OpKind::RowScale,
            Op::MaskedCrossEntropy { .. } => OpKind::MaskedCrossEntropy,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::SumAll(..) => OpKind::SumAll,
            Op::AddRowBias(..) => OpKind::AddRowBias,
        })
    }
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    op: Op,
    /// Row-compressed copy of a mostly-zero constant, built on first use as
    /// the left factor of a product.
    sparse: OnceCell<Option<RowSparse>>,
}

/// Fraction of nonzeros below which a constant left factor is multiplied in
/// compressed form.
const SPARSE_DENSITY: f64 = 0.25;

struct RowSparse {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    ncols: usize,
}

impl RowSparse {
    fn compress(x: &Array2<f64>) -> Option<Self> {
        let limit = (SPARSE_DENSITY * x.len() as f64) as usize;
        let width = x.ncols();
        let data = x.as_slice()?;
        let mut row_ptr = Vec::with_capacity(x.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in data.chunks(width.max(1)).take(x.nrows()) {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            if cols.len() >= limit {
                return None;
            }
            row_ptr.push(cols.len());
        }
        while row_ptr.len() < x.nrows() + 1 {
            row_ptr.push(0);
        }
        Some(Self {
            row_ptr,
            cols,
            vals,
            ncols: width,
        })
    }

    /// `X W`.
    fn dot(&self, w: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.row_ptr.len() - 1, w.ncols()));
        for (i, mut o) in out.rows_mut().into_iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                o.scaled_add(self.vals[k], &w.row(self.cols[k]));
            }
        }
        out
    }

    /// `X^T G`.
    fn t_dot(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.ncols, g.ncols()));
        for (i, gr) in g.rows().into_iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.row_mut(self.cols[k]).scaled_add(self.vals[k], &gr);
            }
        }
        out
    }
}

/// `|v|^q`, exact for small integer moments.
fn abs_pow_scalar(v: f64, q: f64) -> f64 {
    if q.fract() == 0.0 && q <= 32.0 {
        v.abs().powi(q as i32)
    } else {
        v.abs().powf(q)
    }
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
    kinks: Option<DefaultHasher>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
            kinks: None,
        }
    }

    /// Scales every gradient produced by `kind`'s backward rule by `factor`.
    ///
    /// Only useful for checking that gradient verification notices a broken
    /// rule.
    pub fn corrupt_backward(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    /// Starts hashing the sign pattern of every kink-op input (ReLU family and
    /// `|x|^q` with `q <= 1`).
    pub fn track_kinks(&mut self) {
        self.kinks = Some(DefaultHasher::new());
    }

    /// Hash of all sign patterns seen since [`Tape::track_kinks`].
    ///
    /// Two forward passes whose signatures differ took different branches at
    /// some non-differentiable point.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.as_ref().map_or(0, |h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, op: Op) -> Tensor {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            sparse: OnceCell::new(),
        });
        Tensor(self.nodes.len() - 1)
    }

    fn record_kinks(&mut self, t: Tensor) {
        if let Some(h) = self.kinks.as_mut() {
            for &v in self.nodes[t.0].value.iter() {
                h.write_u8(if v > 0.0 {
                    2
                } else if v < 0.0 {
                    0
                } else {
                    1
                });
            }
        }
    }

    fn compressed(&self, t: Tensor) -> Option<&RowSparse> {
        let node = &self.nodes[t.0];
        if node.requires_grad {
            return None;
        }
        node.sparse
            .get_or_init(|| RowSparse::compress(&node.value))
            .as_ref()
    }

    fn needs(&self, a: Tensor) -> bool {
        self.nodes[a.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn parameter(&mut self, value: Array2<f64>) -> Tensor {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Tensor {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, t: Tensor) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.dim()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn grad(&self, t: Tensor) -> Option<&Array2<f64>> {
        self.nodes[t.0].grad.as_ref()
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn shape_str(&self, t: Tensor) -> String {
        let (r, c) = self.shape(t);
        format!("{r}x{c}")
    }

    pub fn matmul(&mut self, x: Tensor, w: Tensor) -> Result<Tensor> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.nrows() {
            return Err(mismatch(
                "matmul inner dimension",
                format!("{} rows on the right", xv.ncols()),
                self.shape_str(w),
            ));
        }
        let out = match self.compressed(x) {
            Some(sp) => sp.dot(wv),
            None => xv.dot(wv),
        };
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, rg, Op::MatMul(x, w)))
    }

    /// Product with a constant sparse operator.
    pub fn spmm(&mut self, op: &Arc<SparseOperator>, x: Tensor) -> Result<Tensor> {
        let out = op.apply(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::SpMM(Arc::clone(op), x)))
    }

    /// Elementwise `|x|^q`.
    pub fn abs_pow(&mut self, x: Tensor, q: f64) -> Result<Tensor> {
        if !(q > 0.0) {
            return Err(GsanError::InvalidArgument(format!(
                "abs_pow exponent must be positive, got {q}"
            )));
        }
        if q <= 1.0 {
            self.record_kinks(x);
        }
        let out = if q == 1.0 {
            self.value(x).mapv(f64::abs)
        } else {
            self.value(x).mapv(|v| abs_pow_scalar(v, q))
        };
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::AbsPow(x, q)))
    }

    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Tensor {
        self.record_kinks(x);
        let out = self.value(x).mapv(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.needs(x);
        self.push(out, rg, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        self.leaky_relu(x, 0.0)
    }

    pub fn concat_cols(&mut self, x: Tensor, y: Tensor) -> Result<Tensor> {
        let (xv, yv) = (self.value(x), self.value(y));
        if xv.nrows() != yv.nrows() {
            return Err(mismatch("concat_cols rows", xv.nrows(), yv.nrows()));
        }
        let out = ndarray::concatenate(Axis(1), &[xv.view(), yv.view()]).expect("rows agree");
        let rg = self.needs(x) || self.needs(y);
        Ok(self.push(out, rg, Op::ConcatCols(x, y)))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Tensor) -> Tensor {
        let mut out = self.value(x).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total: f64 = row.sum();
            row.mapv_inplace(|v| v / total);
        }
        let rg = self.needs(x);
        self.push(out, rg, Op::SoftmaxRows(x))
    }

    /// Column `j` of `x` as an `n x 1` tensor.
    pub fn column(&mut self, x: Tensor, j: usize) -> Result<Tensor> {
        let (_, cols) = self.shape(x);
        if j >= cols {
            return Err(GsanError::IndexOutOfRange {
                index: j,
                bound: cols,
            });
        }
        let out = self.value(x).slice(s![.., j..j + 1]).to_owned();
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::Column(x, j)))
    }

    /// Softmax across `C` score columns, evaluated independently per row.
    pub fn channel_softmax(&mut self, scores: &[Tensor]) -> Result<Vec<Tensor>> {
        let (&first, rest) = scores.split_first().ok_or(GsanError::EmptyChannelList)?;
        let (n, c) = self.shape(first);
        for &s in scores {
            if self.shape(s) != (n, 1) || c != 1 {
                return Err(mismatch(
                    "channel_softmax score shape",
                    format!("{n}x1"),
                    self.shape_str(s),
                ));
            }
        }
        let mut stacked = first;
        for &s in rest {
            stacked = self.concat_cols(stacked, s)?;
        }
        let weights = self.softmax_rows(stacked);
        (0..scores.len()).map(|j| self.column(weights, j)).collect()
    }

    /// Row `i` of the output is `alpha[i] * x[i, :]`.
    pub fn row_scale(&mut self, alpha: Tensor, x: Tensor) -> Result<Tensor> {
        let (av, xv) = (self.value(alpha), self.value(x));
        if av.ncols() != 1 || av.nrows() != xv.nrows() {
            return Err(mismatch(
                "row_scale weights",
                format!("{}x1", xv.nrows()),
                self.shape_str(alpha),
            ));
        }
        let out = xv * av;
        let rg = self.needs(alpha) || self.needs(x);
        Ok(self.push(out, rg, Op::RowScale(alpha, x)))
    }

    /// Mean negative log-likelihood over the rows selected by `mask`.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Tensor,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<Tensor> {
        let lv = self.value(logits);
        let (n, k) = lv.dim();
        if labels.len() != n || mask.len() != n {
            return Err(mismatch(
                "masked_cross_entropy labels/mask",
                n,
                format!("{}/{}", labels.len(), mask.len()),
            ));
        }
        let mut targets = Vec::new();
        for (row, (&label, &m)) in labels.iter().zip(mask).enumerate() {
            if m {
                if label >= k {
                    return Err(GsanError::LabelOutOfRange {
                        node: row,
                        label,
                        classes: k,
                    });
                }
                targets.push((row, label));
            }
        }
        if targets.is_empty() {
            return Err(GsanError::EmptyMask);
        }
        let mut probs = Array2::zeros((targets.len(), k));
        let mut total = 0.0;
        for (t, &(row, label)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let log_z = max + r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += log_z - r[label];
            for (c, &v) in r.iter().enumerate() {
                probs[[t, c]] = (v - log_z).exp();
            }
        }
        let loss = total / targets.len() as f64;
        let rg = self.needs(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            rg,
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    fn check_same_shape(&self, context: &'static str, x: Tensor, y: Tensor) -> Result<()> {
        if self.shape(x) != self.shape(y) {
            return Err(mismatch(context, self.shape_str(x), self.shape_str(y)));
        }
        Ok(())
    }

    pub fn add(&mut self, x: Tensor, y: Tensor) -> Result<Tensor> {
        self.check_same_shape("add", x, y)?;
        let out = self.value(x) + self.value(y);
        let rg = self.needs(x) || self.needs(y);
        Ok(self.push(out, rg, Op::Add(x, y)))
    }

    pub fn sub(&mut self, x: Tensor, y: Tensor) -> Result<Tensor> {
        self.check_same_shape("sub", x, y)?;
        let out = self.value(x) - self.value(y);
        let rg = self.needs(x) || self.needs(y);
        Ok(self.push(out, rg, Op::Sub(x, y)))
    }

    pub fn scale(&mut self, x: Tensor, factor: f64) -> Tensor {
        let out = self.value(x) * factor;
        let rg = self.needs(x);
        self.push(out, rg, Op::Scale(x, factor))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, x: Tensor, factor: Array2<f64>) -> Result<Tensor> {
        if self.value(x).dim() != factor.dim() {
            return Err(mismatch(
                "mul_const",
                self.shape_str(x),
                format!("{}x{}", factor.nrows(), factor.ncols()),
            ));
        }
        let out = self.value(x) * &factor;
        let rg = self.needs(x);
        Ok(self.push(out, rg, Op::MulConst(x, factor)))
    }

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let out = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.needs(x);
        self.push(out, rg, Op::SumAll(x))
    }

    /// Adds a `1 x c` bias to every row.
    pub fn add_row_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(mismatch(
                "add_row_bias",
                format!("1x{}", xv.ncols()),
                self.shape_str(bias),
            ));
        }
        let out = xv + bv;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(out, rg, Op::AddRowBias(x, bias)))
    }

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Contributions from several consumers of one tensor are summed. Calling
    /// `backward` twice without [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(GsanError::NonScalarLoss { rows, cols });
        }
        if !self.needs(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            let factor = match (self.fault, self.nodes[idx].op.kind()) {
                (Some((kind, f)), Some(k)) if kind == k => f,
                _ => 1.0,
            };
            for (input, mut grad) in contributions {
                if self.nodes[input.0].requires_grad {
                    if factor != 1.0 {
                        grad *= factor;
                    }
                    accumulate(&mut self.nodes[input.0], grad);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Array2<f64>) -> Vec<(Tensor, Array2<f64>)> {
        let node = &self.nodes[idx];
        let want = |t: Tensor| self.nodes[t.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(x, w) => {
                let mut out = Vec::with_capacity(2);
                if want(*x) {
                    out.push((*x, g.dot(&self.value(*w).t())));
                }
                if want(*w) {
                    let gw = match self.compressed(*x) {
                        Some(sp) => sp.t_dot(g),
                        None => self.value(*x).t().dot(g),
                    };
                    out.push((*w, gw));
                }
                out
            }
            Op::SpMM(op, x) => {
                let gx = op.transpose().apply(g).expect("shape fixed at forward");
                vec![(*x, gx)]
            }
            Op::AbsPow(x, q) => {
                let q = *q;
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &v| {
                    let d = if v == 0.0 {
                        0.0
                    } else if q == 1.0 {
                        v.signum()
                    } else {
                        q * abs_pow_scalar(v, q - 1.0) * v.signum()
                    };
                    *gv *= d;
                });
                vec![(*x, gx)]
            }
            Op::LeakyRelu(x, slope) => {
                let mut gx = g.clone();
                Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &v| {
                    if v < 0.0 {
                        *gv *= slope;
                    }
                });
                vec![(*x, gx)]
            }
            Op::ConcatCols(x, y) => {
                let c1 = self.value(*x).ncols();
                vec![
                    (*x, g.slice(s![.., ..c1]).to_owned()),
                    (*y, g.slice(s![.., c1..]).to_owned()),
                ]
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Array2::zeros(y.raw_dim());
                for ((mut out, yr), gr) in gx
                    .axis_iter_mut(Axis(0))
                    .zip(y.axis_iter(Axis(0)))
                    .zip(g.axis_iter(Axis(0)))
                {
                    let dot = yr.dot(&gr);
                    Zip::from(&mut out)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|o, &yv, &gv| *o = yv * (gv - dot));
                }
                vec![(*x, gx)]
            }
            Op::Column(x, j) => {
                let mut gx = Array2::zeros(self.value(*x).raw_dim());
                gx.slice_mut(s![.., *j..*j + 1]).assign(g);
                vec![(*x, gx)]
            }
            Op::RowScale(alpha, x) => {
                let av = self.value(*alpha);
                let xv = self.value(*x);
                let mut out = Vec::with_capacity(2);
                if want(*alpha) {
                    let ga = (g * xv).sum_axis(Axis(1)).insert_axis(Axis(1));
                    out.push((*alpha, ga));
                }
                if want(*x) {
                    out.push((*x, g * av));
                }
                out
            }
            Op::MaskedCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut gx = Array2::zeros(self.value(*logits).raw_dim());
                for (t, &(row, label)) in targets.iter().enumerate() {
                    let mut r = gx.row_mut(row);
                    r.assign(&probs.row(t));
                    r[label] -= 1.0;
                    r *= scale;
                }
                vec![(*logits, gx)]
            }
            Op::Add(x, y) => vec![(*x, g.clone()), (*y, g.clone())],
            Op::Sub(x, y) => vec![(*x, g.clone()), (*y, -g)],
            Op::Scale(x, f) => vec![(*x, g * *f)],
            Op::MulConst(x, m) => vec![(*x, g * m)],
            Op::SumAll(x) => {
                vec![(*x, Array2::from_elem(self.value(*x).raw_dim(), g[[0, 0]]))]
            }
            Op::AddRowBias(x, b) => {
                vec![
                    (*x, g.clone()),
                    (*b, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            }
        }
    }
}

fn accumulate(node: &mut Node, grad: Array2<f64>) {
    match node.grad.as_mut() {
        Some(existing) => *existing += &grad,
        None => node.grad = Some(grad),
    }
}

/// One evaluation of the function under test.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub value: f64,
    /// Sign-pattern hash from [`Tape::kink_signature`]; 0 when untracked.
    pub kinks: u64,
}

impl From<f64> for Probe {
    fn from(value: f64) -> Self {
        Self { value, kinks: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: Option<(usize, usize)>,
    pub checked: usize,
    /// Entries whose perturbation crossed a kink and were not compared.
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// Each entry's error is `|a - n| / max(|a|, |n|, floor)`. Entries where the
/// kink signature differs between the `+step` and `-step` evaluations are
/// skipped.
pub fn finite_diff_check<F>(
    mut f: F,
    names: &[String],
    params: &[Array2<f64>],
    analytic: &[Array2<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Array2<f64>]) -> Result<Probe>,
{
    if names.len() != params.len() || analytic.len() != params.len() {
        return Err(mismatch(
            "finite_diff_check parameter lists",
            params.len(),
            format!("{} names / {} gradients", names.len(), analytic.len()),
        ));
    }
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, name) in names.iter().enumerate() {
        if analytic[p].dim() != params[p].dim() {
            return Err(mismatch(
                "finite_diff_check gradient shape",
                format!("{:?}", params[p].dim()),
                format!("{:?}", analytic[p].dim()),
            ));
        }
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: None,
            checked: 0,
            skipped: 0,
            passed: true,
        };
        let (rows, cols) = params[p].dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = params[p][[i, j]];
                work[p][[i, j]] = orig + opts.step;
                let plus = f(&work)?;
                work[p][[i, j]] = orig - opts.step;
                let minus = f(&work)?;
                work[p][[i, j]] = orig;
                if plus.kinks != minus.kinks {
                    check.skipped += 1;
                    continue;
                }
                let numeric = (plus.value - minus.value) / (2.0 * opts.step);
                let a = analytic[p][[i, j]];
                let denom = a.abs().max(numeric.abs()).max(opts.floor);
                let err = (a - numeric).abs() / denom;
                check.checked += 1;
                if !(err <= check.max_rel_err) {
                    check.max_rel_err = err;
                    check.worst_index = Some((i, j));
                }
            }
        }
        check.passed = check.max_rel_err < opts.tol;
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}
