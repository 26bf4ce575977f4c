//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node holding its value. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into the [`ParamStore`] the parameters came from.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, MatMut, MatRef};
use crate::params::ParamStore;
use crate::segments::Segments;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this crate.
///
/// Returns one optional gradient per input, in input order.
pub trait BackwardOp {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

/// Packing of queries and keys/values for [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub q_segs: Segments,
    pub kv_segs: Segments,
    pub heads: usize,
    /// Query `i` may only attend to keys `0..=i` of its segment.
    pub causal: bool,
}

impl AttnLayout {
    pub fn self_attention(segs: &Segments, heads: usize) -> Self {
        AttnLayout {
            q_segs: segs.clone(),
            kv_segs: segs.clone(),
            heads,
            causal: false,
        }
    }
}

enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sqrt(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Unfold { x: Var, src: Vec<u32>, taps: usize },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SegmentSoftmax(Var, Segments),
    SegmentSum(Var, Segments),
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, weights: Vec<Vec<f64>> },
    L2NormalizeRows(Var, Vec<f64>),
    Nll(Var, Vec<usize>),
    Custom(Box<dyn BackwardOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

const NO_SRC: u32 = u32::MAX;

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    buffer_updates: Vec<(String, Tensor)>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{}: {:?} vs {:?}", what, a.shape(), b.shape()));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops all recorded nodes so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.buffer_updates.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by forward op");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---------------------------------------------------------------------
    // Leaves
    // ---------------------------------------------------------------------

    /// A constant that receives no parameter update (gradients are still
    /// available through [`Graph::gradients`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a named parameter of `store`. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.push(t, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Records a running-statistics update to apply with
    /// [`Graph::apply_buffer_updates`].
    pub fn push_buffer_update(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffer_updates.push((name.into(), value));
    }

    pub fn apply_buffer_updates(&mut self, store: &mut ParamStore) {
        for (name, t) in self.buffer_updates.drain(..) {
            store.set_buffer(name, t);
        }
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "add")?;
        let t = self.val(a).zip_map(self.val(b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "sub")?;
        let t = self.val(a).zip_map(self.val(b), |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "mul")?;
        let t = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds the vector `b` (length = column count) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.val(x);
        let cols = xv.cols();
        if self.val(b).numel() != cols {
            return shape_err(format!("add_row: {:?} + {:?}", xv.shape(), self.val(b).shape()));
        }
        let bv = self.val(b).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::AddRow(x, b)))
    }

    /// Multiplies every row of `x` elementwise by the vector `s`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.val(x);
        let cols = xv.cols();
        if self.val(s).numel() != cols {
            return shape_err(format!("mul_row: {:?} * {:?}", xv.shape(), self.val(s).shape()));
        }
        let sv = self.val(s).data();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, &ss) in row.iter_mut().zip(sv) {
                *o *= ss;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, Op::MulRow(x, s)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.val(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.val(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.val(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    /// Elementwise square root; inputs must be strictly positive.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.val(x).map(f64::sqrt);
        self.push(t, Op::Sqrt(x))
    }

    // ---------------------------------------------------------------------
    // Linear algebra and reshaping
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set. Operands
    /// are viewed as matrices (see [`Tensor::dims2`]).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.val(a);
        let bv = self.val(b);
        let (ar, ac) = av.dims2();
        let (br, bc) = bv.dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!(
                "matmul: {:?}{} x {:?}{}",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut ra = MatRef::row_major(av.data(), ac);
        if ta {
            ra = ra.t();
        }
        let mut rb = MatRef::row_major(bv.data(), bc);
        if tb {
            rb = rb.t();
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ra, rb, 0.0, MatMut::row_major(&mut out, n));
        let t = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.val(x).transpose();
        self.push(t, Op::Transpose(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.val(x).sum());
        self.push(t, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let t = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(t, Op::MeanAll(x))
    }

    /// Sum of each row, as an `[rows, 1]` column.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let (r, c) = v.dims2();
        let data = v.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let t = Tensor::from_parts(vec![r, 1], data);
        self.push(t, Op::RowSums(x))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.val(x);
        let (r, c) = v.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err(format!("gather_rows: index {} out of {} rows", bad, r));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
        }
        let t = Tensor::from_parts(vec![idx.len(), c], out);
        Ok(self.push(t, Op::GatherRows(x, idx)))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.val(xs[0]).rows();
        if xs.iter().any(|&x| self.val(x).rows() != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let total: usize = xs.iter().map(|&x| self.val(x).cols()).sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &x in xs {
            let v = self.val(x);
            let c = v.cols();
            for i in 0..rows {
                out[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let t = Tensor::from_parts(vec![rows, total], out);
        Ok(self.push(t, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.val(xs[0]).cols();
        if xs.iter().any(|&x| self.val(x).cols() != cols) {
            return shape_err("concat_rows: column counts differ");
        }
        let mut out = Vec::new();
        for &x in xs {
            out.extend_from_slice(self.val(x).data());
        }
        let rows = out.len() / cols.max(1);
        let t = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(t, Op::ConcatRows(xs.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.val(x);
        let (r, c) = v.dims2();
        if start > end || end > c {
            return shape_err(format!("slice_cols {}..{} of {} columns", start, end, c));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&v.row(i)[start..end]);
        }
        let t = Tensor::from_parts(vec![r, w], out);
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    /// Extracts patches for a 1-D convolution over each packed segment.
    ///
    /// Row `r` of the result holds, for every input channel `c` and tap `j`,
    /// column `c * taps + j`: the input frame at
    /// `stride * r - padding + j * dilation` of the same segment, or zero
    /// outside it. Returns the output and its segment layout.
    pub fn unfold(
        &mut self,
        x: Var,
        segs: &Segments,
        taps: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<(Var, Segments)> {
        let v = self.val(x);
        let (rows, cin) = v.dims2();
        if segs.total() != rows {
            return shape_err(format!("unfold: segments cover {} rows, input has {}", segs.total(), rows));
        }
        if stride == 0 || taps == 0 || dilation == 0 {
            return shape_err("unfold: stride, taps and dilation must be positive");
        }
        let span = dilation * (taps - 1) + 1;
        let mut out_lengths = Vec::with_capacity(segs.len());
        let mut src = Vec::new();
        for r in segs.ranges() {
            let len = r.end - r.start;
            let padded = len + 2 * padding;
            let out_len = if padded >= span { (padded - span) / stride + 1 } else { 0 };
            out_lengths.push(out_len);
            for o in 0..out_len {
                for j in 0..taps {
                    let pos = (o * stride + j * dilation) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < len {
                        src.push((r.start + pos as usize) as u32);
                    } else {
                        src.push(NO_SRC);
                    }
                }
            }
        }
        let out_rows: usize = out_lengths.iter().sum();
        let width = cin * taps;
        let mut out = vec![0.0; out_rows * width];
        let data = v.data();
        for o in 0..out_rows {
            let row = &mut out[o * width..(o + 1) * width];
            for j in 0..taps {
                let s = src[o * taps + j];
                if s != NO_SRC {
                    let s = s as usize;
                    let frame = &data[s * cin..(s + 1) * cin];
                    for (c, &val) in frame.iter().enumerate() {
                        row[c * taps + j] = val;
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![out_rows, width], out);
        let var = self.push(t, Op::Unfold { x, src, taps });
        Ok((var, Segments::from_lengths(&out_lengths)))
    }

    // ---------------------------------------------------------------------
    // Normalisations and softmax
    // ---------------------------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let c = v.cols().max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let c = v.cols().max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            for z in row.iter_mut() {
                *z -= lse;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::LogSoftmaxRows(x))
    }

    /// Per-row normalisation with learned scale and shift over the columns.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = self.val(x);
        let (r, c) = v.dims2();
        if self.val(gamma).numel() != c || self.val(beta).numel() != c {
            return shape_err("layer_norm: affine parameters must match column count");
        }
        let g = self.val(gamma).data();
        let b = self.val(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = v.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    /// Batch normalisation over rows using the statistics of this batch.
    /// Returns the output plus the batch mean and biased variance per column.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let v = self.val(x);
        let (r, c) = v.dims2();
        if self.val(gamma).numel() != c || self.val(beta).numel() != c {
            return shape_err("batch_norm: affine parameters must match column count");
        }
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for (m, &z) in mean.iter_mut().zip(v.row(i)) {
                *m += z;
            }
        }
        for m in mean.iter_mut() {
            *m /= r as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..r {
            for ((s, &z), &m) in var.iter_mut().zip(v.row(i)).zip(&mean) {
                *s += (z - m) * (z - m);
            }
        }
        for s in var.iter_mut() {
            *s /= r as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (xhat, out) = bn_apply(v, &mean, &inv_std, self.val(gamma).data(), self.val(beta).data());
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let var_node = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: true,
            },
        );
        Ok((var_node, mean, var))
    }

    /// Batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let v = self.val(x);
        let c = v.cols();
        if self.val(gamma).numel() != c || mean.len() != c || var.len() != c {
            return shape_err("batch_norm: statistics must match column count");
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (xhat, out) = bn_apply(v, mean, &inv_std, self.val(gamma).data(), self.val(beta).data());
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: false,
            },
        ))
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let v = self.val(x);
        let (r, c) = v.dims2();
        if segs.total() != r {
            return shape_err("segment_softmax: segments do not cover input");
        }
        let mut out = v.data().to_vec();
        for range in segs.ranges() {
            for j in 0..c {
                let mut m = f64::NEG_INFINITY;
                for i in range.clone() {
                    m = m.max(out[i * c + j]);
                }
                let mut s = 0.0;
                for i in range.clone() {
                    let e = (out[i * c + j] - m).exp();
                    out[i * c + j] = e;
                    s += e;
                }
                for i in range.clone() {
                    out[i * c + j] /= s;
                }
            }
        }
        let t = Tensor::from_parts(vec![r, c], out);
        Ok(self.push(t, Op::SegmentSoftmax(x, segs.clone())))
    }

    /// Column sums of each segment: `[segments, cols]`.
    pub fn segment_sum(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let v = self.val(x);
        let (r, c) = v.dims2();
        if segs.total() != r {
            return shape_err("segment_sum: segments do not cover input");
        }
        let mut out = vec![0.0; segs.len() * c];
        for (s, range) in segs.ranges().enumerate() {
            let acc = &mut out[s * c..(s + 1) * c];
            for i in range {
                for (a, &z) in acc.iter_mut().zip(v.row(i)) {
                    *a += z;
                }
            }
        }
        let t = Tensor::from_parts(vec![segs.len(), c], out);
        Ok(self.push(t, Op::SegmentSum(x, segs.clone())))
    }

    /// Multi-head scaled dot-product attention, computed independently for
    /// each (query segment, key/value segment) pair. Head `h` uses columns
    /// `h * d / heads .. (h + 1) * d / heads` of each operand.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (nq, d) = qv.dims2();
        let (nk, dk) = kv.dims2();
        let (nv, dv) = vv.dims2();
        let h = layout.heads;
        if d != dk || nk != nv {
            return shape_err(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            ));
        }
        if h == 0 || d % h != 0 || dv % h != 0 {
            return shape_err(format!("attention: {} heads do not divide widths {} / {}", h, d, dv));
        }
        if layout.q_segs.total() != nq || layout.kv_segs.total() != nk || layout.q_segs.len() != layout.kv_segs.len() {
            return shape_err("attention: segment layout does not match operands");
        }
        let dh = d / h;
        let dvh = dv / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; nq * dv];
        let mut weights = Vec::with_capacity(layout.q_segs.len() * h);
        for s in 0..layout.q_segs.len() {
            let qr = layout.q_segs.range(s);
            let kr = layout.kv_segs.range(s);
            let lq = qr.len();
            let lk = kr.len();
            if layout.causal && lq > lk {
                return shape_err("attention: causal mask needs at least as many keys as queries");
            }
            for head in 0..h {
                let mut scores = vec![0.0; lq * lk];
                if lq > 0 && lk > 0 {
                    gemm(
                        lq,
                        dh,
                        lk,
                        scale,
                        MatRef::strided(qv.data(), qr.start * d + head * dh, d, 1),
                        MatRef::strided(kv.data(), kr.start * d + head * dh, d, 1).t(),
                        0.0,
                        MatMut::row_major(&mut scores, lk),
                    );
                }
                for i in 0..lq {
                    let row = &mut scores[i * lk..(i + 1) * lk];
                    if layout.causal {
                        for z in row[i + 1..].iter_mut() {
                            *z = f64::NEG_INFINITY;
                        }
                    }
                    softmax_in_place(row);
                }
                if lq > 0 && lk > 0 {
                    gemm(
                        lq,
                        lk,
                        dvh,
                        1.0,
                        MatRef::row_major(&scores, lk),
                        MatRef::strided(vv.data(), kr.start * dv + head * dvh, dv, 1),
                        0.0,
                        MatMut::strided(&mut out, qr.start * dv + head * dvh, dv, 1),
                    );
                }
                weights.push(scores);
            }
        }
        let t = Tensor::from_parts(vec![nq, dv], out);
        Ok(self.push(t, Op::Attention { q, k, v, layout, weights }))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, one
    /// row-major `[queries, keys]` matrix per (segment, head) in
    /// segment-major order.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let c = v.cols().max(1);
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|z| z * z).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for z in row.iter_mut() {
                *z /= n;
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, Op::L2NormalizeRows(x, norms))
    }

    /// Mean negative log-likelihood of `targets` under row-wise log
    /// probabilities.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let v = self.val(logp);
        let (r, c) = v.dims2();
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return shape_err(format!("nll: {} targets for {:?}", targets.len(), v.shape()));
        }
        let loss = -targets.iter().enumerate().map(|(i, &t)| v.at2(i, t)).sum::<f64>() / r as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Nll(logp, targets.to_vec())))
    }

    /// Cross entropy of row-wise logits against class indices (mean over rows).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax_rows(logits);
        self.nll(lp, targets)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn BackwardOp>) -> Var {
        self.push(value, Op::Custom(op, inputs.to_vec()))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(NnError::State("graph already consumed by backward; call reset()".into()));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::State("backward called before any forward computation".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NnError::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into the gradient slots of `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.map(|z| -z));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.val(*b), |x, y| x * y).unwrap();
                let gb = g.zip_map(self.val(*a), |x, y| x * y).unwrap();
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::AddRow(x, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for row in g.data().chunks(c) {
                    for (s, &z) in gb.iter_mut().zip(row) {
                        *s += z;
                    }
                }
                accumulate(&mut grads[x.0], g.clone());
                let shape = self.val(*b).shape().to_vec();
                accumulate(&mut grads[b.0], Tensor::from_parts(shape, gb));
            }
            Op::MulRow(x, s) => {
                let c = g.cols();
                let sv = self.val(*s).data();
                let xv = self.val(*x).data();
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; c];
                for (r, row) in gx.chunks_mut(c).enumerate() {
                    for j in 0..c {
                        gs[j] += row[j] * xv[r * c + j];
                        row[j] *= sv[j];
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(g.shape().to_vec(), gx));
                let shape = self.val(*s).shape().to_vec();
                accumulate(&mut grads[s.0], Tensor::from_parts(shape, gs));
            }
            Op::Scale(x, c) => accumulate(&mut grads[x.0], g.map(|z| z * c)),
            Op::AddScalar(x) => accumulate(&mut grads[x.0], g.clone()),
            Op::Relu(x) => {
                let gx = g.zip_map(out, |z, y| if y > 0.0 { z } else { 0.0 }).unwrap();
                accumulate(&mut grads[x.0], gx);
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(out, |z, y| z * (1.0 - y * y)).unwrap();
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sqrt(x) => {
                let gx = g.zip_map(out, |z, y| z * 0.5 / y).unwrap();
                accumulate(&mut grads[x.0], gx);
            }
            Op::MatMul { a, b, ta, tb } => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let (ar, ac) = av.dims2();
                let (br, bc) = bv.dims2();
                let (m, n) = g.dims2();
                let k = if *ta { ar } else { ac };
                let gref = MatRef::row_major(g.data(), n);
                let mut opa = MatRef::row_major(av.data(), ac);
                if *ta {
                    opa = opa.t();
                }
                let mut opb = MatRef::row_major(bv.data(), bc);
                if *tb {
                    opb = opb.t();
                }
                // d op(A) = G op(B)^T, stored into A's layout.
                let mut ga = vec![0.0; ar * ac];
                let ga_out = if *ta {
                    MatMut::strided(&mut ga, 0, 1, ac)
                } else {
                    MatMut::row_major(&mut ga, ac)
                };
                gemm(m, n, k, 1.0, gref, opb.t(), 0.0, ga_out);
                let mut gb = vec![0.0; br * bc];
                let gb_out = if *tb {
                    MatMut::strided(&mut gb, 0, 1, bc)
                } else {
                    MatMut::row_major(&mut gb, bc)
                };
                gemm(k, m, n, 1.0, opa.t(), gref, 0.0, gb_out);
                accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), ga));
                accumulate(&mut grads[b.0], Tensor::from_parts(bv.shape().to_vec(), gb));
            }
            Op::Reshape(x) => {
                let shape = self.val(*x).shape().to_vec();
                accumulate(&mut grads[x.0], g.clone().reshape(&shape).unwrap());
            }
            Op::Transpose(x) => {
                let shape = self.val(*x).shape().to_vec();
                accumulate(&mut grads[x.0], g.transpose().reshape(&shape).unwrap());
            }
            Op::SumAll(x) => {
                let s = g.item();
                accumulate(&mut grads[x.0], Tensor::full(self.val(*x).shape(), s));
            }
            Op::MeanAll(x) => {
                let xv = self.val(*x);
                let s = g.item() / xv.numel() as f64;
                accumulate(&mut grads[x.0], Tensor::full(xv.shape(), s));
            }
            Op::RowSums(x) => {
                let xv = self.val(*x);
                let (r, c) = xv.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c..(i + 1) * c].fill(g.data()[i]);
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols().max(1);
                let mut gx = vec![0.0; out.numel()];
                for ((gr, yr), dr) in g.data().chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.cols().max(1);
                let mut gx = vec![0.0; out.numel()];
                for ((gr, yr), dr) in g.data().chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = out.dims2();
                let gam = self.val(*gamma).data();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let gd = g.data();
                for i in 0..r {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        let dy = gd[i * c + j];
                        let h = xhat[i * c + j];
                        gg[j] += dy * h;
                        gb[j] += dy;
                        let dh = dy * gam[j];
                        sum_d += dh;
                        sum_dx += dh * h;
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        let dh = gd[i * c + j] * gam[j];
                        gx[i * c + j] = inv_std[i] / cf * (cf * dh - sum_d - xhat[i * c + j] * sum_dx);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(out.shape().to_vec(), gx));
                let gs = self.val(*gamma).shape().to_vec();
                accumulate(&mut grads[gamma.0], Tensor::from_parts(gs, gg));
                let bs = self.val(*beta).shape().to_vec();
                accumulate(&mut grads[beta.0], Tensor::from_parts(bs, gb));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let (r, c) = out.dims2();
                let gam = self.val(*gamma).data();
                let gd = g.data();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += gd[i * c + j] * xhat[i * c + j];
                        gb[j] += gd[i * c + j];
                    }
                }
                let mut gx = vec![0.0; r * c];
                if *batch {
                    // sum_i dxhat = gamma * gb, sum_i dxhat * xhat = gamma * gg
                    let rf = r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let dh = gd[i * c + j] * gam[j];
                            gx[i * c + j] = inv_std[j] / rf
                                * (rf * dh - gam[j] * gb[j] - xhat[i * c + j] * gam[j] * gg[j]);
                        }
                    }
                } else {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = gd[i * c + j] * gam[j] * inv_std[j];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(out.shape().to_vec(), gx));
                let gs = self.val(*gamma).shape().to_vec();
                accumulate(&mut grads[gamma.0], Tensor::from_parts(gs, gg));
                let bs = self.val(*beta).shape().to_vec();
                accumulate(&mut grads[beta.0], Tensor::from_parts(bs, gb));
            }
            Op::Unfold { x, src, taps } => {
                let xv = self.val(*x);
                let cin = xv.cols();
                let width = cin * taps;
                let mut gx = vec![0.0; xv.numel()];
                let gd = g.data();
                for o in 0..out.rows() {
                    let row = &gd[o * width..(o + 1) * width];
                    for j in 0..*taps {
                        let s = src[o * taps + j];
                        if s != NO_SRC {
                            let s = s as usize;
                            let frame = &mut gx[s * cin..(s + 1) * cin];
                            for (c, f) in frame.iter_mut().enumerate() {
                                *f += row[c * taps + j];
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::GatherRows(x, idx) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (o, &i) in idx.iter().enumerate() {
                    for (a, &z) in gx[i * c..(i + 1) * c].iter_mut().zip(g.row(o)) {
                        *a += z;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::ConcatCols(xs) => {
                let (r, total) = g.dims2();
                let mut off = 0;
                for x in xs {
                    let xv = self.val(*x);
                    let c = xv.cols();
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gx.extend_from_slice(&g.data()[i * total + off..i * total + off + c]);
                    }
                    off += c;
                    accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let xv = self.val(*x);
                    let n = xv.numel();
                    let gx = g.data()[off..off + n].to_vec();
                    off += n;
                    accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.val(*x);
                let (r, c) = xv.dims2();
                let w = out.cols();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::SegmentSoftmax(x, segs) => {
                let c = out.cols();
                let y = out.data();
                let gd = g.data();
                let mut gx = vec![0.0; out.numel()];
                for range in segs.ranges() {
                    for j in 0..c {
                        let dot: f64 = range.clone().map(|i| gd[i * c + j] * y[i * c + j]).sum();
                        for i in range.clone() {
                            gx[i * c + j] = y[i * c + j] * (gd[i * c + j] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::SegmentSum(x, segs) => {
                let xv = self.val(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (s, range) in segs.ranges().enumerate() {
                    let gs = g.row(s);
                    for i in range {
                        gx[i * c..(i + 1) * c].copy_from_slice(gs);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::Attention { q, k, v, layout, weights } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let d = qv.cols();
                let dv = vv.cols();
                let h = layout.heads;
                let dh = d / h;
                let dvh = dv / h;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = vec![0.0; qv.numel()];
                let mut gk = vec![0.0; kv.numel()];
                let mut gv = vec![0.0; vv.numel()];
                let gd = g.data();
                for s in 0..layout.q_segs.len() {
                    let qr = layout.q_segs.range(s);
                    let kr = layout.kv_segs.range(s);
                    let (lq, lk) = (qr.len(), kr.len());
                    if lq == 0 || lk == 0 {
                        continue;
                    }
                    for head in 0..h {
                        let p = &weights[s * h + head];
                        let g_o = MatRef::strided(gd, qr.start * dv + head * dvh, dv, 1);
                        // dV = P^T dO
                        gemm(
                            lk,
                            lq,
                            dvh,
                            1.0,
                            MatRef::row_major(p, lk).t(),
                            g_o,
                            1.0,
                            MatMut::strided(&mut gv, kr.start * dv + head * dvh, dv, 1),
                        );
                        // dP = dO V^T
                        let mut dp = vec![0.0; lq * lk];
                        gemm(
                            lq,
                            dvh,
                            lk,
                            1.0,
                            g_o,
                            MatRef::strided(vv.data(), kr.start * dv + head * dvh, dv, 1).t(),
                            0.0,
                            MatMut::row_major(&mut dp, lk),
                        );
                        for i in 0..lq {
                            let pr = &p[i * lk..(i + 1) * lk];
                            let dr = &mut dp[i * lk..(i + 1) * lk];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (dz, &pz) in dr.iter_mut().zip(pr) {
                                *dz = pz * (*dz - dot);
                            }
                        }
                        // dQ = scale dS K, dK = scale dS^T Q
                        gemm(
                            lq,
                            lk,
                            dh,
                            scale,
                            MatRef::row_major(&dp, lk),
                            MatRef::strided(kv.data(), kr.start * d + head * dh, d, 1),
                            1.0,
                            MatMut::strided(&mut gq, qr.start * d + head * dh, d, 1),
                        );
                        gemm(
                            lk,
                            lq,
                            dh,
                            scale,
                            MatRef::row_major(&dp, lk).t(),
                            MatRef::strided(qv.data(), qr.start * d + head * dh, d, 1),
                            1.0,
                            MatMut::strided(&mut gk, kr.start * d + head * dh, d, 1),
                        );
                    }
                }
                accumulate(&mut grads[q.0], Tensor::from_parts(qv.shape().to_vec(), gq));
                accumulate(&mut grads[k.0], Tensor::from_parts(kv.shape().to_vec(), gk));
                accumulate(&mut grads[v.0], Tensor::from_parts(vv.shape().to_vec(), gv));
            }
            Op::L2NormalizeRows(x, norms) => {
                let c = out.cols().max(1);
                let mut gx = vec![0.0; out.numel()];
                for (r, ((gr, yr), dr)) in g
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::Nll(lp, targets) => {
                let lv = self.val(*lp);
                let (r, c) = lv.dims2();
                let mut gx = vec![0.0; r * c];
                let s = -g.item() / r as f64;
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * c + t] = s;
                }
                accumulate(&mut grads[lp.0], Tensor::from_parts(lv.shape().to_vec(), gx));
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let gs = op.backward(g, &ins, out);
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        accumulate(&mut grads[v.0], gi);
                    }
                }
            }
        }
    }
}

fn bn_apply(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = x.dims2();
    let mut xhat = vec![0.0; r * c];
    let mut out = vec![0.0; r * c];
    let xd = x.data();
    for i in 0..r {
        for j in 0..c {
            let h = (xd[i * c + j] - mean[j]) * inv_std[j];
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma[j] + beta[j];
        }
    }
    (xhat, out)
}

/// Max-subtracted softmax of a slice, in place. Entries equal to `-inf`
/// receive zero weight.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        s += *z;
    }
    for z in row.iter_mut() {
        *z /= s;
    }
}
