//! Connectionist temporal classification loss in log space.

use tdsv_nn::{BackwardOp, Graph, Segments, Tensor, Var};

use super::tokens::{TokenSeq, BLANK_ID};
use crate::error::{Error, Result};

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per token plus one blank
/// between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

#[derive(Clone, Debug)]
pub struct CtcResult {
    /// `-log P(target | log_probs)`
    pub loss: f64,
    /// `d loss / d log_probs`, `[T, V]` row-major.
    pub grad: Vec<f64>,
}

/// Forward-backward over the blank-interleaved target.
///
/// `log_probs` is `[T, V]`; gradients treat each entry as an independent
/// log-probability.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<CtcResult> {
    let (t_len, v) = log_probs.dims2();
    if let Some(&bad) = target.iter().find(|&&k| k >= v || k == blank) {
        return Err(Error::Domain(format!("target id {} invalid for vocab {} with blank {}", bad, v, blank)));
    }
    if blank >= v {
        return Err(Error::Domain(format!("blank {} outside vocab {}", blank, v)));
    }
    let need = min_frames(target);
    if t_len == 0 || t_len < need {
        return Err(Error::Infeasible(format!(
            "{} frames cannot emit a {}-token target (needs {})",
            t_len,
            target.len(),
            need.max(1)
        )));
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { blank } else { target[s / 2] }).collect();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = lse2(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::Infeasible("target has zero probability".into()));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[t * v + ext[s]] -= (a + b - lp(t, ext[s]) - log_p).exp();
        }
    }
    Ok(CtcResult { loss: -log_p, grad })
}

/// `-log P(target | log_probs)` with the transcript vocabulary's blank.
pub fn ctc_loss(log_probs: &Tensor, target: &TokenSeq) -> Result<f64> {
    Ok(ctc_forward_backward(log_probs, &target.ids(), BLANK_ID)?.loss)
}

struct CtcBatchOp {
    grad: Vec<f64>,
}

impl BackwardOp for CtcBatchOp {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad_out.item();
        let data = self.grad.iter().map(|v| v * g).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("gradient shape"))]
    }
}

/// Mean CTC loss over the segments of packed `log_probs` (`[rows, V]`).
/// An infeasible segment fails with its index in the message.
pub fn ctc_loss_batch(g: &mut Graph, log_probs: Var, segs: &Segments, targets: &[Vec<usize>], blank: usize) -> Result<Var> {
    let lp = g.value(log_probs);
    let (rows, v) = lp.dims2();
    if segs.total() != rows || segs.len() != targets.len() || targets.is_empty() {
        return Err(Error::shape(format!(
            "ctc batch: {} rows in {} segments for {} targets",
            rows,
            segs.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; rows * v];
    for (i, (range, target)) in segs.ranges().zip(targets).enumerate() {
        let part = lp.slice_rows(range.start, range.end);
        let r = ctc_forward_backward(&part, target, blank).map_err(|e| match e {
            Error::Infeasible(m) => Error::Infeasible(format!("batch item {}: {}", i, m)),
            other => other,
        })?;
        total += r.loss / n;
        for (dst, src) in grad[range.start * v..range.end * v].iter_mut().zip(&r.grad) {
            *dst = src / n;
        }
    }
    Ok(g.custom(&[log_probs], Tensor::scalar(total), Box::new(CtcBatchOp { grad })))
}
