//! Parameterised layers and the functional forms they are built from.
//!
//! A layer only stores parameter names; values live in a [`ParamStore`] so
//! one store can be checkpointed, optimised and shared between graphs.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{AttnLayout, Graph, Var};
use crate::params::ParamStore;
use crate::segments::Segments;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x W + b` over the rows of `x`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Cross-correlation of each packed segment of `x` (`[rows, C_in]`) with
/// `kernels` (`[C_out, C_in, k]`). Returns `[rows', C_out]` and the output
/// segment layout.
#[allow(clippy::too_many_arguments)]
pub fn conv1d(
    g: &mut Graph,
    x: Var,
    segs: &Segments,
    kernels: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<(Var, Segments)> {
    let ks = g.value(kernels).shape().to_vec();
    if ks.len() != 3 {
        return shape_err(format!("conv1d kernels must be [C_out, C_in, k], got {:?}", ks));
    }
    let (cout, cin, k) = (ks[0], ks[1], ks[2]);
    if g.value(x).cols() != cin {
        return shape_err(format!(
            "conv1d: input has {} channels, kernels expect {}",
            g.value(x).cols(),
            cin
        ));
    }
    let (patches, out_segs) = g.unfold(x, segs, k, stride, padding, dilation)?;
    let w2 = g.reshape(kernels, &[cout, cin * k])?;
    let mut y = g.matmul_t(patches, w2, false, true)?;
    if let Some(b) = bias {
        y = g.add_row(y, b)?;
    }
    Ok((y, out_segs))
}

/// Batch normalisation of the columns of `x`; in training mode the running
/// statistics update is queued on the graph.
pub fn batch_norm_1d(g: &mut Graph, store: &ParamStore, x: Var, bn: &BatchNorm1d, mode: Mode) -> Result<Var> {
    bn.forward(g, store, x, mode)
}

pub fn softmax(g: &mut Graph, x: Var) -> Var {
    g.softmax_rows(x)
}

/// Attended features and the per-head weight matrices that produced them.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub attended: Var,
    /// One `[T_q, T_k]` matrix per head.
    pub weights: Vec<Tensor>,
}

/// Single-sequence, single-head `softmax(Q Kᵀ / sqrt(d_k)) V`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<AttentionOutput> {
    multi_head_attention(g, q, k, v, 1)
}

pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<AttentionOutput> {
    let tq = g.value(q).rows();
    let tk = g.value(k).rows();
    let layout = AttnLayout {
        q_segs: Segments::single(tq),
        kv_segs: Segments::single(tk),
        heads,
        causal: false,
    };
    let attended = g.attention(q, k, v, layout)?;
    let weights = g
        .attention_weights(attended)
        .unwrap()
        .iter()
        .map(|w| Tensor::new(&[tq, tk], w.clone()).unwrap())
        .collect();
    Ok(AttentionOutput { attended, weights })
}

/// Sinusoidal position table `[T, d_model]`:
/// `PE(t, 2i) = sin(t / 10000^(2i/d))`, `PE(t, 2i+1) = cos(t / 10000^(2i/d))`.
pub fn sinusoidal_positions(t: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return shape_err(format!("positional encoding needs an even width, got {}", d_model));
    }
    let mut data = vec![0.0; t * d_model];
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[t, d_model], data)
}

// -------------------------------------------------------------------------
// Layers
// -------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.init_xavier(rng, &weight, &[in_dim, out_dim], in_dim, out_dim);
        store.init_const(&bias, &[out_dim], 0.0);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        linear(g, x, w, b)
    }
}

/// Stride-1 convolution with "same" zero padding at segment edges.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.init_xavier(rng, &weight, &[out_ch, in_ch, kernel], in_ch * kernel, out_ch * kernel);
        store.init_const(&bias, &[out_ch], 0.0);
        Conv1d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let pad = self.dilation * (self.kernel - 1) / 2;
        let (y, _) = conv1d(g, x, segs, w, Some(b), 1, pad, self.dilation)?;
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
    pub channels: usize,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let bn = BatchNorm1d {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
            running_mean: format!("{name}.running_mean"),
            running_var: format!("{name}.running_var"),
            channels,
        };
        store.init_const(&bn.gamma, &[channels], 1.0);
        store.init_const(&bn.beta, &[channels], 0.0);
        store.set_buffer(&bn.running_mean, Tensor::zeros(&[channels]));
        store.set_buffer(&bn.running_var, Tensor::ones(&[channels]));
        bn
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        match mode {
            Mode::Train => {
                let n = g.value(x).rows();
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let rm = store.buffer(&self.running_mean)?;
                let rv = store.buffer(&self.running_var)?;
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let new_mean: Vec<f64> = rm
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                    .collect();
                let new_var: Vec<f64> = rv
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                    .collect();
                g.push_buffer_update(self.running_mean.clone(), Tensor::vector(new_mean));
                g.push_buffer_update(self.running_var.clone(), Tensor::vector(new_var));
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.buffer(&self.running_mean)?.data().to_vec();
                let rv = store.buffer(&self.running_var)?.data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let ln = LayerNorm {
            gamma: format!("{name}.gamma"),
            beta: format!("{name}.beta"),
        };
        store.init_const(&ln.gamma, &[dim], 1.0);
        store.init_const(&ln.beta, &[dim], 0.0);
        ln
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta, 1e-5)
    }
}
