use rand::Rng;
use tdsv_nn::layers::linear;
use tdsv_nn::{Graph, ParamStore, Segments, Var};

use super::{FrameStates, PoolingStats};
use crate::error::{Error, Result};

/// Added under the square root of the variance.
pub const SIGMA_EPS: f64 = 1e-8;

/// Graph handles of the attention MLP `ω₂ᵀ tanh(ω₁ᵀ x + b₁) + b₂`.
#[derive(Clone, Copy, Debug)]
pub struct AspVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Per-segment weighted moments produced by [`asp_moments`].
#[derive(Clone, Copy, Debug)]
pub struct AspMoments {
    /// `[segments, C]`
    pub mu: Var,
    /// `[segments, C]`, floored at zero.
    pub var: Var,
    /// `sqrt(var + SIGMA_EPS)`, `[segments, C]`
    pub sigma: Var,
    /// Channel-wise weights, `[rows, C]`; each segment column sums to one.
    pub alpha: Var,
}

impl AspMoments {
    /// `[μ; σ]` per segment, `[segments, 2C]`.
    pub fn pooled(&self, g: &mut Graph) -> Result<Var> {
        Ok(g.concat_cols(&[self.mu, self.sigma])?)
    }
}

/// Channel-wise attentive statistics. Weights are scored from `score_src`
/// and the moments are taken of `stats_src`; both are packed `[rows, C]`
/// with the segment layout `segs`.
pub fn asp_moments(g: &mut Graph, score_src: Var, stats_src: Var, segs: &Segments, p: &AspVars) -> Result<AspMoments> {
    let h = linear(g, score_src, p.w1, p.b1)?;
    let e = g.tanh(h);
    let scores = linear(g, e, p.w2, p.b2)?;
    let alpha = g.segment_softmax(scores, segs)?;
    let ax = g.mul(alpha, stats_src)?;
    let mu = g.segment_sum(ax, segs)?;
    let axx = g.mul(ax, stats_src)?;
    let m2 = g.segment_sum(axx, segs)?;
    let mu2 = g.mul(mu, mu)?;
    let raw = g.sub(m2, mu2)?;
    let var = g.relu(raw);
    let shifted = g.add_scalar(var, SIGMA_EPS);
    let sigma = g.sqrt(shifted);
    Ok(AspMoments { mu, var, sigma, alpha })
}

/// Parameter names of one attentive statistics pooling layer.
#[derive(Clone, Debug)]
pub struct Asp {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
    pub channels: usize,
    pub hidden: usize,
}

impl Asp {
    pub const DEFAULT_HIDDEN: usize = 128;

    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, hidden: usize) -> Self {
        let asp = Asp {
            w1: format!("{name}.w1"),
            b1: format!("{name}.b1"),
            w2: format!("{name}.w2"),
            b2: format!("{name}.b2"),
            channels,
            hidden,
        };
        store.init_xavier(rng, &asp.w1, &[channels, hidden], channels, hidden);
        store.init_const(&asp.b1, &[hidden], 0.0);
        store.init_xavier(rng, &asp.w2, &[hidden, channels], hidden, channels);
        store.init_const(&asp.b2, &[channels], 0.0);
        asp
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> Result<AspVars> {
        Ok(AspVars {
            w1: g.param(store, &self.w1)?,
            b1: g.param(store, &self.b1)?,
            w2: g.param(store, &self.w2)?,
            b2: g.param(store, &self.b2)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<AspMoments> {
        self.check(g.value(x).cols())?;
        let p = self.vars(g, store)?;
        asp_moments(g, x, x, segs, &p)
    }

    fn check(&self, c: usize) -> Result<()> {
        if c != self.channels {
            return Err(Error::shape(format!(
                "attentive pooling built for {} channels, got {}",
                self.channels, c
            )));
        }
        Ok(())
    }
}

/// Attentive statistics of a single sequence.
pub fn asp(x: &FrameStates, store: &ParamStore, p: &Asp) -> Result<PoolingStats> {
    let mut g = Graph::new();
    let xv = g.input(x.time_major().clone());
    let m = p.forward(&mut g, store, xv, &Segments::single(x.frames()))?;
    Ok(PoolingStats {
        mu: g.value(m.mu).clone().reshape(&[x.channels()])?,
        sigma2: g.value(m.var).clone().reshape(&[x.channels()])?,
        attn_weights: g.value(m.alpha).clone(),
    })
}

