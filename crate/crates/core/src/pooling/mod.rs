//! Attentive statistics pooling (ASP), its multi-head variant (MHASP),
//! sliding-window pooling (SWASP) and the pooling head that combines them.
//!
//! Frame sequences are stored time-major (`[T, C]`) and batches are packed
//! along time with a [`Segments`] layout; every op here pools each segment
//! independently.

mod asp;
mod mhasp;
mod swasp;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::layers::Linear;
use tdsv_nn::{Graph, ParamStore, Segments, Tensor, Var};

pub use asp::{asp, asp_moments, Asp, AspMoments, AspVars, SIGMA_EPS};
pub use mhasp::{Mhasp, MhaspOutput, StatsSource};
pub use swasp::{segment, window_ranges, Swasp, SwaspConfig, SwaspOutput};

use crate::error::{Error, Result};

/// Frame-level features `M` of one utterance: `C` channels over `T` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStates {
    features: Tensor,
}

impl FrameStates {
    /// From a `[T, C]` tensor.
    pub fn from_time_major(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() == 0 || features.cols() == 0 {
            return Err(Error::shape(format!("frame states must be [T, C] with T, C >= 1, got {:?}", features.shape())));
        }
        if !features.all_finite() {
            return Err(Error::Domain("frame states contain non-finite values".into()));
        }
        Ok(FrameStates { features })
    }

    /// From a `[C, T]` tensor.
    pub fn from_channel_major(features: &Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape(format!("expected [C, T], got {:?}", features.shape())));
        }
        FrameStates::from_time_major(features.transpose())
    }

    pub fn time_major(&self) -> &Tensor {
        &self.features
    }

    pub fn channel_major(&self) -> Tensor {
        self.features.transpose()
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Reorders frames: frame `i` of the result is frame `perm[i]` of `self`.
    pub fn permute_frames(&self, perm: &[usize]) -> Result<Self> {
        let c = self.channels();
        let mut data = Vec::with_capacity(self.features.numel());
        for &p in perm {
            if p >= self.frames() {
                return Err(Error::shape(format!("frame {} out of {}", p, self.frames())));
            }
            data.extend_from_slice(self.features.row(p));
        }
        FrameStates::from_time_major(Tensor::new(&[perm.len(), c], data)?)
    }
}

/// Weighted first and second moments of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingStats {
    pub mu: Tensor,
    pub sigma2: Tensor,
    /// `[T, C]`: one weight column per channel, each summing to one.
    pub attn_weights: Tensor,
}

/// Branches feeding the speaker embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolingMode {
    #[serde(rename = "A")]
    Asp,
    #[serde(rename = "M")]
    Mhasp,
    #[serde(rename = "S")]
    Swasp,
    #[serde(rename = "A+S")]
    AspSwasp,
    #[serde(rename = "M+S")]
    MhaspSwasp,
    #[serde(rename = "A+M+S")]
    AspMhaspSwasp,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 6] = [
        PoolingMode::Asp,
        PoolingMode::Mhasp,
        PoolingMode::Swasp,
        PoolingMode::AspSwasp,
        PoolingMode::MhaspSwasp,
        PoolingMode::AspMhaspSwasp,
    ];

    pub fn uses_asp(self) -> bool {
        matches!(self, PoolingMode::Asp | PoolingMode::AspSwasp | PoolingMode::AspMhaspSwasp)
    }

    pub fn uses_mhasp(self) -> bool {
        matches!(self, PoolingMode::Mhasp | PoolingMode::MhaspSwasp | PoolingMode::AspMhaspSwasp)
    }

    pub fn uses_swasp(self) -> bool {
        matches!(
            self,
            PoolingMode::Swasp | PoolingMode::AspSwasp | PoolingMode::MhaspSwasp | PoolingMode::AspMhaspSwasp
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            PoolingMode::Asp => "A",
            PoolingMode::Mhasp => "M",
            PoolingMode::Swasp => "S",
            PoolingMode::AspSwasp => "A+S",
            PoolingMode::MhaspSwasp => "M+S",
            PoolingMode::AspMhaspSwasp => "A+M+S",
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingMode::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Domain(format!("unknown pooling mode {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolingConfig {
    pub mode: PoolingMode,
    pub embed_dim: usize,
    pub heads: usize,
    pub attn_hidden: usize,
    pub stats_source: StatsSource,
    pub swasp: SwaspConfig,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig {
            mode: PoolingMode::AspSwasp,
            embed_dim: 192,
            heads: 2,
            attn_hidden: Asp::DEFAULT_HIDDEN,
            stats_source: StatsSource::Input,
            swasp: SwaspConfig::default(),
        }
    }
}

/// Per-branch outputs of [`PoolingHead::forward_branches`], each
/// `[segments, embed_dim]`.
#[derive(Clone, Debug)]
pub struct BranchOutputs {
    pub asp: Option<Var>,
    pub mhasp: Option<Var>,
    pub swasp: Option<Var>,
    pub embedding: Var,
}

/// Speaker pooling head: the selected branches, each projected to
/// `embed_dim`, concatenated and mixed by a final linear layer when more
/// than one branch is active.
#[derive(Clone, Debug)]
pub struct PoolingHead {
    pub cfg: PoolingConfig,
    pub channels: usize,
    pub asp: Option<(Asp, Linear)>,
    pub mhasp: Option<Mhasp>,
    pub swasp: Option<Swasp>,
    pub combine: Option<Linear>,
}

impl PoolingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, cfg: PoolingConfig) -> Result<Self> {
        let mode = cfg.mode;
        let d = cfg.embed_dim;
        let asp = if mode.uses_asp() {
            let a = Asp::new(store, rng, &format!("{name}.asp"), channels, cfg.attn_hidden);
            let p = Linear::new(store, rng, &format!("{name}.asp_proj"), 2 * channels, d);
            Some((a, p))
        } else {
            None
        };
        let mhasp = if mode.uses_mhasp() {
            Some(Mhasp::new(
                store,
                rng,
                &format!("{name}.mhasp"),
                channels,
                cfg.heads,
                cfg.attn_hidden,
                d,
                cfg.stats_source,
            )?)
        } else {
            None
        };
        let swasp = if mode.uses_swasp() {
            let sc = SwaspConfig {
                out_dim: d,
                ..cfg.swasp.clone()
            };
            Some(Swasp::new(store, rng, &format!("{name}.swasp"), channels, sc)?)
        } else {
            None
        };
        let branches = [asp.is_some(), mhasp.is_some(), swasp.is_some()].iter().filter(|b| **b).count();
        let combine = (branches > 1).then(|| Linear::new(store, rng, &format!("{name}.combine"), branches * d, d));
        Ok(PoolingHead {
            cfg,
            channels,
            asp,
            mhasp,
            swasp,
            combine,
        })
    }

    /// Shortest sequence the head accepts.
    pub fn min_frames(&self) -> usize {
        if self.swasp.is_some() {
            self.cfg.swasp.window_len
        } else {
            1
        }
    }

    pub fn forward_branches(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<BranchOutputs> {
        let asp = match &self.asp {
            Some((a, p)) => {
                let m = a.forward(g, store, x, segs)?;
                let pooled = m.pooled(g)?;
                Some(p.forward(g, store, pooled)?)
            }
            None => None,
        };
        let mhasp = match &self.mhasp {
            Some(m) => Some(m.forward(g, store, x, segs)?),
            None => None,
        };
        let swasp = match &self.swasp {
            Some(s) => Some(s.forward(g, store, x, segs)?),
            None => None,
        };
        let parts: Vec<Var> = [asp, mhasp, swasp].into_iter().flatten().collect();
        let embedding = match &self.combine {
            Some(c) => {
                let cat = g.concat_cols(&parts)?;
                c.forward(g, store, cat)?
            }
            None => parts[0],
        };
        Ok(BranchOutputs {
            asp,
            mhasp,
            swasp,
            embedding,
        })
    }

    /// `[segments, embed_dim]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        Ok(self.forward_branches(g, store, x, segs)?.embedding)
    }
}

fn eval_single<F>(m: &FrameStates, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, Var, &Segments) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.input(m.time_major().clone());
    let out = f(&mut g, x, &Segments::single(m.frames()))?;
    let v = g.value(out);
    Ok(v.clone().reshape(&[v.numel()])?)
}

/// MHASP of one sequence.
pub fn mhasp(x: &FrameStates, store: &ParamStore, p: &Mhasp) -> Result<Tensor> {
    eval_single(x, |g, v, s| p.forward(g, store, v, s))
}

/// SWASP of one sequence.
pub fn swasp(m: &FrameStates, store: &ParamStore, p: &Swasp) -> Result<Tensor> {
    eval_single(m, |g, v, s| p.forward(g, store, v, s))
}

/// Speaker embedding of one sequence under `head`'s branch selection.
pub fn combined_pool(m: &FrameStates, store: &ParamStore, head: &PoolingHead) -> Result<Tensor> {
    eval_single(m, |g, v, s| head.forward(g, store, v, s))
}
