use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::layers::Linear;
use tdsv_nn::{AttnLayout, Graph, ParamStore, Segments, Var};

use super::asp::{asp_moments, Asp, AspMoments};
use crate::error::{Error, Result};

/// Which sequence the weighted moments are taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsSource {
    /// Moments of the pooling input `X`; weights still come from `A`.
    #[default]
    Input,
    /// Moments of the attended sequence `A`.
    Attended,
}

/// Self-attention over time followed by attentive statistics and a linear
/// projection of `[μ; σ]`.
#[derive(Clone, Debug)]
pub struct Mhasp {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub asp: Asp,
    pub proj: Linear,
    pub heads: usize,
    pub channels: usize,
    pub out_dim: usize,
    pub stats_source: StatsSource,
}

#[derive(Clone, Copy, Debug)]
pub struct MhaspOutput {
    /// `[segments, out_dim]`
    pub out: Var,
    /// `[rows, C]`
    pub attended: Var,
    pub moments: AspMoments,
}

impl Mhasp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        channels: usize,
        heads: usize,
        hidden: usize,
        out_dim: usize,
        stats_source: StatsSource,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::shape(format!(
                "{} channels cannot be split over {} heads",
                channels, heads
            )));
        }
        Ok(Mhasp {
            q: Linear::new(store, rng, &format!("{name}.q"), channels, channels),
            k: Linear::new(store, rng, &format!("{name}.k"), channels, channels),
            v: Linear::new(store, rng, &format!("{name}.v"), channels, channels),
            asp: Asp::new(store, rng, &format!("{name}.asp"), channels, hidden),
            proj: Linear::new(store, rng, &format!("{name}.proj"), 2 * channels, out_dim),
            heads,
            channels,
            out_dim,
            stats_source,
        })
    }

    pub fn forward_full(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<MhaspOutput> {
        self.forward_gathered(g, store, x, None, segs)
    }

    /// Pools the sequences formed by gathering `rows` of `x` (all rows when
    /// `None`), laid out by `segs`. The per-frame projections run on `x`
    /// before gathering, so overlapping windows share them.
    pub fn forward_gathered(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        rows: Option<&[usize]>,
        segs: &Segments,
    ) -> Result<MhaspOutput> {
        let c = g.value(x).cols();
        if c != self.channels {
            return Err(Error::shape(format!(
                "multi-head pooling built for {} channels, got {}",
                self.channels, c
            )));
        }
        let mut q = self.q.forward(g, store, x)?;
        let mut k = self.k.forward(g, store, x)?;
        let mut v = self.v.forward(g, store, x)?;
        let mut x = x;
        if let Some(idx) = rows {
            q = g.gather_rows(q, idx.to_vec())?;
            k = g.gather_rows(k, idx.to_vec())?;
            v = g.gather_rows(v, idx.to_vec())?;
            x = g.gather_rows(x, idx.to_vec())?;
        }
        let attended = g.attention(q, k, v, AttnLayout::self_attention(segs, self.heads))?;
        let p = self.asp.vars(g, store)?;
        let stats_src = match self.stats_source {
            StatsSource::Input => x,
            StatsSource::Attended => attended,
        };
        let moments = asp_moments(g, attended, stats_src, segs, &p)?;
        let pooled = moments.pooled(g)?;
        let out = self.proj.forward(g, store, pooled)?;
        Ok(MhaspOutput {
            out,
            attended,
            moments,
        })
    }

    /// `[segments, out_dim]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        Ok(self.forward_full(g, store, x, segs)?.out)
    }
}
