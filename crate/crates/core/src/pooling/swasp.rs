use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::{Graph, ParamStore, Segments, Var};

use super::mhasp::{Mhasp, StatsSource};
use super::FrameStates;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwaspConfig {
    pub window_len: usize,
    pub stride: usize,
    pub heads: usize,
    pub segment_proj_dim: usize,
    pub out_dim: usize,
    #[serde(default = "default_hidden")]
    pub attn_hidden: usize,
    #[serde(default)]
    pub stats_source: StatsSource,
}

fn default_hidden() -> usize {
    128
}

impl Default for SwaspConfig {
    fn default() -> Self {
        SwaspConfig {
            window_len: 50,
            stride: 25,
            heads: 2,
            segment_proj_dim: 1536,
            out_dim: 192,
            attn_hidden: default_hidden(),
            stats_source: StatsSource::Input,
        }
    }
}

impl SwaspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.window_len {
            return Err(Error::Domain(format!(
                "stride {} must be in 1..={}",
                self.stride, self.window_len
            )));
        }
        if self.heads == 0 || self.segment_proj_dim % self.heads != 0 {
            return Err(Error::Domain(format!(
                "segment width {} not divisible by {} heads",
                self.segment_proj_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Window ranges over `t` frames: starts at `0, s, 2s, …` while the window
/// fits, plus a final `[t - w, t)` window when the grid stops short of `t`.
pub fn window_ranges(t: usize, w: usize, s: usize) -> Result<Vec<Range<usize>>> {
    if w == 0 || s == 0 {
        return Err(Error::Domain("window length and stride must be positive".into()));
    }
    if w > t {
        return Err(Error::TooShort {
            needed: w,
            got: t,
            unit: "frames",
        });
    }
    let mut out: Vec<Range<usize>> = (0..).map(|i| i * s).take_while(|&st| st + w <= t).map(|st| st..st + w).collect();
    if out.last().map(|r| r.end) != Some(t) {
        out.push(t - w..t);
    }
    Ok(out)
}

/// Splits `m` into overlapping windows along time.
pub fn segment(m: &FrameStates, w: usize, s: usize) -> Result<Vec<FrameStates>> {
    window_ranges(m.frames(), w, s)?
        .into_iter()
        .map(|r| FrameStates::from_time_major(m.time_major().slice_rows(r.start, r.end)))
        .collect()
}

/// Sliding-window pooling: a shared per-window MHASP, then a second MHASP
/// over the sequence of window vectors.
#[derive(Clone, Debug)]
pub struct Swasp {
    pub cfg: SwaspConfig,
    pub segment_stage: Mhasp,
    pub merge_stage: Mhasp,
}

/// Intermediate results of [`Swasp::forward_full`].
#[derive(Clone, Debug)]
pub struct SwaspOutput {
    /// `[segments, out_dim]`
    pub out: Var,
    /// `[total windows, segment_proj_dim]`, windows in offset order per segment.
    pub window_vectors: Var,
    pub window_segs: Segments,
}

impl Swasp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, cfg: SwaspConfig) -> Result<Self> {
        cfg.validate()?;
        let segment_stage = Mhasp::new(
            store,
            rng,
            &format!("{name}.segment"),
            channels,
            cfg.heads,
            cfg.attn_hidden,
            cfg.segment_proj_dim,
            cfg.stats_source,
        )?;
        let merge_stage = Mhasp::new(
            store,
            rng,
            &format!("{name}.merge"),
            cfg.segment_proj_dim,
            cfg.heads,
            cfg.attn_hidden,
            cfg.out_dim,
            cfg.stats_source,
        )?;
        Ok(Swasp {
            cfg,
            segment_stage,
            merge_stage,
        })
    }

    pub fn forward_full(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<SwaspOutput> {
        let mut idx = Vec::new();
        let mut counts = Vec::with_capacity(segs.len());
        for seg in segs.ranges() {
            let wins = window_ranges(seg.len(), self.cfg.window_len, self.cfg.stride)?;
            counts.push(wins.len());
            for w in wins {
                idx.extend(seg.start + w.start..seg.start + w.end);
            }
        }
        let n_windows: usize = counts.iter().sum();
        let win_segs = Segments::uniform(n_windows, self.cfg.window_len);
        let window_vectors = self
            .segment_stage
            .forward_gathered(g, store, x, Some(&idx), &win_segs)?
            .out;
        let window_segs = Segments::from_lengths(&counts);
        let out = self.merge_stage.forward(g, store, window_vectors, &window_segs)?;
        Ok(SwaspOutput {
            out,
            window_vectors,
            window_segs,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments) -> Result<Var> {
        Ok(self.forward_full(g, store, x, segs)?.out)
    }
}
