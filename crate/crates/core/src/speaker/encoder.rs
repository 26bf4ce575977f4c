use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::layers::{BatchNorm1d, Conv1d};
use tdsv_nn::{Graph, Mode, ParamStore, Segments, Var};

use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::pooling::FrameStates;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerEncoderConfig {
    pub input_dim: usize,
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub mfa_channels: usize,
}

impl Default for SpeakerEncoderConfig {
    fn default() -> Self {
        SpeakerEncoderConfig {
            input_dim: 20,
            channels: vec![128, 128, 128],
            dilations: vec![1, 2, 3],
            kernel: 3,
            mfa_channels: 256,
        }
    }
}

impl SpeakerEncoderConfig {
    /// 1536 aggregated channels.
    pub fn paper() -> Self {
        SpeakerEncoderConfig {
            mfa_channels: 1536,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.dilations.len() {
            return Err(Error::Domain(format!(
                "{} conv widths but {} dilations",
                self.channels.len(),
                self.dilations.len()
            )));
        }
        if self.kernel % 2 == 0 || self.input_dim == 0 || self.mfa_channels == 0 || self.dilations.contains(&0) {
            return Err(Error::Domain(format!("invalid encoder config {:?}", self)));
        }
        Ok(())
    }
}

/// Dilated Conv1D → ReLU → BN layers whose outputs are concatenated and
/// mixed by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub cfg: SpeakerEncoderConfig,
    layers: Vec<(Conv1d, BatchNorm1d)>,
    mfa: Conv1d,
}

impl SpeakerEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: SpeakerEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut cin = cfg.input_dim;
        for (i, (&c, &d)) in cfg.channels.iter().zip(&cfg.dilations).enumerate() {
            let conv = Conv1d::new(store, rng, &format!("{name}.conv{i}"), cin, c, cfg.kernel, d);
            let bn = BatchNorm1d::new(store, &format!("{name}.bn{i}"), c);
            layers.push((conv, bn));
            cin = c;
        }
        let total: usize = cfg.channels.iter().sum();
        let mfa = Conv1d::new(store, rng, &format!("{name}.mfa"), total, cfg.mfa_channels, 1, 1);
        Ok(SpeakerEncoder { cfg, layers, mfa })
    }

    /// Packed `[rows, input_dim]` to `[rows, mfa_channels]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments, mode: Mode) -> Result<Var> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (conv, bn) in &self.layers {
            let y = conv.forward(g, store, h, segs)?;
            let y = g.relu(y);
            h = bn.forward(g, store, y, mode)?;
            outs.push(h);
        }
        let cat = g.concat_cols(&outs)?;
        Ok(self.mfa.forward(g, store, cat, segs)?)
    }
}

/// Eval-mode frame-level output of one utterance.
pub fn encoder_forward(feats: &FeatureMatrix, store: &ParamStore, enc: &SpeakerEncoder) -> Result<FrameStates> {
    if feats.dim() != enc.cfg.input_dim {
        return Err(Error::shape(format!(
            "features have {} coefficients, encoder expects {}",
            feats.dim(),
            enc.cfg.input_dim
        )));
    }
    let mut g = Graph::new();
    let x = g.input(feats.frames.clone());
    let h = enc.forward(&mut g, store, x, &Segments::single(feats.num_frames()), Mode::Eval)?;
    FrameStates::from_time_major(g.value(h).clone())
}
