use rand::Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::{Graph, Mode, ParamStore, Segments, Tensor, Var};

use super::aam::AamConfig;
use super::encoder::{SpeakerEncoder, SpeakerEncoderConfig};
use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::pooling::{FrameStates, PoolingConfig, PoolingHead, SwaspConfig};
use crate::scoring::{Embedding, EmbeddingKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerModelConfig {
    pub encoder: SpeakerEncoderConfig,
    pub pooling: PoolingConfig,
    pub aam: AamConfig,
}

impl Default for SpeakerModelConfig {
    fn default() -> Self {
        let encoder = SpeakerEncoderConfig::default();
        let pooling = PoolingConfig {
            swasp: SwaspConfig {
                segment_proj_dim: encoder.mfa_channels,
                ..SwaspConfig::default()
            },
            ..PoolingConfig::default()
        };
        SpeakerModelConfig {
            encoder,
            pooling,
            aam: AamConfig::default(),
        }
    }
}

impl SpeakerModelConfig {
    /// 1536 MFA channels and 1536-wide window vectors.
    pub fn paper() -> Self {
        SpeakerModelConfig {
            encoder: SpeakerEncoderConfig::paper(),
            pooling: PoolingConfig::default(),
            aam: AamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pooling.swasp.validate()?;
        self.aam.validate()?;
        if self.encoder.mfa_channels % self.pooling.heads != 0 {
            return Err(Error::Domain(format!(
                "mfa_channels {} not divisible by {} heads",
                self.encoder.mfa_channels, self.pooling.heads
            )));
        }
        Ok(())
    }
}

/// Intermediate outputs of one utterance, for shape inspection.
#[derive(Clone, Debug)]
pub struct SpeakerTrace {
    /// `[T, C]`
    pub mfa: FrameStates,
    /// `[windows, segment_proj_dim]`
    pub window_vectors: Option<Tensor>,
    /// `[1, embed_dim]`
    pub swasp: Option<Tensor>,
    /// `[1, embed_dim]`
    pub embedding: Tensor,
}

/// Frame-level encoder followed by the pooling head.
#[derive(Clone, Debug)]
pub struct SpeakerModel {
    pub cfg: SpeakerModelConfig,
    pub encoder: SpeakerEncoder,
    pub head: PoolingHead,
}

impl SpeakerModel {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: SpeakerModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = SpeakerEncoder::new(store, rng, "spk.enc", cfg.encoder.clone())?;
        let head = PoolingHead::new(store, rng, "spk.pool", cfg.encoder.mfa_channels, cfg.pooling.clone())?;
        Ok(SpeakerModel { cfg, encoder, head })
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.pooling.embed_dim
    }

    pub fn min_frames(&self) -> usize {
        self.head.min_frames()
    }

    fn check(&self, f: &FeatureMatrix) -> Result<()> {
        if f.dim() != self.cfg.encoder.input_dim {
            return Err(Error::shape(format!(
                "features have {} coefficients, encoder expects {}",
                f.dim(),
                self.cfg.encoder.input_dim
            )));
        }
        if f.num_frames() < self.min_frames() {
            return Err(Error::TooShort {
                needed: self.min_frames(),
                got: f.num_frames(),
                unit: "frames",
            });
        }
        Ok(())
    }

    /// Stacks whole utterances into `[rows, input_dim]`.
    pub fn pack(&self, feats: &[&FeatureMatrix]) -> Result<(Tensor, Segments)> {
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(feats.len());
        for f in feats {
            self.check(f)?;
            data.extend_from_slice(f.frames.data());
            lens.push(f.num_frames());
        }
        let segs = Segments::from_lengths(&lens);
        Ok((Tensor::new(&[segs.total(), self.cfg.encoder.input_dim], data)?, segs))
    }

    /// `[segments, embed_dim]`
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &Segments, mode: Mode) -> Result<Var> {
        let h = self.encoder.forward(g, store, x, segs, mode)?;
        self.head.forward(g, store, h, segs)
    }

    /// Eval-mode embeddings, one per input, in input order.
    pub fn embed_batch(&self, store: &ParamStore, feats: &[&FeatureMatrix]) -> Result<Vec<Embedding>> {
        let mut g = Graph::new();
        let (x, segs) = self.pack(feats)?;
        let x = g.input(x);
        let e = self.forward(&mut g, store, x, &segs, Mode::Eval)?;
        let e = g.value(e);
        (0..e.rows())
            .map(|i| Embedding::new(e.row(i).to_vec(), EmbeddingKind::Speaker))
            .collect()
    }

    pub fn trace(&self, store: &ParamStore, feats: &FeatureMatrix) -> Result<SpeakerTrace> {
        let mut g = Graph::new();
        let (x, segs) = self.pack(&[feats])?;
        let x = g.input(x);
        let h = self.encoder.forward(&mut g, store, x, &segs, Mode::Eval)?;
        let mfa = FrameStates::from_time_major(g.value(h).clone())?;
        let (window_vectors, swasp) = match &self.head.swasp {
            Some(s) => {
                let out = s.forward_full(&mut g, store, h, &segs)?;
                (Some(g.value(out.window_vectors).clone()), Some(g.value(out.out).clone()))
            }
            None => (None, None),
        };
        let e = self.head.forward(&mut g, store, h, &segs)?;
        Ok(SpeakerTrace {
            mfa,
            window_vectors,
            swasp,
            embedding: g.value(e).clone(),
        })
    }
}

/// Eval-mode speaker embedding of one utterance.
pub fn speaker_embed(model: &SpeakerModel, store: &ParamStore, feats: &FeatureMatrix) -> Result<Embedding> {
    Ok(model.embed_batch(store, &[feats])?.remove(0))
}
