//! Embedding fusion, cosine scoring of trials and verification metrics.

mod fusion;
mod metrics;
mod trials;

use serde::{Deserialize, Serialize};

pub use fusion::{
    fuse, train_fusion_cnn, FusionCnn, FusionCnnConfig, FusionStrategy, FusionTrainConfig, Fuser, TrainedFusion,
};
pub use metrics::{
    compute_auc, compute_eer, compute_min_dcf, eer_from_points, operating_points, DcfConfig, Eer, OperatingPoint,
    ScoreSet,
};
pub use trials::{
    format_scores, parse_scores, score_trials, score_trials_with, trial_scores, trial_scores_parallel, TargetRule,
    Trial, TrialFamily, TrialList,
};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Text,
    Speaker,
    Fused(FusionStrategy),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub kind: EmbeddingKind,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, kind: EmbeddingKind) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding has non-finite entries".into()));
        }
        Ok(Embedding { vector, kind })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_score(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("cosine of dimensions {} and {}", a.dim(), b.dim())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine score of a zero vector".into()));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
