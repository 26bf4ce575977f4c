//! Speaker branch: a dilated TDNN encoder with multi-layer aggregation, the
//! pooling head, and an additive angular margin softmax objective.

mod aam;
mod encoder;
mod model;
mod train;

pub use aam::{aam_logits, aam_softmax_loss, cosine_matrix, AamConfig, AamHead, COS_CLAMP};
pub use encoder::{encoder_forward, SpeakerEncoder, SpeakerEncoderConfig};
pub use model::{speaker_embed, SpeakerModel, SpeakerModelConfig, SpeakerTrace};
pub use train::{train_speaker, SpeakerEpochLog, SpeakerExample, SpeakerTrainConfig, TrainedSpeaker};
