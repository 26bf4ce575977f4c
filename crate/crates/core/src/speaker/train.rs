use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::{adam_step, AdamState, Graph, Mode, ParamStore, Segments, Tensor};

use super::aam::{cosine_matrix, AamHead};
use super::model::{SpeakerModel, SpeakerModelConfig};
use crate::audio::FeatureMatrix;
use crate::error::{Error, Result};
use crate::text::argmax_rows;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerExample {
    pub utt_id: String,
    pub speaker_id: String,
    pub feats: FeatureMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Training crop length in frames; shorter utterances are used whole.
    pub crop_frames: usize,
}

impl Default for SpeakerTrainConfig {
    fn default() -> Self {
        SpeakerTrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
            crop_frames: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEpochLog {
    pub epoch: usize,
    pub aam_loss: f64,
    /// Fraction of training crops whose nearest class weight is their own.
    pub accuracy: f64,
    pub lr: f64,
}

pub struct TrainedSpeaker {
    pub model: SpeakerModel,
    pub aam: AamHead,
    pub store: ParamStore,
    /// Speaker ids in class-index order.
    pub speakers: Vec<String>,
    pub log: Vec<SpeakerEpochLog>,
}

/// Minibatch Adam on AAM-softmax over random crops. Parameters present in
/// `init` with matching shapes replace the fresh initialisation.
pub fn train_speaker(
    examples: &[SpeakerExample],
    model_cfg: &SpeakerModelConfig,
    cfg: &SpeakerTrainConfig,
    init: Option<&ParamStore>,
) -> Result<TrainedSpeaker> {
    let mut index: BTreeMap<&str, usize> = examples.iter().map(|e| (e.speaker_id.as_str(), 0)).collect();
    if index.len() < 2 {
        return Err(Error::Domain(format!(
            "speaker training needs at least 2 speakers, got {}",
            index.len()
        )));
    }
    for (i, v) in index.values_mut().enumerate() {
        *v = i;
    }
    let speakers: Vec<String> = index.keys().map(|s| s.to_string()).collect();
    let labels: Vec<usize> = examples.iter().map(|e| index[e.speaker_id.as_str()]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = SpeakerModel::new(&mut store, &mut rng, model_cfg.clone())?;
    let aam = AamHead::new(
        &mut store,
        &mut rng,
        "spk.aam",
        model.embed_dim(),
        speakers.len(),
        model_cfg.aam,
    )?;
    if let Some(src) = init {
        store.load_matching(src);
    }
    let crop = cfg.crop_frames.max(model.min_frames());
    for e in examples {
        if e.feats.num_frames() < model.min_frames() {
            return Err(Error::TooShort {
                needed: model.min_frames(),
                got: e.feats.num_frames(),
                unit: "frames",
            });
        }
    }

    let dim = model_cfg.encoder.input_dim;
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut n) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut data = Vec::new();
            let mut lens = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let f = &examples[i].feats;
                let t = f.num_frames();
                let len = t.min(crop);
                let start = rng.gen_range(0..=t - len);
                data.extend_from_slice(&f.frames.data()[start * dim..(start + len) * dim]);
                lens.push(len);
            }
            let segs = Segments::from_lengths(&lens);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::new(&[segs.total(), dim], data)?);
            let e = model.forward(&mut g, &store, x, &segs, Mode::Train)?;
            let loss = aam.loss(&mut g, &store, e, &batch_labels)?;
            let w = g.param(&store, &aam.weight)?;
            let cos = cosine_matrix(&mut g, e, w)?;
            correct += argmax_rows(g.value(cos))
                .iter()
                .zip(&batch_labels)
                .filter(|(p, l)| p == l)
                .count();
            loss_sum += g.value(loss).item() * chunk.len() as f64;
            n += chunk.len();
            store.zero_grads();
            g.backward(loss, &mut store)?;
            g.apply_buffer_updates(&mut store);
            adam_step(&mut store, &mut adam);
        }
        log.push(SpeakerEpochLog {
            epoch,
            aam_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            lr: adam.lr,
        });
        adam.epoch_end();
    }
    Ok(TrainedSpeaker {
        model,
        aam,
        store,
        speakers,
        log,
    })
}
