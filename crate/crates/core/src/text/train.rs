use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::{adam_step, AdamState, Graph, Mode, ParamStore};

use super::model::{LossBreakdown, TextExample, TextExtractor, TextExtractorConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 16,
            lr: 1e-3,
            seed: 42,
        }
    }
}

/// Averages over one epoch's batches; `lr` is the rate used in that epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

pub struct TrainedText {
    pub model: TextExtractor,
    pub store: ParamStore,
    pub log: Vec<TextEpochLog>,
}

/// Minibatch Adam on the weighted triple loss. Parameters present in `init`
/// with matching shapes replace the fresh initialisation.
pub fn train_text(
    examples: &[TextExample],
    model_cfg: &TextExtractorConfig,
    cfg: &TrainConfig,
    init: Option<&ParamStore>,
) -> Result<TrainedText> {
    if examples.is_empty() {
        return Err(Error::Domain("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = TextExtractor::new(&mut store, &mut rng, model_cfg.clone())?;
    if let Some(src) = init {
        store.load_matching(src);
    }
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut s1, mut s2, mut s3, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(bs) {
            let batch: Vec<&TextExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let (_, l) = model.losses(&mut g, &store, &batch, Mode::Train)?;
            let w = batch.len();
            s1 += g.value(l.l1).item() * w as f64;
            s2 += g.value(l.l2).item() * w as f64;
            s3 += g.value(l.l3).item() * w as f64;
            n += w;
            store.zero_grads();
            g.backward(l.total, &mut store)?;
            g.apply_buffer_updates(&mut store);
            adam_step(&mut store, &mut adam);
        }
        let nf = n as f64;
        log.push(TextEpochLog {
            epoch,
            losses: LossBreakdown::compose(s1 / nf, s2 / nf, s3 / nf, &model.cfg.loss_weights),
            lr: adam.lr,
        });
        adam.epoch_end();
    }
    Ok(TrainedText { model, store, log })
}

/// Fraction of examples whose predicted label matches.
pub fn text_accuracy(model: &TextExtractor, store: &ParamStore, examples: &[TextExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Domain("no examples to score".into()));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(32) {
        let feats: Vec<_> = chunk.iter().map(|e| &e.feats).collect();
        let pred = model.predict(store, &feats)?;
        correct += pred.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}
