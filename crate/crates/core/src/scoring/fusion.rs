use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tdsv_nn::layers::Conv1d;
use tdsv_nn::{adam_step, AdamState, Graph, ParamStore, Segments, Tensor, Var};

use super::trials::{TargetRule, TrialList};
use super::{Embedding, EmbeddingKind};
use crate::error::{Error, Result};

/// How text and speaker embeddings are combined before scoring. `None`
/// scores the speaker embedding alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    None,
    Add,
    #[default]
    Mul,
    Cnn,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::None,
        FusionStrategy::Add,
        FusionStrategy::Mul,
        FusionStrategy::Cnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::None => "none",
            FusionStrategy::Add => "add",
            FusionStrategy::Mul => "mul",
            FusionStrategy::Cnn => "cnn",
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Lookup(format!("unknown fusion strategy {s:?}")))
    }
}

/// A ready-to-apply fusion rule.
#[derive(Clone, Debug)]
pub enum Fuser {
    None,
    Add,
    Mul,
    Cnn(FusionCnn),
}

impl Fuser {
    pub fn strategy(&self) -> FusionStrategy {
        match self {
            Fuser::None => FusionStrategy::None,
            Fuser::Add => FusionStrategy::Add,
            Fuser::Mul => FusionStrategy::Mul,
            Fuser::Cnn(_) => FusionStrategy::Cnn,
        }
    }
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "cannot fuse embeddings of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn fuse(e_text: &Embedding, e_spk: &Embedding, fuser: &Fuser) -> Result<Embedding> {
    check_dims(e_text, e_spk)?;
    let kind = EmbeddingKind::Fused(fuser.strategy());
    let vector = match fuser {
        Fuser::None => e_spk.vector.clone(),
        Fuser::Add => e_text.vector.iter().zip(&e_spk.vector).map(|(a, b)| a + b).collect(),
        Fuser::Mul => e_text.vector.iter().zip(&e_spk.vector).map(|(a, b)| a * b).collect(),
        Fuser::Cnn(cnn) => return cnn.fuse(e_text, e_spk),
    };
    Ok(Embedding { vector, kind })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionCnnConfig {
    pub dim: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl Default for FusionCnnConfig {
    fn default() -> Self {
        FusionCnnConfig {
            dim: 192,
            channels: 2,
            kernel: 3,
        }
    }
}

/// The two embeddings as a 2-channel sequence of length `dim`, two same-
/// padded convolutions with ReLU, then a 1×1 convolution down to one channel.
#[derive(Clone, Debug)]
pub struct FusionCnn {
    pub cfg: FusionCnnConfig,
    pub store: ParamStore,
    conv1: Conv1d,
    conv2: Conv1d,
    collapse: Conv1d,
}

impl FusionCnn {
    pub fn new(cfg: FusionCnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv1 = Conv1d::new(&mut store, &mut rng, "fusion.conv1", 2, cfg.channels, cfg.kernel, 1);
        let conv2 = Conv1d::new(&mut store, &mut rng, "fusion.conv2", cfg.channels, cfg.channels, cfg.kernel, 1);
        let collapse = Conv1d::new(&mut store, &mut rng, "fusion.collapse", cfg.channels, 1, 1, 1);
        FusionCnn {
            cfg,
            store,
            conv1,
            conv2,
            collapse,
        }
    }

    /// Rebuilds the layer wiring around stored weights.
    pub fn from_store(cfg: FusionCnnConfig, store: ParamStore) -> Result<Self> {
        let mut cnn = FusionCnn::new(cfg, 0);
        for name in cnn.store.names().map(str::to_string).collect::<Vec<_>>() {
            let want = cnn.store.get(&name)?.shape().to_vec();
            let got = store.get(&name)?;
            if got.shape() != want.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected shape {want:?}, found {:?}",
                    got.shape()
                )));
            }
        }
        cnn.store = store;
        Ok(cnn)
    }

    /// `text` and `spk` are `[N, dim]`; returns `[N, dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, text: Var, spk: Var) -> Result<Var> {
        let n = g.value(text).rows();
        let d = self.cfg.dim;
        let t = g.reshape(text, &[n * d, 1])?;
        let s = g.reshape(spk, &[n * d, 1])?;
        let x = g.concat_cols(&[t, s])?;
        let segs = Segments::uniform(n, d);
        let h = self.conv1.forward(g, store, x, &segs)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h, &segs)?;
        let h = g.relu(h);
        let y = self.collapse.forward(g, store, h, &segs)?;
        Ok(g.reshape(y, &[n, d])?)
    }

    pub fn fuse(&self, e_text: &Embedding, e_spk: &Embedding) -> Result<Embedding> {
        check_dims(e_text, e_spk)?;
        if e_text.dim() != self.cfg.dim {
            return Err(Error::shape(format!(
                "fusion network expects dimension {}, got {}",
                self.cfg.dim,
                e_text.dim()
            )));
        }
        let mut g = Graph::new();
        let t = g.input(Tensor::new(&[1, self.cfg.dim], e_text.vector.clone())?);
        let s = g.input(Tensor::new(&[1, self.cfg.dim], e_spk.vector.clone())?);
        let y = self.forward(&mut g, &self.store, t, s)?;
        Ok(Embedding {
            vector: g.value(y).data().to_vec(),
            kind: EmbeddingKind::Fused(FusionStrategy::Cnn),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub target_rule: TargetRule,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed: 42,
            target_rule: TargetRule::Accept,
        }
    }
}

pub struct TrainedFusion {
    pub cnn: FusionCnn,
    /// Mean binary cross entropy per epoch.
    pub log: Vec<f64>,
}

/// Trains the fusion network on frozen `(text, speaker)` embedding pairs:
/// each trial's fused embeddings are compared by cosine, mapped through a
/// learned affine calibration and scored with binary cross entropy.
pub fn train_fusion_cnn(
    pairs: &HashMap<String, (Embedding, Embedding)>,
    trials: &TrialList,
    cnn_cfg: &FusionCnnConfig,
    cfg: &FusionTrainConfig,
) -> Result<TrainedFusion> {
    if trials.is_empty() {
        return Err(Error::Domain("no training trials for the fusion network".into()));
    }
    let lookup = |id: &str| pairs.get(id).ok_or_else(|| Error::Lookup(format!("no embeddings for utterance {id}")));
    for t in trials.iter() {
        lookup(&t.enroll)?;
        lookup(&t.test)?;
    }
    let mut cnn = FusionCnn::new(cnn_cfg.clone(), cfg.seed);
    let mut store = std::mem::take(&mut cnn.store);
    store.init_const("fusion.calib.scale", &[1, 1], 5.0);
    store.init_const("fusion.calib.bias", &[1], 0.0);
    let d = cnn_cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = AdamState::new(cfg.lr);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let rows = |pick: &dyn Fn(&(Embedding, Embedding)) -> &Embedding, enroll: bool| -> Result<Tensor> {
                let mut data = Vec::with_capacity(chunk.len() * d);
                for &i in chunk {
                    let t = &trials.trials[i];
                    let id = if enroll { &t.enroll } else { &t.test };
                    data.extend_from_slice(&pick(lookup(id)?).vector);
                }
                Ok(Tensor::new(&[chunk.len(), d], data)?)
            };
            let mut g = Graph::new();
            let et = g.input(rows(&|p| &p.0, true)?);
            let es = g.input(rows(&|p| &p.1, true)?);
            let tt = g.input(rows(&|p| &p.0, false)?);
            let ts = g.input(rows(&|p| &p.1, false)?);
            let fa = cnn.forward(&mut g, &store, et, es)?;
            let fb = cnn.forward(&mut g, &store, tt, ts)?;
            let na = g.l2_normalize_rows(fa);
            let nb = g.l2_normalize_rows(fb);
            let prod = g.mul(na, nb)?;
            let cos = g.row_sums(prod);
            let w = g.param(&store, "fusion.calib.scale")?;
            let b = g.param(&store, "fusion.calib.bias")?;
            let z = g.matmul(cos, w)?;
            let z = g.add_row(z, b)?;
            let zero = g.input(Tensor::zeros(&[chunk.len(), 1]));
            let logits = g.concat_cols(&[zero, z])?;
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| usize::from(cfg.target_rule.label(&trials.trials[i])))
                .collect();
            let loss = g.cross_entropy(logits, &labels)?;
            sum += g.value(loss).item() * chunk.len() as f64;
            n += chunk.len();
            store.zero_grads();
            g.backward(loss, &mut store)?;
            adam_step(&mut store, &mut adam);
        }
        log.push(sum / n as f64);
        adam.epoch_end();
    }
    let mut kept = ParamStore::new();
    for (name, p) in store.iter() {
        if name.starts_with("fusion.conv") || name.starts_with("fusion.collapse") {
            kept.insert(name, p.value.clone());
        }
    }
    cnn.store = kept;
    Ok(TrainedFusion { cnn, log })
}
