//! Pipeline stages behind each subcommand. Every function takes the
//! resolved [`RunConfig`] and returns a summary value; the binary only
//! parses flags and prints.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use tdsv_core::audio::{mfcc, FeatureMatrix};
use tdsv_core::data::{build_corpus, load_corpus, make_trials, split_train_eval, CorpusManifest, TrialPolicy, MANIFEST_FILE};
use tdsv_core::pooling::PoolingMode;
use tdsv_core::scoring::{
    compute_auc, compute_eer, compute_min_dcf, format_scores, fuse, parse_scores, train_fusion_cnn, trial_scores_parallel,
    Embedding, EmbeddingKind, FusionCnn, FusionStrategy, Fuser, ScoreSet, TrialFamily, TrialList,
};
use tdsv_core::speaker::{speaker_embed, train_speaker, SpeakerExample, SpeakerModel};
use tdsv_core::text::{text_accuracy, train_text, TextExample, TextExtractor};
use tdsv_core::{Error, Result};
use tdsv_nn::{ParamStore, Tensor};

use crate::checkpoint::{ArrayRole, Checkpoint};
use crate::config::RunConfig;

pub const KIND_TEXT: &str = "text";
pub const KIND_SPEAKER: &str = "speaker";
pub const KIND_FUSION: &str = "fusion-cnn";
pub const KIND_EMBEDDINGS: &str = "embeddings";

/// The default sliding-window grid as `(window, stride)` frames.
pub const DEFAULT_GRID: [(usize, usize); 9] =
    [(25, 25), (50, 50), (75, 75), (100, 100), (50, 10), (50, 20), (50, 25), (50, 30), (50, 40)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Text,
    Speaker,
    FusionCnn,
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Branch::Text),
            "speaker" => Ok(Branch::Speaker),
            "fusion-cnn" => Ok(Branch::FusionCnn),
            _ => Err(Error::Lookup(format!("unknown branch {s:?} (text|speaker|fusion-cnn)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "all" => Ok(Split::All),
            _ => Err(Error::Lookup(format!("unknown split {s:?} (train|eval|all)"))),
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => 2,
        Error::Infeasible(_) => 4,
        _ => 3,
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------- data

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub speakers: usize,
    pub labels: usize,
    pub utterances: usize,
    pub seed: u64,
    pub manifest_sha256: String,
}

pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let m = build_corpus(&cfg.corpus, out)?.manifest;
    let path = out.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let labels: std::collections::BTreeSet<_> = m.iter().map(|r| r.label).collect();
    Ok(SynthSummary {
        speakers: m.speakers().len(),
        labels: labels.len(),
        utterances: m.len(),
        seed: cfg.corpus.seed,
        manifest_sha256: sha256_hex(&bytes),
    })
}

/// A loaded corpus with its train/eval partition and cached features.
pub struct Dataset {
    pub manifest: CorpusManifest,
    pub train: CorpusManifest,
    pub eval: CorpusManifest,
    feats: BTreeMap<String, FeatureMatrix>,
}

impl Dataset {
    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let (manifest, audio) = load_corpus(dir)?;
        let (train, eval) = split_train_eval(&manifest, cfg.split_ratio, cfg.seed)?;
        let mut feats = BTreeMap::new();
        for r in manifest.iter() {
            let wav = audio
                .get(&r.utt_id)
                .ok_or_else(|| Error::Lookup(format!("no audio for utterance {}", r.utt_id)))?;
            feats.insert(r.utt_id.clone(), mfcc(wav, &cfg.features)?);
        }
        Ok(Dataset { manifest, train, eval, feats })
    }

    pub fn split(&self, s: Split) -> &CorpusManifest {
        match s {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
            Split::All => &self.manifest,
        }
    }

    pub fn feats(&self, id: &str) -> Result<&FeatureMatrix> {
        self.feats
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no features for utterance {id}")))
    }

    pub fn min_frames(&self) -> usize {
        self.feats.values().map(|f| f.num_frames()).min().unwrap_or(0)
    }

    pub fn text_examples(&self, s: Split) -> Result<Vec<TextExample>> {
        self.split(s)
            .iter()
            .map(|r| {
                Ok(TextExample {
                    utt_id: r.utt_id.clone(),
                    feats: self.feats(&r.utt_id)?.clone(),
                    label: r.label,
                    transcript: r.transcript.clone(),
                })
            })
            .collect()
    }

    pub fn speaker_examples(&self, s: Split) -> Result<Vec<SpeakerExample>> {
        self.split(s)
            .iter()
            .map(|r| {
                Ok(SpeakerExample {
                    utt_id: r.utt_id.clone(),
                    speaker_id: r.speaker_id.clone(),
                    feats: self.feats(&r.utt_id)?.clone(),
                })
            })
            .collect()
    }
}

pub fn cmd_make_trials(cfg: &RunConfig, data: &Dataset, split: Split, out: &Path) -> Result<TrialList> {
    let policy = match cfg.trials.per_family {
        Some(n) => TrialPolicy::per_family(n, cfg.seed),
        None => TrialPolicy::exhaustive(cfg.seed),
    };
    let list = make_trials(data.split(split), &policy)?;
    create_parent(out)?;
    list.save(out)?;
    Ok(list)
}

// ---------------------------------------------------------------- models

/// Copies `ck` into the freshly initialised `store`; every tensor must be
/// present with the shape the configuration implies.
fn adopt(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    let expected = store.len() + store.buffers().count();
    let got = store.load_matching(&ck.to_store());
    if got != expected {
        return Err(Error::Checkpoint(format!(
            "{} checkpoint matches {got} of {expected} tensors of its configuration",
            ck.kind
        )));
    }
    Ok(())
}

pub fn load_text_model(ck: &Checkpoint) -> Result<(TextExtractor, ParamStore)> {
    ck.expect_kind(KIND_TEXT)?;
    let cfg: RunConfig = ck.config_as()?;
    let mut store = ParamStore::new();
    let model = TextExtractor::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg.text)?;
    adopt(&mut store, ck)?;
    Ok((model, store))
}

pub fn load_speaker_model(ck: &Checkpoint) -> Result<(SpeakerModel, ParamStore)> {
    ck.expect_kind(KIND_SPEAKER)?;
    let cfg: RunConfig = ck.config_as()?;
    let mut store = ParamStore::new();
    let model = SpeakerModel::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg.speaker)?;
    adopt(&mut store, ck)?;
    Ok((model, store))
}

pub fn load_fusion_cnn(ck: &Checkpoint) -> Result<FusionCnn> {
    ck.expect_kind(KIND_FUSION)?;
    let cfg: RunConfig = ck.config_as()?;
    FusionCnn::from_store(cfg.fusion, ck.to_store())
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub branch: String,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
    /// Text branch only: label accuracy on the eval split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
}

/// Where the per-epoch CSV for checkpoint `ck` goes.
pub fn loss_log_path(ck: &Path) -> PathBuf {
    ck.with_extension("loss.csv")
}

pub struct FusionInputs<'a> {
    pub text_emb: &'a Path,
    pub speaker_emb: &'a Path,
}

pub fn cmd_train(
    cfg: &RunConfig,
    branch: Branch,
    data: &Dataset,
    out: &Path,
    init_from: Option<&Path>,
    fusion: Option<FusionInputs<'_>>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let init = init_from.map(Checkpoint::load).transpose()?;
    if let Some(ck) = &init {
        let want = match branch {
            Branch::Text => KIND_TEXT,
            Branch::Speaker => KIND_SPEAKER,
            Branch::FusionCnn => KIND_FUSION,
        };
        ck.expect_kind(want)?;
    }
    let init_store = init.as_ref().map(Checkpoint::to_store);
    let snapshot = cfg.snapshot();
    let mut csv = String::new();
    let (ck, final_loss, epochs, eval_accuracy) = match branch {
        Branch::Text => {
            let ex = data.text_examples(Split::Train)?;
            let t = train_text(&ex, &cfg.text, &cfg.text_train, init_store.as_ref())?;
            csv.push_str("epoch,l1,l2,l3,total,lr\n");
            for l in &t.log {
                let b = &l.losses;
                writeln!(csv, "{},{:?},{:?},{:?},{:?},{:?}", l.epoch, b.l1, b.l2, b.l3, b.total, l.lr).unwrap();
            }
            let acc = text_accuracy(&t.model, &t.store, &data.text_examples(Split::Eval)?)?;
            let last = t.log.last().map_or(f64::NAN, |l| l.losses.total);
            let mut ck = Checkpoint::from_store(KIND_TEXT, cfg.seed, snapshot, &t.store);
            ck.meta = json!({ "eval_accuracy": acc });
            (ck, last, t.log.len(), Some(acc))
        }
        Branch::Speaker => {
            let ex = data.speaker_examples(Split::Train)?;
            let t = train_speaker(&ex, &cfg.speaker, &cfg.speaker_train, init_store.as_ref())?;
            csv.push_str("epoch,aam_loss,lr\n");
            for l in &t.log {
                writeln!(csv, "{},{:?},{:?}", l.epoch, l.aam_loss, l.lr).unwrap();
            }
            let last = t.log.last().map_or(f64::NAN, |l| l.aam_loss);
            let mut ck = Checkpoint::from_store(KIND_SPEAKER, cfg.seed, snapshot, &t.store);
            ck.meta = json!({ "speakers": t.speakers });
            (ck, last, t.log.len(), None)
        }
        Branch::FusionCnn => {
            let inputs = fusion.ok_or_else(|| {
                Error::Lookup("fusion-cnn training needs text and speaker embedding archives".into())
            })?;
            let text = load_embeddings(inputs.text_emb)?;
            let spk = load_embeddings(inputs.speaker_emb)?;
            let policy = match cfg.trials.per_family {
                Some(n) => TrialPolicy::per_family(n, cfg.seed),
                None => TrialPolicy::exhaustive(cfg.seed),
            };
            let trials = make_trials(&data.train, &policy)?;
            let pairs = pair_embeddings(&trials, &text, &spk)?;
            let mut ft = cfg.fusion_train.clone();
            ft.target_rule = cfg.trials.target_rule;
            let t = train_fusion_cnn(&pairs, &trials, &cfg.fusion, &ft)?;
            csv.push_str("epoch,bce,lr\n");
            let mut lr = ft.lr;
            for (e, l) in t.log.iter().enumerate() {
                writeln!(csv, "{e},{l:?},{lr:?}").unwrap();
                lr *= tdsv_nn::AdamState::new(1.0).epoch_decay;
            }
            let last = t.log.last().copied().unwrap_or(f64::NAN);
            let ck = Checkpoint::from_store(KIND_FUSION, cfg.seed, snapshot, &t.cnn.store);
            (ck, last, t.log.len(), None)
        }
    };
    create_parent(out)?;
    ck.save(out)?;
    let log_path = loss_log_path(out);
    write_file(&log_path, &csv)?;
    Ok(TrainSummary {
        branch: ck.kind.clone(),
        checkpoint: out.to_path_buf(),
        loss_log: log_path,
        epochs,
        final_loss,
        seed: cfg.seed,
        eval_accuracy,
    })
}

// ---------------------------------------------------------------- embeddings

/// Embeds every utterance of `split` with a text or speaker checkpoint and
/// writes the vectors, keyed by utterance id, as an `embeddings` container.
pub fn cmd_embed(data: &Dataset, ckpt: &Path, split: Split, out: &Path) -> Result<usize> {
    let ck = Checkpoint::load(ckpt)?;
    let records = data.split(split);
    if records.is_empty() {
        return Err(Error::Lookup(format!("split {split:?} of the corpus is empty")));
    }
    let mut archive = Checkpoint::new(KIND_EMBEDDINGS, ck.seed, ck.config.clone());
    let kind = match ck.kind.as_str() {
        KIND_TEXT => {
            let (model, store) = load_text_model(&ck)?;
            for r in records.iter() {
                let e = model.embed_batch(&store, &[data.feats(&r.utt_id)?])?;
                archive.insert(r.utt_id.clone(), ArrayRole::Data, e);
            }
            EmbeddingKind::Text
        }
        KIND_SPEAKER => {
            let (model, store) = load_speaker_model(&ck)?;
            for r in records.iter() {
                let e = speaker_embed(&model, &store, data.feats(&r.utt_id)?)?;
                archive.insert(r.utt_id.clone(), ArrayRole::Data, Tensor::new(&[1, e.dim()], e.vector)?);
            }
            EmbeddingKind::Speaker
        }
        other => return Err(Error::Lookup(format!("cannot embed with a {other} checkpoint"))),
    };
    archive.meta = json!({ "embedding_kind": kind, "source_kind": ck.kind });
    create_parent(out)?;
    archive.save(out)?;
    Ok(records.len())
}

pub fn load_embeddings(path: &Path) -> Result<HashMap<String, Embedding>> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(KIND_EMBEDDINGS)?;
    let kind: EmbeddingKind = serde_json::from_value(ck.meta["embedding_kind"].clone())?;
    ck.arrays
        .into_iter()
        .map(|(id, (_, t))| Ok((id, Embedding::new(t.data().to_vec(), kind)?)))
        .collect()
}

fn pair_embeddings(
    trials: &TrialList,
    text: &HashMap<String, Embedding>,
    spk: &HashMap<String, Embedding>,
) -> Result<HashMap<String, (Embedding, Embedding)>> {
    let mut pairs = HashMap::new();
    for t in trials.iter() {
        for id in [&t.enroll, &t.test] {
            if pairs.contains_key(id) {
                continue;
            }
            let get = |m: &HashMap<String, Embedding>, what: &str| {
                m.get(id.as_str())
                    .cloned()
                    .ok_or_else(|| Error::Lookup(format!("no {what} embedding for utterance {id}")))
            };
            pairs.insert(id.clone(), (get(text, "text")?, get(spk, "speaker")?));
        }
    }
    Ok(pairs)
}

// ---------------------------------------------------------------- scoring

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyStats {
    pub n: usize,
    pub mean_score: Option<f64>,
    /// Fraction of trials scoring at or above the EER threshold.
    pub accept_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub strategy: FusionStrategy,
    pub target_rule: String,
    pub seed: u64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Text-matched target trials against text-mismatched nontarget trials.
    pub auc_matched_target_vs_mismatched_nontarget: Option<f64>,
    /// Text-matched trials only, same speaker as target.
    pub same_text: Option<SubsetMetrics>,
    pub per_family: BTreeMap<String, FamilyStats>,
    pub config: serde_json::Value,
}

pub struct ScoreInputs<'a> {
    pub trials: &'a Path,
    pub speaker_emb: &'a Path,
    pub text_emb: Option<&'a Path>,
    pub fusion_ckpt: Option<&'a Path>,
}

/// Fuses each trial utterance's embeddings under `strategy`.
pub fn fused_embeddings(
    trials: &TrialList,
    strategy: FusionStrategy,
    spk: &HashMap<String, Embedding>,
    text: Option<&HashMap<String, Embedding>>,
    cnn: Option<FusionCnn>,
) -> Result<HashMap<String, Embedding>> {
    let fuser = match strategy {
        FusionStrategy::None => Fuser::None,
        FusionStrategy::Add => Fuser::Add,
        FusionStrategy::Mul => Fuser::Mul,
        FusionStrategy::Cnn => Fuser::Cnn(cnn.ok_or_else(|| Error::Lookup("strategy cnn needs a fusion checkpoint".into()))?),
    };
    let mut out = HashMap::new();
    for t in trials.iter() {
        for id in [&t.enroll, &t.test] {
            if out.contains_key(id) {
                continue;
            }
            let s = spk
                .get(id.as_str())
                .ok_or_else(|| Error::Lookup(format!("no speaker embedding for utterance {id}")))?;
            let e = match (&fuser, text) {
                (Fuser::None, _) => s.clone(),
                (_, Some(text)) => {
                    let x = text
                        .get(id.as_str())
                        .ok_or_else(|| Error::Lookup(format!("no text embedding for utterance {id}")))?;
                    fuse(x, s, &fuser)?
                }
                (_, None) => return Err(Error::Lookup(format!("strategy {strategy} needs text embeddings"))),
            };
            out.insert(id.clone(), e);
        }
    }
    Ok(out)
}

/// Metrics of `scores` against `trials` as labelled by the configured rule.
pub fn metrics_report(cfg: &RunConfig, strategy: FusionStrategy, trials: &TrialList, scores: &[f64]) -> Result<MetricsReport> {
    let rule = cfg.trials.target_rule;
    let set = ScoreSet::new(scores.to_vec(), trials.iter().map(|t| rule.label(t)).collect())?;
    let eer = compute_eer(&set)?;
    let min_dcf = compute_min_dcf(&set, &cfg.dcf)?;
    let fam: Vec<TrialFamily> = trials.iter().map(|t| t.family()).collect();
    let auc_set = ScoreSet::new(
        (0..scores.len())
            .filter(|&i| matches!(fam[i], TrialFamily::TargetMatched | TrialFamily::NontargetMismatched))
            .map(|i| scores[i])
            .collect(),
        fam.iter()
            .filter(|f| matches!(f, TrialFamily::TargetMatched | TrialFamily::NontargetMismatched))
            .map(|f| *f == TrialFamily::TargetMatched)
            .collect(),
    )?;
    let auc = (auc_set.n_target() > 0 && auc_set.n_nontarget() > 0)
        .then(|| compute_auc(&auc_set))
        .transpose()?;
    let matched = ScoreSet::new(
        (0..scores.len()).filter(|&i| trials.trials[i].text_matched).map(|i| scores[i]).collect(),
        trials.iter().filter(|t| t.text_matched).map(|t| t.is_target).collect(),
    )?;
    let same_text = if matched.n_target() > 0 && matched.n_nontarget() > 0 {
        Some(SubsetMetrics {
            eer: compute_eer(&matched)?.eer,
            min_dcf: compute_min_dcf(&matched, &cfg.dcf)?,
            n_target: matched.n_target(),
            n_nontarget: matched.n_nontarget(),
        })
    } else {
        None
    };
    let mut per_family = BTreeMap::new();
    for f in TrialFamily::ALL {
        let s: Vec<f64> = (0..scores.len()).filter(|&i| fam[i] == f).map(|i| scores[i]).collect();
        let n = s.len();
        let mean_score = (n > 0).then(|| s.iter().sum::<f64>() / n as f64);
        let accept_rate = (n > 0).then(|| s.iter().filter(|&&x| x >= eer.threshold).count() as f64 / n as f64);
        per_family.insert(f.name().to_string(), FamilyStats { n, mean_score, accept_rate });
    }
    Ok(MetricsReport {
        strategy,
        target_rule: format!("{rule:?}").to_lowercase(),
        seed: cfg.seed,
        eer: eer.eer,
        eer_threshold: eer.threshold,
        min_dcf,
        n_target: set.n_target(),
        n_nontarget: set.n_nontarget(),
        auc_matched_target_vs_mismatched_nontarget: auc,
        same_text,
        per_family,
        config: cfg.snapshot(),
    })
}

pub fn cmd_score(
    cfg: &RunConfig,
    inputs: &ScoreInputs<'_>,
    strategy: FusionStrategy,
    scores_out: &Path,
    metrics_out: &Path,
) -> Result<MetricsReport> {
    let trials = TrialList::load(inputs.trials)?;
    let spk = load_embeddings(inputs.speaker_emb)?;
    let text = inputs.text_emb.map(load_embeddings).transpose()?;
    let cnn = inputs
        .fusion_ckpt
        .map(|p| Checkpoint::load(p).and_then(|c| load_fusion_cnn(&c)))
        .transpose()?;
    let emb = fused_embeddings(&trials, strategy, &spk, text.as_ref(), cnn)?;
    let scores = trial_scores_parallel(&trials, &emb, cfg.threads)?;
    let report = metrics_report(cfg, strategy, &trials, &scores)?;
    write_file(scores_out, &format_scores(&trials, &scores))?;
    write_file(metrics_out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// Reads a score file back and labels it from the matching trial list.
pub fn rescore_file(cfg: &RunConfig, trials: &TrialList, scores_path: &Path) -> Result<ScoreSet> {
    let text = std::fs::read_to_string(scores_path).map_err(|e| Error::io(scores_path, e))?;
    let rows = parse_scores(&text)?;
    if rows.len() != trials.len() {
        return Err(Error::Protocol(format!("{} scores for {} trials", rows.len(), trials.len())));
    }
    let mut scores = Vec::with_capacity(rows.len());
    for (t, (a, b, s)) in trials.iter().zip(rows) {
        if t.enroll != a || t.test != b {
            return Err(Error::Protocol(format!("score line {a} {b} does not match trial {} {}", t.enroll, t.test)));
        }
        scores.push(s);
    }
    ScoreSet::new(scores, trials.iter().map(|t| cfg.trials.target_rule.label(t)).collect())
}

// ---------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub window: usize,
    pub stride: usize,
    pub eer: f64,
    pub min_dcf: f64,
}

/// Parses `w:s,w:s,...`.
pub fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let bad = || Error::Format(format!("grid point {p:?} is not w:s"));
            let (w, st) = p.trim().split_once(':').ok_or_else(bad)?;
            Ok((w.parse().map_err(|_| bad())?, st.parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Why a grid point cannot run, if it cannot.
pub fn grid_point_problem(w: usize, s: usize, min_frames: usize) -> Option<String> {
    if s == 0 || w == 0 {
        Some("window and stride must be positive".into())
    } else if s > w {
        Some(format!("stride {s} exceeds window {w}"))
    } else if w > min_frames {
        Some(format!("window {w} exceeds the shortest utterance ({min_frames} frames)"))
    } else {
        None
    }
}

/// Trains and evaluates the speaker branch once per feasible grid point.
/// Evaluation uses text-matched eval trials with same-speaker targets.
pub fn cmd_sweep_pooling(cfg: &RunConfig, data: &Dataset, grid: &[(usize, usize)], out: &Path) -> Result<Vec<SweepRow>> {
    if !cfg.speaker.pooling.mode.uses_swasp() {
        return Err(Error::Domain(format!(
            "pooling mode {} has no sliding windows to sweep",
            cfg.speaker.pooling.mode
        )));
    }
    let min_frames = data.min_frames().min(cfg.speaker_train.crop_frames);
    let train = data.speaker_examples(Split::Train)?;
    let mut policy = TrialPolicy::exhaustive(cfg.seed);
    policy.counts.insert(TrialFamily::TargetMismatched, Some(0));
    policy.counts.insert(TrialFamily::NontargetMismatched, Some(0));
    let trials = make_trials(&data.eval, &policy)?;
    let mut rows = Vec::new();
    let mut csv = String::from("w,s,eer,min_dcf\n");
    for &(w, s) in grid {
        if let Some(why) = grid_point_problem(w, s, min_frames) {
            eprintln!("skipping grid point ({w}, {s}): {why}");
            continue;
        }
        let mut mc = cfg.speaker.clone();
        mc.pooling.swasp.window_len = w;
        mc.pooling.swasp.stride = s;
        let t = match train_speaker(&train, &mc, &cfg.speaker_train, None) {
            Ok(t) => t,
            Err(e @ (Error::Domain(_) | Error::TooShort { .. } | Error::Infeasible(_))) => {
                eprintln!("skipping grid point ({w}, {s}): {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut emb = HashMap::new();
        for r in data.eval.iter() {
            emb.insert(r.utt_id.clone(), speaker_embed(&t.model, &t.store, data.feats(&r.utt_id)?)?);
        }
        let scores = trial_scores_parallel(&trials, &emb, cfg.threads)?;
        let set = ScoreSet::new(scores, trials.iter().map(|t| t.is_target).collect())?;
        let row = SweepRow {
            window: w,
            stride: s,
            eer: compute_eer(&set)?.eer,
            min_dcf: compute_min_dcf(&set, &cfg.dcf)?,
        };
        writeln!(csv, "{},{},{:?},{:?}", row.window, row.stride, row.eer, row.min_dcf).unwrap();
        rows.push(row);
    }
    write_file(out, &csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------- shapes

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShapeReport {
    pub pooling_mode: PoolingMode,
    /// `[channels, frames]`
    pub mfa: [usize; 2],
    pub window_vectors: Option<Vec<usize>>,
    pub swasp: Option<Vec<usize>>,
    pub embedding: Vec<usize>,
}

/// Runs a freshly initialised speaker branch on a `frames`-long input and
/// reports the intermediate shapes.
pub fn cmd_shapes(cfg: &RunConfig, frames: usize) -> Result<ShapeReport> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = SpeakerModel::new(&mut store, &mut rng, cfg.speaker.clone())?;
    let dim = cfg.speaker.encoder.input_dim;
    let data: Vec<f64> = (0..frames * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let feats = FeatureMatrix::new(Tensor::new(&[frames, dim], data)?, cfg.features.frame_shift_ms, "probe")?;
    let tr = model.trace(&store, &feats)?;
    Ok(ShapeReport {
        pooling_mode: cfg.speaker.pooling.mode,
        mfa: [tr.mfa.channels(), tr.mfa.frames()],
        window_vectors: tr.window_vectors.map(|t| t.shape().to_vec()),
        swasp: tr.swasp.map(|t| t.shape().to_vec()),
        embedding: tr.embedding.shape().to_vec(),
    })
}
