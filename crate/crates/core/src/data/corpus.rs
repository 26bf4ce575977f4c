use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_speakers, synth_utterance, SpeakerProfile};
use crate::audio::{load_wav, save_wav, speed_perturb, Waveform};
use crate::error::{Error, Result};
use crate::scoring::{Trial, TrialFamily, TrialList};
use crate::text::{TextLabel, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugTag {
    #[serde(rename = "orig")]
    Orig,
    #[serde(rename = "speed0.9")]
    Speed09,
    #[serde(rename = "speed1.1")]
    Speed11,
}

impl AugTag {
    pub const ALL: [AugTag; 3] = [AugTag::Orig, AugTag::Speed09, AugTag::Speed11];

    pub fn speed(self) -> f64 {
        match self {
            AugTag::Orig => 1.0,
            AugTag::Speed09 => 0.9,
            AugTag::Speed11 => 1.1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugTag::Orig => "orig",
            AugTag::Speed09 => "speed0.9",
            AugTag::Speed11 => "speed1.1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_id: String,
    pub label: TextLabel,
    pub transcript: TokenSeq,
    /// Relative to the manifest's directory.
    pub audio_path: String,
    pub augmentation: AugTag,
    /// Id of the original this record was derived from (itself for originals).
    pub source_utt: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorpusManifest {
    pub utterances: Vec<UtteranceRecord>,
}

impl CorpusManifest {
    pub fn new(utterances: Vec<UtteranceRecord>) -> Result<Self> {
        let m = CorpusManifest { utterances };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.utterances {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::Domain(format!("duplicate utterance id {}", r.utt_id)));
            }
            if r.transcript != r.label.canonical() {
                return Err(Error::Domain(format!(
                    "{}: transcript {} does not match label {}",
                    r.utt_id, r.transcript, r.label
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, UtteranceRecord> {
        self.utterances.iter()
    }

    pub fn get(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.utterances.iter().find(|r| r.utt_id == utt_id)
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.iter().map(|r| r.speaker_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn originals(&self) -> CorpusManifest {
        CorpusManifest {
            utterances: self.iter().filter(|r| r.augmentation == AugTag::Orig).cloned().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_label: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 20,
            utts_per_label: 10,
            seed: 42,
            augment: false,
        }
    }
}

/// A corpus held in memory: manifest plus one waveform per record.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub speakers: Vec<SpeakerProfile>,
    pub audio: HashMap<String, Waveform>,
}

impl Corpus {
    pub fn waveform(&self, utt_id: &str) -> Result<&Waveform> {
        self.audio
            .get(utt_id)
            .ok_or_else(|| Error::Lookup(format!("no audio for utterance {utt_id}")))
    }
}

pub fn utt_id(speaker: &str, label: TextLabel, k: usize) -> String {
    format!("{speaker}_{label}_{k:02}")
}

fn variant_id(orig: &str, tag: AugTag) -> String {
    match tag {
        AugTag::Orig => orig.to_string(),
        AugTag::Speed09 => format!("{orig}_sp0.9"),
        AugTag::Speed11 => format!("{orig}_sp1.1"),
    }
}

/// Synthesises every utterance in memory.
pub fn synthesize_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.n_speakers < 2 {
        return Err(Error::Domain(format!("need at least 2 speakers, got {}", cfg.n_speakers)));
    }
    let speakers = synth_speakers(cfg.n_speakers, cfg.seed);
    let tags: &[AugTag] = if cfg.augment { &AugTag::ALL } else { &[AugTag::Orig] };
    let mut records = Vec::new();
    let mut audio = HashMap::new();
    for p in &speakers {
        for label in TextLabel::ALL {
            for k in 0..cfg.utts_per_label {
                let (wave, transcript) = synth_utterance(p, label, k as u64);
                let orig = utt_id(&p.id, label, k);
                for &tag in tags {
                    let id = variant_id(&orig, tag);
                    let w = if tag == AugTag::Orig {
                        wave.clone()
                    } else {
                        speed_perturb(&wave, tag.speed())?
                    };
                    records.push(UtteranceRecord {
                        utt_id: id.clone(),
                        speaker_id: p.id.clone(),
                        label,
                        transcript: transcript.clone(),
                        audio_path: format!("wav/{id}.wav"),
                        augmentation: tag,
                        source_utt: orig.clone(),
                    });
                    audio.insert(id, w);
                }
            }
        }
    }
    Ok(Corpus {
        manifest: CorpusManifest::new(records)?,
        speakers,
        audio,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Synthesises the corpus and writes `manifest.json` plus one WAV per
/// utterance under `out_dir`.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path) -> Result<Corpus> {
    let corpus = synthesize_corpus(cfg)?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    for r in corpus.manifest.iter() {
        save_wav(&out_dir.join(&r.audio_path), corpus.waveform(&r.utt_id)?)?;
    }
    corpus.manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(corpus)
}

/// Reads a manifest and its audio files back from disk.
pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, HashMap<String, Waveform>)> {
    let manifest = CorpusManifest::load(&dir.join(MANIFEST_FILE))?;
    let mut audio = HashMap::new();
    for r in manifest.iter() {
        let path: PathBuf = dir.join(&r.audio_path);
        audio.insert(r.utt_id.clone(), load_wav(&path)?);
    }
    Ok((manifest, audio))
}

/// Splits by original utterance within each (speaker, label) cell: a cell of
/// `n ≥ 2` puts `round(n·(1−ratio))`, clamped to `1..n−1`, on the eval side.
/// Augmented variants follow their original.
pub fn split_train_eval(m: &CorpusManifest, ratio: f64, seed: u64) -> Result<(CorpusManifest, CorpusManifest)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut cells: BTreeMap<(&str, TextLabel), Vec<&str>> = BTreeMap::new();
    for r in m.iter().filter(|r| r.augmentation == AugTag::Orig) {
        cells.entry((&r.speaker_id, r.label)).or_default().push(&r.utt_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_src = HashSet::new();
    for ids in cells.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        if n < 2 {
            continue;
        }
        let k = ((n as f64 * (1.0 - ratio)).round() as usize).clamp(1, n - 1);
        eval_src.extend(ids[..k].iter().map(|s| s.to_string()));
    }
    let (eval, train): (Vec<_>, Vec<_>) = m.iter().cloned().partition(|r| eval_src.contains(&r.source_utt));
    Ok((CorpusManifest { utterances: train }, CorpusManifest { utterances: eval }))
}

/// Requested trial count for each family, `None` meaning every available pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPolicy {
    pub counts: BTreeMap<TrialFamily, Option<usize>>,
    pub seed: u64,
}

impl TrialPolicy {
    pub fn per_family(n: usize, seed: u64) -> Self {
        TrialPolicy {
            counts: TrialFamily::ALL.into_iter().map(|f| (f, Some(n))).collect(),
            seed,
        }
    }

    pub fn exhaustive(seed: u64) -> Self {
        TrialPolicy {
            counts: TrialFamily::ALL.into_iter().map(|f| (f, None)).collect(),
            seed,
        }
    }
}

/// Samples trials among the original (unaugmented) utterances of `m`. Each
/// unordered pair is a candidate once; families are emitted in
/// [`TrialFamily::ALL`] order.
pub fn make_trials(m: &CorpusManifest, policy: &TrialPolicy) -> Result<TrialList> {
    let recs: Vec<&UtteranceRecord> = m.iter().filter(|r| r.augmentation == AugTag::Orig).collect();
    let n_spk = recs.iter().map(|r| &r.speaker_id).collect::<HashSet<_>>().len();
    if n_spk < 2 {
        return Err(Error::Protocol(format!("trials need at least 2 speakers, found {n_spk}")));
    }
    let mut buckets: BTreeMap<TrialFamily, Vec<(usize, usize)>> = BTreeMap::new();
    for i in 0..recs.len() {
        for j in i + 1..recs.len() {
            let f = TrialFamily::new(recs[i].speaker_id == recs[j].speaker_id, recs[i].label == recs[j].label);
            buckets.entry(f).or_default().push((i, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut trials = Vec::new();
    for family in TrialFamily::ALL {
        let Some(&want) = policy.counts.get(&family) else {
            continue;
        };
        let mut pool = buckets.remove(&family).unwrap_or_default();
        let take = match want {
            Some(k) if k > pool.len() => {
                return Err(Error::Protocol(format!(
                    "family {family}: requested {k} trials but only {} pairs are available",
                    pool.len()
                )))
            }
            Some(k) => k,
            None => pool.len(),
        };
        let (chosen, _) = pool.partial_shuffle(&mut rng, take);
        for &(i, j) in chosen.iter() {
            trials.push(Trial::new(
                &recs[i].utt_id,
                &recs[j].utt_id,
                family.same_speaker(),
                family.same_text(),
            )?);
        }
    }
    Ok(TrialList::new(trials))
}
