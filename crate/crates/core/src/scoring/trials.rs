use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::metrics::ScoreSet;
use crate::scoring::{cosine_score, Embedding};

/// One of the four pairings a trial list is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrialFamily {
    TargetMatched,
    NontargetMatched,
    TargetMismatched,
    NontargetMismatched,
}

impl TrialFamily {
    pub const ALL: [TrialFamily; 4] = [
        TrialFamily::TargetMatched,
        TrialFamily::NontargetMatched,
        TrialFamily::TargetMismatched,
        TrialFamily::NontargetMismatched,
    ];

    pub fn new(same_speaker: bool, same_text: bool) -> Self {
        match (same_speaker, same_text) {
            (true, true) => TrialFamily::TargetMatched,
            (false, true) => TrialFamily::NontargetMatched,
            (true, false) => TrialFamily::TargetMismatched,
            (false, false) => TrialFamily::NontargetMismatched,
        }
    }

    pub fn same_speaker(self) -> bool {
        matches!(self, TrialFamily::TargetMatched | TrialFamily::TargetMismatched)
    }

    pub fn same_text(self) -> bool {
        matches!(self, TrialFamily::TargetMatched | TrialFamily::NontargetMatched)
    }

    pub fn name(self) -> &'static str {
        match self {
            TrialFamily::TargetMatched => "target-matched",
            TrialFamily::NontargetMatched => "nontarget-matched",
            TrialFamily::TargetMismatched => "target-mismatched",
            TrialFamily::NontargetMismatched => "nontarget-mismatched",
        }
    }
}

impl fmt::Display for TrialFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    /// Same speaker.
    pub is_target: bool,
    /// Same text label.
    pub text_matched: bool,
}

impl Trial {
    pub fn new(enroll: impl Into<String>, test: impl Into<String>, is_target: bool, text_matched: bool) -> Result<Self> {
        let (enroll, test) = (enroll.into(), test.into());
        if enroll == test {
            return Err(Error::Protocol(format!("trial pairs utterance {enroll} with itself")));
        }
        Ok(Trial {
            enroll,
            test,
            is_target,
            text_matched,
        })
    }

    pub fn family(&self) -> TrialFamily {
        TrialFamily::new(self.is_target, self.text_matched)
    }

    /// Correct decision for a text-dependent system: accept only the right
    /// speaker saying the right text.
    pub fn accept(&self) -> bool {
        self.is_target && self.text_matched
    }
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.enroll,
            self.test,
            if self.is_target { "target" } else { "nontarget" },
            if self.text_matched { "matched" } else { "mismatched" }
        )
    }
}

impl FromStr for Trial {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(Error::Protocol(format!("expected 4 fields, got {}: {line:?}", f.len())));
        }
        let is_target = match f[2] {
            "target" => true,
            "nontarget" => false,
            other => return Err(Error::Protocol(format!("bad target field {other:?}"))),
        };
        let text_matched = match f[3] {
            "matched" => true,
            "mismatched" => false,
            other => return Err(Error::Protocol(format!("bad text field {other:?}"))),
        };
        Trial::new(f[0], f[1], is_target, text_matched)
    }
}

/// Which trials count as targets when turning scores into a [`ScoreSet`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRule {
    /// Same speaker and same text.
    #[default]
    Accept,
    /// Same speaker regardless of text.
    SameSpeaker,
}

impl TargetRule {
    pub fn label(self, t: &Trial) -> bool {
        match self {
            TargetRule::Accept => t.accept(),
            TargetRule::SameSpeaker => t.is_target,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Self {
        TrialList { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trial> {
        self.trials.iter()
    }

    pub fn count(&self, family: TrialFamily) -> usize {
        self.trials.iter().filter(|t| t.family() == family).count()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let trials = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| l.parse::<Trial>().map_err(|e| Error::Protocol(format!("line {}: {e}", i + 1))))
            .collect::<Result<_>>()?;
        Ok(TrialList { trials })
    }

    pub fn to_text(&self) -> String {
        self.trials.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Cosine score per trial, in trial order.
pub fn trial_scores(trials: &TrialList, emb: &HashMap<String, Embedding>) -> Result<Vec<f64>> {
    trials.iter().map(|t| score_one(t, emb)).collect()
}

/// As [`trial_scores`], split across `threads` workers.
pub fn trial_scores_parallel(trials: &TrialList, emb: &HashMap<String, Embedding>, threads: usize) -> Result<Vec<f64>> {
    let threads = threads.max(1);
    if threads == 1 || trials.len() < 2 {
        return trial_scores(trials, emb);
    }
    let chunk = trials.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = trials
            .trials
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|t| score_one(t, emb)).collect::<Result<Vec<f64>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(trials.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn score_one(t: &Trial, emb: &HashMap<String, Embedding>) -> Result<f64> {
    let get = |id: &str| emb.get(id).ok_or_else(|| Error::Lookup(format!("no embedding for utterance {id}")));
    cosine_score(get(&t.enroll)?, get(&t.test)?)
}

/// Scores every trial and labels it with [`TargetRule::Accept`].
pub fn score_trials(trials: &TrialList, emb: &HashMap<String, Embedding>) -> Result<ScoreSet> {
    score_trials_with(trials, emb, TargetRule::Accept)
}

pub fn score_trials_with(trials: &TrialList, emb: &HashMap<String, Embedding>, rule: TargetRule) -> Result<ScoreSet> {
    let scores = trial_scores(trials, emb)?;
    ScoreSet::new(scores, trials.iter().map(|t| rule.label(t)).collect())
}

/// `enroll test score` lines; scores use the shortest exact decimal form.
pub fn format_scores(trials: &TrialList, scores: &[f64]) -> String {
    trials
        .iter()
        .zip(scores)
        .map(|(t, s)| format!("{} {} {:?}\n", t.enroll, t.test, s))
        .collect()
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, String, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Protocol(format!("score line needs 3 fields: {l:?}")));
            }
            let s = f[2]
                .parse::<f64>()
                .map_err(|e| Error::Protocol(format!("bad score {:?}: {e}", f[2])))?;
            Ok((f[0].to_string(), f[1].to_string(), s))
        })
        .collect()
}
