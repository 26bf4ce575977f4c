use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores with target (`true`) / nontarget labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Domain(format!("{} scores but {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("scores must be finite".into()));
        }
        Ok(ScoreSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_nontarget(&self) -> usize {
        self.len() - self.n_target()
    }

    /// Entries whose index passes `keep`.
    pub fn filter(&self, mut keep: impl FnMut(usize) -> bool) -> ScoreSet {
        let (scores, labels) = (0..self.len())
            .filter(|&i| keep(i))
            .map(|i| (self.scores[i], self.labels[i]))
            .unzip();
        ScoreSet { scores, labels }
    }

    fn check_two_class(&self) -> Result<()> {
        if self.n_target() == 0 || self.n_nontarget() == 0 {
            return Err(Error::Domain(format!(
                "need both classes, got {} target and {} nontarget scores",
                self.n_target(),
                self.n_nontarget()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        DcfConfig {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::Domain(format!("invalid DCF parameters {:?}", self)));
        }
        Ok(())
    }
}

/// One threshold with its false-acceptance and false-rejection rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at a threshold below every score, at the midpoint of
/// each pair of adjacent distinct scores, and above every score, in
/// increasing threshold order. Acceptance is `score >= threshold`.
pub fn operating_points(s: &ScoreSet) -> Vec<OperatingPoint> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let nt = s.n_target() as f64;
    let nn = s.n_nontarget() as f64;
    let rate = |k: usize, n: f64| if n > 0.0 { k as f64 / n } else { 0.0 };
    let mut out = Vec::new();
    if idx.is_empty() {
        return out;
    }
    // Counts of targets / nontargets strictly below the current threshold.
    let (mut tb, mut nb) = (0usize, 0usize);
    let lo = s.scores[idx[0]];
    out.push(OperatingPoint {
        threshold: lo - 1.0,
        far: 1.0,
        frr: 0.0,
    });
    let mut i = 0;
    while i < idx.len() {
        let v = s.scores[idx[i]];
        while i < idx.len() && s.scores[idx[i]] == v {
            if s.labels[idx[i]] {
                tb += 1;
            } else {
                nb += 1;
            }
            i += 1;
        }
        let threshold = if i < idx.len() { 0.5 * (v + s.scores[idx[i]]) } else { v + 1.0 };
        out.push(OperatingPoint {
            threshold,
            far: 1.0 - rate(nb, nn),
            frr: rate(tb, nt),
        });
    }
    if nn == 0.0 {
        out.iter_mut().for_each(|p| p.far = 0.0);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// EER at the first sign change of FAR − FRR along increasing thresholds,
/// linearly interpolated between the two operating points around it. An
/// exact zero is taken at the lowest threshold that reaches it.
pub fn eer_from_points(points: &[OperatingPoint]) -> Eer {
    for (i, p) in points.iter().enumerate() {
        let d = p.far - p.frr;
        if d == 0.0 {
            return Eer {
                eer: p.far,
                threshold: p.threshold,
            };
        }
        if d < 0.0 && i > 0 {
            let q = &points[i - 1];
            let dq = q.far - q.frr;
            let lam = dq / (dq - d);
            return Eer {
                eer: q.far + lam * (p.far - q.far),
                threshold: q.threshold + lam * (p.threshold - q.threshold),
            };
        }
    }
    let p = points.last().expect("operating points");
    Eer {
        eer: 0.5 * (p.far + p.frr),
        threshold: p.threshold,
    }
}

pub fn compute_eer(s: &ScoreSet) -> Result<Eer> {
    s.check_two_class()?;
    Ok(eer_from_points(&operating_points(s)))
}

/// Normalised minimum detection cost over the same thresholds as the EER.
pub fn compute_min_dcf(s: &ScoreSet, cfg: &DcfConfig) -> Result<f64> {
    s.check_two_class()?;
    cfg.validate()?;
    let norm = (cfg.c_miss * cfg.p_target).min(cfg.c_fa * (1.0 - cfg.p_target));
    Ok(operating_points(s)
        .iter()
        .map(|p| (cfg.c_miss * cfg.p_target * p.frr + cfg.c_fa * (1.0 - cfg.p_target) * p.far) / norm)
        .fold(f64::INFINITY, f64::min))
}

/// Area under the ROC curve: probability that a random target outscores a
/// random nontarget, ties counting one half.
pub fn compute_auc(s: &ScoreSet) -> Result<f64> {
    s.check_two_class()?;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // Average ranks over ties, then Mann-Whitney U.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && s.scores[idx[j]] == s.scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += avg * idx[i..j].iter().filter(|&&k| s.labels[k]).count() as f64;
        i = j;
    }
    let nt = s.n_target() as f64;
    let nn = s.n_nontarget() as f64;
    Ok((rank_sum - nt * (nt + 1.0) / 2.0) / (nt * nn))
}
