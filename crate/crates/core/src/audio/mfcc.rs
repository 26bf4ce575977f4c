use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use tdsv_nn::Tensor;

use super::Waveform;
use crate::error::{Error, Result};

pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub pre_emphasis: f64,
    /// `None` picks the next power of two at or above the frame length.
    pub fft_size: Option<usize>,
    pub target_rate_hz: u32,
    /// Per-utterance cepstral mean subtraction.
    pub cms: bool,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            n_mels: 40,
            n_mfcc: 20,
            pre_emphasis: 0.97,
            fft_size: None,
            target_rate_hz: 16000,
            cms: true,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return Err(Error::Domain(format!(
                "n_mfcc must be in 1..={}, got {}",
                self.n_mels, self.n_mfcc
            )));
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms <= self.frame_length_ms) {
            return Err(Error::Domain(format!(
                "frame shift {} ms must be positive and at most the frame length {} ms",
                self.frame_shift_ms, self.frame_length_ms
            )));
        }
        if self.target_rate_hz == 0 {
            return Err(Error::Domain("target rate must be positive".into()));
        }
        if self.frame_samples() < 2 {
            return Err(Error::Domain("frame shorter than two samples".into()));
        }
        if self.fft_len() < self.frame_samples() {
            return Err(Error::Domain(format!(
                "fft size {} below frame length {}",
                self.fft_len(),
                self.frame_samples()
            )));
        }
        Ok(())
    }

    pub fn frame_samples(&self) -> usize {
        (self.frame_length_ms * self.target_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        ((self.frame_shift_ms * self.target_rate_hz as f64 / 1000.0).round() as usize).max(1)
    }

    pub fn fft_len(&self) -> usize {
        self.fft_size.unwrap_or_else(|| self.frame_samples().next_power_of_two())
    }

    /// `1 + floor((n - L) / S)` frames, or zero when `n < L`.
    pub fn num_frames(&self, n_samples: usize) -> usize {
        let l = self.frame_samples();
        if n_samples < l {
            0
        } else {
            1 + (n_samples - l) / self.shift_samples()
        }
    }
}

/// `T × n_mfcc` cepstra, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor,
    pub frame_shift_ms: f64,
    pub source_id: String,
}

impl FeatureMatrix {
    pub fn new(frames: Tensor, frame_shift_ms: f64, source_id: impl Into<String>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(Error::Domain(format!(
                "feature matrix must be [T >= 1, D], got {:?}",
                frames.shape()
            )));
        }
        if !frames.all_finite() {
            return Err(Error::Domain("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureMatrix {
            frames,
            frame_shift_ms,
            source_id: source_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// Column means over frames.
    pub fn mean(&self) -> Vec<f64> {
        let (t, d) = (self.num_frames(), self.dim());
        let mut m = vec![0.0; d];
        for r in 0..t {
            for (acc, v) in m.iter_mut().zip(self.frame(r)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= t as f64);
        m
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Orthonormal DCT-II of `x`, keeping the first `n_out` coefficients.
pub fn dct_ii_ortho(x: &[f64], n_out: usize) -> Vec<f64> {
    let m = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum();
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            s * scale
        })
        .collect()
}

/// Precomputed window, filterbank, DCT matrix and FFT plan for one config.
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// `n_mels` rows of `fft_len/2 + 1` weights.
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.frame_samples();
        let n_fft = cfg.fft_len();
        let window = (0..l)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (l - 1) as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg.n_mels, n_fft, cfg.target_rate_hz as f64);
        let dct = (0..cfg.n_mfcc)
            .map(|k| {
                let mut e = vec![0.0; cfg.n_mels];
                (0..cfg.n_mels)
                    .map(|m| {
                        e[m] = 1.0;
                        let v = dct_ii_ortho(&e, k + 1)[k];
                        e[m] = 0.0;
                        v
                    })
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(MfccExtractor {
            cfg,
            window,
            filters,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// Log mel energies per frame, before the DCT.
    pub fn log_mel(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        if w.sample_rate() != self.cfg.target_rate_hz {
            return Err(Error::Domain(format!(
                "waveform at {} Hz, features expect {} Hz",
                w.sample_rate(),
                self.cfg.target_rate_hz
            )));
        }
        let l = self.cfg.frame_samples();
        let t = self.cfg.num_frames(w.len());
        if t == 0 {
            return Err(Error::TooShort {
                needed: l,
                got: w.len(),
                unit: "samples",
            });
        }
        let hop = self.cfg.shift_samples();
        let n_fft = self.cfg.fft_len();
        let a = self.cfg.pre_emphasis;
        let x = w.samples();
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_fft / 2 + 1];
        let mut out = Vec::with_capacity(t);
        for f in 0..t {
            let frame = &x[f * hop..f * hop + l];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < l {
                    let prev = if i == 0 { frame[0] } else { frame[i - 1] };
                    Complex::new((frame[i] - a * prev) * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            out.push(
                self.filters
                    .iter()
                    .map(|fb| {
                        let e: f64 = fb.iter().zip(&power).map(|(w, p)| w * p).sum();
                        e.max(LOG_FLOOR).ln()
                    })
                    .collect(),
            );
        }
        Ok(out)
    }

    /// Cepstra of one log-mel vector.
    pub fn cepstrum(&self, log_mel: &[f64]) -> Vec<f64> {
        self.dct
            .iter()
            .map(|row| row.iter().zip(log_mel).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn extract(&self, w: &Waveform, source_id: &str) -> Result<FeatureMatrix> {
        let mel = self.log_mel(w)?;
        let t = mel.len();
        let d = self.cfg.n_mfcc;
        let mut data = Vec::with_capacity(t * d);
        for m in &mel {
            data.extend(self.cepstrum(m));
        }
        if self.cfg.cms {
            for c in 0..d {
                let mean = (0..t).map(|r| data[r * d + c]).sum::<f64>() / t as f64;
                for r in 0..t {
                    data[r * d + c] -= mean;
                }
            }
        }
        FeatureMatrix::new(Tensor::new(&[t, d], data)?, self.cfg.frame_shift_ms, source_id)
    }
}

/// MFCCs of `w`, which must already be at `cfg.target_rate_hz`.
pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    MfccExtractor::new(cfg.clone())?.extract(w, "")
}

/// Triangular filters with HTK-mel spaced centres spanning 0 Hz to Nyquist.
fn mel_filterbank(n_mels: usize, n_fft: usize, rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * rate / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}
