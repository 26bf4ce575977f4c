//! PCM ingestion, resampling, speed perturbation and MFCC extraction.

mod mfcc;
mod resample;
mod wav;

pub use mfcc::{dct_ii_ortho, hz_to_mel, mel_to_hz, mfcc, FeatureMatrix, MfccConfig, MfccExtractor, LOG_FLOOR};
pub use resample::{resample, resample_ratio, speed_perturb, SINC_TAPS_PER_SIDE};
pub use wav::{load_wav, save_wav};

use crate::error::{Error, Result};

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Clips samples into `[-1, 1]`. Non-finite samples are rejected.
    pub fn new(mut samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("sample {} is not finite", i)));
        }
        for s in samples.iter_mut() {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same samples under a different rate label.
    pub fn relabel(self, sample_rate: u32) -> Result<Self> {
        Waveform::new(self.samples, sample_rate)
    }
}
