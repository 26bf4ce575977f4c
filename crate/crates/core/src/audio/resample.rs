use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Sinc zero crossings kept on each side of the interpolation point.
pub const SINC_TAPS_PER_SIDE: usize = 16;

/// Band-limited resampling to `target_rate` with a Hann-windowed sinc kernel.
/// Equal rates return the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Domain("target rate must be positive".into()));
    }
    if target_rate == w.sample_rate() {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate() as f64;
    Waveform::new(resample_ratio(w.samples(), ratio), target_rate)
}

/// Resamples by `ratio` output samples per input sample; the output holds
/// `round(len * ratio)` samples.
pub fn resample_ratio(x: &[f64], ratio: f64) -> Vec<f64> {
    assert!(ratio > 0.0 && ratio.is_finite(), "resample ratio must be positive");
    let n_out = (x.len() as f64 * ratio).round() as usize;
    if x.is_empty() {
        return vec![0.0; n_out];
    }
    // Below unity the kernel widens so it also acts as the anti-alias filter.
    let cutoff = ratio.min(1.0);
    let half_width = SINC_TAPS_PER_SIDE as f64 / cutoff;
    let step = 1.0 / ratio;
    let n = x.len() as isize;
    (0..n_out)
        .map(|i| {
            let t = i as f64 * step;
            let lo = (t - half_width).ceil().max(0.0) as isize;
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                let d = t - j as f64;
                acc += x[j as usize] * kernel(d, cutoff, half_width);
            }
            acc
        })
        .collect()
}

fn kernel(d: f64, cutoff: f64, half_width: f64) -> f64 {
    if d.abs() >= half_width {
        return 0.0;
    }
    let window = 0.5 + 0.5 * (PI * d / half_width).cos();
    let arg = PI * cutoff * d;
    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
    cutoff * sinc * window
}

/// Tempo and pitch change by `factor`: resample by `1/factor` and keep the
/// original rate label. Accepts factors in the open interval (0.5, 2.0).
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.5 && factor < 2.0) {
        return Err(Error::Domain(format!("speed factor {} outside (0.5, 2.0)", factor)));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    Waveform::new(resample_ratio(w.samples(), 1.0 / factor), w.sample_rate())
}
