use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::text::{TextLabel, Token, TokenSeq};

pub const SYNTH_RATE: u32 = 16_000;
pub const F0_RANGE: (f64, f64) = (90.0, 260.0);
pub const FORMANT_SHIFT_RANGE: (f64, f64) = (-0.3, 0.3);
pub const RESONANCE_GAIN_RANGE: (f64, f64) = (0.4, 2.5);
pub const MIN_F0_GAP_HZ: f64 = 4.0;
pub const MIN_FORMANT_GAP: f64 = 0.05;

/// Low and high tone of each digit at the reference pitch. Lows and highs
/// each step by 1.4×; digits that end groups in one label but not in its
/// same-multiset partner share no tone.
pub const DIGIT_TONES: [(f64, f64); 10] = [
    (560.0, 1500.0),  // 0
    (1090.0, 4100.0), // 1
    (400.0, 2100.0),  // 2
    (400.0, 1500.0),  // 3
    (560.0, 2100.0),  // 4
    (780.0, 2940.0),  // 5
    (780.0, 2100.0),  // 6
    (1090.0, 1500.0), // 7
    (400.0, 4100.0),  // 8
    (560.0, 4100.0),  // 9
];

/// Pitch at which tones sound at their table frequencies.
pub const REFERENCE_F0: f64 = 153.0;
/// Tones move by `(f0 / REFERENCE_F0)^PITCH_EXPONENT`.
pub const PITCH_EXPONENT: f64 = 0.25;
const RESONANCE_CENTRES: [f64; 3] = [600.0, 1400.0, 2600.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub index: usize,
    pub f0_hz: f64,
    pub formant_shift: f64,
    pub resonance_gains: [f64; 3],
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn speaker_id(index: usize) -> String {
        format!("spk{index:03}")
    }

    pub fn pitch_factor(&self) -> f64 {
        (self.f0_hz / REFERENCE_F0).powf(PITCH_EXPONENT)
    }

    /// Magnitude response of the speaker's vocal colouring at `f` Hz.
    pub fn response(&self, f: f64) -> f64 {
        let tilt = (f.max(50.0) / 1000.0).powf(-2.0 * self.formant_shift);
        let peaks: f64 = RESONANCE_CENTRES
            .iter()
            .zip(&self.resonance_gains)
            .map(|(&c, &g)| {
                let c = c * (1.0 + self.formant_shift);
                let z = (f - c) / (0.2 * c);
                1.0 + (g - 1.0) * (-z * z).exp()
            })
            .product();
        tilt * peaks
    }

    fn distinct_from(&self, other: &SpeakerProfile, strict: bool) -> bool {
        let f0 = (self.f0_hz - other.f0_hz).abs() >= MIN_F0_GAP_HZ;
        f0 || (!strict && (self.formant_shift - other.formant_shift).abs() >= MIN_FORMANT_GAP)
    }
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

fn draw_profile(rng: &mut ChaCha8Rng, index: usize, seed: u64) -> SpeakerProfile {
    SpeakerProfile {
        id: SpeakerProfile::speaker_id(index),
        index,
        f0_hz: rng.gen_range(F0_RANGE.0..=F0_RANGE.1),
        formant_shift: rng.gen_range(FORMANT_SHIFT_RANGE.0..=FORMANT_SHIFT_RANGE.1),
        resonance_gains: [0; 3].map(|_| rng.gen_range(RESONANCE_GAIN_RANGE.0..=RESONANCE_GAIN_RANGE.1)),
        seed,
    }
}

const STRICT_ATTEMPTS: usize = 200;
const RELAXED_ATTEMPTS: usize = 2000;

/// Speakers `0..n` drawn in order. Each draw is rejected and redrawn until
/// its f0 is at least [`MIN_F0_GAP_HZ`] from every earlier speaker; once
/// the pitch range is too crowded for that, a formant-shift gap of
/// [`MIN_FORMANT_GAP`] also counts as distinct.
pub fn synth_speakers(n: usize, seed: u64) -> Vec<SpeakerProfile> {
    let mut out: Vec<SpeakerProfile> = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[1, index as u64]));
        let mut chosen = None;
        for attempt in 0..STRICT_ATTEMPTS + RELAXED_ATTEMPTS {
            let strict = attempt < STRICT_ATTEMPTS;
            let p = draw_profile(&mut rng, index, seed);
            if out.iter().all(|o| p.distinct_from(o, strict)) {
                chosen = Some(p);
                break;
            }
        }
        // Only reachable with far more speakers than the parameter space holds.
        out.push(chosen.unwrap_or_else(|| draw_profile(&mut rng, index, seed)));
    }
    out
}

/// Profile of speaker `index` within the population generated by `seed`.
pub fn synth_speaker(index: usize, seed: u64) -> SpeakerProfile {
    synth_speakers(index + 1, seed).pop().expect("one speaker")
}

/// Timing and level constants of the renderer.
pub mod timing {
    pub const DIGIT_BASE_MS: f64 = 186.0;
    /// Digits closing a group are held longer.
    pub const GROUP_FINAL_STRETCH: f64 = 1.36;
    pub const DURATION_JITTER: f64 = 0.03;
    pub const PAUSE_MS: (f64, f64) = (150.0, 350.0);
    pub const GAP_MS: f64 = 30.0;
    pub const EDGE_SILENCE_MS: f64 = 100.0;
    pub const RAMP_MS: f64 = 10.0;
    pub const PAUSE_NOISE_DB: f64 = -50.0;
    pub const SNR_DB: f64 = 30.0;
    pub const PEAK: f64 = 0.7;
    pub const DIGIT_MS: (f64, f64) = (180.0, 260.0);
}

/// Rendered duration of one token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPlan {
    pub token: Token,
    pub samples: usize,
}

fn ms_to_samples(ms: f64) -> usize {
    (ms * SYNTH_RATE as f64 / 1000.0).round() as usize
}

/// Durations for `seq`, jittered by `rng`.
pub fn plan_tokens(seq: &TokenSeq, rng: &mut impl Rng) -> Vec<TokenPlan> {
    use timing::*;
    let toks = seq.tokens();
    toks.iter()
        .enumerate()
        .map(|(i, &token)| match token {
            Token::Digit(_) => {
                let group_final = toks.get(i + 1).is_none_or(|t| *t == Token::Pause);
                let stretch = if group_final { GROUP_FINAL_STRETCH } else { 1.0 };
                let jitter = 1.0 + rng.gen_range(-DURATION_JITTER..=DURATION_JITTER);
                let ms = (DIGIT_BASE_MS * stretch * jitter).clamp(DIGIT_MS.0, DIGIT_MS.1);
                TokenPlan {
                    token,
                    samples: ms_to_samples(ms),
                }
            }
            _ => TokenPlan {
                token,
                samples: ms_to_samples(rng.gen_range(PAUSE_MS.0..=PAUSE_MS.1)),
            },
        })
        .collect()
}

/// Adds `amp·sin(2πft + phase)` to `out` by rotating a phasor.
fn add_sine(out: &mut [f64], freq: f64, amp: f64, phase: f64) {
    let w = 2.0 * std::f64::consts::PI * freq / SYNTH_RATE as f64;
    let (sw, cw) = w.sin_cos();
    let (mut s, mut c) = phase.sin_cos();
    for v in out.iter_mut() {
        *v += amp * s;
        let ns = s * cw + c * sw;
        c = c * cw - s * sw;
        s = ns;
    }
}

fn render_digit(p: &SpeakerProfile, d: u8, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let k = p.pitch_factor();
    let (lo, hi) = DIGIT_TONES[d as usize];
    let nyq = SYNTH_RATE as f64 / 2.0;
    for (f, a) in [(lo * k, 0.5), (hi * k, 0.4)] {
        add_sine(&mut out, f, a * p.response(f), rng.gen_range(0.0..std::f64::consts::TAU));
    }
    for h in 1..=6 {
        let f = p.f0_hz * h as f64;
        if f < nyq {
            add_sine(&mut out, f, 0.12 / h as f64 * p.response(f), rng.gen_range(0.0..std::f64::consts::TAU));
        }
    }
    let ramp = ms_to_samples(timing::RAMP_MS).min(n / 2);
    for i in 0..ramp {
        let w = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / ramp as f64).cos();
        out[i] *= w;
        out[n - 1 - i] *= w;
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Renders `label`'s canonical digit string in `p`'s voice. Returns the
/// waveform and the exact transcript.
pub fn synth_utterance(p: &SpeakerProfile, label: TextLabel, utt_seed: u64) -> (Waveform, TokenSeq) {
    let seq = label.canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(p.seed, &[2, p.index as u64, label.index() as u64, utt_seed]));
    let plan = plan_tokens(&seq, &mut rng);
    let gap = ms_to_samples(timing::GAP_MS);
    let edge = ms_to_samples(timing::EDGE_SILENCE_MS);

    let mut signal = vec![0.0; edge];
    let mut pauses = Vec::new();
    for (i, tp) in plan.iter().enumerate() {
        if i > 0 {
            signal.extend(std::iter::repeat_n(0.0, gap));
        }
        match tp.token {
            Token::Digit(d) => signal.extend(render_digit(p, d, tp.samples, &mut rng)),
            _ => {
                pauses.push(signal.len()..signal.len() + tp.samples);
                signal.extend(std::iter::repeat_n(0.0, tp.samples));
            }
        }
    }
    signal.extend(std::iter::repeat_n(0.0, edge));

    let active: Vec<f64> = signal.iter().copied().filter(|v| *v != 0.0).collect();
    let level = rms(&active);
    let pause_sd = level * 10f64.powf(timing::PAUSE_NOISE_DB / 20.0);
    for r in pauses {
        for v in &mut signal[r] {
            *v += pause_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let noise_sd = level * 10f64.powf(-timing::SNR_DB / 20.0);
    for v in signal.iter_mut() {
        *v += noise_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = timing::PEAK / peak;
        signal.iter_mut().for_each(|v| *v *= s);
    }
    let w = Waveform::new(signal, SYNTH_RATE).expect("synthesised samples are finite");
    (w, seq)
}
