//! Desk-scale stand-ins for the event and speech corpora.
//!
//! Events are drawn from a fixed table of twelve spectral signatures (tonal
//! bursts, resonant noise bands, decaying impacts and chirps at distinct
//! centre frequencies). Speech is additive harmonic synthesis driven by a
//! glottal fundamental with gender-dependent range and vowel formant
//! envelopes, so that speech presence and gender are both learnable.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize, AudioSegment, Gender, SAMPLE_RATE, SEGMENT_LEN};
use crate::{Error, Result};

/// Number of distinct event signatures available.
pub const MAX_SYNTH_CLASSES: usize = 12;

/// Fundamental ranges in Hz.
pub const MALE_F0: (f64, f64) = (100.0, 150.0);
pub const FEMALE_F0: (f64, f64) = (180.0, 250.0);
/// Peak relative excursion of the f0 contour around the speaker's base pitch.
const INTONATION_DEPTH: f64 = 0.06;

/// Knobs of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Event segments per class over all splits.
    pub segments_per_class: usize,
    /// Fraction of each class held out as the test split.
    pub test_fraction: f64,
    /// Distinct synthetic speakers per gender in the development pool.
    pub dev_speakers_per_gender: usize,
    /// Distinct synthetic speakers per gender in the test pool.
    pub test_speakers_per_gender: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            segments_per_class: 150,
            test_fraction: 0.2,
            dev_speakers_per_gender: 12,
            test_speakers_per_gender: 4,
        }
    }
}

/// Centre frequency of class `k`: half-octave steps from 300 Hz.
pub fn class_center_hz(class_id: usize) -> f64 {
    300.0 * 2f64.powf(class_id as f64 / 2.0)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Attack/decay envelope over `len` samples.
fn burst_envelope(i: usize, len: usize) -> f64 {
    let attack = (len / 10).max(1);
    if i < attack {
        i as f64 / attack as f64
    } else {
        (-(3.0 * (i - attack) as f64) / (len - attack).max(1) as f64).exp()
    }
}

/// Two-pole resonator (constant peak gain band-pass biquad).
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * freq / SAMPLE_RATE as f64;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Resonator {
            b0: alpha / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.b0 * x - self.b0 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn finish(mut buf: Vec<f64>, rng: &mut ChaCha8Rng) -> Result<AudioSegment> {
    // faint noise floor keeps every segment non-degenerate
    for v in buf.iter_mut() {
        *v += 1e-3 * gauss(rng);
    }
    let samples: Vec<f32> = buf.into_iter().map(|v| v as f32).collect();
    AudioSegment::new(normalize(&samples)?)
}

/// Deterministic event segment for `class_id` in `0..MAX_SYNTH_CLASSES`.
pub fn generate_synthetic_event(class_id: usize, rng_seed: u64) -> Result<AudioSegment> {
    if class_id >= MAX_SYNTH_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "synthetic class {class_id} out of range 0..{MAX_SYNTH_CLASSES}"
        )));
    }
    let mut rng = rng_for(rng_seed ^ ((class_id as u64 + 1) << 56));
    let sr = SAMPLE_RATE as f64;
    let f = class_center_hz(class_id) * (1.0 + rng.gen_range(-0.05..0.05));
    let mut buf = vec![0.0f64; SEGMENT_LEN];

    match class_id % 4 {
        // tonal bursts with two overtones
        0 => {
            let bursts = rng.gen_range(3..=6);
            for _ in 0..bursts {
                let len = rng.gen_range(3_500..11_000);
                let start = rng.gen_range(0..SEGMENT_LEN - len);
                let phase = rng.gen_range(0.0..2.0 * PI);
                for i in 0..len {
                    let t = i as f64 / sr;
                    let tone = (2.0 * PI * f * t + phase).sin()
                        + 0.5 * (4.0 * PI * f * t + phase).sin()
                        + 0.25 * (6.0 * PI * f * t + phase).sin();
                    buf[start + i] += burst_envelope(i, len) * tone;
                }
            }
        }
        // resonant noise band with slow amplitude modulation
        1 => {
            let mut res = Resonator::new(f, 6.0);
            let am_rate = rng.gen_range(2.0..6.0);
            let am_phase = rng.gen_range(0.0..2.0 * PI);
            for (i, v) in buf.iter_mut().enumerate() {
                let am = 0.6 + 0.4 * (2.0 * PI * am_rate * i as f64 / sr + am_phase).sin();
                *v = am * res.tick(gauss(&mut rng));
            }
        }
        // decaying impacts exciting a resonance, with a broadband click
        2 => {
            let hits = rng.gen_range(4..=9);
            let mut excitation = vec![0.0f64; SEGMENT_LEN];
            for _ in 0..hits {
                let at = rng.gen_range(0..SEGMENT_LEN - 400);
                let amp = rng.gen_range(0.5..1.0);
                for k in 0..200 {
                    excitation[at + k] += amp * gauss(&mut rng) * (-(k as f64) / 40.0).exp();
                }
            }
            let mut res = Resonator::new(f, 25.0);
            for (v, &e) in buf.iter_mut().zip(&excitation) {
                *v = res.tick(e) + 0.05 * e;
            }
        }
        // upward chirps from f to 1.6 f
        _ => {
            let chirps = rng.gen_range(2..=4);
            for _ in 0..chirps {
                let len = rng.gen_range(6_000..13_000);
                let start = rng.gen_range(0..SEGMENT_LEN - len);
                let mut phase = 0.0;
                for i in 0..len {
                    let frac = i as f64 / len as f64;
                    phase += 2.0 * PI * f * (1.0 + 0.6 * frac) / sr;
                    buf[start + i] += burst_envelope(i, len).sqrt() * phase.sin();
                }
            }
        }
    }
    finish(buf, &mut rng)
}

/// Vowel formant triples (F1, F2, F3) in Hz.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];
const FORMANT_BW: [f64; 3] = [90.0, 110.0, 170.0];
const VOICED_BAND_LIMIT: f64 = 5_000.0;

/// Voice parameters that stay fixed across a speaker's utterances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpeaker {
    pub gender: Gender,
    pub base_f0: f64,
    pub formant_scale: f64,
    pub breathiness: f64,
}

impl SyntheticSpeaker {
    pub fn from_seed(gender: Gender, seed: u64) -> Self {
        let mut rng = rng_for(seed ^ 0x5BEA_7E12);
        let (lo, hi) = match gender {
            Gender::Male => MALE_F0,
            Gender::Female => FEMALE_F0,
        };
        // keep the intonation excursion inside the configured band
        let margin = |x: f64| x * INTONATION_DEPTH;
        let base_f0 = rng.gen_range(lo + margin(lo)..hi - margin(hi));
        let formant_scale = match gender {
            Gender::Male => rng.gen_range(0.92..1.02),
            Gender::Female => rng.gen_range(1.08..1.2),
        };
        SyntheticSpeaker {
            gender,
            base_f0,
            formant_scale,
            breathiness: rng.gen_range(0.02..0.08),
        }
    }

    fn formant_gain(&self, freq: f64, vowel: &[f64; 3]) -> f64 {
        vowel
            .iter()
            .zip(FORMANT_BW)
            .enumerate()
            .map(|(i, (&fc, bw))| {
                let fc = fc * self.formant_scale;
                let d = (freq - fc) / bw;
                (1.0 / (1.0 + i as f64)) / (1.0 + d * d)
            })
            .sum::<f64>()
            + 0.02
    }

    /// One second of syllabic voiced speech with short pauses.
    pub fn utterance(&self, seed: u64) -> Result<AudioSegment> {
        let mut rng = rng_for(seed ^ 0xA11C_E5ED);
        let sr = SAMPLE_RATE as f64;
        let mut buf = vec![0.0f64; SEGMENT_LEN];
        let mut cursor = rng.gen_range(0..2_000);
        let contour_rate = rng.gen_range(1.5..3.5);
        let contour_phase = rng.gen_range(0.0..2.0 * PI);
        while cursor < SEGMENT_LEN - 2_000 {
            let len = rng.gen_range(4_000..11_000).min(SEGMENT_LEN - cursor);
            let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            let next_vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
            let max_harm = (VOICED_BAND_LIMIT / (self.base_f0 * (1.0 - INTONATION_DEPTH))) as usize;
            let mut phases: Vec<f64> = (0..max_harm).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            for i in 0..len {
                let n = cursor + i;
                let t = n as f64 / sr;
                let f0 = self.base_f0 * (1.0 + INTONATION_DEPTH * (2.0 * PI * contour_rate * t + contour_phase).sin());
                let glide = i as f64 / len as f64;
                let formants = [
                    vowel[0] + glide * (next_vowel[0] - vowel[0]) * 0.5,
                    vowel[1] + glide * (next_vowel[1] - vowel[1]) * 0.5,
                    vowel[2] + glide * (next_vowel[2] - vowel[2]) * 0.5,
                ];
                let env = burst_envelope(i, len).sqrt();
                let mut sample = 0.0;
                for (h, phase) in phases.iter_mut().enumerate() {
                    let fh = f0 * (h + 1) as f64;
                    if fh >= VOICED_BAND_LIMIT {
                        break;
                    }
                    *phase += 2.0 * PI * fh / sr;
                    sample += self.formant_gain(fh, &formants) / ((h + 1) as f64).sqrt() * phase.sin();
                }
                buf[n] += env * (sample + self.breathiness * gauss(&mut rng));
            }
            cursor += len + rng.gen_range(800..4_000);
            // occasional fricative between syllables
            if rng.gen_bool(0.3) && cursor < SEGMENT_LEN - 3_000 {
                let flen = rng.gen_range(1_500..3_000);
                let mut res = Resonator::new(rng.gen_range(3_500.0..6_500.0), 2.0);
                for i in 0..flen {
                    buf[cursor + i] += 0.3 * burst_envelope(i, flen) * res.tick(gauss(&mut rng));
                }
                cursor += flen;
            }
        }
        finish(buf, &mut rng)
    }
}

/// Deterministic speech segment; the seed fixes both the voice and the
/// utterance.
pub fn generate_synthetic_speech(gender: Gender, rng_seed: u64) -> Result<AudioSegment> {
    SyntheticSpeaker::from_seed(gender, rng_seed).utterance(rng_seed)
}
