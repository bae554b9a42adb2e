//! Labelled mixture corpus: one-second event segments, optionally mixed with
//! an attenuated speech segment, split into train/validation/test.

mod build;
mod manifest;
pub mod synth;
mod wav;

pub use build::{build_corpus, render_example, speech_count, split_plan, CorpusConfig, RealCorpusConfig, SplitPlan};
pub use manifest::{CorpusManifest, ManifestEntry, SourceRef};
pub use synth::{generate_synthetic_event, generate_synthetic_speech, SyntheticConfig, SyntheticSpeaker};
pub use wav::{read_wav_mono, write_wav_f32};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;
/// One second at [`SAMPLE_RATE`].
pub const SEGMENT_LEN: usize = 44_100;
/// Candidate stride for the energetic-window search (100 ms).
pub const SEARCH_HOP: usize = 4_410;
/// Speech attenuation before mixing, in dB.
pub const SPEECH_ATTENUATION_DB: f64 = 5.0;

/// Linear gain applied to speech: `10^(-5/20)`.
pub fn speech_gain() -> f64 {
    10f64.powf(-SPEECH_ATTENUATION_DB / 20.0)
}

/// A mono one-second window at 44.1 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSegment {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.len() != SEGMENT_LEN {
            return Err(Error::shape(SEGMENT_LEN, samples.len()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("segment contains non-finite samples".into()));
        }
        Ok(AudioSegment {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn silence() -> Self {
        AudioSegment {
            samples: vec![0.0; SEGMENT_LEN],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Ok(Gender::Male),
            "f" | "female" => Ok(Gender::Female),
            other => Err(Error::InvalidArgument(format!("unknown gender '{other}'"))),
        }
    }
}

/// A rendered corpus example: the mixture plus the event-only signal kept as
/// the mask-network target.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub mixture: AudioSegment,
    pub event_only: AudioSegment,
    pub event_class: usize,
    pub has_speech: bool,
    pub speaker_gender: Option<Gender>,
    pub split: Split,
}

/// Zero-mean, unit population standard deviation.
pub fn normalize(samples: &[f32]) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::DegenerateInput("empty signal".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("signal contains non-finite samples".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::DegenerateInput(
            "zero-variance signal cannot be normalized".into(),
        ));
    }
    let inv_std = 1.0 / var.sqrt();
    Ok(samples.iter().map(|&v| ((v as f64 - mean) * inv_std) as f32).collect())
}

/// Normalizes a full segment; see [`normalize`].
pub fn normalize_segment(segment: &AudioSegment) -> Result<AudioSegment> {
    Ok(AudioSegment {
        samples: normalize(&segment.samples)?,
        sample_rate: segment.sample_rate,
    })
}

/// `event + 10^(-5/20) * speech`, or the event unchanged without speech.
pub fn mix(event: &AudioSegment, speech: Option<&AudioSegment>) -> Result<AudioSegment> {
    let Some(speech) = speech else {
        return Ok(event.clone());
    };
    if speech.len() != event.len() {
        return Err(Error::shape(event.len(), speech.len()));
    }
    let gain = speech_gain() as f32;
    let samples = event
        .samples
        .iter()
        .zip(&speech.samples)
        .map(|(&e, &s)| e + gain * s)
        .collect();
    Ok(AudioSegment {
        samples,
        sample_rate: event.sample_rate,
    })
}

/// A candidate window picked by [`energetic_windows`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub energy: f64,
}

/// Up to `count` mutually non-overlapping one-second windows ranked by energy
/// (sum of squares). Candidates start every [`SEARCH_HOP`] samples, plus a
/// final candidate flush with the end of the recording. Ties keep the earlier
/// start. Recordings shorter than one second yield the whole recording.
pub fn energetic_windows(recording: &[f32], count: usize) -> Result<Vec<Window>> {
    if recording.is_empty() {
        return Err(Error::InvalidArgument("empty recording".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("segment count must be at least 1".into()));
    }
    let mut prefix = Vec::with_capacity(recording.len() + 1);
    prefix.push(0.0f64);
    for &v in recording {
        prefix.push(prefix.last().unwrap() + (v as f64) * (v as f64));
    }
    if *prefix.last().unwrap() == 0.0 {
        return Err(Error::DegenerateInput(
            "all-zero recording has no energetic segment".into(),
        ));
    }
    if recording.len() <= SEGMENT_LEN {
        let energy = *prefix.last().unwrap();
        return Ok(vec![Window {
            start: 0,
            len: recording.len(),
            energy,
        }]);
    }

    let last = recording.len() - SEGMENT_LEN;
    let mut starts: Vec<usize> = (0..=last).step_by(SEARCH_HOP).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    let mut candidates: Vec<Window> = starts
        .into_iter()
        .map(|start| Window {
            start,
            len: SEGMENT_LEN,
            energy: prefix[start + SEGMENT_LEN] - prefix[start],
        })
        .filter(|w| w.energy > 0.0)
        .collect();
    candidates.sort_by(|a, b| b.energy.total_cmp(&a.energy).then(a.start.cmp(&b.start)));

    let mut picked: Vec<Window> = Vec::with_capacity(count);
    for c in candidates {
        if picked.len() == count {
            break;
        }
        let overlaps = picked
            .iter()
            .any(|p| c.start < p.start + p.len && p.start < c.start + c.len);
        if !overlaps {
            picked.push(c);
        }
    }
    Ok(picked)
}

/// Picks the most energetic one-second windows, normalizes each and zero-pads
/// short recordings at the end after normalization.
pub fn extract_energetic_segments(recording: &[f32], count: usize) -> Result<Vec<AudioSegment>> {
    energetic_windows(recording, count)?
        .into_iter()
        .map(|w| {
            let mut samples = normalize(&recording[w.start..w.start + w.len])?;
            samples.resize(SEGMENT_LEN, 0.0);
            AudioSegment::new(samples)
        })
        .collect()
}

/// Deterministic child seed from a master seed and a path of tags.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the path
    let mut x = master ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        x = x
            .wrapping_add(p.wrapping_mul(0xBF58_476D_1CE4_E5B9))
            .wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}
