//! Magnitude STFT and 64-band log-mel front-end.
//!
//! Frames are centred on `t * hop` for `t = 0..=len / hop` with reflect
//! padding, which gives 101 frames for a one-second segment.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioSegment, SAMPLE_RATE, SEGMENT_LEN};
use crate::{Error, Result};

pub const WINDOW: usize = 1411;
pub const HOP: usize = 441;
pub const MEL_BANDS: usize = 64;
/// `WINDOW / 2 + 1`.
pub const FREQ_BINS: usize = WINDOW / 2 + 1;
/// Frames for a one-second segment: `SEGMENT_LEN / HOP + 1`.
pub const FRAMES: usize = SEGMENT_LEN / HOP + 1;
pub const LOG_FLOOR: f64 = 1e-10;

/// Non-negative `freq_bins x frames` matrix, row-major by frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

impl MagnitudeSpectrogram {
    pub fn zeros(bins: usize, frames: usize) -> Self {
        MagnitudeSpectrogram {
            bins,
            frames,
            values: vec![0.0; bins * frames],
        }
    }

    pub fn at(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }
}

/// `MEL_BANDS x frames` log-mel matrix: the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelFeature {
    pub bands: usize,
    pub frames: usize,
    pub values: Vec<f32>,
}

/// Which spectrogram the mel filterbank integrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelInput {
    #[default]
    Power,
    Magnitude,
}

/// Periodic Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    // single reflection is enough while padding < len
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Reusable STFT plan.
#[derive(Clone)]
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("window", &self.window.len()).finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        Stft {
            fft: FftPlanner::new().plan_fft_forward(WINDOW),
            window: hamming(WINDOW),
        }
    }

    pub fn magnitude(&self, segment: &AudioSegment) -> Result<MagnitudeSpectrogram> {
        if segment.len() != SEGMENT_LEN {
            return Err(Error::shape(SEGMENT_LEN, segment.len()));
        }
        let x = &segment.samples;
        let half = (WINDOW / 2) as isize;
        let mut out = MagnitudeSpectrogram::zeros(FREQ_BINS, FRAMES);
        let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
        for t in 0..FRAMES {
            let centre = (t * HOP) as isize;
            for (k, b) in buf.iter_mut().enumerate() {
                let idx = reflect(centre - half + k as isize, x.len());
                *b = Complex::new(x[idx] as f64 * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (bin, c) in buf.iter().take(FREQ_BINS).enumerate() {
                out.values[bin * FRAMES + t] = c.norm() as f32;
            }
        }
        Ok(out)
    }
}

/// Magnitude STFT with a 1411-sample Hamming window and hop 441.
pub fn stft_magnitude(segment: &AudioSegment) -> Result<MagnitudeSpectrogram> {
    Stft::new().magnitude(segment)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over `[0, sr/2]`, peak weight 1,
/// stored `bands x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub bands: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, n_fft: usize, sample_rate: u32) -> Self {
        let bins = n_fft / 2 + 1;
        let fmax = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(fmax);
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; bands * bins];
        for m in 0..bands {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= centre {
                    (f - lo) / (centre - lo)
                } else if f > centre && f < hi {
                    (hi - f) / (hi - centre)
                } else {
                    0.0
                };
                weights[m * bins + k] = w;
            }
        }
        MelFilterbank { bands, bins, weights }
    }

    pub fn standard() -> Self {
        Self::new(MEL_BANDS, WINDOW, SAMPLE_RATE)
    }
}

/// Log-mel projection of a magnitude spectrogram.
#[derive(Debug, Clone)]
pub struct LogMel {
    pub filterbank: MelFilterbank,
    pub input: MelInput,
}

impl Default for LogMel {
    fn default() -> Self {
        LogMel {
            filterbank: MelFilterbank::standard(),
            input: MelInput::Power,
        }
    }
}

impl LogMel {
    pub fn apply(&self, spec: &MagnitudeSpectrogram) -> Result<LogMelFeature> {
        let fb = &self.filterbank;
        if spec.bins != fb.bins {
            return Err(Error::shape(format!("{} frequency bins", fb.bins), spec.bins));
        }
        if spec.values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "spectrogram must be finite and non-negative".into(),
            ));
        }
        let mut out = vec![0.0f32; fb.bands * spec.frames];
        let mut column = vec![0.0f64; spec.bins];
        for t in 0..spec.frames {
            for (k, c) in column.iter_mut().enumerate() {
                let m = spec.values[k * spec.frames + t] as f64;
                *c = match self.input {
                    MelInput::Power => m * m,
                    MelInput::Magnitude => m,
                };
            }
            for b in 0..fb.bands {
                let row = &fb.weights[b * fb.bins..(b + 1) * fb.bins];
                let e: f64 = row.iter().zip(&column).map(|(w, c)| w * c).sum();
                out[b * spec.frames + t] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        Ok(LogMelFeature {
            bands: fb.bands,
            frames: spec.frames,
            values: out,
        })
    }
}

/// 64-band log-mel of the power spectrogram, natural log with a 1e-10 floor.
pub fn log_mel(spec: &MagnitudeSpectrogram) -> Result<LogMelFeature> {
    LogMel::default().apply(spec)
}

/// One-stop featurizer holding the FFT plan and filterbank.
#[derive(Debug, Clone, Default)]
pub struct Featurizer {
    pub stft: Stft,
    pub log_mel: LogMel,
}

impl Featurizer {
    pub fn with_input(input: MelInput) -> Self {
        Featurizer {
            stft: Stft::new(),
            log_mel: LogMel {
                filterbank: MelFilterbank::standard(),
                input,
            },
        }
    }

    pub fn features(&self, segment: &AudioSegment) -> Result<LogMelFeature> {
        self.log_mel.apply(&self.stft.magnitude(segment)?)
    }
}

const CACHE_MAGIC: &[u8; 4] = b"RDFM";
const CACHE_VERSION: u32 = 1;

/// Writes a matrix as `magic, version, rows, cols` (little-endian u32)
/// followed by row-major little-endian `f32` data.
pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::shape(rows * cols, values.len()));
    }
    let mut bytes = Vec::with_capacity(16 + 4 * values.len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < 16 || &bytes[..4] != CACHE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(4) != CACHE_VERSION as usize {
        return Err(corrupt("unsupported version"));
    }
    let (rows, cols) = (word(8), word(12));
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(corrupt("truncated payload"));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

/// On-disk feature cache laid out as `<root>/<manifest id>/<variant>/<example id>.feat`.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache { root: root.into() }
    }

    pub fn path(&self, manifest_id: &str, variant: &str, example_id: usize) -> PathBuf {
        self.root
            .join(manifest_id)
            .join(variant)
            .join(format!("{example_id:06}.feat"))
    }

    pub fn get(&self, manifest_id: &str, variant: &str, example_id: usize) -> Result<Option<LogMelFeature>> {
        let path = self.path(manifest_id, variant, example_id);
        if !path.exists() {
            return Ok(None);
        }
        let (bands, frames, values) = read_matrix(&path)?;
        Ok(Some(LogMelFeature { bands, frames, values }))
    }

    pub fn put(&self, manifest_id: &str, variant: &str, example_id: usize, feat: &LogMelFeature) -> Result<()> {
        write_matrix(
            &self.path(manifest_id, variant, example_id),
            feat.bands,
            feat.frames,
            &feat.values,
        )
    }
}
