use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::SAMPLE_RATE;
use crate::{Error, Result};

/// Reads a mono WAV file at 44.1 kHz as `f32` in `[-1, 1)`.
///
/// PCM16 is the expected input; 32-bit float files (as written by
/// [`write_wav_f32`]) are accepted as well.
pub fn read_wav_mono(path: &Path) -> Result<Vec<f32>> {
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate {
            path: path.into(),
            found: spec.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    if spec.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0).map_err(Error::from))
            .collect(),
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().map(|s| s.map_err(Error::from)).collect(),
        (fmt, bits) => Err(Error::InvalidArgument(format!(
            "{}: unsupported sample format {fmt:?}/{bits}",
            path.display()
        ))),
    }
}

/// Writes mono 32-bit float samples at 44.1 kHz; lossless for `f32` data.
pub fn write_wav_f32(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}
