//! WAV file I/O. Reads 16-bit PCM and 32-bit float, averaging stereo to
//! mono; writes 16-bit PCM.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::{AudioBuffer, DspError};

pub fn read_wav(path: &Path) -> Result<AudioBuffer, DspError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(DspError::UnsupportedFormat(format!(
            "{} channels in {}",
            spec.channels,
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedFormat(format!(
                "{fmt:?} {bits}-bit in {}",
                path.display()
            )))
        }
    };
    let mono = if spec.channels == 2 {
        interleaved.chunks_exact(2).map(|lr| 0.5 * (lr[0] + lr[1])).collect()
    } else {
        interleaved
    };
    AudioBuffer::new(mono, spec.sample_rate)
}

/// Reads and rejects anything whose sample rate differs from `expected_sr`.
pub fn read_wav_expecting(path: &Path, expected_sr: u32) -> Result<AudioBuffer, DspError> {
    let audio = read_wav(path)?;
    if audio.sample_rate() != expected_sr {
        return Err(DspError::SampleRateMismatch { expected: expected_sr, got: audio.sample_rate() });
    }
    Ok(audio)
}

pub fn write_wav_16bit(path: &Path, audio: &AudioBuffer) -> Result<(), DspError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in audio.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
