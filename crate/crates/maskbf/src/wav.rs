//! WAV input/output for mono and multi-file multichannel audio.
//!
//! Samples are exchanged as `f64` in [-1, 1]. Integer formats are scaled by
//! their full-scale value on read; writes always produce 32-bit float WAV so
//! no quantization enters the processing chain.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::stft::TimeSignal;

/// Reads a WAV file into per-channel `f64` sample vectors.
pub fn read_wav(path: &Path) -> Result<TimeSignal> {
    let mut reader = WavReader::open(path)
        .map_err(|e| Error::dataset(path, format!("cannot open wav: {e}")))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::dataset(path, "wav has zero channels"));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits) if bits <= 32 => {
            let scale = (1i64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::dataset(
                path,
                format!("unsupported wav format {fmt:?}/{bits}bit"),
            ));
        }
    };
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for (i, v) in interleaved.into_iter().enumerate() {
        channels[i % n_ch].push(v);
    }
    TimeSignal::new(channels, spec.sample_rate)
}

/// Writes a signal as 32-bit float WAV (interleaved when multichannel).
pub fn write_wav(path: &Path, signal: &TimeSignal) -> Result<()> {
    let spec = WavSpec {
        channels: signal.n_channels() as u16,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for t in 0..signal.len() {
        for ch in 0..signal.n_channels() {
            writer.write_sample(signal.channel(ch)[t] as f32)?;
        }
    }
    writer.finalize()?;
    Ok(())
}
