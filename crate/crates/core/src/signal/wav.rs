//! Mono 16-bit PCM WAV files.

use std::io::{Read, Seek, Write};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::signal::Waveform;

const FULL_SCALE: f64 = 32768.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WavWriteReport {
    /// Samples with `|s| > 1` that were hard-clipped. Full scale `+1.0` maps to
    /// the largest code without counting as clipped.
    pub clipped: usize,
}

pub fn wav_read<R: Read>(reader: R) -> Result<Waveform> {
    let mut wav = WavReader::new(reader)?;
    let spec = wav.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::invalid(format!(
            "unsupported wav encoding: {} channel(s), {}-bit {:?} (expected mono 16-bit PCM)",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = wav
        .samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn wav_write<W: Write + Seek>(writer: W, wave: &Waveform) -> Result<WavWriteReport> {
    let spec =
        WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut wav = WavWriter::new(writer, spec)?;
    let mut report = WavWriteReport::default();
    for &s in &wave.samples {
        let q = (s * FULL_SCALE).round();
        if s.abs() > 1.0 {
            report.clipped += 1;
        }
        wav.write_sample(q.clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16)?;
    }
    wav.finalize()?;
    Ok(report)
}
