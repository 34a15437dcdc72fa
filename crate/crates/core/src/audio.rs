//! Waveform containers, WAV file I/O and basic signal measurements.
//!
//! Samples are held as `f64` throughout. The project runs at a single sample
//! rate ([`SAMPLE_RATE`]); files at any other rate are rejected on read.

use std::path::Path;

use crate::error::{Error, Result};

/// Project-wide sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono, finite, non-empty sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("waveform must contain at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Argument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Waveform at the project sample rate.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
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

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Same-rate waveform with `samples` replaced.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }
}

/// An ordered set of equal-length, equal-rate channels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelRecording {
    channels: Vec<Waveform>,
    channel_roles: Option<Vec<String>>,
}

impl MultiChannelRecording {
    pub fn new(channels: Vec<Waveform>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::Argument("recording needs at least one channel".into()))?;
        let (len, rate) = (first.len(), first.sample_rate());
        for (i, ch) in channels.iter().enumerate() {
            if ch.len() != len || ch.sample_rate() != rate {
                return Err(Error::Argument(format!(
                    "channel {i} has {} samples @ {} Hz, expected {len} @ {rate} Hz",
                    ch.len(),
                    ch.sample_rate()
                )));
            }
        }
        Ok(Self {
            channels,
            channel_roles: None,
        })
    }

    pub fn mono(w: Waveform) -> Self {
        Self {
            channels: vec![w],
            channel_roles: None,
        }
    }

    pub fn with_roles(mut self, roles: Vec<String>) -> Result<Self> {
        if roles.len() != self.channels.len() {
            return Err(Error::Argument(format!(
                "{} roles given for {} channels",
                roles.len(),
                self.channels.len()
            )));
        }
        self.channel_roles = Some(roles);
        Ok(self)
    }

    pub fn channels(&self) -> &[Waveform] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &Waveform {
        &self.channels[i]
    }

    pub fn channel_roles(&self) -> Option<&[String]> {
        self.channel_roles.as_deref()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample_rate(&self) -> u32 {
        self.channels[0].sample_rate()
    }
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        // the file itself opened, so a short read means a truncated header or body
        hound::Error::IoError(io) => Error::Format(format!("{}: {io}", path.display())),
        hound::Error::FormatError(msg) => Error::Format(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => {
            Error::Unsupported(format!("{}: unsupported WAV encoding", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16-bit PCM or 32-bit float WAV file.
///
/// Integer samples are divided by 32768. Channel order is preserved.
pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannelRecording> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader =
        hound::WavReader::new(std::io::BufReader::new(file)).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Unsupported(format!(
            "{}: sample rate {} Hz (only {SAMPLE_RATE} Hz is supported)",
            path.display(),
            spec.sample_rate
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    };
    let n_ch = spec.channels as usize;
    if n_ch == 0 || interleaved.is_empty() {
        return Err(Error::Format(format!("{}: no audio data", path.display())));
    }
    let frames = interleaved.len() / n_ch;
    let mut channels = Vec::with_capacity(n_ch);
    for c in 0..n_ch {
        let samples: Vec<f64> = (0..frames).map(|f| interleaved[f * n_ch + c]).collect();
        channels.push(Waveform::new(samples, spec.sample_rate).map_err(|e| {
            Error::Format(format!("{}: {e}", path.display()))
        })?);
    }
    MultiChannelRecording::new(channels)
}

/// Converts a sample to a 16-bit code, saturating at the code range.
pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

fn map_hound_write(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => map_hound(path, other),
    }
}

/// Writes `rec` as 16-bit PCM. Samples outside [-1, 1] are clipped.
pub fn write_wav(rec: &MultiChannelRecording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: rec.num_channels() as u16,
        sample_rate: rec.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let clipped = rec
        .channels()
        .iter()
        .flat_map(|c| c.samples())
        .filter(|s| s.abs() > 1.0)
        .count();
    if clipped > 0 {
        log::warn!("{}: clipping {clipped} samples outside [-1, 1]", path.display());
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = hound::WavWriter::new(std::io::BufWriter::new(file), spec)
        .map_err(|e| map_hound_write(path, e))?;
    for f in 0..rec.len() {
        for ch in rec.channels() {
            writer
                .write_sample(to_pcm16(ch.samples()[f].clamp(-1.0, 1.0)))
                .map_err(|e| map_hound_write(path, e))?;
        }
    }
    writer.finalize().map_err(|e| map_hound_write(path, e))
}

/// Mean of squared samples.
pub fn rms_power(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::Argument("rms_power of an empty signal".into()));
    }
    Ok(w.iter().map(|s| s * s).sum::<f64>() / w.len() as f64)
}

/// Power ratio in decibels.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> Result<f64> {
    let ps = rms_power(signal)?;
    let pn = rms_power(noise)?;
    if pn == 0.0 {
        return Err(Error::Degenerate("noise power is zero".into()));
    }
    Ok(10.0 * (ps / pn).log10())
}
