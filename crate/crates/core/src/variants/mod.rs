//! Variant-set construction for multi-variant consistency training.
//!
//! A [`VariantSet`] holds K same-origin, same-length waveforms. They come from
//! three sources, selectable per corpus through [`MvcMode`]:
//!
//! * data augmentation (pitch shift, reverberation, additive noise),
//! * distinct microphones of one multi-channel recording,
//! * an isolated microphone paired with a delay-and-sum enhanced mixture.

pub mod beamform;
pub mod mix;
pub mod pitch;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MultiChannelRecording, Waveform};
use crate::error::{Error, Result};

pub use beamform::{delay_and_sum, estimate_delay, Beamformed};
pub use mix::{convolve_rir, mix_noise, NoisyMix};
pub use pitch::pitch_shift;

/// Largest inter-channel lag searched when beamforming (4 ms at 16 kHz).
pub const DEFAULT_MAX_LAG: usize = 64;

/// Probabilities and parameter ranges for on-the-fly augmentation.
#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    pub pitch_prob: f64,
    /// Inclusive semitone interval. Zero is never drawn.
    pub pitch_semitone_range: (i32, i32),
    pub rir_prob: f64,
    pub noise_prob: f64,
    pub snr_range_db: (f64, f64),
    pub rir_pool: Vec<Waveform>,
    pub noise_pool: Vec<Waveform>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            pitch_prob: 0.5,
            pitch_semitone_range: (-3, 3),
            rir_prob: 0.15,
            noise_prob: 0.15,
            snr_range_db: (10.0, 30.0),
            rir_pool: Vec::new(),
            noise_pool: Vec::new(),
        }
    }
}

impl AugmentPolicy {
    /// A policy that never changes its input.
    pub fn identity() -> Self {
        Self {
            pitch_prob: 0.0,
            rir_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn with_pools(mut self, rir_pool: Vec<Waveform>, noise_pool: Vec<Waveform>) -> Self {
        self.rir_pool = rir_pool;
        self.noise_pool = noise_pool;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("pitch_prob", self.pitch_prob),
            ("rir_prob", self.rir_prob),
            ("noise_prob", self.noise_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Argument(format!("{name} = {p} is not a probability")));
            }
        }
        let (lo, hi) = self.pitch_semitone_range;
        if lo > hi || lo < -12 || hi > 12 {
            return Err(Error::Argument(format!("bad semitone range [{lo}, {hi}]")));
        }
        if self.pitch_prob > 0.0 && lo == 0 && hi == 0 {
            return Err(Error::Argument("semitone range contains only zero".into()));
        }
        let (a, b) = self.snr_range_db;
        if !(a <= b) {
            return Err(Error::Argument(format!("bad SNR range [{a}, {b}]")));
        }
        if self.rir_prob > 0.0 && self.rir_pool.is_empty() {
            return Err(Error::Argument("rir_prob > 0 with an empty RIR pool".into()));
        }
        if self.noise_prob > 0.0 && self.noise_pool.is_empty() {
            return Err(Error::Argument("noise_prob > 0 with an empty noise pool".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub index: usize,
    pub snr_db: f64,
}

/// Which augmentations fired, with their drawn parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub pitch_semitones: Option<i32>,
    pub rir_index: Option<usize>,
    pub noise: Option<NoiseDraw>,
}

impl AugmentRecord {
    pub fn is_identity(&self) -> bool {
        self.pitch_semitones.is_none() && self.rir_index.is_none() && self.noise.is_none()
    }
}

fn draw_semitones<R: Rng + ?Sized>(range: (i32, i32), rng: &mut R) -> i32 {
    let nonzero: Vec<i32> = (range.0..=range.1).filter(|&s| s != 0).collect();
    nonzero[rng.gen_range(0..nonzero.len())]
}

/// Applies pitch shift, reverberation and noise independently with their
/// policy probabilities, in that order. Silent input is never noised.
pub fn augment<R: Rng + ?Sized>(
    w: &Waveform,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Waveform, AugmentRecord)> {
    policy.validate()?;
    let mut out = w.clone();
    let mut record = AugmentRecord::default();

    if rng.gen::<f64>() < policy.pitch_prob {
        let s = draw_semitones(policy.pitch_semitone_range, rng);
        out = pitch_shift(&out, s as f64)?;
        record.pitch_semitones = Some(s);
    }
    if rng.gen::<f64>() < policy.rir_prob {
        let idx = rng.gen_range(0..policy.rir_pool.len());
        out = convolve_rir(&out, &policy.rir_pool[idx])?;
        record.rir_index = Some(idx);
    }
    if rng.gen::<f64>() < policy.noise_prob {
        let idx = rng.gen_range(0..policy.noise_pool.len());
        let (lo, hi) = policy.snr_range_db;
        let snr = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        // an all-zero signal has no defined SNR; it stays silent
        if out.max_abs() > 0.0 {
            out = mix_noise(&out, &policy.noise_pool[idx], snr, rng)?.mixture;
            record.noise = Some(NoiseDraw { index: idx, snr_db: snr });
        }
    }
    Ok((out, record))
}

/// How a variant-set member was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original { channel: usize },
    Augmented { channel: usize, ops: AugmentRecord },
    Channel { index: usize },
    Beamformed { channels: Vec<usize>, lags: Vec<i64> },
}

/// A single variant-construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    Da,
    Mc,
    Eh,
}

impl VariantKind {
    fn min_channels(self, k: usize) -> usize {
        match self {
            VariantKind::Da => 1,
            VariantKind::Mc => k,
            VariantKind::Eh => 2,
        }
    }
}

/// Variant-construction mode. `None` is the single-variant baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MvcMode {
    None,
    Kinds(Vec<VariantKind>),
}

impl MvcMode {
    pub fn da() -> Self {
        MvcMode::Kinds(vec![VariantKind::Da])
    }

    pub fn mc() -> Self {
        MvcMode::Kinds(vec![VariantKind::Mc])
    }

    pub fn eh() -> Self {
        MvcMode::Kinds(vec![VariantKind::Eh])
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, MvcMode::None)
    }

    /// Variants per utterance: 1 for the baseline, `k` otherwise.
    pub fn variants(&self, k: usize) -> usize {
        if self.is_baseline() {
            1
        } else {
            k
        }
    }
}

impl fmt::Display for MvcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MvcMode::None => write!(f, "none"),
            MvcMode::Kinds(kinds) => {
                let names: Vec<&str> = kinds
                    .iter()
                    .map(|k| match k {
                        VariantKind::Da => "da",
                        VariantKind::Mc => "mc",
                        VariantKind::Eh => "eh",
                    })
                    .collect();
                write!(f, "{}", names.join("+"))
            }
        }
    }
}

impl FromStr for MvcMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(MvcMode::None);
        }
        let mut kinds = Vec::new();
        for part in s.split('+') {
            let kind = match part.trim() {
                "da" => VariantKind::Da,
                "mc" => VariantKind::Mc,
                "eh" => VariantKind::Eh,
                other => return Err(Error::Argument(format!("unknown mvc mode '{other}'"))),
            };
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        Ok(MvcMode::Kinds(kinds))
    }
}

impl Serialize for MvcMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MvcMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// K aligned waveforms from one utterance.
#[derive(Debug, Clone)]
pub struct VariantSet {
    pub origin_id: String,
    pub members: Vec<Waveform>,
    pub provenance: Vec<Provenance>,
}

impl VariantSet {
    pub fn new(
        origin_id: impl Into<String>,
        members: Vec<Waveform>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        if members.is_empty() || members.len() != provenance.len() {
            return Err(Error::Argument("variant set needs ≥1 member with provenance".into()));
        }
        let len = members.iter().map(Waveform::len).min().unwrap_or(0);
        let members = members
            .into_iter()
            .map(|m| {
                if m.len() == len {
                    Ok(m)
                } else {
                    m.with_samples(m.samples()[..len].to_vec())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            origin_id: origin_id.into(),
            members,
            provenance,
        })
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.members[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.members[0].is_empty()
    }
}

fn build_da<R: Rng + ?Sized>(
    source: &MultiChannelRecording,
    k: usize,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Vec<Waveform>, Vec<Provenance>)> {
    let channel = rng.gen_range(0..source.num_channels());
    let mut members = Vec::with_capacity(k);
    let mut prov = Vec::with_capacity(k);
    for _ in 0..k {
        let (w, ops) = augment(source.channel(channel), policy, rng)?;
        members.push(w);
        prov.push(if ops.is_identity() {
            Provenance::Original { channel }
        } else {
            Provenance::Augmented { channel, ops }
        });
    }
    Ok((members, prov))
}

fn build_mc<R: Rng + ?Sized>(
    source: &MultiChannelRecording,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<Waveform>, Vec<Provenance>)> {
    let n = source.num_channels();
    if n < k {
        return Err(Error::Argument(format!(
            "multi-channel variants need {k} channels, recording has {n}"
        )));
    }
    let picks = sample(rng, n, k).into_vec();
    let members = picks.iter().map(|&i| source.channel(i).clone()).collect();
    let prov = picks.iter().map(|&i| Provenance::Channel { index: i }).collect();
    Ok((members, prov))
}

fn build_eh<R: Rng + ?Sized>(
    source: &MultiChannelRecording,
    k: usize,
    rng: &mut R,
) -> Result<(Vec<Waveform>, Vec<Provenance>)> {
    let n = source.num_channels();
    if n < 2 {
        return Err(Error::Argument(format!(
            "enhancement variants need ≥2 channels, recording has {n}"
        )));
    }
    let isolated = rng.gen_range(0..n);
    let mut members = vec![source.channel(isolated).clone()];
    let mut prov = vec![Provenance::Channel { index: isolated }];
    let sizes: Vec<usize> = [2usize, 5].into_iter().filter(|&s| s <= n).collect();
    for _ in 1..k {
        let size = sizes[rng.gen_range(0..sizes.len())];
        let mut subset = sample(rng, n, size).into_vec();
        subset.sort_unstable();
        let sub = MultiChannelRecording::new(
            subset.iter().map(|&i| source.channel(i).clone()).collect(),
        )?;
        let max_lag = DEFAULT_MAX_LAG.min((source.len().saturating_sub(1)) / 2);
        let bf = delay_and_sum(&sub, 0, max_lag)?;
        members.push(bf.output);
        prov.push(Provenance::Beamformed {
            channels: subset,
            lags: bf.lags,
        });
    }
    Ok((members, prov))
}

/// Builds a K-member variant set from one recording.
///
/// Composite modes pick one compatible strategy per call, uniformly.
pub fn build_variant_set<R: Rng + ?Sized>(
    origin_id: &str,
    source: &MultiChannelRecording,
    mode: &MvcMode,
    k: usize,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<VariantSet> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let (members, prov) = match mode {
        MvcMode::None => {
            let channel = rng.gen_range(0..source.num_channels());
            (
                vec![source.channel(channel).clone()],
                vec![Provenance::Original { channel }],
            )
        }
        MvcMode::Kinds(kinds) => {
            if kinds.is_empty() {
                return Err(Error::Argument("empty mvc mode".into()));
            }
            let usable: Vec<VariantKind> = kinds
                .iter()
                .copied()
                .filter(|kind| source.num_channels() >= kind.min_channels(k))
                .collect();
            let kind = match usable.len() {
                0 => kinds[0],
                1 => usable[0],
                n => usable[rng.gen_range(0..n)],
            };
            match kind {
                VariantKind::Da => build_da(source, k, policy, rng)?,
                VariantKind::Mc => build_mc(source, k, rng)?,
                VariantKind::Eh => build_eh(source, k, rng)?,
            }
        }
    };
    VariantSet::new(origin_id, members, prov)
}
