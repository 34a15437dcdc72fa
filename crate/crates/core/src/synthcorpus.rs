//! Synthetic speech-like corpora with ground truth.
//!
//! Every token of the vocabulary maps to a fixed formant-like segment (two
//! or three sinusoids with their own gain trajectories under a raised-cosine
//! envelope). Utterances concatenate
//! token segments separated by short silences. The multichannel condition
//! passes the clean utterance through a per-channel room response, integer
//! delay and independent noise, recording every drawn parameter.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, write_wav, MultiChannelRecording, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::objectives::{Vocabulary, WORD_BOUNDARY};
use crate::variants::mix::{convolve_rir, snr_gain};

pub const MANIFEST_SCHEMA: u32 = 1;
const PEAK_LIMIT: f64 = 0.9;

/// Room responses used by the multichannel condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RirSource {
    Impulse,
    Synthetic { pool_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Clean,
    NoisyMultichannel {
        num_channels: usize,
        /// Inclusive integer delay interval in samples.
        delay_range: (usize, usize),
        /// `None` disables additive noise.
        snr_range_db: Option<(f64, f64)>,
        rir: RirSource,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_utterances: usize,
    /// Utterances shorter than a drawn duration are padded with silence.
    pub duration_range: (f64, f64),
    pub tokens_per_utt: (usize, usize),
    /// Characters that may appear in transcripts.
    pub alphabet: String,
    /// Probability of a word boundary between two characters.
    pub boundary_prob: f64,
    pub token_secs: f64,
    pub gap_secs: f64,
    pub condition: Condition,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            duration_range: (1.0, 3.0),
            tokens_per_utt: (6, 20),
            alphabet: "abcdefghijklmnopqrstuvwxyz'-.".into(),
            boundary_prob: 0.15,
            token_secs: 0.08,
            gap_secs: 0.02,
            condition: Condition::Clean,
            id_prefix: "clean".into(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    /// Default noisy 4-channel target-domain corpus.
    pub fn noisy_multichannel() -> Self {
        Self {
            num_utterances: 50,
            condition: Condition::NoisyMultichannel {
                num_channels: 4,
                delay_range: (0, 8),
                snr_range_db: Some((5.0, 15.0)),
                rir: RirSource::Synthetic { pool_size: 8 },
            },
            id_prefix: "noisy".into(),
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let (lo, hi) = self.tokens_per_utt;
        if lo == 0 || lo > hi {
            return Err(Error::Argument(format!("bad tokens_per_utt range {lo}..={hi}")));
        }
        if !(self.duration_range.0 >= 0.0 && self.duration_range.0 <= self.duration_range.1) {
            return Err(Error::Argument("bad duration range".into()));
        }
        if self.alphabet.is_empty() {
            return Err(Error::Argument("empty alphabet".into()));
        }
        for ch in self.alphabet.chars() {
            match vocab.token_of(ch) {
                Some(t) if t != WORD_BOUNDARY => {}
                _ => return Err(Error::Argument(format!("alphabet character {ch:?} not a vocabulary character"))),
            }
        }
        if !(0.0..1.0).contains(&self.boundary_prob) {
            return Err(Error::Argument("boundary_prob outside [0, 1)".into()));
        }
        if self.token_secs <= 0.0 || self.gap_secs < 0.0 {
            return Err(Error::Argument("token and gap durations must be positive".into()));
        }
        let min_len = (lo as f64 * self.token_secs * SAMPLE_RATE as f64) as usize;
        if min_len.max((self.duration_range.0 * SAMPLE_RATE as f64) as usize) < 400 {
            return Err(Error::Argument("utterances would be shorter than 400 samples".into()));
        }
        if let Condition::NoisyMultichannel {
            num_channels,
            delay_range,
            snr_range_db,
            rir,
        } = &self.condition
        {
            if *num_channels == 0 {
                return Err(Error::Argument("channel count must be ≥ 1".into()));
            }
            if delay_range.0 > delay_range.1 {
                return Err(Error::Argument("bad delay range".into()));
            }
            if snr_range_db.is_some_and(|(a, b)| a > b) {
                return Err(Error::Argument("bad SNR range".into()));
            }
            if matches!(rir, RirSource::Synthetic { pool_size: 0 }) {
                return Err(Error::Argument("empty RIR pool".into()));
            }
        }
        Ok(())
    }
}

/// Sinusoid frequencies in Hz for a non-blank token.
pub fn token_frequencies(token: usize) -> Vec<f64> {
    assert!(token != 0, "the blank has no waveform");
    let t = token as f64;
    let mut f = vec![250.0 + 50.0 * t, 2000.0 + 75.0 * ((7 * token) % 31) as f64];
    if token % 3 == 0 {
        f.push(4500.0 + 100.0 * t);
    }
    f
}

const PARTIAL_AMPLITUDES: [f64; 3] = [0.5, 0.3, 0.2];

/// Per-partial gains at relative position `x ∈ [0, 1)` within a segment:
/// the first partial decays, the second rises, the third swells.
fn partial_shapes(x: f64) -> [f64; 3] {
    [1.0 - 0.7 * x, 0.3 + 0.7 * x, 0.2 + 0.8 * (PI * x).sin()]
}

/// Enveloped segment of `n` samples for a token.
pub fn token_waveform(token: usize, n: usize) -> Vec<f64> {
    let freqs = token_frequencies(token);
    let ramp = (n / 10).max(1);
    (0..n)
        .map(|i| {
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if i >= n - ramp {
                0.5 - 0.5 * (PI * (n - 1 - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let x = i as f64 / n as f64;
            let s: f64 = freqs
                .iter()
                .zip(PARTIAL_AMPLITUDES)
                .zip(partial_shapes(x))
                .map(|((f, a), w)| a * w * (2.0 * PI * f * i as f64 / SAMPLE_RATE as f64).sin())
                .sum();
            env * s
        })
        .collect()
}

fn draw_tokens<R: Rng + ?Sized>(spec: &CorpusSpec, vocab: &Vocabulary, rng: &mut R) -> Vec<usize> {
    let chars: Vec<usize> = spec.alphabet.chars().filter_map(|c| vocab.token_of(c)).collect();
    let n = rng.gen_range(spec.tokens_per_utt.0..=spec.tokens_per_utt.1);
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let boundary_ok = i > 0 && i + 1 < n && tokens.last() != Some(&WORD_BOUNDARY);
        if boundary_ok && rng.gen::<f64>() < spec.boundary_prob {
            tokens.push(WORD_BOUNDARY);
        } else {
            tokens.push(chars[rng.gen_range(0..chars.len())]);
        }
    }
    tokens
}

fn render_tokens<R: Rng + ?Sized>(spec: &CorpusSpec, tokens: &[usize], rng: &mut R) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let tok_len = (spec.token_secs * sr).round() as usize;
    let gap = (spec.gap_secs * sr).round() as usize;
    let gain = rng.gen_range(0.5..0.9);
    let mut out = vec![0.0; gap];
    for &t in tokens {
        out.extend(token_waveform(t, tok_len).into_iter().map(|v| v * gain));
        out.extend(std::iter::repeat(0.0).take(gap));
    }
    let target = (rng.gen_range(spec.duration_range.0..=spec.duration_range.1) * sr) as usize;
    if out.len() < target {
        out.resize(target, 0.0);
    }
    out
}

/// Exponentially decaying random room response with a unit direct path.
pub fn synthetic_rir<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Waveform {
    let decay = rng.gen_range(200.0..600.0);
    let mut h: Vec<f64> = (0..len)
        .map(|i| 0.3 * (-(i as f64) / decay).exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    h[0] = 1.0;
    Waveform::from_samples(h).expect("finite RIR")
}

pub fn synthetic_rir_pool(count: usize, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_0000);
    (0..count).map(|_| synthetic_rir(800, &mut rng)).collect()
}

/// White and low-passed Gaussian noise clips.
pub fn synthetic_noise_pool(count: usize, len: usize, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9015_0000);
    (0..count)
        .map(|i| {
            let white: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
            let samples = if i % 2 == 0 {
                white
            } else {
                let mut y = 0.0;
                white.iter().map(|&x| {
                    y = 0.9 * y + x;
                    y
                }).collect()
            };
            Waveform::from_samples(samples).expect("finite noise")
        })
        .collect()
}

/// Parameters drawn for a multichannel utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub delays: Vec<usize>,
    /// Per-channel SNR in dB, absent without noise.
    pub snr: Option<Vec<f64>>,
    pub rir_id: Option<Vec<usize>>,
}

/// One generated utterance with the intermediate signals kept for checks.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub id: String,
    pub transcript: String,
    pub clean: Waveform,
    /// Per-channel signal before noise (reverberated and delayed).
    pub reverberant: Vec<Vec<f64>>,
    /// Per-channel noise exactly as added.
    pub noise: Vec<Vec<f64>>,
    pub recording: MultiChannelRecording,
    pub ground_truth: GroundTruth,
}

fn delay_signal(x: &[f64], d: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    y[d.min(x.len())..].copy_from_slice(&x[..x.len() - d.min(x.len())]);
    y
}

/// Generates the corpus in memory. A pure function of `spec`.
pub fn synthesize(spec: &CorpusSpec, vocab: &Vocabulary) -> Result<Vec<SynthUtterance>> {
    spec.validate(vocab)?;
    let rirs = match &spec.condition {
        Condition::NoisyMultichannel {
            rir: RirSource::Synthetic { pool_size },
            ..
        } => synthetic_rir_pool(*pool_size, spec.seed),
        _ => Vec::new(),
    };
    (0..spec.num_utterances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let tokens = draw_tokens(spec, vocab, &mut rng);
            let clean = Waveform::from_samples(render_tokens(spec, &tokens, &mut rng))?;
            let id = format!("{}-{i:05}", spec.id_prefix);
            let transcript = vocab.decode(&tokens);
            match &spec.condition {
                Condition::Clean => Ok(SynthUtterance {
                    id,
                    transcript,
                    reverberant: vec![clean.samples().to_vec()],
                    noise: vec![vec![0.0; clean.len()]],
                    recording: MultiChannelRecording::mono(clean.clone()),
                    clean,
                    ground_truth: GroundTruth {
                        delays: vec![0],
                        snr: None,
                        rir_id: None,
                    },
                }),
                Condition::NoisyMultichannel {
                    num_channels,
                    delay_range,
                    snr_range_db,
                    ..
                } => {
                    let mut reverberant = Vec::new();
                    let mut noise = Vec::new();
                    let mut delays = Vec::new();
                    let mut snrs = Vec::new();
                    let mut rir_ids = Vec::new();
                    for _ in 0..*num_channels {
                        let wet = if rirs.is_empty() {
                            clean.samples().to_vec()
                        } else {
                            let r = rng.gen_range(0..rirs.len());
                            rir_ids.push(r);
                            convolve_rir(&clean, &rirs[r])?.into_samples()
                        };
                        let d = rng.gen_range(delay_range.0..=delay_range.1);
                        delays.push(d);
                        let wet = delay_signal(&wet, d);
                        let n = match snr_range_db {
                            Some((lo, hi)) => {
                                let snr = rng.gen_range(*lo..=*hi);
                                snrs.push(snr);
                                let raw: Vec<f64> =
                                    (0..wet.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                                let alpha = snr_gain(&wet, &raw, snr)?;
                                raw.into_iter().map(|v| v * alpha).collect()
                            }
                            None => vec![0.0; wet.len()],
                        };
                        reverberant.push(wet);
                        noise.push(n);
                    }
                    let peak = reverberant
                        .iter()
                        .zip(&noise)
                        .flat_map(|(s, n)| s.iter().zip(n).map(|(a, b)| (a + b).abs()))
                        .fold(0.0f64, f64::max);
                    if peak > PEAK_LIMIT {
                        let g = PEAK_LIMIT / peak;
                        for v in reverberant.iter_mut().chain(noise.iter_mut()).flatten() {
                            *v *= g;
                        }
                    }
                    let channels = reverberant
                        .iter()
                        .zip(&noise)
                        .map(|(s, n)| Waveform::from_samples(s.iter().zip(n).map(|(a, b)| a + b).collect()))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(SynthUtterance {
                        id,
                        transcript,
                        clean,
                        reverberant,
                        noise,
                        recording: MultiChannelRecording::new(channels)?,
                        ground_truth: GroundTruth {
                            delays,
                            snr: snr_range_db.map(|_| snrs),
                            rir_id: (!rir_ids.is_empty()).then_some(rir_ids),
                        },
                    })
                }
            }
        })
        .collect()
}

/// One line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub schema: u32,
    pub utterance_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub audio_path: String,
    pub channels: usize,
    pub transcript: Option<String>,
    pub condition: String,
    pub ground_truth: GroundTruth,
}

/// JSON-lines corpus index.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

/// An utterance loaded into memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub recording: MultiChannelRecording,
    pub transcript: Option<String>,
}

impl From<&SynthUtterance> for Utterance {
    fn from(u: &SynthUtterance) -> Self {
        Utterance {
            id: u.id.clone(),
            recording: u.recording.clone(),
            transcript: Some(u.transcript.clone()),
        }
    }
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if rec.schema != MANIFEST_SCHEMA {
                return Err(Error::Version(format!(
                    "manifest schema {} (supported: {MANIFEST_SCHEMA})",
                    rec.schema
                )));
            }
            records.push(rec);
        }
        Ok(Self {
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio_path(&self, rec: &ManifestRecord) -> PathBuf {
        let p = Path::new(&rec.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads every referenced WAV file.
    pub fn load(&self) -> Result<Vec<Utterance>> {
        self.records
            .iter()
            .map(|rec| {
                let recording = read_wav(self.audio_path(rec))?;
                if recording.num_channels() != rec.channels {
                    return Err(Error::Data(format!(
                        "{}: manifest lists {} channels, file has {}",
                        rec.utterance_id,
                        rec.channels,
                        recording.num_channels()
                    )));
                }
                Ok(Utterance {
                    id: rec.utterance_id.clone(),
                    recording,
                    transcript: rec.transcript.clone(),
                })
            })
            .collect()
    }
}

fn write_corpus(spec: &CorpusSpec, utts: &[SynthUtterance], out_dir: &Path) -> Result<Manifest> {
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let condition = match spec.condition {
        Condition::Clean => "clean",
        Condition::NoisyMultichannel { .. } => "noisy_multichannel",
    };
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("audio/{}.wav", u.id);
        write_wav(&u.recording, out_dir.join(&rel))?;
        records.push(ManifestRecord {
            schema: MANIFEST_SCHEMA,
            utterance_id: u.id.clone(),
            audio_path: rel,
            channels: u.recording.num_channels(),
            transcript: Some(u.transcript.clone()),
            condition: condition.into(),
            ground_truth: u.ground_truth.clone(),
        });
    }
    let manifest = Manifest {
        records,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Writes a clean corpus (WAV files and `manifest.jsonl`) under `out_dir`.
pub fn generate_clean_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if spec.condition != Condition::Clean {
        return Err(Error::Argument("clean corpus requires the clean condition".into()));
    }
    let vocab = Vocabulary::default();
    write_corpus(spec, &synthesize(spec, &vocab)?, out_dir.as_ref())
}

/// Writes a noisy multichannel corpus under `out_dir`.
pub fn generate_multichannel_corpus(spec: &CorpusSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if spec.condition == Condition::Clean {
        return Err(Error::Argument("multichannel corpus requires the noisy_multichannel condition".into()));
    }
    let vocab = Vocabulary::default();
    write_corpus(spec, &synthesize(spec, &vocab)?, out_dir.as_ref())
}
