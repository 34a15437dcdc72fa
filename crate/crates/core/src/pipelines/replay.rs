//! Source-data replay for continual pre-training.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratio `r:c` of target-domain data to replayed source data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayRate {
    pub target: u32,
    pub source: u32,
}

impl ReplayRate {
    pub fn new(target: u32, source: u32) -> Result<Self> {
        if target == 0 {
            return Err(Error::Argument("replay rate needs a positive target share".into()));
        }
        Ok(Self { target, source })
    }

    /// Expected share of target-domain draws, `r/(r+c)`.
    pub fn target_fraction(&self) -> f64 {
        self.target as f64 / (self.target + self.source) as f64
    }
}

impl Default for ReplayRate {
    fn default() -> Self {
        Self { target: 1, source: 1 }
    }
}

impl fmt::Display for ReplayRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.target, self.source)
    }
}

impl FromStr for ReplayRate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("replay rate '{s}' is not of the form r:c")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| Error::Argument(format!("replay rate '{s}' is not of the form r:c")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

impl Serialize for ReplayRate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ReplayRate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Which corpus a draw came from, with its index there.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixSlot {
    Target(usize),
    Replay(usize),
}

/// `D_r` together with a replay subset `D'_c` of the source corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayMixture {
    /// Indices into the target corpus (all of it).
    pub target: Vec<usize>,
    /// Indices into the source corpus, drawn without replacement.
    pub replay: Vec<usize>,
    pub rate: ReplayRate,
}

/// Samples `D'_c` with `|D'_c| = round(|D_r|·c/r)`.
pub fn build_replay_mixture<R: Rng + ?Sized>(
    target_len: usize,
    source_len: usize,
    rate: ReplayRate,
    rng: &mut R,
) -> Result<ReplayMixture> {
    if target_len == 0 {
        return Err(Error::Argument("target corpus is empty".into()));
    }
    let want = (target_len as f64 * rate.source as f64 / rate.target as f64).round() as usize;
    if want > source_len {
        return Err(Error::Argument(format!(
            "replay rate {rate} needs {want} source utterances, only {source_len} available"
        )));
    }
    let mut replay = sample(rng, source_len, want).into_vec();
    replay.sort_unstable();
    Ok(ReplayMixture {
        target: (0..target_len).collect(),
        replay,
        rate,
    })
}

impl ReplayMixture {
    pub fn len(&self) -> usize {
        self.target.len() + self.replay.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draw fraction of the target corpus under uniform sampling of the union.
    pub fn target_fraction(&self) -> f64 {
        self.target.len() as f64 / self.len() as f64
    }

    pub fn get(&self, i: usize) -> MixSlot {
        if i < self.target.len() {
            MixSlot::Target(self.target[i])
        } else {
            MixSlot::Replay(self.replay[i - self.target.len()])
        }
    }

    /// `size` uniform draws (with replacement) over `D'_c ∪ D_r`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<MixSlot> {
        (0..size).map(|_| self.get(rng.gen_range(0..self.len()))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sizes_follow_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = build_replay_mixture(50, 200, ReplayRate::new(1, 1).unwrap(), &mut rng).unwrap();
        assert_eq!(m.replay.len(), 50);
        assert_eq!(m.target_fraction(), 0.5);
        let m = build_replay_mixture(50, 200, "1:3".parse().unwrap(), &mut rng).unwrap();
        assert_eq!(m.target_fraction(), 0.25);
        let m = build_replay_mixture(50, 500, "1:9".parse().unwrap(), &mut rng).unwrap();
        assert!((m.target_fraction() - 0.1).abs() < 1e-12);
        let mut sorted = m.replay.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 450);
    }

    #[test]
    fn no_replay_is_pure_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = build_replay_mixture(10, 0, "1:0".parse().unwrap(), &mut rng).unwrap();
        assert!(m.replay.is_empty());
        assert!(m.sample_batch(100, &mut rng).iter().all(|s| matches!(s, MixSlot::Target(_))));
    }

    #[test]
    fn rejects_bad_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(build_replay_mixture(50, 100, "1:9".parse().unwrap(), &mut rng).is_err());
        assert!("0:1".parse::<ReplayRate>().is_err());
        assert!("3".parse::<ReplayRate>().is_err());
        assert_eq!("2:5".parse::<ReplayRate>().unwrap().to_string(), "2:5");
    }
}
