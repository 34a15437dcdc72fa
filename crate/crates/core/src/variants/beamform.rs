//! GCC-PHAT delay estimation and delay-and-sum beamforming.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{MultiChannelRecording, Waveform};
use crate::error::{Error, Result};

/// Integer lag of `ch` relative to `reference` that maximizes the
/// phase-transform weighted cross-correlation within `±max_lag`.
///
/// A positive lag means `ch` is a delayed copy: `ch[n] ≈ reference[n - lag]`.
pub fn estimate_delay(reference: &Waveform, ch: &Waveform, max_lag: usize) -> Result<i64> {
    let n = reference.len();
    if ch.len() != n {
        return Err(Error::Argument(format!(
            "channel lengths differ: {} vs {}",
            n,
            ch.len()
        )));
    }
    if 2 * max_lag >= n {
        return Err(Error::Argument(format!(
            "max_lag {max_lag} must be below half the length {n}"
        )));
    }
    let energy = |w: &Waveform| w.samples().iter().map(|s| s * s).sum::<f64>();
    if energy(reference) == 0.0 || energy(ch) == 0.0 {
        return Err(Error::Degenerate("zero-energy channel in delay estimation".into()));
    }

    let size = (2 * n).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let spectrum = |x: &[f64]| {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(size, Complex::new(0.0, 0.0));
        fwd.process(&mut buf);
        buf
    };
    let r = spectrum(reference.samples());
    let mut cross = spectrum(ch.samples());
    let floor = 1e-12 * cross.iter().zip(&r).fold(0.0f64, |m, (a, b)| m.max((a * b.conj()).norm()));
    for (c, rv) in cross.iter_mut().zip(&r) {
        let g = *c * rv.conj();
        *c = g / (g.norm() + floor);
    }
    inv.process(&mut cross);

    let at = |lag: i64| {
        let idx = if lag >= 0 { lag as usize } else { size - (-lag) as usize };
        cross[idx].re
    };
    let max_lag = max_lag as i64;
    let mut best = 0i64;
    let mut best_val = at(0);
    for lag in -max_lag..=max_lag {
        let v = at(lag);
        if v > best_val {
            best = lag;
            best_val = v;
        }
    }
    Ok(best)
}

/// Shifts `x` earlier by `lag` samples (later when negative), zero-filling
/// the vacated edge.
pub fn advance(x: &[f64], lag: i64) -> Vec<f64> {
    let n = x.len() as i64;
    (0..n)
        .map(|i| {
            let j = i + lag;
            if (0..n).contains(&j) {
                x[j as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Beamformer output together with the per-channel lags that were applied.
#[derive(Debug, Clone)]
pub struct Beamformed {
    pub output: Waveform,
    pub lags: Vec<i64>,
}

/// Aligns every channel to `ref_channel` by its estimated delay and averages.
pub fn delay_and_sum(
    rec: &MultiChannelRecording,
    ref_channel: usize,
    max_lag: usize,
) -> Result<Beamformed> {
    if rec.num_channels() < 2 {
        return Err(Error::Argument("delay-and-sum needs at least two channels".into()));
    }
    if ref_channel >= rec.num_channels() {
        return Err(Error::Argument(format!(
            "reference channel {ref_channel} out of range for {} channels",
            rec.num_channels()
        )));
    }
    let reference = rec.channel(ref_channel);
    let mut sum = vec![0.0; rec.len()];
    let mut lags = Vec::with_capacity(rec.num_channels());
    for (c, ch) in rec.channels().iter().enumerate() {
        let lag = if c == ref_channel {
            0
        } else {
            estimate_delay(reference, ch, max_lag)?
        };
        for (s, v) in sum.iter_mut().zip(advance(ch.samples(), lag)) {
            *s += v;
        }
        lags.push(lag);
    }
    let m = rec.num_channels() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    Ok(Beamformed {
        output: reference.with_samples(sum)?,
        lags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect()
    }

    fn wf(x: Vec<f64>) -> Waveform {
        Waveform::from_samples(x).unwrap()
    }

    #[test]
    fn identical_channels_have_zero_lag() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = wf(noise(2048, &mut rng));
        assert_eq!(estimate_delay(&x, &x, 50).unwrap(), 0);
    }

    #[test]
    fn constructed_delays_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = noise(4000, &mut rng);
        for d in [-20i64, -3, 1, 7, 33] {
            let delayed = advance(&x, -d);
            assert_eq!(estimate_delay(&wf(x.clone()), &wf(delayed), 64).unwrap(), d);
        }
    }

    #[test]
    fn delay_with_noise_at_20db() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = noise(4000, &mut rng);
        let mut delayed = advance(&x, 3);
        let n = noise(4000, &mut rng);
        let alpha = crate::variants::mix::snr_gain(&delayed, &n, 20.0).unwrap();
        delayed.iter_mut().zip(&n).for_each(|(d, v)| *d += alpha * v);
        assert_eq!(estimate_delay(&wf(x), &wf(delayed), 64).unwrap(), -3);
    }

    #[test]
    fn degenerate_and_bad_arguments() {
        let z = wf(vec![0.0; 100]);
        let x = wf(vec![0.5; 100]);
        assert!(matches!(estimate_delay(&z, &x, 10), Err(Error::Degenerate(_))));
        assert!(matches!(estimate_delay(&x, &x, 50), Err(Error::Argument(_))));
        let mono = MultiChannelRecording::mono(x);
        assert!(delay_and_sum(&mono, 0, 10).is_err());
    }

    #[test]
    fn identical_channels_sum_to_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = wf(noise(1000, &mut rng));
        let rec = MultiChannelRecording::new(vec![x.clone(), x.clone(), x.clone()]).unwrap();
        let out = delay_and_sum(&rec, 0, 20).unwrap();
        for (a, b) in out.output.samples().iter().zip(x.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn known_offset_is_aligned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = noise(2000, &mut rng);
        let ch1 = advance(&x, -5);
        let rec = MultiChannelRecording::new(vec![wf(x.clone()), wf(ch1)]).unwrap();
        let out = delay_and_sum(&rec, 0, 20).unwrap();
        assert_eq!(out.lags, vec![0, 5]);
        for i in 10..1990 {
            assert!((out.output.samples()[i] - x[i]).abs() < 1e-10);
        }
    }
}
