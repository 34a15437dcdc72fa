//! Reverberation and additive noise.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::{rms_power, Waveform};
use crate::error::{Error, Result};

/// Full linear convolution computed through the FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a.truncate(out_len);
    a.into_iter().map(|c| c.re / n as f64).collect()
}

/// Scales `y` so its peak magnitude equals `target_peak`. All-zero input is
/// returned unchanged.
pub fn peak_normalize(mut y: Vec<f64>, target_peak: f64) -> Vec<f64> {
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = target_peak / peak;
        y.iter_mut().for_each(|v| *v *= g);
    }
    y
}

/// Convolves `w` with a room impulse response, truncated to the input length
/// and peak-normalized to the input's max magnitude.
pub fn convolve_rir(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if w.sample_rate() != rir.sample_rate() {
        return Err(Error::Argument(format!(
            "sample rate mismatch: signal {} Hz, rir {} Hz",
            w.sample_rate(),
            rir.sample_rate()
        )));
    }
    let mut y = fft_convolve(w.samples(), rir.samples());
    y.truncate(w.len());
    w.with_samples(peak_normalize(y, w.max_abs()))
}

/// Noise segment of exactly `len` samples: a random crop when the noise is
/// longer, a tiling from a random offset when shorter.
pub fn fit_noise_length<R: Rng + ?Sized>(noise: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    match noise.len().cmp(&len) {
        std::cmp::Ordering::Equal => noise.to_vec(),
        std::cmp::Ordering::Greater => {
            let start = rng.gen_range(0..=noise.len() - len);
            noise[start..start + len].to_vec()
        }
        std::cmp::Ordering::Less => {
            let offset = rng.gen_range(0..noise.len());
            (0..len).map(|i| noise[(offset + i) % noise.len()]).collect()
        }
    }
}

/// The components of an additive mixture.
#[derive(Debug, Clone)]
pub struct NoisyMix {
    pub mixture: Waveform,
    /// The noise exactly as added, i.e. `alpha * noise_segment`.
    pub scaled_noise: Vec<f64>,
    pub alpha: f64,
}

/// Gain that puts `noise` at `snr_db` below `signal`.
pub fn snr_gain(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    let ps = rms_power(signal)?;
    let pn = rms_power(noise)?;
    if ps == 0.0 {
        return Err(Error::Degenerate("signal has zero power".into()));
    }
    if pn == 0.0 {
        return Err(Error::Degenerate("noise has zero power".into()));
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Adds `noise` to `w` at the requested signal-to-noise ratio.
pub fn mix_noise<R: Rng + ?Sized>(
    w: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut R,
) -> Result<NoisyMix> {
    if w.sample_rate() != noise.sample_rate() {
        return Err(Error::Argument("signal and noise sample rates differ".into()));
    }
    let segment = fit_noise_length(noise.samples(), w.len(), rng);
    let alpha = snr_gain(w.samples(), &segment, snr_db)?;
    let scaled_noise: Vec<f64> = segment.iter().map(|n| alpha * n).collect();
    let mixed = w
        .samples()
        .iter()
        .zip(&scaled_noise)
        .map(|(s, n)| s + n)
        .collect();
    Ok(NoisyMix {
        mixture: w.with_samples(mixed)?,
        scaled_noise,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::snr_db;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() + h.len() - 1];
        for (i, xv) in x.iter().enumerate() {
            for (j, hv) in h.iter().enumerate() {
                y[i + j] += xv * hv;
            }
        }
        y
    }

    #[test]
    fn impulse_rir_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..300).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let w = Waveform::from_samples(x.clone()).unwrap();
        let rir = Waveform::from_samples(vec![1.0]).unwrap();
        let y = convolve_rir(&w, &rir).unwrap();
        for (a, b) in x.iter().zip(y.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_impulse_delays() {
        let d = 9;
        // peak early in the signal so truncation keeps it
        let mut x = vec![0.1; 200];
        x[3] = 0.8;
        let w = Waveform::from_samples(x.clone()).unwrap();
        let mut h = vec![0.0; d + 1];
        h[d] = 1.0;
        let y = convolve_rir(&w, &Waveform::from_samples(h).unwrap()).unwrap();
        assert!(y.samples()[..d].iter().all(|v| v.abs() < 1e-12));
        for i in d..200 {
            assert!((y.samples()[i] - x[i - d]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = fft_convolve(&x, &h);
        let slow = naive_convolve(&x, &h);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10);
        }
        let w = Waveform::from_samples(x.clone()).unwrap();
        let y = convolve_rir(&w, &Waveform::from_samples(h).unwrap()).unwrap();
        let expected = peak_normalize(slow[..x.len()].to_vec(), w.max_abs());
        for (a, b) in y.samples().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn rate_mismatch_rejected() {
        let w = Waveform::new(vec![0.1; 10], 16000).unwrap();
        let h = Waveform::new(vec![1.0], 8000).unwrap();
        assert!(matches!(convolve_rir(&w, &h), Err(Error::Argument(_))));
    }

    #[test]
    fn snr_gain_examples() {
        let s = vec![1.0, -1.0, 1.0, -1.0];
        let n = vec![-1.0, -1.0, 1.0, 1.0];
        assert!((snr_gain(&s, &n, 20.0).unwrap() - 0.1).abs() < 1e-12);
        assert!((snr_gain(&s, &n, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            snr_gain(&[0.0; 4], &n, 10.0),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            snr_gain(&s, &[0.0; 4], 10.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn measured_snr_matches_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for target in [0.0, 10.0, 17.5, 40.0] {
            let s: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let n: Vec<f64> = (0..2500).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let mix = mix_noise(
                &Waveform::from_samples(s.clone()).unwrap(),
                &Waveform::from_samples(n).unwrap(),
                target,
                &mut rng,
            )
            .unwrap();
            let measured = snr_db(&s, &mix.scaled_noise).unwrap();
            assert!((measured - target).abs() <= 0.1, "{measured} vs {target}");
            assert_eq!(mix.mixture.len(), s.len());
        }
    }

    #[test]
    fn noise_fitting_is_seed_deterministic() {
        let noise: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let a = fit_noise_length(&noise, 120, &mut ChaCha8Rng::seed_from_u64(9));
        let b = fit_noise_length(&noise, 120, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.len(), 120);
        let c = fit_noise_length(&noise, 20, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(c.len(), 20);
        assert!(c.windows(2).all(|p| p[1] == p[0] + 1.0));
    }
}
