//! Tempo-preserving pitch shift: phase-vocoder time stretch followed by
//! resampling back to the original length.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

const N_FFT: usize = 512;
const HOP: usize = 128;

fn hann(n: usize) -> Vec<f64> {
    // periodic Hann, COLA at 75% overlap
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

struct Stft {
    frames: Vec<Vec<Complex<f64>>>,
}

fn stft(x: &[f64], window: &[f64], planner: &mut FftPlanner<f64>) -> Stft {
    let pad = N_FFT / 2;
    let mut padded = vec![0.0; x.len() + 2 * pad];
    padded[pad..pad + x.len()].copy_from_slice(x);
    let fft = planner.plan_fft_forward(N_FFT);
    let n_frames = 1 + (padded.len() - N_FFT) / HOP;
    let frames = (0..n_frames)
        .map(|f| {
            let start = f * HOP;
            let mut buf: Vec<Complex<f64>> = (0..N_FFT)
                .map(|i| Complex::new(padded[start + i] * window[i], 0.0))
                .collect();
            fft.process(&mut buf);
            buf.truncate(N_FFT / 2 + 1);
            buf
        })
        .collect();
    Stft { frames }
}

fn istft(
    frames: &[Vec<Complex<f64>>],
    window: &[f64],
    length: usize,
    planner: &mut FftPlanner<f64>,
) -> Vec<f64> {
    let pad = N_FFT / 2;
    let total = (frames.len().saturating_sub(1)) * HOP + N_FFT;
    let mut out = vec![0.0; total.max(length + 2 * pad)];
    let mut norm = vec![0.0; out.len()];
    let ifft = planner.plan_fft_inverse(N_FFT);
    for (f, half) in frames.iter().enumerate() {
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        buf[..half.len()].copy_from_slice(half);
        for k in 1..N_FFT / 2 {
            buf[N_FFT - k] = half[k].conj();
        }
        ifft.process(&mut buf);
        let start = f * HOP;
        for i in 0..N_FFT {
            out[start + i] += buf[i].re / N_FFT as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..length)
        .map(|i| {
            let j = i + pad;
            let n = norm.get(j).copied().unwrap_or(0.0);
            if n > 1e-10 {
                out[j] / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Stretches `x` in time by `1 / rate` without changing its pitch.
/// Output length is `round(len / rate)`.
pub fn time_stretch(x: &[f64], rate: f64) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let window = hann(N_FFT);
    let spec = stft(x, &window, &mut planner);
    let n_bins = N_FFT / 2 + 1;
    let n_frames = spec.frames.len();
    let advance: Vec<f64> = (0..n_bins)
        .map(|k| 2.0 * PI * HOP as f64 * k as f64 / N_FFT as f64)
        .collect();

    let mut phase: Vec<f64> = spec.frames[0].iter().map(|c| c.arg()).collect();
    let mut out_frames = Vec::new();
    let mut t = 0.0f64;
    let zero = vec![Complex::new(0.0, 0.0); n_bins];
    while t < n_frames as f64 {
        let i = t.floor() as usize;
        let alpha = t - i as f64;
        let a = &spec.frames[i];
        let b = spec.frames.get(i + 1).unwrap_or(&zero);
        let frame: Vec<Complex<f64>> = (0..n_bins)
            .map(|k| {
                let mag = (1.0 - alpha) * a[k].norm() + alpha * b[k].norm();
                Complex::from_polar(mag, phase[k])
            })
            .collect();
        for k in 0..n_bins {
            let mut dphi = b[k].arg() - a[k].arg() - advance[k];
            dphi -= 2.0 * PI * (dphi / (2.0 * PI)).round();
            phase[k] += advance[k] + dphi;
        }
        out_frames.push(frame);
        t += rate;
    }
    let length = (x.len() as f64 / rate).round() as usize;
    istft(&out_frames, &window, length, &mut planner)
}

/// Linear-interpolation resampling of `x` onto `length` evenly spaced points.
pub fn resample_to_length(x: &[f64], length: usize) -> Vec<f64> {
    if x.len() == length {
        return x.to_vec();
    }
    let step = x.len() as f64 / length as f64;
    (0..length)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + frac * (b - a)
        })
        .collect()
}

/// Shifts pitch by `semitones` while keeping the exact input length.
pub fn pitch_shift(w: &Waveform, semitones: f64) -> Result<Waveform> {
    if !semitones.is_finite() || semitones.abs() > 12.0 {
        return Err(Error::Argument(format!(
            "pitch shift of {semitones} semitones outside [-12, 12]"
        )));
    }
    let factor = 2f64.powf(semitones / 12.0);
    let stretched = time_stretch(w.samples(), 1.0 / factor);
    w.with_samples(resample_to_length(&stretched, w.len()))
}
