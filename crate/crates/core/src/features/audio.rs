//! PCM resampling and MFCC extraction.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TARGET_RATE: u32 = 16_000;
pub const SUPPORTED_RATES: [u32; 5] = [8_000, 16_000, 22_050, 44_100, 48_000];
/// 30 ms at 16 kHz.
pub const WINDOW: usize = 480;
/// 10 ms at 16 kHz.
pub const HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_FILTERS: usize = 80;
pub const MFCC_COEFFS: usize = 40;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MEL_LOW_HZ: f64 = 0.0;
pub const MEL_HIGH_HZ: f64 = 8_000.0;

/// Interleaved PCM samples scaled to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Pcm {
    pub samples: Vec<f64>,
    pub channels: u16,
    pub rate: u32,
}

/// Averages channels and linearly resamples to 16 kHz. The output has
/// `round(frames · 16000 / rate)` samples; 16 kHz mono passes through
/// untouched.
pub fn resample_mono(pcm: &Pcm) -> Result<Vec<f64>> {
    if !SUPPORTED_RATES.contains(&pcm.rate) {
        return Err(Error::InvalidArgument(format!("unsupported sample rate {}", pcm.rate)));
    }
    let ch = match pcm.channels {
        1 | 2 => pcm.channels as usize,
        c => return Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    };
    if pcm.samples.is_empty() {
        return Err(Error::InvalidArgument("empty signal".into()));
    }
    if pcm.samples.len() % ch != 0 {
        return Err(Error::InvalidArgument("sample count is not a multiple of the channel count".into()));
    }
    let mono: Vec<f64> = if ch == 1 {
        pcm.samples.clone()
    } else {
        pcm.samples.chunks(2).map(|f| (f[0] + f[1]) / 2.0).collect()
    };
    if pcm.rate == TARGET_RATE {
        return Ok(mono);
    }
    let n_in = mono.len();
    let n_out = (n_in as f64 * f64::from(TARGET_RATE) / f64::from(pcm.rate)).round() as usize;
    let step = f64::from(pcm.rate) / f64::from(TARGET_RATE);
    Ok((0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos.floor() as usize;
            if j + 1 >= n_in {
                return mono[n_in - 1];
            }
            let frac = pos - j as f64;
            mono[j] * (1.0 - frac) + mono[j + 1] * frac
        })
        .collect())
}

pub fn frame_count(len: usize) -> usize {
    if len < WINDOW {
        0
    } else {
        (len - WINDOW) / HOP + 1
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge frequencies of the triangular filters: `MEL_FILTERS + 2` points
/// equally spaced on the mel scale.
pub fn mel_edges() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(MEL_LOW_HZ), hz_to_mel(MEL_HIGH_HZ));
    (0..MEL_FILTERS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_FILTERS + 1) as f64))
        .collect()
}

/// Filter weights `[MEL_FILTERS][FFT_SIZE/2 + 1]`, triangles evaluated at
/// each bin's exact frequency.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let edges = mel_edges();
    let bins = FFT_SIZE / 2 + 1;
    (0..MEL_FILTERS)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * f64::from(TARGET_RATE) / FFT_SIZE as f64;
                    if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

pub fn hann_window() -> Vec<f64> {
    (0..WINDOW)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (WINDOW - 1) as f64).cos())
        .collect()
}

/// Reusable MFCC pipeline.
pub struct Mfcc {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
}

impl Default for Mfcc {
    fn default() -> Self {
        Self::new()
    }
}

impl Mfcc {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        // Orthonormal DCT-II rows.
        let m = MEL_FILTERS as f64;
        let dct = (0..MFCC_COEFFS)
            .map(|k| {
                let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
                (0..MEL_FILTERS)
                    .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / m).cos())
                    .collect()
            })
            .collect();
        Self { fft, window: hann_window(), filters: mel_filterbank(), dct }
    }

    /// Magnitude spectrum of each frame, `FFT_SIZE/2 + 1` bins.
    pub fn spectra(&self, pcm16k: &[f64]) -> Result<Vec<Vec<f64>>> {
        let frames = frame_count(pcm16k.len());
        if frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than one {WINDOW}-sample window",
                pcm16k.len()
            )));
        }
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        Ok((0..frames)
            .map(|f| {
                let start = f * HOP;
                for (i, b) in buf.iter_mut().enumerate() {
                    let v = if i < WINDOW { pcm16k[start + i] * self.window[i] } else { 0.0 };
                    *b = Complex::new(v, 0.0);
                }
                self.fft.process(&mut buf);
                buf[..=FFT_SIZE / 2].iter().map(|c| c.norm()).collect()
            })
            .collect())
    }

    /// Mel filter energies per frame, before the logarithm.
    pub fn mel_energies(&self, pcm16k: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.spectra(pcm16k)?.iter().map(|s| apply_filters(&self.filters, s)).collect())
    }

    /// `[frames, MFCC_COEFFS]` coefficients.
    pub fn compute(&self, pcm16k: &[f64]) -> Result<Tensor<f64>> {
        let energies = self.mel_energies(pcm16k)?;
        let frames = energies.len();
        let mut data = Vec::with_capacity(frames * MFCC_COEFFS);
        for e in energies {
            let logs: Vec<f64> = e.iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
            for row in &self.dct {
                data.push(row.iter().zip(&logs).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(&[frames, MFCC_COEFFS], data)
    }
}

pub fn apply_filters(filters: &[Vec<f64>], spectrum: &[f64]) -> Vec<f64> {
    filters
        .iter()
        .map(|w| w.iter().zip(spectrum).map(|(a, b)| a * b).sum())
        .collect()
}

/// One-shot MFCC of a 16 kHz mono signal.
pub fn mfcc(pcm16k: &[f64]) -> Result<Tensor<f64>> {
    Mfcc::new().compute(pcm16k)
}
