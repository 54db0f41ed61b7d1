//! Welch power spectral density and spectral flatness.

use std::sync::Arc;

use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-sided PSD of a single channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpectrum {
    pub psd: Vec<f64>,
    pub freq_resolution_hz: f64,
    pub channel_index: usize,
}

impl ChannelSpectrum {
    /// Frequency of bin `k` in Hz.
    pub fn frequency(&self, k: usize) -> f64 {
        k as f64 * self.freq_resolution_hz
    }

    /// Integrated power, `sum psd * df`.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.freq_resolution_hz
    }

    /// PSD scaled to sum to one. An all-zero spectrum becomes uniform.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.psd.iter().sum();
        if total > 0.0 {
            self.psd.iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / self.psd.len() as f64; self.psd.len()]
        }
    }

    pub fn peak_bin(&self) -> usize {
        self.psd
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    pub fn flatness(&self) -> f64 {
        spectral_flatness(&self.psd)
    }
}

/// Reusable Welch estimator (periodic Hann window, no detrending,
/// density scaling).
pub struct Welch {
    segment: usize,
    step: usize,
    window: Vec<f64>,
    window_power: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl Welch {
    pub fn new(segment_length: usize, overlap_fraction: f64) -> Result<Self> {
        if segment_length < 2 {
            return Err(Error::config("segment length must be at least 2"));
        }
        if !(0.0..1.0).contains(&overlap_fraction) {
            return Err(Error::config("overlap fraction must lie in [0, 1)"));
        }
        let step = ((segment_length as f64) * (1.0 - overlap_fraction)).round().max(1.0) as usize;
        let window: Vec<f64> = (0..segment_length)
            .map(|i| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / segment_length as f64).cos()
            })
            .collect();
        let window_power = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(segment_length);
        Ok(Self {
            segment: segment_length,
            step,
            window,
            window_power,
            fft,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.segment / 2 + 1
    }

    pub fn n_segments(&self, len: usize) -> usize {
        if len < self.segment {
            0
        } else {
            (len - self.segment) / self.step + 1
        }
    }

    pub fn estimate(&self, channel: &[f64], rate: f64) -> Result<ChannelSpectrum> {
        if channel.len() < self.segment {
            return Err(Error::invalid(
                channel.len(),
                format!("channel has {} samples, segment needs {}", channel.len(), self.segment),
            ));
        }
        if !(rate > 0.0) {
            return Err(Error::config("sample rate must be positive"));
        }
        let bins = self.n_bins();
        let mut psd = vec![0.0; bins];
        let mut buf = vec![Complex::new(0.0, 0.0); self.segment];
        let count = self.n_segments(channel.len());
        for s in 0..count {
            let start = s * self.step;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(channel[start + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, acc) in psd.iter_mut().enumerate() {
                *acc += buf[k].norm_sqr();
            }
        }
        let scale = 1.0 / (rate * self.window_power * count as f64);
        let nyquist = self.segment % 2 == 0;
        for (k, v) in psd.iter_mut().enumerate() {
            let one_sided = if k == 0 || (nyquist && k == bins - 1) { 1.0 } else { 2.0 };
            *v *= scale * one_sided;
        }
        Ok(ChannelSpectrum {
            psd,
            freq_resolution_hz: rate / self.segment as f64,
            channel_index: 0,
        })
    }
}

/// Welch PSD of one channel with a periodic Hann window.
pub fn welch_psd(
    channel: &[f64],
    segment_length: usize,
    overlap_fraction: f64,
    rate: f64,
) -> Result<ChannelSpectrum> {
    Welch::new(segment_length, overlap_fraction)?.estimate(channel, rate)
}

/// Geometric over arithmetic mean of the PSD bins, excluding the DC and
/// Nyquist bins when there are more than two.
pub fn spectral_flatness(psd: &[f64]) -> f64 {
    let bins = if psd.len() > 2 { &psd[1..psd.len() - 1] } else { psd };
    if bins.is_empty() {
        return 0.0;
    }
    let n = bins.len() as f64;
    let arith = bins.iter().sum::<f64>() / n;
    if !(arith > 0.0) {
        return 0.0;
    }
    let log_geo = bins.iter().map(|v| v.max(1e-300).ln()).sum::<f64>() / n;
    (log_geo.exp() / arith).min(1.0)
}
