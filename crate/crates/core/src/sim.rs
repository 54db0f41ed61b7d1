//! Synthetic multibeam sonar: tonal targets drifting across beams in
//! additive white Gaussian noise, plus the signal container file format.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitude giving a per-tone SNR of -5 dB against unit-variance noise.
pub const WEAK_TONE_AMPLITUDE: f64 = 0.795_271_670_170_796_4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub tonal_freqs_hz: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Track start, in (possibly fractional) beam units.
    pub start_beam: f64,
    pub end_beam: f64,
    /// Gaussian spread across neighbouring beams, in beams.
    pub beam_sigma: f64,
}

impl TargetSpec {
    /// Track position at time fraction `u` in `[0, 1]`.
    pub fn center_at(&self, u: f64) -> f64 {
        self.start_beam + (self.end_beam - self.start_beam) * u
    }

    /// Peak-normalized beam weight at `beam` with the track at `center`.
    pub fn beam_gain(&self, beam: f64, center: f64) -> f64 {
        let d = beam - center;
        (-d * d / (2.0 * self.beam_sigma * self.beam_sigma)).exp()
    }

    /// Largest gain the track ever gives `beam`.
    pub fn peak_gain(&self, beam: f64) -> f64 {
        let (lo, hi) = if self.start_beam <= self.end_beam {
            (self.start_beam, self.end_beam)
        } else {
            (self.end_beam, self.start_beam)
        };
        self.beam_gain(beam, beam.clamp(lo, hi))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_beams: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub targets: Vec<TargetSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    /// Desk-scale scenario: 8 s of 64 beams at 4096 Hz with three weak
    /// tonal targets around beams 1-2, 32-33 and 55.
    fn default() -> Self {
        let target = |freqs: [f64; 2], start: f64, end: f64| TargetSpec {
            tonal_freqs_hz: freqs.to_vec(),
            amplitudes: vec![WEAK_TONE_AMPLITUDE; 2],
            start_beam: start,
            end_beam: end,
            beam_sigma: 0.35,
        };
        Self {
            n_beams: 64,
            sample_rate_hz: 4096.0,
            duration_s: 8.0,
            targets: vec![
                target([150.0, 410.0], 1.0, 2.0),
                target([260.0, 705.0], 32.0, 33.0),
                target([330.0, 880.0], 55.0, 55.0),
            ],
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_beams == 0 {
            return Err(Error::config("n_beams must be at least 1"));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::config("sample_rate_hz must be positive"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::config("duration_s must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if self.n_samples() == 0 {
            return Err(Error::config("duration shorter than one sample"));
        }
        let nyquist = self.sample_rate_hz / 2.0;
        let last_beam = (self.n_beams - 1) as f64;
        for (i, t) in self.targets.iter().enumerate() {
            if t.tonal_freqs_hz.len() != t.amplitudes.len() {
                return Err(Error::config(format!(
                    "target {i}: {} frequencies but {} amplitudes",
                    t.tonal_freqs_hz.len(),
                    t.amplitudes.len()
                )));
            }
            if let Some(f) = t.tonal_freqs_hz.iter().find(|f| !(**f > 0.0 && **f < nyquist)) {
                return Err(Error::config(format!(
                    "target {i}: frequency {f} Hz outside (0, {nyquist})"
                )));
            }
            if t.amplitudes.iter().any(|a| !a.is_finite()) {
                return Err(Error::config(format!("target {i}: non-finite amplitude")));
            }
            for b in [t.start_beam, t.end_beam] {
                if !(0.0..=last_beam).contains(&b) {
                    return Err(Error::config(format!(
                        "target {i}: beam {b} outside [0, {last_beam}]"
                    )));
                }
            }
            if !(t.beam_sigma > 0.0) {
                return Err(Error::config(format!("target {i}: beam_sigma must be positive")));
            }
        }
        Ok(())
    }

    /// Beams some target reaches with at least `min_gain` of its peak amplitude.
    pub fn target_beams(&self, min_gain: f64) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for t in &self.targets {
            for b in 0..self.n_beams {
                if t.peak_gain(b as f64) >= min_gain {
                    set.insert(b);
                }
            }
        }
        set.into_iter().collect()
    }
}

/// Where a signal came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub config_hash: Option<String>,
}

/// Beam-major samples with their sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MultichannelSignal {
    pub channels: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub provenance: Provenance,
}

impl MultichannelSignal {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: f64) -> Result<Self> {
        let n = channels.first().map_or(0, Vec::len);
        if let Some(i) = channels.iter().position(|c| c.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: channels[i].len(),
            });
        }
        if !(sample_rate_hz > 0.0) {
            return Err(Error::config("sample rate must be positive"));
        }
        Ok(Self {
            channels,
            sample_rate_hz,
            provenance: Provenance::default(),
        })
    }

    pub fn n_beams(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// The beam values at sample `t`.
    pub fn slice_at(&self, t: usize) -> Vec<f64> {
        self.channels.iter().map(|c| c[t]).collect()
    }

    /// Samples `[start, start + len)` of every beam.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.n_samples() {
            return Err(Error::invalid(
                start + len,
                format!("window exceeds {} samples", self.n_samples()),
            ));
        }
        Ok(Self {
            channels: self.channels.iter().map(|c| c[start..start + len].to_vec()).collect(),
            sample_rate_hz: self.sample_rate_hz,
            provenance: self.provenance.clone(),
        })
    }
}

const MAGIC: &str = "NSSIG 1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader {
    n_beams: usize,
    n_samples: usize,
    sample_rate_hz: f64,
    endianness: String,
    sample_format: String,
    seed: Option<u64>,
    config: serde_json::Value,
    config_hash: Option<String>,
}

impl MultichannelSignal {
    /// Writes the container: a magic line, a one-line JSON header, then
    /// little-endian `f32` samples, beam-major.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = ContainerHeader {
            n_beams: self.n_beams(),
            n_samples: self.n_samples(),
            sample_rate_hz: self.sample_rate_hz,
            endianness: "little".into(),
            sample_format: "f32".into(),
            seed: self.provenance.seed,
            config: self.provenance.config.clone(),
            config_hash: self.provenance.config_hash.clone(),
        };
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{}", serde_json::to_string(&header)?)?;
        let mut bytes = Vec::with_capacity(self.n_beams() * self.n_samples() * 4);
        for c in &self.channels {
            for &v in c {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Format("not a signal container".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: ContainerHeader = serde_json::from_str(line.trim_end())?;
        if header.endianness != "little" || header.sample_format != "f32" {
            return Err(Error::Format(format!(
                "unsupported sample encoding {} {}",
                header.endianness, header.sample_format
            )));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = header.n_beams * header.n_samples * 4;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} sample bytes, found {}",
                bytes.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let channels = (0..header.n_beams)
            .map(|_| values.by_ref().take(header.n_samples).collect())
            .collect();
        let mut sig = MultichannelSignal::new(channels, header.sample_rate_hz)?;
        sig.provenance = Provenance {
            seed: header.seed,
            config: header.config,
            config_hash: header.config_hash,
        };
        Ok(sig)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Noisy and noise-free renderings of the same scenario.
pub struct Simulation {
    pub noisy: MultichannelSignal,
    pub clean: MultichannelSignal,
}

/// Renders the scenario. Tone phases come from the seed's stream 0 and
/// beam `b` draws its noise from stream `b + 1`, so beams are generated
/// independently of scheduling.
pub fn simulate_with_clean(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let n = cfg.n_samples();
    let mut phase_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phases: Vec<Vec<f64>> = cfg
        .targets
        .iter()
        .map(|t| {
            t.tonal_freqs_hz
                .iter()
                .map(|_| phase_rng.random_range(0.0..std::f64::consts::TAU))
                .collect()
        })
        .collect();
    let rate = cfg.sample_rate_hz;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.n_beams)
        .into_par_iter()
        .map(|b| {
            let mut clean = vec![0.0; n];
            for (t, ph) in cfg.targets.iter().zip(&phases) {
                for (i, slot) in clean.iter_mut().enumerate() {
                    let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    let gain = t.beam_gain(b as f64, t.center_at(u));
                    if gain < 1e-300 {
                        continue;
                    }
                    let time = i as f64 / rate;
                    for ((f, a), p) in t.tonal_freqs_hz.iter().zip(&t.amplitudes).zip(ph) {
                        *slot += a * gain * (std::f64::consts::TAU * f * time + p).sin();
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(b as u64 + 1);
            let noisy = clean
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + cfg.noise_sigma * z
                })
                .collect();
            (noisy, clean)
        })
        .collect();
    let (noisy, clean): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let provenance = Provenance {
        seed: Some(cfg.seed),
        config: serde_json::to_value(cfg)?,
        config_hash: None,
    };
    let mut noisy = MultichannelSignal::new(noisy, rate)?;
    let mut clean = MultichannelSignal::new(clean, rate)?;
    noisy.provenance = provenance.clone();
    clean.provenance = provenance;
    Ok(Simulation { noisy, clean })
}

pub fn simulate(cfg: &SimConfig) -> Result<MultichannelSignal> {
    Ok(simulate_with_clean(cfg)?.noisy)
}

/// Per-beam `10 log10(P_clean / P_residual)`; `+inf` when the residual is zero.
pub fn snr_db(signal: &MultichannelSignal, clean: &MultichannelSignal) -> Result<Vec<f64>> {
    if signal.n_beams() != clean.n_beams() {
        return Err(Error::DimensionMismatch {
            expected: clean.n_beams(),
            found: signal.n_beams(),
        });
    }
    if signal.n_samples() != clean.n_samples() {
        return Err(Error::DimensionMismatch {
            expected: clean.n_samples(),
            found: signal.n_samples(),
        });
    }
    Ok(signal
        .channels
        .iter()
        .zip(&clean.channels)
        .map(|(s, c)| channel_snr_db(s, c))
        .collect())
}

pub fn channel_snr_db(signal: &[f64], clean: &[f64]) -> f64 {
    let p_clean: f64 = clean.iter().map(|v| v * v).sum();
    let p_res: f64 = signal.iter().zip(clean).map(|(s, c)| (s - c) * (s - c)).sum();
    if p_res == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (p_clean / p_res).log10()
    }
}
