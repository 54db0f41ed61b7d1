//! Noise-subspace removal. Each channel is delay-embedded, latent sources
//! are extracted with single-channel ICA (PCA whitening followed by
//! symmetric FastICA), sources are split into signal and noise by spectral
//! flatness, and channels are rebuilt from the signal sources alone. For a
//! fixed bank the whole map is linear, i.e. a data-driven FIR filter.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rbf::sorted_eigen;
use crate::sim::MultichannelSignal;
use crate::spectral::{spectral_flatness, Welch};

const ICA_MAX_ITERS: usize = 500;
const ICA_TOLERANCE: f64 = 1e-6;
/// FastICA sees at most this many whitened rows, taken at a uniform stride.
const ICA_MAX_ROWS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub window_length: usize,
    pub hop: usize,
    pub n_components: usize,
    pub flatness_threshold: f64,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            window_length: 64,
            hop: 1,
            n_components: 16,
            flatness_threshold: 0.5,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::config("n_components must be positive"));
        }
        if self.window_length < self.n_components {
            return Err(Error::config(format!(
                "window_length {} is smaller than n_components {}",
                self.window_length, self.n_components
            )));
        }
        if self.hop == 0 || self.hop > self.window_length {
            return Err(Error::config("hop must lie in [1, window_length]"));
        }
        if !(self.flatness_threshold > 0.0 && self.flatness_threshold < 1.0) {
            return Err(Error::config("flatness_threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Trajectory matrix: row `t` holds samples `[t hop, t hop + window_length)`.
pub fn embed(channel: &[f64], window_length: usize, hop: usize) -> Result<DMatrix<f64>> {
    if window_length == 0 || hop == 0 {
        return Err(Error::config("window_length and hop must be positive"));
    }
    if channel.len() < window_length {
        return Err(Error::invalid(
            channel.len(),
            format!("channel of {} samples is shorter than the window {window_length}", channel.len()),
        ));
    }
    let rows = (channel.len() - window_length) / hop + 1;
    Ok(DMatrix::from_fn(rows, window_length, |t, i| channel[t * hop + i]))
}

/// One trajectory matrix per channel.
pub fn embed_channels<C: AsRef<[f64]> + Sync>(channels: &[C], cfg: &EmbeddingConfig) -> Result<Vec<DMatrix<f64>>> {
    channels
        .par_iter()
        .map(|c| embed(c.as_ref(), cfg.window_length, cfg.hop))
        .collect()
}

/// Trajectory matrices of several channels stacked vertically.
pub fn stack_trajectories<C: AsRef<[f64]> + Sync>(channels: &[C], cfg: &EmbeddingConfig) -> Result<DMatrix<f64>> {
    Ok(vstack(&embed_channels(channels, cfg)?, cfg.window_length))
}

fn vstack(parts: &[DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows: usize = parts.iter().map(DMatrix::nrows).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}

/// Fixed source model: `window ~ mixing * sources`, `sources = unmixing * window`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BankDocument", into = "BankDocument")]
pub struct SourceBank {
    /// `window_length x n_components`, unit-norm columns.
    mixing: DMatrix<f64>,
    /// `n_components x window_length`.
    unmixing: DMatrix<f64>,
    signal: Vec<bool>,
    flatness: Vec<f64>,
    config: EmbeddingConfig,
    ica_iterations: usize,
}

impl SourceBank {
    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn unmixing(&self) -> &DMatrix<f64> {
        &self.unmixing
    }

    /// `true` for sources kept during reconstruction.
    pub fn signal_mask(&self) -> &[bool] {
        &self.signal
    }

    pub fn flatness(&self) -> &[f64] {
        &self.flatness
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn ica_iterations(&self) -> usize {
        self.ica_iterations
    }

    pub fn window_length(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.mixing.ncols()
    }

    pub fn n_signal(&self) -> usize {
        self.signal.iter().filter(|s| **s).count()
    }

    /// Copy with a different signal/noise labelling.
    /// `L x L` oblique projector onto the signal sources, applied to each window.
    pub fn signal_projector(&self) -> DMatrix<f64> {
        let keep: Vec<usize> = (0..self.n_components()).filter(|&j| self.signal[j]).collect();
        self.mixing.select_columns(&keep) * self.unmixing.select_rows(&keep)
    }

    pub fn with_signal_mask(&self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_components() {
            return Err(Error::DimensionMismatch {
                expected: self.n_components(),
                found: mask.len(),
            });
        }
        Ok(Self {
            signal: mask,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankDocument {
    config: EmbeddingConfig,
    window_length: usize,
    n_components: usize,
    ica_iterations: usize,
    signal: Vec<bool>,
    flatness: Vec<f64>,
    mixing: Vec<Vec<f64>>,
    unmixing: Vec<Vec<f64>>,
}

impl From<SourceBank> for BankDocument {
    fn from(b: SourceBank) -> Self {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        BankDocument {
            window_length: b.window_length(),
            n_components: b.n_components(),
            mixing: rows(&b.mixing),
            unmixing: rows(&b.unmixing),
            config: b.config,
            ica_iterations: b.ica_iterations,
            signal: b.signal,
            flatness: b.flatness,
        }
    }
}

impl TryFrom<BankDocument> for SourceBank {
    type Error = Error;

    fn try_from(d: BankDocument) -> Result<Self> {
        let (l, r) = (d.window_length, d.n_components);
        let build = |rows: &[Vec<f64>], nr: usize, nc: usize, what: &str| {
            if rows.len() != nr || rows.iter().any(|x| x.len() != nc) {
                return Err(Error::Format(format!("{what} must be {nr} x {nc}")));
            }
            Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
        };
        if d.signal.len() != r || d.flatness.len() != r {
            return Err(Error::Format("signal mask and flatness need one entry per source".into()));
        }
        if d.config.window_length != l || d.config.n_components != r {
            return Err(Error::Format("bank shape disagrees with its config".into()));
        }
        Ok(SourceBank {
            mixing: build(&d.mixing, l, r, "mixing")?,
            unmixing: build(&d.unmixing, r, l, "unmixing")?,
            signal: d.signal,
            flatness: d.flatness,
            config: d.config,
            ica_iterations: d.ica_iterations,
        })
    }
}

/// Fits the source bank on a single trajectory matrix.
pub fn fit_sources(trajectories: &DMatrix<f64>, cfg: &EmbeddingConfig) -> Result<SourceBank> {
    fit_source_blocks(std::slice::from_ref(trajectories), cfg)
}

/// Fits the source bank on the trajectory matrices of several channels.
///
/// Windows are whitened without centering so that reconstruction stays
/// linear. A source's flatness is measured on its time course within each
/// block and the smallest value is kept, so a source that is tonal in any
/// one channel counts as signal.
pub fn fit_source_blocks(blocks: &[DMatrix<f64>], cfg: &EmbeddingConfig) -> Result<SourceBank> {
    cfg.validate()?;
    let l = cfg.window_length;
    let r = cfg.n_components;
    if blocks.is_empty() {
        return Err(Error::invalid(0, "no trajectory blocks"));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.ncols() != l {
            return Err(Error::DimensionMismatch {
                expected: l,
                found: b.ncols(),
            });
        }
        if b.nrows() < 16 {
            return Err(Error::invalid(i, format!("block has {} rows, need at least 16", b.nrows())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite trajectory entry in block {i}")));
        }
    }
    let t: usize = blocks.iter().map(DMatrix::nrows).sum();
    if t < 10 * r {
        return Err(Error::invalid(
            t,
            format!("need at least {} trajectory rows, got {t}", 10 * r),
        ));
    }

    let mut second_moment = DMatrix::zeros(l, l);
    for b in blocks {
        second_moment.gemm_tr(1.0 / t as f64, b, b, 1.0);
    }
    let (values, vectors) = sorted_eigen(second_moment)?;
    let top = values[0].max(f64::MIN_POSITIVE);
    if let Some(j) = values[..r].iter().position(|v| !(*v > top * 1e-13)) {
        return Err(Error::Numerical(format!(
            "trajectory matrix has rank {j}, fewer than {r} components"
        )));
    }
    let basis = vectors.columns(0, r).into_owned();
    let scale_down = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(r, |j, _| 1.0 / values[j].sqrt()));
    let scale_up = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(r, |j, _| values[j].sqrt()));
    let projector = &basis * &scale_down;
    let whitened = vstack(&blocks.iter().map(|b| b * &projector).collect::<Vec<_>>(), r);

    let ica_input = if whitened.nrows() > ICA_MAX_ROWS {
        let step = whitened.nrows() as f64 / ICA_MAX_ROWS as f64;
        let picks: Vec<usize> = (0..ICA_MAX_ROWS).map(|i| (i as f64 * step) as usize).collect();
        whitened.select_rows(&picks)
    } else {
        whitened
    };
    let (rotation, iterations) = fast_ica(&ica_input, cfg.seed)?;

    let mut unmixing = &rotation * &scale_down * basis.transpose();
    let mut mixing = &basis * &scale_up * rotation.transpose();
    for j in 0..r {
        let norm = mixing.column(j).norm();
        let pivot = mixing
            .column(j)
            .iter()
            .copied()
            .fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        let s = if pivot < 0.0 { -1.0 } else { 1.0 };
        mixing.column_mut(j).scale_mut(s / norm);
        unmixing.row_mut(j).scale_mut(s * norm);
    }

    // Rows one window apart share no input samples, so a noise source
    // sampled at that spacing is white whatever its filter shape.
    let stride_cap = l.div_ceil(cfg.hop);
    let mut flatness = vec![f64::INFINITY; r];
    for b in blocks {
        let sources = b * unmixing.transpose();
        let stride = stride_cap.min(b.nrows() / 16).max(1);
        for (j, f) in flatness.iter_mut().enumerate() {
            let series: Vec<f64> = sources.column(j).iter().copied().collect();
            *f = f.min(source_flatness(&series, stride)?);
        }
    }
    let signal = flatness.iter().map(|f| *f <= cfg.flatness_threshold).collect();
    Ok(SourceBank {
        mixing,
        unmixing,
        signal,
        flatness,
        config: cfg.clone(),
        ica_iterations: iterations,
    })
}

fn flatness_segment(rows: usize) -> usize {
    let cap = rows.min(256);
    let mut seg = 8;
    while seg * 2 <= cap {
        seg *= 2;
    }
    seg.min(rows)
}

/// Flatness of a source series sampled every `stride` rows, with the PSDs
/// of all `stride` phase offsets summed.
fn source_flatness(series: &[f64], stride: usize) -> Result<f64> {
    let shortest = series.len() / stride;
    let welch = Welch::new(flatness_segment(shortest), 0.5)?;
    let mut total = vec![0.0; welch.n_bins()];
    for phase in 0..stride {
        let sub: Vec<f64> = series[phase..].iter().step_by(stride).copied().collect();
        for (acc, v) in total.iter_mut().zip(welch.estimate(&sub, 1.0)?.psd) {
            *acc += v;
        }
    }
    Ok(spectral_flatness(&total))
}

/// Symmetric FastICA with the `log cosh` contrast on whitened data.
/// Starts with plain fixed-point steps and halves the step size when the
/// iteration oscillates or stalls. Returns the orthogonal unmixing rotation
/// and the iteration count.
fn fast_ica(z: &DMatrix<f64>, seed: u64) -> Result<(DMatrix<f64>, usize)> {
    let (t, r) = z.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = DMatrix::from_fn(r, r, |_, _| StandardNormal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&init)?;
    let mut prev = w.clone();
    let mut mu = 1.0;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut delta = f64::INFINITY;
    let closeness = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        (0..r)
            .map(|j| 1.0 - a.row(j).dot(&b.row(j)).abs())
            .fold(0.0f64, f64::max)
    };
    for iter in 1..=ICA_MAX_ITERS {
        let y = z * w.transpose();
        let g = y.map(f64::tanh);
        let mean_dg: Vec<f64> = g
            .column_iter()
            .map(|c| c.iter().map(|v| 1.0 - v * v).sum::<f64>() / t as f64)
            .collect();
        let next = if mu == 1.0 {
            let mut next = g.transpose() * z / t as f64;
            for j in 0..r {
                let row = w.row(j) * mean_dg[j];
                let mut dst = next.row_mut(j);
                dst -= &row;
            }
            next
        } else {
            let mut m = g.transpose() * &y / t as f64;
            for j in 0..r {
                let beta = m[(j, j)];
                m[(j, j)] = 0.0;
                let denom = beta - mean_dg[j];
                let scale = if denom.abs() > 1e-12 { mu / denom } else { 0.0 };
                m.row_mut(j).scale_mut(scale);
            }
            &w + m * &w
        };
        let next = symmetric_decorrelation(&next)?;
        delta = closeness(&next, &w);
        if delta < ICA_TOLERANCE {
            return Ok((next, iter));
        }
        if closeness(&next, &prev) < ICA_TOLERANCE || since_best >= 20 {
            mu *= 0.5;
            since_best = 0;
            best = delta;
        } else if delta < best {
            best = delta;
            since_best = 0;
        } else {
            since_best += 1;
        }
        prev = std::mem::replace(&mut w, next);
    }
    Err(Error::IcaNonConvergence {
        iterations: ICA_MAX_ITERS,
        delta,
    })
}

/// `(W W^T)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_eigen(w * w.transpose())?;
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Numerical("singular matrix in ICA decorrelation".into()));
    }
    let inv_sqrt = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        values.len(),
        values.iter().map(|v| 1.0 / v.sqrt()),
    ));
    Ok(&vectors * inv_sqrt * vectors.transpose() * w)
}

/// Rebuilds one channel from the signal sources with diagonal averaging of
/// overlapping windows. Window starts follow `cfg.hop`, with one extra
/// window flush with the end when the hop does not land there.
pub fn reconstruct(channel: &[f64], bank: &SourceBank, cfg: &EmbeddingConfig) -> Result<Vec<f64>> {
    let l = bank.window_length();
    if cfg.window_length != l {
        return Err(Error::config(format!(
            "bank window length {l} does not match configured {}",
            cfg.window_length
        )));
    }
    if cfg.hop == 0 || cfg.hop > l {
        return Err(Error::config("hop must lie in [1, window_length]"));
    }
    if channel.len() < l {
        return Err(Error::invalid(channel.len(), format!("channel shorter than window {l}")));
    }
    let keep: Vec<usize> = (0..bank.n_components()).filter(|&j| bank.signal[j]).collect();
    let mut out = vec![0.0; channel.len()];
    if keep.is_empty() {
        return Ok(out);
    }
    let a = bank.mixing.select_columns(&keep);
    let b = bank.unmixing.select_rows(&keep);
    // Row-major copies for tight inner loops.
    let b_rows: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
    let a_cols: Vec<Vec<f64>> = a.column_iter().map(|c| c.iter().copied().collect()).collect();

    let last = channel.len() - l;
    let mut starts: Vec<usize> = (0..=last).step_by(cfg.hop).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    let mut counts = vec![0u32; channel.len()];
    let mut coeff = vec![0.0; keep.len()];
    for &s in &starts {
        let window = &channel[s..s + l];
        for (c, row) in coeff.iter_mut().zip(&b_rows) {
            *c = row.iter().zip(window).map(|(x, y)| x * y).sum();
        }
        let dst = &mut out[s..s + l];
        for (c, col) in coeff.iter().zip(&a_cols) {
            for (d, m) in dst.iter_mut().zip(col) {
                *d += c * m;
            }
        }
        for n in &mut counts[s..s + l] {
            *n += 1;
        }
    }
    for (v, n) in out.iter_mut().zip(&counts) {
        *v /= *n as f64;
    }
    Ok(out)
}

/// [`reconstruct`] applied to every channel, in parallel.
pub fn reconstruct_signal(
    signal: &MultichannelSignal,
    bank: &SourceBank,
    cfg: &EmbeddingConfig,
) -> Result<MultichannelSignal> {
    let channels = signal
        .channels
        .par_iter()
        .map(|c| reconstruct(c, bank, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut out = MultichannelSignal::new(channels, signal.sample_rate_hz)?;
    out.provenance = signal.provenance.clone();
    Ok(out)
}
