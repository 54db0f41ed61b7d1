//! Beam clustering on power spectra: modeseek prototype selection, the
//! prototype dissimilarity representation, and robust outlier flagging.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::divergence::{
    pairwise_dissimilarity, ConvexGenerator, Direction, DissimilarityMeasure, PointSet,
};
use crate::error::{Error, Result};
use crate::sim::MultichannelSignal;
use crate::spectral::{ChannelSpectrum, Welch};

pub use crate::spectral::welch_psd;

pub const DEFAULT_SEGMENT: usize = 1024;
pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Symmetrized KL (in bits) between normalized spectra.
pub fn default_spectrum_measure() -> DissimilarityMeasure {
    DissimilarityMeasure::bregman(ConvexGenerator::ShannonEntropyBits)
        .with_direction(Direction::Symmetric)
}

/// `ceil(sqrt(n))`, kept inside `[2, n - 1]`.
pub fn default_neighbourhood(n: usize) -> usize {
    let k = (n as f64).sqrt().ceil() as usize;
    k.clamp(2, n.saturating_sub(1).max(2))
}

/// Welch PSD of every beam, computed in parallel.
pub fn channel_spectra(
    signal: &MultichannelSignal,
    segment_length: usize,
    overlap_fraction: f64,
) -> Result<Vec<ChannelSpectrum>> {
    let welch = Welch::new(segment_length, overlap_fraction)?;
    signal
        .channels
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut s = welch.estimate(c, signal.sample_rate_hz)?;
            s.channel_index = i;
            Ok(s)
        })
        .collect()
}

fn normalized_points(spectra: &[ChannelSpectrum]) -> PointSet {
    PointSet::Vectors(spectra.iter().map(ChannelSpectrum::normalized).collect())
}

/// Channel-by-channel dissimilarity of normalized spectra.
pub fn spectrum_dissimilarities(
    spectra: &[ChannelSpectrum],
    measure: &DissimilarityMeasure,
) -> Result<DMatrix<f64>> {
    pairwise_dissimilarity(&normalized_points(spectra), measure)
}

/// Modes of a dissimilarity matrix.
///
/// Density is the reciprocal of the distance to the k-th nearest neighbour.
/// Each point links to the densest member of its k-neighbourhood including
/// itself; following links ends at the modes. Ties in distance and in
/// density go to the lower index.
pub fn modeseek(dissim: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let links = modeseek_links(dissim, k)?;
    let mut modes: Vec<usize> = (0..links.len()).filter(|&i| links[i] == i).collect();
    modes.sort_unstable();
    Ok(modes)
}

/// Mode reached by each point.
pub fn modeseek_assignments(dissim: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let links = modeseek_links(dissim, k)?;
    Ok((0..links.len())
        .map(|mut i| {
            while links[i] != i {
                i = links[i];
            }
            i
        })
        .collect())
}

fn modeseek_links(dissim: &DMatrix<f64>, k: usize) -> Result<Vec<usize>> {
    let n = dissim.nrows();
    if !dissim.is_square() {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: dissim.ncols(),
        });
    }
    if k < 2 || k >= n {
        return Err(Error::config(format!("neighbourhood size {k} must lie in [2, {n})")));
    }
    for i in 0..n {
        if dissim[(i, i)] != 0.0 {
            return Err(Error::invalid(i, "non-zero diagonal entry"));
        }
        if let Some(j) = (0..n).find(|&j| !(dissim[(i, j)] >= 0.0)) {
            return Err(Error::invalid(i, format!("entry ({i}, {j}) is negative or NaN")));
        }
    }
    let neighbourhoods: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| dissim[(i, a)].total_cmp(&dissim[(i, b)]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect();
    let density: Vec<f64> = (0..n)
        .map(|i| {
            let kth = dissim[(i, neighbourhoods[i][k - 1])];
            if kth > 0.0 { 1.0 / kth } else { f64::INFINITY }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            std::iter::once(i)
                .chain(neighbourhoods[i].iter().copied())
                .fold(i, |best, j| {
                    if density[j] > density[best] || (density[j] == density[best] && j < best) {
                        j
                    } else {
                        best
                    }
                })
        })
        .collect())
}

/// Each channel as its vector of dissimilarities to the prototype channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityRepresentation {
    pub prototypes: Vec<usize>,
    /// `n_channels x n_prototypes`
    pub coords: DMatrix<f64>,
}

/// `coords[p][j] = d(spectrum_p, spectrum_{prototype_j})` on normalized spectra.
pub fn dissimilarity_representation(
    spectra: &[ChannelSpectrum],
    prototypes: &[usize],
    measure: &DissimilarityMeasure,
) -> Result<DissimilarityRepresentation> {
    let n = spectra.len();
    if prototypes.is_empty() {
        return Err(Error::config("at least one prototype is required"));
    }
    if let Some(&bad) = prototypes.iter().find(|&&p| p >= n) {
        return Err(Error::invalid(bad, format!("prototype {bad} is not one of {n} channels")));
    }
    let points = normalized_points(spectra);
    points.dimension()?;
    let mut coords = DMatrix::zeros(n, prototypes.len());
    for p in 0..n {
        for (j, &proto) in prototypes.iter().enumerate() {
            if p != proto {
                coords[(p, j)] = points.dissimilarity(p, proto, measure)?;
            }
        }
    }
    Ok(DissimilarityRepresentation {
        prototypes: prototypes.to_vec(),
        coords,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl DissimilarityRepresentation {
    pub fn n_channels(&self) -> usize {
        self.coords.nrows()
    }

    /// Euclidean distance of each row to the coordinate-wise median row.
    /// A prototype's zero self-dissimilarity is structural, so that entry is
    /// replaced by the column median before measuring.
    pub fn distances_to_median(&self) -> Vec<f64> {
        let center: Vec<f64> = self
            .coords
            .column_iter()
            .map(|c| median(&mut c.iter().copied().collect::<Vec<_>>()))
            .collect();
        self.coords
            .row_iter()
            .enumerate()
            .map(|(p, r)| {
                r.iter()
                    .zip(&center)
                    .zip(&self.prototypes)
                    .map(|((a, b), &proto)| if proto == p { 0.0 } else { (a - b) * (a - b) })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Robust z-scores (median / 1.4826 MAD) of the distances to the median
    /// row. With zero MAD any channel above the median scores `+inf`.
    pub fn robust_scores(&self) -> Result<Vec<f64>> {
        let n = self.n_channels();
        if n < 4 {
            return Err(Error::invalid(n, "need at least 4 channels for a robust spread"));
        }
        let dist = self.distances_to_median();
        let med = median(&mut dist.clone());
        let mad = median(&mut dist.iter().map(|d| (d - med).abs()).collect::<Vec<_>>());
        let scale = 1.4826 * mad;
        Ok(dist
            .iter()
            .map(|&d| {
                let excess = d - med;
                if scale > 0.0 {
                    excess / scale
                } else if excess > 1e-12 * (1.0 + med.abs()) {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// One `channel,d1..dJ,flagged` line per channel.
    pub fn to_csv(&self, flagged: &[usize]) -> String {
        let mut out = String::from("channel");
        for j in 1..=self.prototypes.len() {
            let _ = write!(out, ",d{j}");
        }
        out.push_str(",flagged\n");
        for (p, row) in self.coords.row_iter().enumerate() {
            let _ = write!(out, "{p}");
            for v in row.iter() {
                let _ = write!(out, ",{v:?}");
            }
            let _ = writeln!(out, ",{}", u8::from(flagged.contains(&p)));
        }
        out
    }

    /// Scatter of the first two coordinates (or the first coordinate
    /// against channel index), flagged channels in red.
    pub fn to_svg(&self, flagged: &[usize]) -> String {
        const SIZE: f64 = 480.0;
        const PAD: f64 = 48.0;
        let two_d = self.coords.ncols() >= 2;
        let xs: Vec<f64> = (0..self.n_channels())
            .map(|p| if two_d { self.coords[(p, 0)] } else { p as f64 })
            .collect();
        let ys: Vec<f64> = (0..self.n_channels())
            .map(|p| self.coords[(p, if two_d { 1 } else { 0 })])
            .collect();
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, if hi > lo { hi - lo } else { 1.0 })
        };
        let (x0, xw) = span(&xs);
        let (y0, yw) = span(&ys);
        let inner = SIZE - 2.0 * PAD;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
            b = SIZE - PAD,
            r = SIZE - PAD
        );
        let (xl, yl) = if two_d {
            (format!("d(·, ch {})", self.prototypes[0]), format!("d(·, ch {})", self.prototypes[1]))
        } else {
            ("channel".to_string(), format!("d(·, ch {})", self.prototypes[0]))
        };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{xl}</text>"#,
            SIZE / 2.0,
            SIZE - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{yl}</text>"#,
            SIZE / 2.0,
            SIZE / 2.0
        );
        for p in 0..self.n_channels() {
            let cx = PAD + (xs[p] - x0) / xw * inner;
            let cy = SIZE - PAD - (ys[p] - y0) / yw * inner;
            let colour = if flagged.contains(&p) { "crimson" } else { "steelblue" };
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{colour}"><title>channel {p}</title></circle>"#
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Channels whose robust z-score exceeds `z_threshold`, ascending.
pub fn flag_outlier_beams(rep: &DissimilarityRepresentation, z_threshold: f64) -> Result<Vec<usize>> {
    if !(z_threshold > 0.0) {
        return Err(Error::config("z_threshold must be positive"));
    }
    Ok(rep
        .robust_scores()?
        .iter()
        .enumerate()
        .filter(|(_, z)| **z > z_threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Result of the full clustering stage.
#[derive(Clone, Debug)]
pub struct BeamClustering {
    pub spectra: Vec<ChannelSpectrum>,
    pub prototypes: Vec<usize>,
    pub representation: DissimilarityRepresentation,
    pub flagged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub measure: DissimilarityMeasure,
    /// Defaults to `ceil(sqrt(n_channels))`.
    pub neighbourhood: Option<usize>,
    pub z_threshold: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            segment_length: DEFAULT_SEGMENT,
            overlap_fraction: DEFAULT_OVERLAP,
            measure: default_spectrum_measure(),
            neighbourhood: None,
            z_threshold: 10.0,
        }
    }
}

/// Spectra, modeseek prototypes, representation and flagged beams.
pub fn cluster_beams(signal: &MultichannelSignal, cfg: &ClusterConfig) -> Result<BeamClustering> {
    let spectra = channel_spectra(signal, cfg.segment_length, cfg.overlap_fraction)?;
    let dissim = spectrum_dissimilarities(&spectra, &cfg.measure)?;
    let k = cfg.neighbourhood.unwrap_or_else(|| default_neighbourhood(spectra.len()));
    let prototypes = modeseek(&dissim, k)?;
    let representation = dissimilarity_representation(&spectra, &prototypes, &cfg.measure)?;
    let flagged = flag_outlier_beams(&representation, cfg.z_threshold)?;
    Ok(BeamClustering {
        spectra,
        prototypes,
        representation,
        flagged,
    })
}
