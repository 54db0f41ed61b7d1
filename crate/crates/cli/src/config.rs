//! Flat TOML configuration with one namespace per stage, e.g.
//! `simulate.n_beams = 64` or `train.max_iters = 300`. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use neuroscale::cluster::ClusterConfig;
use neuroscale::trainer::PairSampling;
use neuroscale::{
    BasisKind, ConvexGenerator, Deviation, Direction, DissimilarityMeasure, EmbeddingConfig,
    ModelInit, SimConfig, StressConfig, TargetSpec, WeightInit,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureName {
    Euclidean,
    Sqeuclidean,
    Kl,
    GaussianKl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DeviationName {
    Squared,
    BregmanXlogx,
}

impl From<DeviationName> for Deviation {
    fn from(d: DeviationName) -> Self {
        match d {
            DeviationName::Squared => Deviation::SquaredError,
            DeviationName::BregmanXlogx => Deviation::BregmanXLogX,
        }
    }
}

/// Which signal the cluster stage reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSource {
    Filtered,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_beams: usize,
    pub sample_rate_hz: f64,
    pub duration_s: f64,
    pub noise_sigma: f64,
    pub targets: Vec<TargetSpec>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            n_beams: d.n_beams,
            sample_rate_hz: d.sample_rate_hz,
            duration_s: d.duration_s,
            noise_sigma: d.noise_sigma,
            targets: d.targets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub window_length: usize,
    pub hop: usize,
    pub n_components: usize,
    pub flatness_threshold: f64,
    /// Leading span of every beam used to fit the source bank.
    pub train_seconds: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        let d = EmbeddingConfig::default();
        Self {
            window_length: d.window_length,
            hop: d.hop,
            n_components: d.n_components,
            flatness_threshold: d.flatness_threshold,
            train_seconds: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub measure: MeasureName,
    pub deviation: DeviationName,
    pub latent_dim: usize,
    pub max_iters: usize,
    pub step_size: f64,
    pub tolerance: f64,
    /// Leading span of the filtered signal whose beam slices are trained on.
    pub train_seconds: f64,
    /// All pairs are used up to this many points; 0 always uses all pairs.
    pub full_pairs_up_to: usize,
    pub n_centers: Option<usize>,
    pub width: Option<f64>,
    pub basis: BasisKind,
    /// CSV of points to train on instead of the filtered signal.
    pub points: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            measure: MeasureName::Euclidean,
            deviation: DeviationName::Squared,
            latent_dim: 2,
            max_iters: 200,
            step_size: 1.0,
            tolerance: 1e-6,
            train_seconds: 1.0,
            full_pairs_up_to: 1024,
            n_centers: None,
            width: None,
            basis: BasisKind::Gaussian,
            points: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectSection {
    /// Map every `stride`-th beam slice.
    pub stride: usize,
}

impl Default for ProjectSection {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub measure: MeasureName,
    pub source: ClusterSource,
    pub segment_length: usize,
    pub overlap_fraction: f64,
    pub neighbourhood: Option<usize>,
    pub z_threshold: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let d = ClusterConfig::default();
        Self {
            measure: MeasureName::Kl,
            source: ClusterSource::Filtered,
            segment_length: d.segment_length,
            overlap_fraction: d.overlap_fraction,
            neighbourhood: d.neighbourhood,
            z_threshold: d.z_threshold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Artifact directory; `--out` overrides it.
    pub out: Option<PathBuf>,
    pub simulate: SimulateSection,
    pub filter: FilterSection,
    pub train: TrainSection,
    pub project: ProjectSection,
    pub cluster: ClusterSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulate;
        SimConfig {
            n_beams: s.n_beams,
            sample_rate_hz: s.sample_rate_hz,
            duration_s: s.duration_s,
            targets: s.targets.clone(),
            noise_sigma: s.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        let f = &self.filter;
        EmbeddingConfig {
            window_length: f.window_length,
            hop: f.hop,
            n_components: f.n_components,
            flatness_threshold: f.flatness_threshold,
            seed: self.seed,
        }
    }

    pub fn stress_config(&self) -> StressConfig {
        let t = &self.train;
        let (input_measure, latent_measure) = match t.measure {
            MeasureName::Euclidean => (DissimilarityMeasure::euclidean(), DissimilarityMeasure::euclidean()),
            MeasureName::Sqeuclidean => (
                DissimilarityMeasure::squared_euclidean(),
                DissimilarityMeasure::squared_euclidean(),
            ),
            MeasureName::Kl => (
                DissimilarityMeasure::bregman(ConvexGenerator::ShannonEntropyBits),
                DissimilarityMeasure::euclidean(),
            ),
            MeasureName::GaussianKl => (DissimilarityMeasure::gaussian_kl(), DissimilarityMeasure::gaussian_kl()),
        };
        StressConfig {
            input_measure,
            latent_measure,
            deviation: t.deviation.into(),
            max_iters: t.max_iters,
            step_size: t.step_size,
            tolerance: t.tolerance,
            seed: self.seed,
            pair_sampling: PairSampling {
                full_pairs_up_to: (t.full_pairs_up_to > 0).then_some(t.full_pairs_up_to),
            },
        }
    }

    pub fn model_init(&self) -> ModelInit {
        ModelInit {
            n_centers: self.train.n_centers,
            basis: self.train.basis,
            width: self.train.width,
            weights: WeightInit::Pca { ridge: 1e-8 },
            seed: self.seed,
        }
    }

    pub fn cluster_config(&self) -> Result<ClusterConfig, String> {
        let c = &self.cluster;
        let measure = match c.measure {
            MeasureName::Euclidean => DissimilarityMeasure::euclidean(),
            MeasureName::Sqeuclidean => DissimilarityMeasure::squared_euclidean(),
            MeasureName::Kl => {
                DissimilarityMeasure::bregman(ConvexGenerator::ShannonEntropyBits).with_direction(Direction::Symmetric)
            }
            MeasureName::GaussianKl => {
                return Err("cluster.measure = gaussian-kl does not apply to spectra".into());
            }
        };
        Ok(ClusterConfig {
            segment_length: c.segment_length,
            overlap_fraction: c.overlap_fraction,
            measure,
            neighbourhood: c.neighbourhood,
            z_threshold: c.z_threshold,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn dotted_keys_fill_sections() {
        let cfg = PipelineConfig::from_toml(
            "seed = 7\nsimulate.n_beams = 16\nsimulate.duration_s = 2.0\ntrain.measure = \"gaussian-kl\"\ncluster.z_threshold = 4.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.simulate.n_beams, 16);
        assert_eq!(cfg.sim_config().seed, 7);
        assert_eq!(cfg.train.measure, MeasureName::GaussianKl);
        assert_eq!(cfg.cluster.z_threshold, 4.0);
        assert_eq!(cfg.filter, FilterSection::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(PipelineConfig::from_toml("simulate.n_beam = 3").unwrap_err().contains("n_beam"));
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml("[report]\nx = 1").is_err());
    }

    #[test]
    fn gaussian_kl_is_not_a_spectrum_measure() {
        let mut cfg = PipelineConfig::default();
        cfg.cluster.measure = MeasureName::GaussianKl;
        assert!(cfg.cluster_config().is_err());
    }
}
