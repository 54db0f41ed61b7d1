//! Dissimilarity-driven topographic mapping (NeuroScale) with euclidean,
//! Bregman and Gaussian-KL measures, plus the multibeam sonar pipeline
//! around it: simulation, subspace noise filtering and beam clustering.

pub mod cluster;
pub mod divergence;
pub mod error;
pub mod rbf;
pub mod sim;
pub mod spectral;
pub mod subspace;
pub mod trainer;

pub use cluster::{
    cluster_beams, dissimilarity_representation, flag_outlier_beams, modeseek, ClusterConfig,
    DissimilarityRepresentation,
};
pub use divergence::{
    bregman, gaussian_kl, pairwise_dissimilarity, ConvexGenerator, Direction,
    DissimilarityMeasure, GaussianPoint, MeasureKind, PointSet,
};
pub use error::{Error, Result};
pub use rbf::{BasisKind, ModelInit, RbfModel, WeightInit};
pub use sim::{simulate, simulate_with_clean, snr_db, MultichannelSignal, SimConfig, TargetSpec};
pub use spectral::{welch_psd, ChannelSpectrum};
pub use subspace::{embed, fit_sources, reconstruct, EmbeddingConfig, SourceBank};
pub use trainer::{
    project, propagate_uncertainty, stress, train, Deviation, PairSampling, Projection,
    StressConfig, StressObjective, TrainedProjection,
};
