//! Provenance stamps carried by every artifact.

use std::path::Path;

use neuroscale::sim::Provenance;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ClusterSource, PipelineConfig};

pub const SIGNAL: &str = "signal.sig";
pub const CLEAN: &str = "clean.sig";
pub const SOURCES: &str = "sources.json";
pub const FILTERED: &str = "filtered.sig";
pub const MODEL: &str = "model.json";
pub const STRESS_HISTORY: &str = "stress_history.csv";
pub const PROJECTION: &str = "projection.csv";
pub const CLUSTERS_CSV: &str = "clusters.csv";
pub const CLUSTERS_SVG: &str = "clusters.svg";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The configuration that determined an artifact, and its hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamp {
    pub seed: u64,
    pub config: Value,
    pub config_hash: String,
}

impl Stamp {
    fn new(seed: u64, config: Value) -> Self {
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Self {
            seed,
            config,
            config_hash,
        }
    }

    pub fn simulate(cfg: &PipelineConfig) -> Self {
        Self::new(cfg.seed, json!({ "stage": "simulate", "seed": cfg.seed, "simulate": cfg.simulate }))
    }

    pub fn filter(cfg: &PipelineConfig) -> Self {
        Self::new(
            cfg.seed,
            json!({ "stage": "filter", "seed": cfg.seed, "simulate": cfg.simulate, "filter": cfg.filter }),
        )
    }

    /// `points_hash` identifies a points file used instead of the filtered signal.
    pub fn train(cfg: &PipelineConfig, points_hash: Option<&str>) -> Self {
        let mut train = serde_json::to_value(&cfg.train).expect("train section serializes");
        train.as_object_mut().unwrap().remove("points");
        let config = match points_hash {
            Some(h) => json!({ "stage": "train", "seed": cfg.seed, "points_sha256": h, "train": train }),
            None => json!({
                "stage": "train", "seed": cfg.seed, "simulate": cfg.simulate, "filter": cfg.filter, "train": train
            }),
        };
        Self::new(cfg.seed, config)
    }

    pub fn project(cfg: &PipelineConfig, points_hash: Option<&str>) -> Self {
        let mut config = Self::train(cfg, points_hash).config;
        config["stage"] = json!("project");
        config["project"] = json!(cfg.project);
        Self::new(cfg.seed, config)
    }

    pub fn cluster(cfg: &PipelineConfig) -> Self {
        let config = match cfg.cluster.source {
            ClusterSource::Filtered => json!({
                "stage": "cluster", "seed": cfg.seed, "simulate": cfg.simulate, "filter": cfg.filter,
                "cluster": cfg.cluster
            }),
            ClusterSource::Raw => {
                json!({ "stage": "cluster", "seed": cfg.seed, "simulate": cfg.simulate, "cluster": cfg.cluster })
            }
        };
        Self::new(cfg.seed, config)
    }

    pub fn to_provenance(&self) -> Provenance {
        Provenance {
            seed: Some(self.seed),
            config: self.config.clone(),
            config_hash: Some(self.config_hash.clone()),
        }
    }

    /// `#`-prefixed lines placed above a CSV header.
    pub fn csv_preamble(&self) -> String {
        format!("# seed={} config_hash={}\n# config={}\n", self.seed, self.config_hash, self.config)
    }

    /// Puts the stamp in a `<metadata>` element right after the opening `<svg>` tag.
    pub fn embed_in_svg(&self, svg: &str) -> String {
        let escaped = serde_json::to_string(self)
            .expect("stamp serializes")
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        match svg.find("<svg").and_then(|s| svg[s..].find('>').map(|e| s + e + 1)) {
            Some(at) => format!("{}<metadata>{escaped}</metadata>{}", &svg[..at], &svg[at..]),
            None => svg.to_string(),
        }
    }
}

/// A JSON artifact: stamp, upstream hashes and the payload.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub provenance: Stamp,
    /// Config hashes of the artifacts this one was built from, by file name.
    pub upstream: std::collections::BTreeMap<String, String>,
    pub payload: T,
}

impl<T: Serialize + for<'de> Deserialize<'de>> Envelope<T> {
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}
