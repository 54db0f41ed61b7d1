use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use neuroscale::sim::simulate_with_clean;
use neuroscale::subspace::{embed_channels, fit_source_blocks, reconstruct_signal};
use neuroscale::trainer::VARIANCE_FLOOR;
use neuroscale::{cluster_beams, project, train, GaussianPoint, MultichannelSignal, PointSet, RbfModel};

use crate::artifact::{self, sha256_hex, Envelope, Stamp};
use crate::config::{ClusterSource, MeasureName, PipelineConfig};
use crate::{Failure, Stage};

pub struct Context {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub allow_stale: bool,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn check_hash(&self, path: &Path, found: Option<&str>, expected: &Stamp) -> Result<(), Failure> {
        if found == Some(expected.config_hash.as_str()) {
            return Ok(());
        }
        let found = found.unwrap_or("none").to_string();
        if self.allow_stale {
            eprintln!(
                "warning: using stale {} (config hash {found}, expected {})",
                path.display(),
                expected.config_hash
            );
            return Ok(());
        }
        Err(Failure::Stale {
            path: path.display().to_string(),
            found,
            expected: expected.config_hash.clone(),
        })
    }

    fn require(&self, name: &str, producer: Stage) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Failure::Missing {
                path: path.display().to_string(),
                producer,
            })
        }
    }

    fn load_signal(&self, name: &str, producer: Stage, expected: &Stamp) -> Result<MultichannelSignal, Failure> {
        let path = self.require(name, producer)?;
        let signal = MultichannelSignal::load(&path)?;
        self.check_hash(&path, signal.provenance.config_hash.as_deref(), expected)?;
        Ok(signal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StageReport {
    Simulate {
        n_beams: usize,
        n_samples: usize,
        sample_rate_hz: f64,
        target_beams: Vec<usize>,
    },
    Filter {
        n_signal: usize,
        n_components: usize,
        ica_iterations: usize,
        train_samples: usize,
    },
    Train {
        n_points: usize,
        iterations: usize,
        initial_stress: f64,
        final_stress: f64,
    },
    Project {
        n_points: usize,
        latent_dim: usize,
    },
    Cluster {
        prototypes: Vec<usize>,
        flagged: Vec<usize>,
    },
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageReport::Simulate {
                n_beams,
                n_samples,
                sample_rate_hz,
                target_beams,
            } => write!(
                f,
                "simulate: {n_beams} beams x {n_samples} samples at {sample_rate_hz} Hz, target beams {target_beams:?}"
            ),
            StageReport::Filter {
                n_signal,
                n_components,
                ica_iterations,
                train_samples,
            } => write!(
                f,
                "filter: kept {n_signal} of {n_components} sources (fit on {train_samples} samples per beam, {ica_iterations} ICA iterations)"
            ),
            StageReport::Train {
                n_points,
                iterations,
                initial_stress,
                final_stress,
            } => write!(
                f,
                "train: final stress {final_stress:e} (initial {initial_stress:e}) after {iterations} iterations on {n_points} points"
            ),
            StageReport::Project { n_points, latent_dim } => {
                write!(f, "project: mapped {n_points} points to {latent_dim}-D")
            }
            StageReport::Cluster { prototypes, flagged } => {
                write!(f, "cluster: prototypes {prototypes:?}, flagged beams {flagged:?}")
            }
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

pub fn simulate(ctx: &Context) -> Result<StageReport, Failure> {
    let sim = ctx.cfg.sim_config();
    sim.validate()?;
    let stamp = Stamp::simulate(&ctx.cfg);
    let mut run = simulate_with_clean(&sim)?;
    run.noisy.provenance = stamp.to_provenance();
    run.clean.provenance = stamp.to_provenance();
    std::fs::create_dir_all(&ctx.out)?;
    run.noisy.save(ctx.path(artifact::SIGNAL))?;
    run.clean.save(ctx.path(artifact::CLEAN))?;
    Ok(StageReport::Simulate {
        n_beams: run.noisy.n_beams(),
        n_samples: run.noisy.n_samples(),
        sample_rate_hz: run.noisy.sample_rate_hz,
        target_beams: sim.target_beams(0.5),
    })
}

fn leading_samples(seconds: f64, signal: &MultichannelSignal, key: &str) -> Result<usize, Failure> {
    if !(seconds > 0.0 && seconds.is_finite()) {
        return Err(Failure::Config(format!("{key} must be positive")));
    }
    Ok(((seconds * signal.sample_rate_hz).round() as usize).clamp(1, signal.n_samples()))
}

pub fn filter(ctx: &Context) -> Result<StageReport, Failure> {
    let emb = ctx.cfg.embedding_config();
    emb.validate()?;
    let upstream = Stamp::simulate(&ctx.cfg);
    let signal = ctx.load_signal(artifact::SIGNAL, Stage::Simulate, &upstream)?;
    let n = leading_samples(ctx.cfg.filter.train_seconds, &signal, "filter.train_seconds")?;
    let blocks = embed_channels(&signal.window(0, n)?.channels, &emb)?;
    let bank = fit_source_blocks(&blocks, &emb)?;
    let mut filtered = reconstruct_signal(&signal, &bank, &emb)?;

    let stamp = Stamp::filter(&ctx.cfg);
    filtered.provenance = stamp.to_provenance();
    let report = StageReport::Filter {
        n_signal: bank.n_signal(),
        n_components: bank.n_components(),
        ica_iterations: bank.ica_iterations(),
        train_samples: n,
    };
    Envelope {
        provenance: stamp,
        upstream: BTreeMap::from([(artifact::SIGNAL.to_string(), upstream.config_hash)]),
        payload: bank,
    }
    .save(&ctx.path(artifact::SOURCES))?;
    filtered.save(ctx.path(artifact::FILTERED))?;
    Ok(report)
}

/// Rows of a numeric CSV; `#` lines and a non-numeric first row are skipped.
pub fn parse_points(bytes: &[u8], what: &str) -> Result<Vec<Vec<f64>>, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Failure::Input(format!("{what}: {e}")))?;
        match record.iter().map(str::parse::<f64>).collect::<Result<Vec<_>, _>>() {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Failure::Input(format!("{what}: record {}: {e}", i + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Failure::Input(format!("{what}: no points")));
    }
    Ok(rows)
}

/// Points the train and project stages work on, with the hash standing in
/// for the upstream config when they come from a file.
struct Points {
    rows: Vec<Vec<f64>>,
    /// Sample index (or file row) of each point.
    index: Vec<usize>,
    file_hash: Option<String>,
    upstream: BTreeMap<String, String>,
}

fn load_points(ctx: &Context, all: bool) -> Result<Points, Failure> {
    if let Some(path) = &ctx.cfg.train.points {
        let bytes = std::fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        let hash = sha256_hex(&bytes);
        let rows = parse_points(&bytes, &path.display().to_string())?;
        let stride = if all { ctx.cfg.project.stride } else { 1 };
        let index: Vec<usize> = (0..rows.len()).step_by(stride).collect();
        let rows = index.iter().map(|&i| rows[i].clone()).collect();
        return Ok(Points {
            rows,
            index,
            upstream: BTreeMap::from([("points".to_string(), hash.clone())]),
            file_hash: Some(hash),
        });
    }
    let upstream = Stamp::filter(&ctx.cfg);
    let signal = ctx.load_signal(artifact::FILTERED, Stage::Filter, &upstream)?;
    let index: Vec<usize> = if all {
        (0..signal.n_samples()).step_by(ctx.cfg.project.stride).collect()
    } else {
        (0..leading_samples(ctx.cfg.train.train_seconds, &signal, "train.train_seconds")?).collect()
    };
    Ok(Points {
        rows: index.iter().map(|&t| signal.slice_at(t)).collect(),
        index,
        file_hash: None,
        upstream: BTreeMap::from([(artifact::FILTERED.to_string(), upstream.config_hash)]),
    })
}

/// Gaussian points take the spread across their own components as variance.
fn point_set(rows: Vec<Vec<f64>>, measure: MeasureName) -> Result<PointSet, Failure> {
    Ok(match measure {
        MeasureName::GaussianKl => PointSet::Gaussians(
            rows.into_iter()
                .map(|r| GaussianPoint::with_component_variance(r, VARIANCE_FLOOR))
                .collect::<neuroscale::Result<_>>()?,
        ),
        _ => PointSet::Vectors(rows),
    })
}

pub fn train_stage(ctx: &Context) -> Result<StageReport, Failure> {
    let cfg = ctx.cfg.stress_config();
    cfg.validate()?;
    let points = load_points(ctx, false)?;
    let n_points = points.rows.len();
    let inputs = point_set(points.rows, ctx.cfg.train.measure)?;
    let model = RbfModel::initialize(&inputs.location_matrix()?, ctx.cfg.train.latent_dim, &ctx.cfg.model_init())?;
    let run = train(&inputs, &cfg, model)?;

    let stamp = Stamp::train(&ctx.cfg, points.file_hash.as_deref());
    std::fs::create_dir_all(&ctx.out)?;
    write_text(
        &ctx.path(artifact::STRESS_HISTORY),
        &(stamp.csv_preamble() + &run.stress_history_csv()),
    )?;
    let report = StageReport::Train {
        n_points,
        iterations: run.stress_history.len() - 1,
        initial_stress: run.initial_stress(),
        final_stress: run.final_stress(),
    };
    Envelope {
        provenance: stamp,
        upstream: points.upstream,
        payload: run.model,
    }
    .save(&ctx.path(artifact::MODEL))?;
    Ok(report)
}

pub fn project_stage(ctx: &Context) -> Result<StageReport, Failure> {
    if ctx.cfg.project.stride == 0 {
        return Err(Failure::Config("project.stride must be positive".into()));
    }
    let path = ctx.require(artifact::MODEL, Stage::Train)?;
    let model: Envelope<RbfModel> = Envelope::load(&path)?;
    let points = load_points(ctx, true)?;
    let expected = Stamp::train(&ctx.cfg, points.file_hash.as_deref());
    ctx.check_hash(&path, Some(&model.provenance.config_hash), &expected)?;
    let model = model.payload;
    let inputs = point_set(points.rows, ctx.cfg.train.measure)?;
    let projection = project(&model, &inputs)?;

    let m = model.latent_dim();
    let mut csv = Stamp::project(&ctx.cfg, points.file_hash.as_deref()).csv_preamble();
    csv.push_str("index");
    for l in 1..=m {
        csv.push_str(&format!(",y{l}"));
    }
    if projection.variances.is_some() {
        csv.push_str(",variance");
    }
    csv.push('\n');
    for (row, &t) in points.index.iter().enumerate() {
        csv.push_str(&t.to_string());
        for l in 0..m {
            csv.push_str(&format!(",{:?}", projection.points[(row, l)]));
        }
        if let Some(v) = &projection.variances {
            csv.push_str(&format!(",{:?}", v[row]));
        }
        csv.push('\n');
    }
    write_text(&ctx.path(artifact::PROJECTION), &csv)?;
    Ok(StageReport::Project {
        n_points: points.index.len(),
        latent_dim: m,
    })
}

pub fn cluster(ctx: &Context) -> Result<StageReport, Failure> {
    let cfg = ctx.cfg.cluster_config().map_err(Failure::Config)?;
    let signal = match ctx.cfg.cluster.source {
        ClusterSource::Filtered => ctx.load_signal(artifact::FILTERED, Stage::Filter, &Stamp::filter(&ctx.cfg))?,
        ClusterSource::Raw => ctx.load_signal(artifact::SIGNAL, Stage::Simulate, &Stamp::simulate(&ctx.cfg))?,
    };
    let result = cluster_beams(&signal, &cfg)?;
    let stamp = Stamp::cluster(&ctx.cfg);
    let rep = &result.representation;
    write_text(
        &ctx.path(artifact::CLUSTERS_CSV),
        &(stamp.csv_preamble() + &rep.to_csv(&result.flagged)),
    )?;
    write_text(&ctx.path(artifact::CLUSTERS_SVG), &stamp.embed_in_svg(&rep.to_svg(&result.flagged)))?;
    Ok(StageReport::Cluster {
        prototypes: result.prototypes,
        flagged: result.flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_csv_with_header_and_comments() {
        let rows = parse_points(b"# toy\nx,y\n1, 2\n3,4.5\n", "t").unwrap();
        assert_eq!(rows, vec![vec![1.0, 2.0], vec![3.0, 4.5]]);
        assert!(parse_points(b"1,2\n3,x\n", "t").is_err());
        assert!(parse_points(b"1,2\n3\n", "t").is_err());
        assert!(parse_points(b"a,b\n", "t").is_err());
    }

    #[test]
    fn gaussian_points_use_component_spread() {
        let set = point_set(vec![vec![1.0, 3.0]], MeasureName::GaussianKl).unwrap();
        assert_eq!(set.variances().unwrap(), vec![1.0]);
        assert!(point_set(vec![vec![1.0]], MeasureName::Euclidean).unwrap().variances().is_none());
    }
}
