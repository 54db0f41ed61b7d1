use std::path::Path;
use std::process::Command;

use neuroscale::MultichannelSignal;
use neuroscale_cli::artifact::{Envelope, Stamp};
use neuroscale_cli::config::PipelineConfig;
use neuroscale_cli::{run, Context, Failure, Stage, StageReport};

fn neuroscale(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_neuroscale")).args(args).output().unwrap()
}

/// Eight beams, one second, one target on beam 3.
const SMALL: &str = r#"
simulate.n_beams = 8
simulate.duration_s = 1.0
simulate.targets = [
  { tonal_freqs_hz = [300.0, 700.0], amplitudes = [1.0, 1.0], start_beam = 3.0, end_beam = 3.0, beam_sigma = 0.35 },
]
filter.train_seconds = 0.5
train.max_iters = 20
train.train_seconds = 0.25
project.stride = 4
cluster.segment_length = 256
"#;

fn small(dir: &Path, seed: u64) -> Context {
    Context {
        cfg: PipelineConfig {
            seed,
            ..PipelineConfig::from_toml(SMALL).unwrap()
        },
        out: dir.to_path_buf(),
        allow_stale: false,
    }
}

#[test]
fn simulate_defaults_give_64_beams_of_8_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let out = neuroscale(&["simulate", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("simulate: 64 beams x 32768 samples"), "{stdout}");
    let sig = MultichannelSignal::load(dir.path().join("signal.sig")).unwrap();
    assert_eq!((sig.n_beams(), sig.n_samples()), (64, 8 * 4096));
    let stamp = Stamp::simulate(&PipelineConfig::default());
    assert_eq!(sig.provenance.config_hash.as_deref(), Some(stamp.config_hash.as_str()));
    assert_eq!(sig.provenance.config, stamp.config);
    assert_eq!(sig.provenance.seed, Some(0));
    assert!(dir.path().join("clean.sig").is_file());
}

#[test]
fn toy_points_train_to_exact_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("toy.csv");
    // A 3-4-5 right triangle: an exact planar configuration exists.
    std::fs::write(&points, "x,y,z\n0,0,1\n3,0,1\n0,4,1\n").unwrap();
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, format!("train.points = {:?}\n", points.to_str().unwrap())).unwrap();
    let out_dir = dir.path().join("out");
    let out = neuroscale(&["train", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = String::from_utf8(out.stdout).unwrap();
    let reported: f64 = line
        .split("final stress ")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(reported <= 1e-6, "{line}");
    let model: Envelope<neuroscale::RbfModel> = Envelope::load(&out_dir.join("model.json")).unwrap();
    assert_eq!(model.payload.latent_dim(), 2);
    assert!(model.upstream.contains_key("points"));
}

#[test]
fn unknown_config_key_fails_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "filter.windw_length = 32\n").unwrap();
    let out = neuroscale(&["filter", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("filter stage failed") && err.contains("windw_length"), "{err}");
}

#[test]
fn missing_upstream_artifact_names_its_producer() {
    let dir = tempfile::tempdir().unwrap();
    let err = run(&small(dir.path(), 0), Stage::Cluster, |_| {}).unwrap_err();
    assert_eq!(err.stage, Stage::Cluster);
    assert!(matches!(err.failure, Failure::Missing { producer: Stage::Filter, .. }), "{err}");
}

#[test]
fn stale_artifacts_are_refused_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    run(&small(dir.path(), 0), Stage::Simulate, |_| {}).unwrap();
    let mut ctx = small(dir.path(), 1);
    let err = run(&ctx, Stage::Filter, |_| {}).unwrap_err();
    assert!(matches!(err.failure, Failure::Stale { .. }), "{err}");
    ctx.allow_stale = true;
    run(&ctx, Stage::Filter, |_| {}).unwrap();
}

#[test]
fn small_pipeline_writes_stamped_artifacts_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let reports = run(&small(a.path(), 5), Stage::Pipeline, |r| lines.push(r.to_string())).unwrap();
    run(&small(b.path(), 5), Stage::Pipeline, |_| {}).unwrap();
    assert_eq!(reports.len(), 5);
    assert_eq!(lines.len(), 5);
    for (line, prefix) in lines.iter().zip(["simulate:", "filter:", "train:", "project:", "cluster:"]) {
        assert!(line.starts_with(prefix), "{line}");
    }
    let StageReport::Project { n_points, .. } = &reports[3] else { panic!() };
    assert_eq!(*n_points, 4096 / 4);

    let cfg = small(a.path(), 5).cfg;
    for (name, stamp) in [
        ("stress_history.csv", Stamp::train(&cfg, None)),
        ("projection.csv", Stamp::project(&cfg, None)),
        ("clusters.csv", Stamp::cluster(&cfg)),
    ] {
        let text = std::fs::read_to_string(a.path().join(name)).unwrap();
        assert!(text.starts_with(&stamp.csv_preamble()), "{name}");
        assert_eq!(text, std::fs::read_to_string(b.path().join(name)).unwrap(), "{name}");
    }
    let svg = std::fs::read_to_string(a.path().join("clusters.svg")).unwrap();
    assert!(svg.contains(&Stamp::cluster(&cfg).config_hash));
    let bank: Envelope<neuroscale::SourceBank> = Envelope::load(&a.path().join("sources.json")).unwrap();
    assert_eq!(bank.upstream["signal.sig"], Stamp::simulate(&cfg).config_hash);
    assert_eq!(bank.provenance, Stamp::filter(&cfg));
}

#[test]
fn flags_override_config() {
    use clap::Parser;
    let cli = neuroscale_cli::Cli::try_parse_from([
        "neuroscale", "cluster", "--seed", "9", "--measure", "sqeuclidean", "--latent-dim", "3", "--deviation",
        "bregman-xlogx",
    ])
    .unwrap();
    let ctx = cli.context().unwrap();
    assert_eq!(ctx.cfg.seed, 9);
    assert_eq!(ctx.cfg.cluster.measure, neuroscale_cli::config::MeasureName::Sqeuclidean);
    assert_eq!(ctx.cfg.train.measure, neuroscale_cli::config::MeasureName::Euclidean);
    assert_eq!(ctx.cfg.train.latent_dim, 3);
    assert!(neuroscale_cli::Cli::try_parse_from(["neuroscale", "train", "--latent-dim", "4"]).is_err());
    assert!(neuroscale_cli::Cli::try_parse_from(["neuroscale", "report"]).is_err());
}
