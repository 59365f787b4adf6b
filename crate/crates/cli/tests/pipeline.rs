use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use crossview_heat_cli::pipeline::{CONFIG_ECHO, RUN_MANIFEST};
use crossview_heat_cli::{execute, Cli, Outcome, RunManifest, Stage, StageStatus};

const SMALL_RUN: &str = r#"
output_dir = "out"
[synth]
n_buildings = 50
seed = 3
panorama_width = 256
[pairing]
chip_size = 32
[model]
profile = "toy"
[train]
max_epochs = 1
folds = 3
block_size_m = 40.0
"#;

fn run(args: &[&str]) -> RunManifest {
    let mut argv = vec!["crossview-heat", "--deterministic"];
    argv.extend_from_slice(args);
    match execute(&Cli::parse_from(argv)).expect("pipeline run") {
        Outcome::Pipeline(m) => m,
        Outcome::Standalone(_) => panic!("expected a pipeline run"),
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

fn status(m: &RunManifest, s: Stage) -> StageStatus {
    m.stage(s).unwrap_or_else(|| panic!("{s} missing from manifest")).status
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    let path = path.as_ref();
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_run_completes_every_stage_then_caches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let cfg = cfg.to_str().unwrap();

    let first = run(&["--config", cfg, "run-all"]);
    assert_eq!(status(&first, Stage::Synth), StageStatus::Completed);
    for s in Stage::PIPELINE {
        assert_eq!(status(&first, s), StageStatus::Completed, "{s}: {:?}", first.stage(s).unwrap().message);
    }
    let out = dir.path().join("out");
    assert!(out.join(CONFIG_ECHO).is_file());
    let on_disk: RunManifest = serde_json::from_slice(&read(out.join(RUN_MANIFEST))).unwrap();
    assert_eq!(on_disk.stages.len(), first.stages.len());

    let results = read(out.join("associate/association_results.json"));
    let second = run(&["--config", cfg, "run-all"]);
    for s in Stage::PIPELINE {
        assert_eq!(status(&second, s), StageStatus::Cached, "{s}");
    }
    assert_eq!(read(out.join("associate/association_results.json")), results);
}

#[test]
fn missing_thermal_raster_skips_association() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    run(&["--config", cfg.to_str().unwrap(), "synth"]);

    let scene = dir.path().join("out/scene");
    let explicit = format!(
        r#"
output_dir = "out2"
[footprints]
path = "{}"
[captures]
path = "{}"
[labels]
path = "{}"
[uav_raster]
path = "{}"
[pairing]
chip_size = 32
[model]
profile = "toy"
[train]
max_epochs = 1
folds = 3
block_size_m = 40.0
"#,
        scene.join("footprints.geojson").display(),
        scene.join("captures.csv").display(),
        scene.join("labels.csv").display(),
        scene.join("uav.tif").display(),
    );
    let cfg = write_config(dir.path(), &explicit);
    let m = run(&["--config", cfg.to_str().unwrap(), "run-all"]);
    assert!(m.stage(Stage::Synth).is_none());
    for s in [Stage::Ingest, Stage::Pair, Stage::Features, Stage::Train, Stage::Eval] {
        assert_eq!(status(&m, s), StageStatus::Completed, "{s}");
    }
    let assoc = m.stage(Stage::Associate).unwrap();
    assert_eq!(assoc.status, StageStatus::Skipped);
    assert!(assoc.message.is_some());
    assert!(!dir.path().join("out2/associate/association_results.json").exists());
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let first = run(&["--config", cfg.to_str().unwrap(), "run-all"]);

    let echo = dir.path().join("out").join(CONFIG_ECHO);
    let other = dir.path().join("again");
    let second = run(&["--config", echo.to_str().unwrap(), "--out-dir", other.to_str().unwrap(), "run-all"]);
    for s in Stage::PIPELINE {
        assert_eq!(status(&second, s), StageStatus::Completed, "{s}");
        assert_eq!(first.stage(s).unwrap().records, second.stage(s).unwrap().records, "{s}");
    }
    assert_eq!(
        read(dir.path().join("out/associate/association_results.json")),
        read(other.join("associate/association_results.json"))
    );
    assert_eq!(
        read(dir.path().join("out/train/predictions.csv")),
        read(other.join("train/predictions.csv"))
    );
}

#[test]
fn deleted_stage_reruns_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_RUN);
    let cfg = cfg.to_str().unwrap();
    run(&["--config", cfg, "run-all"]);
    let out = dir.path().join("out");
    let predictions = read(out.join("train/predictions.csv"));
    let results = read(out.join("associate/association_results.json"));

    fs::remove_dir_all(out.join("train")).unwrap();
    let m = run(&["--config", cfg, "train"]);
    for s in [Stage::Ingest, Stage::Pair, Stage::Features] {
        assert_eq!(status(&m, s), StageStatus::Cached, "{s}");
    }
    assert_eq!(status(&m, Stage::Train), StageStatus::Completed);
    assert!(m.stage(Stage::Eval).is_none());
    assert_eq!(read(out.join("train/predictions.csv")), predictions);

    fs::remove_dir_all(out.join("associate")).unwrap();
    let m = run(&["--config", cfg, "associate"]);
    for s in [Stage::Ingest, Stage::Pair, Stage::Features, Stage::Train, Stage::Eval] {
        assert_eq!(status(&m, s), StageStatus::Cached, "{s}");
    }
    assert_eq!(status(&m, Stage::Associate), StageStatus::Completed);
    assert_eq!(read(out.join("associate/association_results.json")), results);
}
