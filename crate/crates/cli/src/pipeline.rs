//! Stage runner with content-hash caching and the run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::stages;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Ingest,
    Pair,
    Features,
    Train,
    Eval,
    Associate,
}

impl Stage {
    /// The data pipeline proper; `synth` runs before it when configured.
    pub const PIPELINE: [Stage; 6] = [
        Stage::Ingest,
        Stage::Pair,
        Stage::Features,
        Stage::Train,
        Stage::Eval,
        Stage::Associate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Pair => "pair",
            Stage::Features => "features",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Associate => "associate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Cached,
    Skipped,
    Failed,
}

/// What a stage body reports back.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub records: BTreeMap<String, usize>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub status: StageStatus,
    pub input_hash: Option<String>,
    pub records: BTreeMap<String, usize>,
    pub artifacts: Vec<PathBuf>,
    pub seconds: f64,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    pub jobs: usize,
    pub config_echo: PathBuf,
    pub stages: Vec<StageReport>,
    pub seconds: f64,
}

impl RunManifest {
    pub fn stage(&self, s: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|r| r.stage == s)
    }
}

/// Stamp written next to a stage's outputs; a matching hash with all
/// artifacts present means the stage can be skipped.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct StageStamp {
    hash: String,
    output: StageOutput,
}

/// Streaming SHA-256 over tagged config values and file contents.
pub struct InputHasher(Sha256);

impl InputHasher {
    pub fn new(stage: Stage) -> Self {
        let mut h = Sha256::new();
        h.update(b"crossview-heat/");
        h.update(stage.name().as_bytes());
        Self(h)
    }

    pub fn value<T: Serialize + ?Sized>(&mut self, tag: &str, v: &T) -> Result<()> {
        self.0.update(tag.as_bytes());
        self.0.update(serde_json::to_vec(v)?);
        self.0.update([0u8]);
        Ok(())
    }

    pub fn file(&mut self, tag: &str, path: &Path) -> Result<()> {
        self.0.update(tag.as_bytes());
        let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
            if n == 0 {
                break;
            }
            self.0.update(&buf[..n]);
        }
        self.0.update([0u8]);
        Ok(())
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    hashes: BTreeMap<Stage, String>,
    reports: Vec<StageReport>,
    command: String,
    started: Instant,
    /// Checkpoint directory override for `eval`.
    pub checkpoints: Option<PathBuf>,
}

pub const CONFIG_ECHO: &str = "config.echo.toml";
pub const RUN_MANIFEST: &str = "run_manifest.json";

impl Pipeline {
    /// Validate the config, fill unset input paths from the synthetic scene
    /// and write the frozen config echo.
    pub fn new(mut cfg: RunConfig, command: &str) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        if cfg.synth.is_some() {
            let scene = out.join("scene");
            let fill = |p: &mut Option<PathBuf>, name: &str| {
                if p.is_none() {
                    *p = Some(scene.join(name));
                }
            };
            fill(&mut cfg.footprints.path, "footprints.geojson");
            fill(&mut cfg.captures.path, "captures.csv");
            fill(&mut cfg.labels.path, "labels.csv");
            fill(&mut cfg.uav_raster.path, "uav.tif");
            fill(&mut cfg.tir_raster.path, "tir.tif");
        }
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        let echo = out.join(CONFIG_ECHO);
        std::fs::write(&echo, cfg.to_toml()?).map_err(|e| CliError::io(&echo, e))?;
        Ok(Self {
            cfg,
            out,
            hashes: BTreeMap::new(),
            reports: Vec::new(),
            command: command.to_string(),
            started: Instant::now(),
            checkpoints: None,
        })
    }

    pub fn stage_dir(&self, s: Stage) -> PathBuf {
        if s == Stage::Synth {
            self.out.join("scene")
        } else {
            self.out.join(s.name())
        }
    }

    pub fn upstream_hash(&self, s: Stage) -> Result<&str> {
        self.hashes
            .get(&s)
            .map(String::as_str)
            .ok_or_else(|| CliError::Missing(format!("stage {s} has not run")))
    }

    /// Run `synth` (when configured) and the pipeline through `last`.
    /// Returns the manifest; the first stage failure is returned as an error
    /// after the manifest is written.
    pub fn run_through(&mut self, last: Stage) -> Result<RunManifest> {
        let mut plan = Vec::new();
        if self.cfg.synth.is_some() {
            plan.push(Stage::Synth);
        }
        plan.extend(Stage::PIPELINE.into_iter().filter(|s| *s <= last));
        let mut failure: Option<CliError> = None;
        for s in plan {
            if let Some(err) = &failure {
                self.reports.push(StageReport {
                    stage: s,
                    status: StageStatus::Skipped,
                    input_hash: None,
                    records: BTreeMap::new(),
                    artifacts: Vec::new(),
                    seconds: 0.0,
                    message: Some(format!("upstream failure: {err}")),
                });
                continue;
            }
            if let Some(reason) = stages::skip_reason(self, s) {
                log::warn!("skipping {s}: {reason}");
                self.reports.push(StageReport {
                    stage: s,
                    status: StageStatus::Skipped,
                    input_hash: None,
                    records: BTreeMap::new(),
                    artifacts: Vec::new(),
                    seconds: 0.0,
                    message: Some(reason),
                });
                continue;
            }
            if let Err(e) = self.run_stage(s) {
                failure = Some(CliError::Stage {
                    stage: s.name().to_string(),
                    message: e.to_string(),
                });
            }
        }
        let manifest = self.write_manifest()?;
        match failure {
            Some(e) => Err(e),
            None => Ok(manifest),
        }
    }

    fn run_stage(&mut self, s: Stage) -> Result<()> {
        let t0 = Instant::now();
        let hash = stages::input_hash(self, s)?;
        let dir = self.stage_dir(s);
        let stamp_path = dir.join("stage.json");
        if let Some(stamp) = read_stamp(&stamp_path) {
            if stamp.hash == hash && stamp.output.artifacts.iter().all(|a| a.exists()) {
                log::info!("{s}: cached");
                self.hashes.insert(s, hash.clone());
                self.reports.push(StageReport {
                    stage: s,
                    status: StageStatus::Cached,
                    input_hash: Some(hash),
                    records: stamp.output.records,
                    artifacts: stamp.output.artifacts,
                    seconds: t0.elapsed().as_secs_f64(),
                    message: None,
                });
                return Ok(());
            }
        }
        log::info!("{s}: running");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let _ = std::fs::remove_file(&stamp_path);
        match stages::run(self, s) {
            Ok(output) => {
                let stamp = StageStamp {
                    hash: hash.clone(),
                    output: output.clone(),
                };
                std::fs::write(&stamp_path, serde_json::to_vec_pretty(&stamp)?)
                    .map_err(|e| CliError::io(&stamp_path, e))?;
                self.hashes.insert(s, hash.clone());
                self.reports.push(StageReport {
                    stage: s,
                    status: StageStatus::Completed,
                    input_hash: Some(hash),
                    records: output.records,
                    artifacts: output.artifacts,
                    seconds: t0.elapsed().as_secs_f64(),
                    message: None,
                });
                Ok(())
            }
            Err(e) => {
                log::error!("{s} failed: {e}");
                self.reports.push(StageReport {
                    stage: s,
                    status: StageStatus::Failed,
                    input_hash: Some(hash),
                    records: BTreeMap::new(),
                    artifacts: Vec::new(),
                    seconds: t0.elapsed().as_secs_f64(),
                    message: Some(e.to_string()),
                });
                Err(e)
            }
        }
    }

    fn write_manifest(&self) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command.clone(),
            seed: self.cfg.seed,
            deterministic: self.cfg.deterministic,
            jobs: self.cfg.jobs,
            config_echo: self.out.join(CONFIG_ECHO),
            stages: self.reports.clone(),
            seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| CliError::io(&path, e))?;
        Ok(m)
    }
}

fn read_stamp(path: &Path) -> Option<StageStamp> {
    serde_json::from_slice(&std::fs::read(path).ok()?).ok()
}
