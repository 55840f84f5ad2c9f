use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const BUILD_ID: &str = env!("TRAJKIT_BUILD_ID");
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (build ", env!("TRAJKIT_BUILD_ID"), ")");

/// Everything needed to rerun a command: `trajkit replay <manifest>`
/// re-executes `argv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub build_id: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub struct Recorder {
    manifest: RunManifest,
    t0: Instant,
}

impl Recorder {
    pub fn start(subcommand: &str, argv: &[String]) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self {
            manifest: RunManifest {
                subcommand: subcommand.to_string(),
                argv: argv.to_vec(),
                config: serde_json::Value::Null,
                seed: None,
                inputs: Vec::new(),
                outputs: Vec::new(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                build_id: BUILD_ID.to_string(),
                started_unix,
                wall_clock_secs: 0.0,
            },
            t0: Instant::now(),
        }
    }

    pub fn config(&mut self, cfg: impl Serialize) -> &mut Self {
        self.manifest.config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.manifest.seed = Some(seed);
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.manifest.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.manifest.outputs.push(p.to_path_buf());
        self
    }

    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.wall_clock_secs = self.t0.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<path>.manifest.json`
pub fn beside(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn load(path: &Path) -> anyhow::Result<RunManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
