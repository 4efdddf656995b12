//! Resolved run settings: defaults, then the config file, then flags.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use milsample::data::{BAG_FORMAT_VERSION, MANIFEST_FORMAT_VERSION};
use milsample::eval::BootstrapConfig;
use milsample::model::CHECKPOINT_FORMAT_VERSION;
use milsample::sampling::SamplingPolicy;
use milsample::training::{TrainConfig, CONFIG_KEYS, DEFAULT_STAGE2_JITTER};

use crate::Failure;

/// Keys that configure the run rather than a single training job.
pub const RUN_KEYS: [&str; 8] = [
    "k",
    "jobs",
    "resamples",
    "level",
    "jitter",
    "misalign",
    "grid",
    "unfreeze",
];

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone)]
pub struct Settings {
    pub train: TrainConfig,
    pub k: usize,
    pub jobs: usize,
    pub resamples: usize,
    pub level: f64,
    pub jitter: f64,
    pub misalign: Option<f64>,
    pub grid: Vec<SamplingPolicy>,
    /// `None` keeps the default unfreeze set.
    pub unfreeze: Option<Vec<String>>,
}

impl Settings {
    pub fn new(train: TrainConfig) -> Self {
        let bootstrap = BootstrapConfig::default();
        Settings {
            train,
            k: DEFAULT_K,
            jobs: 1,
            resamples: bootstrap.resamples,
            level: bootstrap.level,
            jitter: DEFAULT_STAGE2_JITTER,
            misalign: None,
            grid: SamplingPolicy::default_grid(),
            unfreeze: None,
        }
    }

    /// Defaults overridden by the `key=value` file at `path`, if any.
    pub fn load(train: TrainConfig, path: Option<&Path>) -> Result<Self, Failure> {
        let mut settings = Settings::new(train);
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (line, key, value) in parse_config(&text)? {
                settings
                    .set(&key, &value)
                    .map_err(|e| Failure::Usage(format!("{}:{line}: {}", path.display(), failure_text(e))))?;
            }
        }
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let value = value.trim();
        let bad = |what: &str| Failure::Usage(format!("invalid value {value:?} for {key}: {what}"));
        match key {
            "k" => self.k = value.parse().map_err(|_| bad("expected an integer"))?,
            "jobs" => self.jobs = value.parse().map_err(|_| bad("expected an integer"))?,
            "resamples" => self.resamples = value.parse().map_err(|_| bad("expected an integer"))?,
            "level" => self.level = value.parse().map_err(|_| bad("expected a number"))?,
            "jitter" => self.jitter = value.parse().map_err(|_| bad("expected a number"))?,
            "misalign" => {
                self.misalign = match value {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| bad("expected a number or none"))?),
                }
            }
            "grid" => self.grid = parse_grid(value)?,
            "unfreeze" => {
                self.unfreeze = match value {
                    "default" => None,
                    v => Some(
                        v.split(',')
                            .map(|g| g.trim().to_string())
                            .filter(|g| !g.is_empty())
                            .collect(),
                    ),
                }
            }
            _ if CONFIG_KEYS.contains(&key) => {
                self.train.set(key, value).map_err(|e| Failure::Usage(e.to_string()))?;
            }
            _ => return Err(Failure::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.resamples,
            level: self.level,
            seed: self.train.seed,
        }
    }

    /// Every setting as `key=value` text; feeding it back through
    /// [`Settings::load`] reproduces the run.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .train
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let grid = self.grid.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let run = [
            self.k.to_string(),
            self.jobs.to_string(),
            self.resamples.to_string(),
            self.level.to_string(),
            self.jitter.to_string(),
            self.misalign.map_or_else(|| "none".to_string(), |f| f.to_string()),
            grid,
            self.unfreeze
                .as_ref()
                .map_or_else(|| "default".to_string(), |g| g.join(",")),
        ];
        out.extend(RUN_KEYS.iter().map(|k| k.to_string()).zip(run));
        out
    }
}

fn failure_text(f: Failure) -> String {
    match f {
        Failure::Usage(m) | Failure::Runtime(m) => m,
    }
}

pub fn parse_grid(value: &str) -> Result<Vec<SamplingPolicy>, Failure> {
    let grid = value
        .split(',')
        .map(|p| p.parse::<SamplingPolicy>().map_err(|e| Failure::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    if grid.is_empty() {
        return Err(Failure::Usage("empty policy grid".into()));
    }
    Ok(grid)
}

/// `(line number, key, value)` triples of a flat config file. Blank lines
/// and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>, Failure> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("config line {}: expected key=value", i + 1)))?;
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Writes `run.meta`: the command line, format versions, creation time and
/// inputs as comments, then every resolved setting, so the file can be
/// passed back as `--config`.
pub fn write_meta(dir: &Path, command: &str, settings: &Settings, inputs: &[(&str, String)]) -> std::io::Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let argv: Vec<String> = std::env::args().collect();
    let mut out = String::new();
    let _ = writeln!(out, "# command={command}");
    let _ = writeln!(out, "# argv={}", argv.join(" "));
    let _ = writeln!(out, "# created_unix={created}");
    let _ = writeln!(out, "# version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "# format.bag={BAG_FORMAT_VERSION}");
    let _ = writeln!(out, "# format.manifest={MANIFEST_FORMAT_VERSION}");
    let _ = writeln!(out, "# format.checkpoint={CHECKPOINT_FORMAT_VERSION}");
    for (k, v) in inputs {
        let _ = writeln!(out, "# input.{k}={v}");
    }
    out.push_str("# resolved settings\n");
    for (k, v) in settings.pairs() {
        let _ = writeln!(out, "{k}={v}");
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("run.meta"), out)
}
