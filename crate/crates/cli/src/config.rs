//! Versioned JSON documents read by the commands. Unknown keys are rejected
//! everywhere so that a typo in a sweep cannot be silently ignored.

use std::fs;
use std::path::{Path, PathBuf};

use hgot::eval::{Linkage, ProbeConfig};
use hgot::hetgraph::SyntheticConfig;
use hgot::objective::TrainConfig;
use hgot::HgotError;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

fn current_version() -> u32 {
    CONFIG_VERSION
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    /// Probe repetitions with consecutive split seeds.
    pub probe_runs: usize,
    pub linkage: Linkage,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            probe_runs: 10,
            linkage: Linkage::Average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "current_version")]
    pub version: u32,
    /// Dataset manifest; relative paths resolve against the config file.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Meta-path names to use; all declared ones when absent.
    #[serde(default)]
    pub metapaths: Option<Vec<String>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// One training run per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: None,
            synthetic: None,
            metapaths: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out_dir: None,
            seeds: default_seeds(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HgotError> {
        match (&self.dataset, &self.synthetic) {
            (None, None) => {
                return Err(HgotError::Config(
                    "missing data source: set `dataset` (manifest path) or `synthetic`".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(HgotError::Config("set only one of `dataset` and `synthetic`".into()))
            }
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(HgotError::Config("`seeds` must not be empty".into()));
        }
        if self.eval.probe_runs == 0 {
            return Err(HgotError::Config("`eval.probe_runs` must be at least 1".into()));
        }
        self.eval.probe.validate()?;
        self.train.validate()
    }

    pub fn out_dir(&self) -> Result<&Path, HgotError> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| HgotError::Config("no output directory: set `out_dir` or pass --out".into()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(d) = &self.dataset {
            if d.is_relative() {
                self.dataset = Some(base.join(d));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Rho,
    Sigma,
    HiddenDim,
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::Rho => "rho",
            SweepParameter::Sigma => "sigma",
            SweepParameter::HiddenDim => "hidden_dim",
        }
    }
}

pub const HIDDEN_DIMS: [usize; 5] = [64, 128, 256, 512, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "current_version")]
    pub version: u32,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Everything the grid does not vary.
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HgotError> {
        if self.values.is_empty() {
            return Err(HgotError::Config("sweep grid `values` is empty".into()));
        }
        for &v in &self.values {
            let ok = match self.parameter {
                SweepParameter::Rho => v >= 0.0 && v.is_finite(),
                SweepParameter::Sigma => (0.0..=1.0).contains(&v),
                SweepParameter::HiddenDim => HIDDEN_DIMS.iter().any(|&d| d as f64 == v),
            };
            if !ok {
                return Err(HgotError::Config(format!(
                    "sweep value {v} is outside the domain of `{}`",
                    self.parameter.as_str()
                )));
            }
        }
        self.base.validate()
    }

    /// The base config with the swept parameter set to `value`.
    pub fn apply(&self, value: f64) -> RunConfig {
        let mut cfg = self.base.clone();
        match self.parameter {
            SweepParameter::Rho => cfg.train.weights.rho = value,
            SweepParameter::Sigma => cfg.train.weights.sigma = value,
            SweepParameter::HiddenDim => cfg.train.encoder.d = value as usize,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub version: u32,
    pub sizes: Vec<usize>,
    /// Timings keep the fastest of this many repetitions.
    pub repeats: usize,
    pub seed: u64,
    pub cg_iterations: usize,
    pub sinkhorn_iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            sizes: vec![50, 100, 200],
            repeats: 3,
            seed: 0,
            cg_iterations: 5,
            sinkhorn_iterations: 200,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), HgotError> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(HgotError::Config("bench needs at least two positive sizes".into()));
        }
        if self.repeats == 0 || self.cg_iterations == 0 || self.sinkhorn_iterations == 0 {
            return Err(HgotError::Config("bench repeats and iteration counts must be >= 1".into()));
        }
        Ok(())
    }
}

fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T, HgotError> {
    let text = fs::read_to_string(path).map_err(|source| HgotError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| HgotError::Config(format!("{}: {e}", path.display())))?;
    match doc.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CONFIG_VERSION) => {}
        Some(v) => {
            return Err(HgotError::Config(format!(
                "{}: unsupported config version {v} (expected {CONFIG_VERSION})",
                path.display()
            )))
        }
        None => {
            return Err(HgotError::Config(format!(
                "{}: missing integer field `version`",
                path.display()
            )))
        }
    }
    serde_json::from_value(doc).map_err(|e| HgotError::Config(format!("{}: {e}", path.display())))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, HgotError> {
    let mut cfg: RunConfig = read_versioned(path)?;
    cfg.resolve_paths(&config_dir(path));
    Ok(cfg)
}

pub fn load_sweep_spec(path: &Path) -> Result<SweepSpec, HgotError> {
    let mut spec: SweepSpec = read_versioned(path)?;
    spec.base.resolve_paths(&config_dir(path));
    Ok(spec)
}

pub fn load_bench_config(path: &Path) -> Result<BenchConfig, HgotError> {
    read_versioned(path)
}
