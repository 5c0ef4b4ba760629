use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use pkg_core::backend::cache::ResponseCache;
use pkg_core::backend::stub::{prompt_digest, stub_descriptor, StubTransport};
use pkg_core::backend::{Backend, BackendDescriptor, BackendRole};
use pkg_core::guide::{GenerationSettings, StrategyKind};
use pkg_core::{Bm25Params, SplitName, TaskKind, TemplateSet};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_rate() -> f64 {
    5.0
}
fn default_top_n() -> usize {
    1
}
fn default_in_flight() -> usize {
    4
}
fn default_budget() -> f64 {
    0.1
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubConfig {
    #[serde(default)]
    pub default: String,
    /// Keyed by prompt text or by its 64-character SHA-256 hex digest.
    #[serde(default)]
    pub replies: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub model_name: String,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rate")]
    pub rate_limit: f64,
    #[serde(default)]
    pub stub: Option<StubConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn get(&self, split: SplitName) -> Option<&PathBuf> {
        match split {
            SplitName::Train => self.train.as_ref(),
            SplitName::Valid => self.valid.as_ref(),
            SplitName::Test => self.test.as_ref(),
        }
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        [&mut self.train, &mut self.valid, &mut self.test]
            .into_iter()
            .filter_map(Option::as_mut)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bm25Config {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Config {
    fn default() -> Self {
        let p = Bm25Params::default();
        Bm25Config { k1: p.k1, b: p.b }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task_kind: TaskKind,
    #[serde(default)]
    pub datasets: DatasetPaths,
    #[serde(default = "default_eval_split")]
    pub eval_split: SplitName,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub pkg_backend: Option<BackendConfig>,
    #[serde(default)]
    pub llm_backend: Option<BackendConfig>,
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub bm25: Bm25Config,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub passages: Option<PathBuf>,
    #[serde(default)]
    pub index_path: Option<PathBuf>,
    /// Largest tolerated fraction of failed records before a run exits with status 3.
    #[serde(default = "default_budget")]
    pub failure_budget: f64,
    #[serde(default)]
    pub generation: GenerationSettings,
}

fn default_eval_split() -> SplitName {
    SplitName::Test
}
fn default_strategy() -> StrategyKind {
    StrategyKind::Direct
}

/// Flag values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub max_in_flight: Option<usize>,
    pub templates: Option<PathBuf>,
    pub strategy: Option<StrategyKind>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses the file and resolves relative paths against its directory.
    /// Flag paths stay relative to the working directory.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.datasets.paths_mut().for_each(|p| resolve(&base, p));
        for p in [
            &mut cfg.templates,
            &mut cfg.cache_path,
            &mut cfg.passages,
            &mut cfg.index_path,
        ]
        .into_iter()
        .flatten()
        {
            resolve(&base, p);
        }
        resolve(&base, &mut cfg.output_dir);

        if let Some(o) = &overrides.output {
            cfg.output_dir = o.clone();
        }
        if let Some(n) = overrides.max_in_flight {
            cfg.max_in_flight = n;
        }
        if let Some(t) = &overrides.templates {
            cfg.templates = Some(t.clone());
        }
        if let Some(s) = overrides.strategy {
            cfg.strategy = s;
        }
        cfg.validate_common()?;
        Ok(cfg)
    }

    fn validate_common(&self) -> Result<(), CliError> {
        if self.max_in_flight == 0 {
            return Err(CliError::Config("max_in_flight must be at least 1".into()));
        }
        if self.top_n == 0 {
            return Err(CliError::Config("top_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_budget) {
            return Err(CliError::Config("failure_budget must lie in [0, 1]".into()));
        }
        Bm25Params::new(self.bm25.k1, self.bm25.b).map_err(|e| CliError::Config(e.to_string()))?;
        if !self.generation.temperature.is_finite() || self.generation.temperature < 0.0 {
            return Err(CliError::Config("generation.temperature must be finite and non-negative".into()));
        }
        for (name, b) in [("pkg_backend", &self.pkg_backend), ("llm_backend", &self.llm_backend)] {
            if let Some(b) = b {
                b.validate(name)?;
            }
        }
        require_existing(self.templates.as_deref(), "templates")?;
        require_existing(self.passages.as_deref(), "passages")?;
        Ok(())
    }

    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params::new(self.bm25.k1, self.bm25.b).expect("validated at load")
    }

    pub fn dataset_path(&self, split: SplitName) -> Result<&Path, CliError> {
        let p = self
            .datasets
            .get(split)
            .ok_or_else(|| CliError::Config(format!("no dataset configured for the {split} split")))?;
        require_existing(Some(p), &format!("datasets.{split}"))?;
        Ok(p)
    }

    pub fn load_templates(&self) -> Result<TemplateSet, CliError> {
        match &self.templates {
            Some(p) => TemplateSet::load_overrides(p).map_err(|e| CliError::Config(e.to_string())),
            None => Ok(TemplateSet::default()),
        }
    }

    /// Directory holding the most recent index build when no explicit path is configured.
    pub fn default_index_path(&self) -> PathBuf {
        self.output_dir.join("index-latest").join("index.pkgi")
    }

    pub fn resolved_index_path(&self) -> PathBuf {
        self.index_path.clone().unwrap_or_else(|| self.default_index_path())
    }
}

pub fn require_existing(path: Option<&Path>, what: &str) -> Result<(), CliError> {
    match path {
        Some(p) if !p.exists() => Err(CliError::Config(format!("{what}: {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl BackendConfig {
    fn validate(&self, name: &str) -> Result<(), CliError> {
        match (&self.endpoint_url, &self.stub) {
            (Some(_), Some(_)) => Err(CliError::Config(format!("{name}: set either endpoint_url or stub, not both"))),
            (None, None) => Err(CliError::Config(format!("{name}: needs endpoint_url or stub"))),
            _ => self.descriptor(BackendRole::BlackBoxLlm).validate().map_err(|e| CliError::Config(format!("{name}: {e}"))),
        }
    }

    fn descriptor(&self, role: BackendRole) -> BackendDescriptor {
        if self.stub.is_some() {
            return stub_descriptor(role, &self.model_name);
        }
        BackendDescriptor {
            role,
            endpoint_url: self.endpoint_url.clone().unwrap_or_default(),
            model_name: self.model_name.clone(),
            timeout: Duration::try_from_secs_f64(self.timeout_secs).unwrap_or(Duration::ZERO),
            max_retries: self.max_retries,
            rate_limit: self.rate_limit,
        }
    }

    pub fn build(&self, role: BackendRole, cache: Option<&Arc<ResponseCache>>) -> Result<Backend, CliError> {
        let desc = self.descriptor(role);
        let backend = match &self.stub {
            Some(stub) => {
                let script: HashMap<String, String> = stub
                    .replies
                    .iter()
                    .map(|(k, v)| (as_digest(k), v.clone()))
                    .collect();
                Backend::new(desc, Arc::new(StubTransport::from_texts(script, stub.default.clone())))
            }
            None => Backend::http(desc),
        }
        .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(match cache {
            Some(c) => backend.with_cache(c.clone()),
            None => backend,
        })
    }
}

fn as_digest(key: &str) -> String {
    if key.len() == 64 && key.bytes().all(|b| b.is_ascii_hexdigit()) {
        key.to_ascii_lowercase()
    } else {
        prompt_digest(key)
    }
}
