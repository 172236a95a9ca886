//! Project file and per-run configuration.
//!
//! A project file is TOML. Relative paths resolve against the file's
//! directory. See `examples/project.toml` for a complete example.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::analysis::{ProjectionConfig, ProjectionMethod, TsneParams};
use crate::embedding::EmbeddingProviderConfig;
use crate::sampler::{SamplingStrategy, SelectionOrder, StrategyKind, DEFAULT_K};
use crate::vlm_gateway::{BackendConfig, CassetteMode};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PinnedDefaults {
    #[serde(default)]
    pub one_shot: Vec<String>,
    #[serde(default)]
    pub expert_few_shot: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    #[serde(default = "default_method")]
    pub method: ProjectionMethod,
    #[serde(default)]
    pub tsne: TsneParams,
}

fn default_method() -> ProjectionMethod {
    ProjectionMethod::Tsne
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            method: default_method(),
            tsne: TsneParams::default(),
        }
    }
}

/// One entry of the `[[sweep]]` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub strategy: StrategyKind,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub pinned: Option<Vec<String>>,
    #[serde(default)]
    pub order: Option<SelectionOrder>,
    /// Backend ids to run against; all configured backends when absent.
    #[serde(default)]
    pub backends: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectConfig {
    pub database: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub cassette: PathBuf,
    #[serde(default = "default_cassette_mode")]
    pub cassette_mode: CassetteMode,
    #[serde(default)]
    pub embedding_cache: Option<PathBuf>,
    #[serde(default)]
    pub reviews: Option<PathBuf>,
    pub retrieval_provider: String,
    #[serde(default)]
    pub response_provider: Option<String>,
    #[serde(default)]
    pub default_backend: Option<String>,
    #[serde(default)]
    pub pinned: PinnedDefaults,
    #[serde(default)]
    pub projection: ProjectionSettings,
    pub backends: Vec<BackendConfig>,
    pub embedding_providers: Vec<EmbeddingProviderConfig>,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_cassette_mode() -> CassetteMode {
    CassetteMode::Replay
}

/// Everything one run needs. A snapshot written next to the run output
/// re-executes the same run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub database_path: PathBuf,
    pub output_dir: PathBuf,
    pub cassette_path: PathBuf,
    pub cassette_mode: CassetteMode,
    #[serde(default)]
    pub embedding_cache: Option<PathBuf>,
    pub seed: u64,
    pub strategy: SamplingStrategy,
    pub backend: BackendConfig,
    pub retrieval_provider: EmbeddingProviderConfig,
    #[serde(default)]
    pub response_provider: Option<EmbeddingProviderConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Identity used to drop duplicate sweep entries.
    pub fn identity(&self) -> (String, SamplingStrategy) {
        (self.backend.backend_id.clone(), self.strategy.clone())
    }
}

/// Run id for a strategy on a backend, e.g. `knn_few_shot-gemini` or
/// `knn_few_shot_k5-gemini` when k differs from the default.
pub fn run_id_for(strategy: &SamplingStrategy, backend_id: &str) -> String {
    let mut id = strategy.kind.as_str().to_string();
    if strategy.kind.uses_k() && strategy.k != DEFAULT_K {
        id.push_str(&format!("_k{}", strategy.k));
    }
    if strategy.order == SelectionOrder::Ascending {
        id.push_str("_asc");
    }
    format!("{id}-{backend_id}")
}

impl ProjectConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ProjectConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.rebase(&base);
        cfg.check()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        join(&mut self.database);
        join(&mut self.output_dir);
        join(&mut self.cassette);
        if let Some(p) = &mut self.embedding_cache {
            join(p);
        }
        if let Some(p) = &mut self.reviews {
            join(p);
        }
        for provider in &mut self.embedding_providers {
            if provider.kind == crate::embedding::ProviderKind::PrecomputedFile {
                provider.endpoint_or_path = base
                    .join(&provider.endpoint_or_path)
                    .display()
                    .to_string();
            }
        }
    }

    fn check(&self) -> Result<(), CliError> {
        let mut seen = BTreeSet::new();
        for b in &self.backends {
            if !seen.insert(b.backend_id.as_str()) {
                return Err(CliError::Config(format!("backend `{}` defined twice", b.backend_id)));
            }
        }
        let mut seen = BTreeSet::new();
        for p in &self.embedding_providers {
            if !seen.insert(p.provider_id.as_str()) {
                return Err(CliError::Config(format!(
                    "embedding provider `{}` defined twice",
                    p.provider_id
                )));
            }
        }
        self.provider(&self.retrieval_provider)?;
        if let Some(id) = &self.response_provider {
            self.provider(id)?;
        }
        if let Some(id) = &self.default_backend {
            self.backend(id)?;
        }
        Ok(())
    }

    pub fn backend(&self, id: &str) -> Result<&BackendConfig, CliError> {
        self.backends
            .iter()
            .find(|b| b.backend_id == id)
            .ok_or_else(|| CliError::Config(format!("unknown backend `{id}`")))
    }

    pub fn provider(&self, id: &str) -> Result<&EmbeddingProviderConfig, CliError> {
        self.embedding_providers
            .iter()
            .find(|p| p.provider_id == id)
            .ok_or_else(|| CliError::Config(format!("unknown embedding provider `{id}`")))
    }

    /// The backend used when none is named: `default_backend`, or the only one.
    pub fn default_backend_id(&self) -> Result<String, CliError> {
        if let Some(id) = &self.default_backend {
            return Ok(id.clone());
        }
        match self.backends.as_slice() {
            [only] => Ok(only.backend_id.clone()),
            [] => Err(CliError::Config("no backends configured".into())),
            _ => Err(CliError::Config(
                "several backends configured; pass --backend or set default_backend".into(),
            )),
        }
    }

    /// Strategy with pinned ids filled from `[pinned]` when not given.
    pub fn strategy(
        &self,
        kind: StrategyKind,
        k: Option<usize>,
        pinned: Option<Vec<String>>,
        order: Option<SelectionOrder>,
    ) -> SamplingStrategy {
        let mut s = SamplingStrategy::new(kind);
        if let Some(k) = k {
            s.k = k;
        }
        if let Some(order) = order {
            s.order = order;
        }
        let pinned = pinned.unwrap_or_else(|| match kind {
            StrategyKind::OneShot => self.pinned.one_shot.clone(),
            StrategyKind::ExpertFewShot => self.pinned.expert_few_shot.clone(),
            _ => Vec::new(),
        });
        if matches!(kind, StrategyKind::OneShot | StrategyKind::ExpertFewShot) {
            s.pinned_ids = pinned;
        }
        s
    }

    pub fn run_config(&self, strategy: SamplingStrategy, backend_id: &str) -> Result<RunConfig, CliError> {
        let backend = self.backend(backend_id)?.clone();
        Ok(RunConfig {
            run_id: run_id_for(&strategy, backend_id),
            database_path: self.database.clone(),
            output_dir: self.output_dir.clone(),
            cassette_path: self.cassette.clone(),
            cassette_mode: self.cassette_mode,
            embedding_cache: self.embedding_cache.clone(),
            seed: self.seed,
            strategy,
            backend,
            retrieval_provider: self.provider(&self.retrieval_provider)?.clone(),
            response_provider: match &self.response_provider {
                Some(id) => Some(self.provider(id)?.clone()),
                None => None,
            },
        })
    }

    /// Expands `[[sweep]]` into run configs, in file order. An empty sweep
    /// list means every strategy against every backend.
    pub fn sweep_configs(&self) -> Result<Vec<RunConfig>, CliError> {
        let all_backends: Vec<String> = self.backends.iter().map(|b| b.backend_id.clone()).collect();
        let entries: Vec<SweepEntry> = if self.sweep.is_empty() {
            StrategyKind::ALL
                .iter()
                .map(|&strategy| SweepEntry {
                    strategy,
                    k: None,
                    pinned: None,
                    order: None,
                    backends: None,
                })
                .collect()
        } else {
            self.sweep.clone()
        };
        let mut out = Vec::new();
        for backend_id in &all_backends {
            for e in &entries {
                let wanted = e.backends.as_ref().is_none_or(|b| b.contains(backend_id));
                if wanted {
                    let strategy = self.strategy(e.strategy, e.k, e.pinned.clone(), e.order);
                    out.push(self.run_config(strategy, backend_id)?);
                }
            }
        }
        for e in &entries {
            for b in e.backends.iter().flatten() {
                self.backend(b)?;
            }
        }
        Ok(out)
    }

    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig {
            method: self.projection.method,
            seed: self.seed,
            tsne: self.projection.tsne.clone(),
        }
    }
}
