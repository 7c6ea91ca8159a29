//! Campaign configuration, one TOML file.
//!
//! ```toml
//! seed = 1
//! patience = 10
//!
//! [library]
//! sources = ["lib/toycodec.c"]
//! include_dirs = ["lib"]
//! headers = ["toycodec.h"]
//!
//! [generator]
//! backend = { kind = "stub", pool = "pool.toml" }
//! budget = 5.0
//! ```
//!
//! Relative paths are taken from the config file's directory. Secrets never
//! live in the file: the HTTP backend reads its key from the variable named
//! by `api_key_env`, and `DRIVERFORGE_*` variables override a few fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::constraints::{AllocCriterion, InferenceConfig};
use crate::fusion::FusionConfig;
use crate::gateway::{GatewayConfig, HttpConfig};
use crate::sanitizer::{LibrarySpec, PipelineConfig};
use crate::scheduler::ScheduleConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LibraryConfig {
    #[serde(flatten)]
    pub build: LibrarySpec,
    /// Pre-made pruned AST dump of the headers; otherwise dumped with clang.
    pub headers_ast: Option<PathBuf>,
    /// Pre-made dumps of the implementation, for the call graph.
    pub impl_ast: Vec<PathBuf>,
    /// Usage notes shown in every prompt.
    pub notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Stub { pool: PathBuf },
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub backend: BackendConfig,
    pub temperature: f64,
    pub n_samples: u32,
    /// Prompt template file; the built-in one otherwise.
    pub template: Option<PathBuf>,
    #[serde(flatten)]
    pub gateway: GatewayConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            backend: BackendConfig::Http(HttpConfig::default()),
            temperature: 0.9,
            n_samples: 10,
            template: None,
            gateway: GatewayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
    /// Most APIs shown in one prompt's context.
    pub gadget_limit: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { schedule: ScheduleConfig::default(), gadget_limit: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignConfig {
    pub seed: u64,
    /// Consecutive iterations without new branches before stopping.
    pub patience: u64,
    pub library: LibraryConfig,
    pub generator: GeneratorConfig,
    pub schedule: ScheduleSection,
    pub pipeline: PipelineConfig,
    pub inference: InferenceConfig,
    pub alloc_probe: AllocCriterion,
    pub fusion: FusionConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            seed: 1,
            patience: 10,
            library: LibraryConfig::default(),
            generator: GeneratorConfig::default(),
            schedule: ScheduleSection::default(),
            pipeline: PipelineConfig::default(),
            inference: InferenceConfig::default(),
            alloc_probe: AllocCriterion::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl CampaignConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c: CampaignConfig = toml::from_str(text)?;
        c.rebase(base);
        Ok(c)
    }

    /// Reads, applies the process environment, and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut c = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        c.apply_env(|k| std::env::var(k).ok())?;
        c.validate()?;
        Ok(c)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let lib = &mut self.library;
        lib.build.sources.iter_mut().for_each(fix);
        lib.build.include_dirs.iter_mut().for_each(fix);
        lib.impl_ast.iter_mut().for_each(fix);
        lib.headers_ast.iter_mut().for_each(fix);
        self.generator.template.iter_mut().for_each(fix);
        if let BackendConfig::Stub { pool } = &mut self.generator.backend {
            fix(pool);
        }
    }

    /// `DRIVERFORGE_BASE_URL`, `DRIVERFORGE_API_KEY_ENV` and
    /// `DRIVERFORGE_BUDGET`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let BackendConfig::Http(h) = &mut self.generator.backend {
            if let Some(u) = get("DRIVERFORGE_BASE_URL") {
                h.base_url = u;
            }
            if let Some(k) = get("DRIVERFORGE_API_KEY_ENV") {
                h.api_key_env = k;
            }
        }
        if let Some(b) = get("DRIVERFORGE_BUDGET") {
            let v: f64 = b.trim().parse().map_err(|_| ConfigError::Invalid(format!("DRIVERFORGE_BUDGET={b} is not a number")))?;
            self.generator.gateway.budget = Some(v);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let g = &self.generator;
        let s = &self.schedule.schedule;
        let counts = [
            ("generator.n_samples", g.n_samples as u64),
            ("schedule.default_len", s.default_len as u64),
            ("schedule.max_len", s.max_len as u64),
            ("schedule.warmup_threshold", s.warmup_threshold as u64),
            ("schedule.gadget_limit", self.schedule.gadget_limit as u64),
            ("patience", self.patience),
            ("pipeline.workers", self.pipeline.workers as u64),
            ("pipeline.exec_timeout_secs", self.pipeline.exec_timeout_secs),
            ("fusion.trials", self.fusion.trials as u64),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if s.default_len > s.max_len {
            return bad(format!("schedule.default_len {} exceeds max_len {}", s.default_len, s.max_len));
        }
        if !(0.0..=2.0).contains(&g.temperature) {
            return bad(format!("generator.temperature {} is outside [0, 2]", g.temperature));
        }
        if !s.exponent.is_finite() || s.exponent < 0.0 {
            return bad(format!("schedule.exponent {} must be a non-negative number", s.exponent));
        }
        if let Some(b) = g.gateway.budget {
            if !(b.is_finite() && b > 0.0) {
                return bad(format!("generator.budget {b} must be positive"));
            }
        }
        if g.gateway.models.is_empty() {
            return bad("generator.models is empty".into());
        }
        if self.library.build.headers.is_empty() {
            return bad("library.headers is empty".into());
        }
        if self.library.build.sources.is_empty() {
            return bad("library.sources is empty".into());
        }
        Ok(())
    }
}
