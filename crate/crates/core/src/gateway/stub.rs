//! Offline backend serving canned programs from a TOML pool.
//!
//! ```toml
//! [[entry]]
//! combination = ["lib_open", "lib_read"]   # or ["*"]
//! files = ["programs/open_read.c"]         # relative to the pool file
//! programs = ["int LLVMFuzzerTestOneInput(...) { ... }"]
//! ```

use std::path::Path;

use serde::Deserialize;

use super::{estimate_tokens, Backend, BackendError, BackendResponse, GenerationRequest, ModelSpec};

#[derive(Debug, Deserialize)]
struct PoolFile {
    #[serde(default)]
    entry: Vec<PoolEntry>,
}

#[derive(Debug, Deserialize)]
struct PoolEntry {
    combination: Vec<String>,
    #[serde(default)]
    files: Vec<String>,
    #[serde(default)]
    programs: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct StubPool {
    /// (sorted combination, or None for the wildcard; program texts).
    entries: Vec<(Option<Vec<String>>, Vec<String>)>,
}

impl StubPool {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let file: PoolFile = toml::from_str(text)?;
        let mut entries = Vec::new();
        for e in file.entry {
            let mut programs = e.programs;
            for f in &e.files {
                programs.push(std::fs::read_to_string(base.join(f))?);
            }
            let key = if e.combination.iter().any(|c| c == "*") {
                None
            } else {
                let mut c = e.combination;
                c.sort();
                Some(c)
            };
            entries.push((key, programs));
        }
        Ok(StubPool { entries })
    }

    pub fn add(&mut self, combination: Option<Vec<String>>, programs: Vec<String>) {
        let key = combination.map(|mut c| {
            c.sort();
            c
        });
        self.entries.push((key, programs));
    }

    /// Programs for a combination: exact matches first, then wildcards.
    pub fn programs_for(&self, combination: Option<&[String]>) -> Vec<&str> {
        let key = combination.map(|c| {
            let mut c = c.to_vec();
            c.sort();
            c
        });
        let exact: Vec<&str> = self
            .entries
            .iter()
            .filter(|(k, _)| k.is_some() && k.as_ref() == key.as_ref())
            .flat_map(|(_, p)| p.iter().map(String::as_str))
            .collect();
        if !exact.is_empty() {
            return exact;
        }
        self.entries.iter().filter(|(k, _)| k.is_none()).flat_map(|(_, p)| p.iter().map(String::as_str)).collect()
    }
}

/// Deterministic backend: the i-th sample of a request is
/// `pool[(nonce * n + i) % len]`, so replaying a request replays its output.
#[derive(Debug, Clone, Default)]
pub struct StubBackend {
    pool: StubPool,
}

impl StubBackend {
    pub fn new(pool: StubPool) -> Self {
        StubBackend { pool }
    }
}

impl Backend for StubBackend {
    fn complete(&self, _model: &ModelSpec, req: &GenerationRequest, _max_tokens: u32) -> Result<BackendResponse, BackendError> {
        let comb = req.combination.as_ref().map(|c| c.apis());
        let pool = self.pool.programs_for(comb);
        if pool.is_empty() {
            return Err(BackendError::Fatal("stub pool has no program for this combination".into()));
        }
        let n = req.n_samples as u64;
        let texts: Vec<String> = (0..n)
            .map(|i| {
                let p = pool[(req.nonce.wrapping_mul(n).wrapping_add(i) % pool.len() as u64) as usize];
                format!("Here is a fuzz driver:\n```c\n{}\n```\n", p.trim_end())
            })
            .collect();
        let completion_tokens = texts.iter().map(|t| estimate_tokens(t) as u64).sum();
        Ok(BackendResponse { texts, prompt_tokens: estimate_tokens(&req.prompt) as u64, completion_tokens })
    }
}
