//! Branch coverage collected through the sanitizer-coverage guard runtime.
//!
//! The library is compiled with `trace-pc-guard,pc-table`; the runtime shim
//! in `assets/cov_rt.c` writes one line per instrumented edge at exit. Lines
//! carry the edge's offset from the image base, the pc-table flags (bit 0
//! marks a function entry) and whether it was hit. A branch is identified
//! by its function and its index among that function's edges, which is
//! stable for every binary linking the same library objects.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::toolchain::{Toolchain, ToolchainError};

pub const DUMP_HEADER: &str = "driverforge-cov 1";

#[derive(Debug, thiserror::Error)]
pub enum CoverageError {
    #[error("malformed coverage dump: {0}")]
    Malformed(String),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error("nm failed on {0}")]
    Nm(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Branch {
    pub func: String,
    pub id: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSet {
    pub covered: BTreeSet<Branch>,
}

impl BranchSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.covered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covered.is_empty()
    }

    pub fn insert(&mut self, func: impl Into<String>, id: u32) -> bool {
        self.covered.insert(Branch { func: func.into(), id })
    }

    pub fn contains(&self, b: &Branch) -> bool {
        self.covered.contains(b)
    }

    /// Union; returns how many branches were new.
    pub fn merge(&mut self, other: &BranchSet) -> usize {
        let before = self.covered.len();
        self.covered.extend(other.covered.iter().cloned());
        self.covered.len() - before
    }

    /// Branches in `self` absent from `seen`.
    pub fn difference(&self, seen: &BranchSet) -> BranchSet {
        BranchSet { covered: self.covered.difference(&seen.covered).cloned().collect() }
    }

    /// Covered branches inside any of `funcs`.
    pub fn count_in(&self, funcs: &BTreeSet<String>) -> u64 {
        self.covered.iter().filter(|b| funcs.contains(&b.func)).count() as u64
    }

    pub fn iter(&self) -> impl Iterator<Item = &Branch> {
        self.covered.iter()
    }
}

impl FromIterator<Branch> for BranchSet {
    fn from_iter<I: IntoIterator<Item = Branch>>(iter: I) -> Self {
        BranchSet { covered: iter.into_iter().collect() }
    }
}

/// Function symbols of a binary, sorted by address.
#[derive(Debug, Clone, Default)]
pub struct Symbols {
    by_addr: Vec<(u64, String)>,
}

impl Symbols {
    pub fn from_binary(tc: &Toolchain, exe: &Path) -> Result<Self, CoverageError> {
        let mut cmd = std::process::Command::new(&tc.nm);
        cmd.arg("--defined-only").arg(exe);
        let out = tc.output(cmd)?;
        if !out.status.success() {
            return Err(CoverageError::Nm(exe.display().to_string()));
        }
        Ok(Self::parse_nm(&String::from_utf8_lossy(&out.stdout)))
    }

    /// Parses `nm` output, keeping text symbols.
    pub fn parse_nm(text: &str) -> Self {
        let mut by_addr: Vec<(u64, String)> = text
            .lines()
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                let addr = u64::from_str_radix(it.next()?, 16).ok()?;
                let kind = it.next()?;
                let name = it.next()?;
                matches!(kind, "T" | "t" | "W" | "w").then(|| (addr, name.to_owned()))
            })
            .collect();
        by_addr.sort();
        by_addr.dedup_by_key(|(a, _)| *a);
        Symbols { by_addr }
    }

    pub fn function_at(&self, addr: u64) -> Option<&str> {
        let i = self.by_addr.partition_point(|(a, _)| *a <= addr);
        (i > 0).then(|| self.by_addr[i - 1].1.as_str())
    }
}

/// One decoded run: covered branches plus per-function edge totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Decoded {
    pub covered: BranchSet,
    pub totals: BTreeMap<String, u64>,
    /// Harness call-site markers that executed.
    pub sites: BTreeSet<usize>,
}

pub fn decode_dump(text: &str, symbols: &Symbols) -> Result<Decoded, CoverageError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(DUMP_HEADER) {
        return Err(CoverageError::Malformed("missing header".into()));
    }
    let mut out = Decoded::default();
    let mut current: Option<(String, u32)> = None;
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || CoverageError::Malformed(format!("line {}: `{line}`", n + 2));
        if let Some(k) = line.strip_prefix("site ") {
            out.sites.insert(k.trim().parse().map_err(|_| bad())?);
            continue;
        }
        let mut it = line.split_whitespace();
        let off = u64::from_str_radix(it.next().ok_or_else(bad)?, 16).map_err(|_| bad())?;
        let flags: u64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let hit = it.next().ok_or_else(bad)? == "1";
        let next_func = if flags & 1 == 1 || current.is_none() {
            Some(symbols.function_at(off).map(str::to_owned).unwrap_or_else(|| format!("0x{off:x}")))
        } else {
            None
        };
        let (func, idx) = match (next_func, current.take()) {
            (Some(f), _) => (f, 0),
            (None, Some((f, i))) => (f, i + 1),
            (None, None) => unreachable!("handled by next_func"),
        };
        *out.totals.entry(func.clone()).or_default() += 1;
        if hit {
            out.covered.insert(func.clone(), idx);
        }
        current = Some((func, idx));
    }
    Ok(out)
}
