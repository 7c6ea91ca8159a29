//! Power schedule over library APIs and the combination mutator.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::BranchSet;
use crate::library::{LibraryError, LibraryModel};

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("unknown API `{0}`")]
    UnknownApi(String),
    #[error("no API statistics to choose from")]
    NoApis,
    #[error("invalid combination: {0}")]
    InvalidCombination(String),
}

impl From<LibraryError> for ScheduleError {
    fn from(e: LibraryError) -> Self {
        match e {
            LibraryError::UnknownApi(a) => ScheduleError::UnknownApi(a),
            other => ScheduleError::InvalidCombination(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiStats {
    pub api: String,
    pub cov: f64,
    pub seed_count: u64,
    pub prompt_count: u64,
    pub energy: f64,
}

impl ApiStats {
    pub fn new(api: impl Into<String>) -> Self {
        ApiStats { api: api.into(), cov: 0.0, seed_count: 0, prompt_count: 0, energy: 1.0 }
    }

    pub fn recompute(&mut self, exponent: f64) {
        self.energy = energy(self.cov, self.seed_count, self.prompt_count, exponent);
    }
}

/// Ordered, duplicate-free, non-empty list of API names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ApiCombination(Vec<String>);

impl ApiCombination {
    pub fn new(apis: Vec<String>) -> Result<Self, ScheduleError> {
        if apis.is_empty() {
            return Err(ScheduleError::InvalidCombination("empty".into()));
        }
        for (i, a) in apis.iter().enumerate() {
            if apis[..i].contains(a) {
                return Err(ScheduleError::InvalidCombination(format!("duplicate `{a}`")));
            }
        }
        Ok(ApiCombination(apis))
    }

    pub fn apis(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, api: &str) -> bool {
        self.0.iter().any(|a| a == api)
    }

    /// Stable text key, e.g. for the stub generator's program pool.
    pub fn key(&self) -> String {
        self.0.join(",")
    }
}

impl TryFrom<Vec<String>> for ApiCombination {
    type Error = ScheduleError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        ApiCombination::new(v)
    }
}

impl From<ApiCombination> for Vec<String> {
    fn from(c: ApiCombination) -> Self {
        c.0
    }
}

/// Fraction of branches covered inside `api` and everything it reaches.
/// An API without instrumented branches counts as fully covered.
pub fn api_coverage(api: &str, branches: &BranchSet, model: &LibraryModel) -> Result<f64, ScheduleError> {
    if !model.is_api(api) {
        return Err(ScheduleError::UnknownApi(api.to_owned()));
    }
    let funcs = model.reachable_functions(api);
    let total: u64 = funcs.iter().filter_map(|f| model.branch_totals.get(f)).sum();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(branches.count_in(&funcs).min(total) as f64 / total as f64)
}

pub fn energy(cov: f64, seed_count: u64, prompt_count: u64, exponent: f64) -> f64 {
    (1.0 - cov) / ((1.0 + seed_count as f64).powf(exponent) * (1.0 + prompt_count as f64).powf(exponent))
}

pub fn quality(density: u64, unique_branches: u64) -> u64 {
    density * (1 + unique_branches)
}

/// Index into `weights` sampled proportionally; uniform when every weight
/// is zero.
fn weighted_pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    match WeightedIndex::new(weights) {
        Ok(w) => w.sample(rng),
        Err(_) => rng.gen_range(0..weights.len()),
    }
}

pub fn choose_by_energy<'s, R: Rng + ?Sized>(stats: &'s [ApiStats], rng: &mut R) -> Result<&'s str, ScheduleError> {
    if stats.is_empty() {
        return Err(ScheduleError::NoApis);
    }
    let w: Vec<f64> = stats.iter().map(|s| s.energy.max(0.0)).collect();
    Ok(&stats[weighted_pick(&w, rng)].api)
}

/// A unique seed as the mutator sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PivotSeed {
    pub id: String,
    pub quality: u64,
    pub critical: Vec<String>,
}

fn choose_by_quality<'s, R: Rng + ?Sized>(seeds: &'s [PivotSeed], rng: &mut R) -> &'s PivotSeed {
    let w: Vec<f64> = seeds.iter().map(|s| s.quality as f64).collect();
    &seeds[weighted_pick(&w, rng)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    WarmUp,
    Insertion,
    Replacement,
    Crossover,
    Blind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    pub combination: ApiCombination,
    pub operator: Operator,
    pub pivot: Option<String>,
    /// Set when the pivot had no critical calls and warm-up was used instead.
    pub empty_pivot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub default_len: usize,
    pub max_len: usize,
    pub warmup_threshold: usize,
    pub exponent: f64,
    /// Uniform selection baseline instead of the power schedule.
    pub blind: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { default_len: 5, max_len: 10, warmup_threshold: 10, exponent: 1.0, blind: false }
    }
}

/// Per-API statistics in library declaration order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub config: ScheduleConfig,
    pub stats: Vec<ApiStats>,
}

impl Schedule {
    pub fn new(model: &LibraryModel, config: ScheduleConfig) -> Self {
        let mut s = Schedule { stats: model.apis.iter().map(|a| ApiStats::new(&a.name)).collect(), config };
        for st in &mut s.stats {
            st.recompute(s.config.exponent);
        }
        s
    }

    /// Refreshes coverage and seed counts from the bank.
    pub fn refresh(&mut self, model: &LibraryModel, global: &BranchSet, seed_counts: &BTreeMap<String, u64>) -> Result<(), ScheduleError> {
        for st in &mut self.stats {
            st.cov = api_coverage(&st.api, global, model)?;
            st.seed_count = seed_counts.get(&st.api).copied().unwrap_or(0);
            st.recompute(self.config.exponent);
        }
        Ok(())
    }

    fn record_prompt(&mut self, comb: &ApiCombination) {
        for st in &mut self.stats {
            if comb.contains(&st.api) {
                st.prompt_count += 1;
                st.recompute(self.config.exponent);
            }
        }
    }

    /// Up to `n` distinct APIs, each drawn by energy from those not yet
    /// drawn.
    fn draw_distinct<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<String> {
        let mut pool: Vec<&ApiStats> = self.stats.iter().collect();
        let mut out = Vec::new();
        while out.len() < n && !pool.is_empty() {
            let w: Vec<f64> = pool.iter().map(|s| s.energy.max(0.0)).collect();
            let i = weighted_pick(&w, rng);
            out.push(pool.remove(i).api.clone());
        }
        out
    }

    fn choose_outside<R: Rng + ?Sized>(&self, comb: &[String], rng: &mut R) -> Option<String> {
        let outside: Vec<ApiStats> = self.stats.iter().filter(|s| !comb.contains(&s.api)).cloned().collect();
        choose_by_energy(&outside, rng).ok().map(str::to_owned)
    }

    /// Picks the next prompt's combination and counts it as prompted.
    pub fn mutate<R: Rng + ?Sized>(&mut self, unique_seeds: &[PivotSeed], rng: &mut R) -> Result<Mutation, ScheduleError> {
        if self.stats.is_empty() {
            return Err(ScheduleError::NoApis);
        }
        let m = self.select(unique_seeds, rng)?;
        self.record_prompt(&m.combination);
        Ok(m)
    }

    fn select<R: Rng + ?Sized>(&self, unique_seeds: &[PivotSeed], rng: &mut R) -> Result<Mutation, ScheduleError> {
        let cfg = &self.config;
        if cfg.blind {
            let apis: Vec<String> = self.stats.choose_multiple(rng, cfg.default_len.min(self.stats.len())).map(|s| s.api.clone()).collect();
            return Ok(Mutation { combination: ApiCombination::new(apis)?, operator: Operator::Blind, pivot: None, empty_pivot: false });
        }
        let warm_up = |empty_pivot: bool, rng: &mut R| -> Result<Mutation, ScheduleError> {
            Ok(Mutation {
                combination: ApiCombination::new(self.draw_distinct(cfg.default_len, rng))?,
                operator: Operator::WarmUp,
                pivot: None,
                empty_pivot,
            })
        };
        if unique_seeds.len() < cfg.warmup_threshold || unique_seeds.is_empty() {
            return warm_up(false, rng);
        }
        let pivot = choose_by_quality(unique_seeds, rng);
        let mut comb: Vec<String> = Vec::new();
        for a in &pivot.critical {
            if !comb.contains(a) && self.stats.iter().any(|s| &s.api == a) {
                comb.push(a.clone());
            }
        }
        comb.truncate(cfg.max_len);
        if comb.is_empty() {
            return warm_up(true, rng);
        }
        let has_outside = self.stats.iter().any(|s| !comb.contains(&s.api));
        let mut ops = Vec::new();
        if has_outside && comb.len() < cfg.max_len {
            ops.push(Operator::Insertion);
        }
        if has_outside {
            ops.push(Operator::Replacement);
        }
        ops.push(Operator::Crossover);
        let op = *ops.choose(rng).expect("crossover is always applicable");
        let out = match op {
            Operator::Insertion => {
                let a = self.choose_outside(&comb, rng).expect("checked non-members exist");
                let mut c = comb;
                c.push(a);
                c
            }
            Operator::Replacement => {
                let i = rng.gen_range(0..comb.len());
                let a = self.choose_outside(&comb, rng).expect("checked non-members exist");
                let mut c = comb;
                c[i] = a;
                c
            }
            _ => {
                let other = choose_by_quality(unique_seeds, rng);
                let second: Vec<String> = other.critical.iter().filter(|a| self.stats.iter().any(|s| &s.api == *a)).cloned().collect();
                crossover(&comb, &second, rng, cfg.max_len)
            }
        };
        Ok(Mutation { combination: ApiCombination::new(out)?, operator: op, pivot: Some(pivot.id.clone()), empty_pivot: false })
    }
}

/// `first[..cut1] ++ second[cut2..]`, deduplicated in order and truncated,
/// with `cut1` uniform in `1..=|first|` and `cut2` uniform in `0..|second|`.
pub fn crossover<R: Rng + ?Sized>(first: &[String], second: &[String], rng: &mut R, max_len: usize) -> Vec<String> {
    let cut1 = rng.gen_range(1..=first.len());
    let cut2 = if second.is_empty() { 0 } else { rng.gen_range(0..second.len()) };
    crossover_at(first, second, cut1, cut2, max_len)
}

pub fn crossover_at(first: &[String], second: &[String], cut1: usize, cut2: usize, max_len: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for a in first[..cut1].iter().chain(second[cut2.min(second.len())..].iter()) {
        if !out.contains(a) {
            out.push(a.clone());
        }
    }
    out.truncate(max_len);
    out
}
