//! The campaign loop: pick a combination, prompt, generate, sanitize, admit.
//! Stops after `patience` iterations without new branches or when the query
//! budget runs out.
//!
//! State is checkpointed under `<dir>/checkpoint/` after every iteration
//! (bank, schedule, ledger, model, loop state, snapshots). Each iteration
//! draws from its own rng stream, so a resumed campaign replays exactly what
//! an uninterrupted one would have done.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::ProgramAst;
use crate::ast::TranslationUnit;
use crate::bank::{Admission, BankError, SeedBank};
use crate::config::{CampaignConfig, ConfigError, LibraryConfig};
use crate::gateway::{Backend, CostLedger, Gateway, GatewayConfig, GatewayError, GenerationRequest, Money};
use crate::library::{ingest_ast, select_gadget, ApiFunction, LibraryModel};
use crate::prompt::{build_prompt, PromptLimits, PromptSpec, DEFAULT_TEMPLATE};
use crate::sanitizer::{Pipeline, Stage, Verdict};
use crate::scheduler::{ApiCombination, Operator, Schedule, ScheduleConfig, ScheduleError};
use crate::toolchain::{dump_pruned, Toolchain};

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Gateway(GatewayError),
    #[error("campaign I/O at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint file {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("checkpoint was made with seed {found}, config says {expected}")]
    SeedMismatch { expected: u64, found: u64 },
    #[error("no iteration snapshots under {0}")]
    MissingSnapshots(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CampaignError + '_ {
    move |source| CampaignError::Io { path: path.to_path_buf(), source }
}

/// Sanitizes one iteration's programs; results keep the input order.
pub trait BatchSanitizer: Sync {
    fn sanitize_batch(&self, programs: &[(String, String)], apis: &BTreeSet<String>, corpus: &[Vec<u8>]) -> Vec<Result<Verdict, String>>;

    /// Branch counts per library function, if known before any program runs.
    fn branch_totals(&self) -> BTreeMap<String, u64> {
        BTreeMap::new()
    }
}

impl BatchSanitizer for Pipeline {
    fn sanitize_batch(&self, programs: &[(String, String)], apis: &BTreeSet<String>, corpus: &[Vec<u8>]) -> Vec<Result<Verdict, String>> {
        Pipeline::sanitize_batch(self, programs, apis, corpus).into_iter().map(|r| r.map_err(|e| e.to_string())).collect()
    }

    fn branch_totals(&self) -> BTreeMap<String, u64> {
        self.library_totals().unwrap_or_else(|e| {
            log::warn!("cannot measure library branches up front: {e}");
            BTreeMap::new()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    NoProgress,
    BudgetExhausted,
    /// The caller's iteration cap; the campaign can be resumed.
    IterationLimit,
}

/// Statistics of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: u64,
    pub operator: Operator,
    pub combination: Vec<String>,
    pub pivot: Option<String>,
    pub generated: usize,
    pub admitted: usize,
    pub unique_admitted: usize,
    /// Rejected programs by reason: syntax, execution, fuzzing, coverage,
    /// duplicate, error.
    pub rejections: BTreeMap<String, usize>,
    pub new_branches: usize,
    pub covered_branches: usize,
    pub seeds: usize,
    pub unique_seeds: usize,
    pub crashes: usize,
    /// Cumulative spend.
    pub spend: Money,
    /// Energies the combination was drawn with.
    pub energies: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub iterations: u64,
    pub seeds: usize,
    pub unique_seeds: usize,
    pub covered_branches: usize,
    pub crashes: usize,
    pub spend: Money,
    pub stop: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LoopState {
    seed: u64,
    next_iteration: u64,
    no_progress: u64,
    stop: Option<StopReason>,
}

/// The parts of the config the loop itself reads.
#[derive(Debug, Clone)]
pub struct LoopSettings {
    pub seed: u64,
    pub patience: u64,
    pub n_samples: u32,
    pub temperature: f64,
    pub gadget_limit: usize,
    pub schedule: ScheduleConfig,
    pub headers: Vec<String>,
    pub notes: Option<String>,
    pub template: String,
    pub limits: PromptLimits,
}

impl LoopSettings {
    pub fn from_config(cfg: &CampaignConfig) -> Result<Self, ConfigError> {
        let template = match &cfg.generator.template {
            Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?,
            None => DEFAULT_TEMPLATE.to_owned(),
        };
        Ok(LoopSettings {
            seed: cfg.seed,
            patience: cfg.patience,
            n_samples: cfg.generator.n_samples,
            temperature: cfg.generator.temperature,
            gadget_limit: cfg.schedule.gadget_limit,
            schedule: cfg.schedule.schedule.clone(),
            headers: cfg.library.build.headers.clone(),
            notes: cfg.library.notes.clone(),
            template,
            limits: PromptLimits::default(),
        })
    }
}

pub struct Campaign<'a> {
    settings: LoopSettings,
    model: LibraryModel,
    apis: BTreeSet<String>,
    gateway: Gateway,
    sanitizer: &'a dyn BatchSanitizer,
    dir: PathBuf,
    bank: SeedBank,
    schedule: Schedule,
    state: LoopState,
    snapshots: Vec<Snapshot>,
}

impl<'a> Campaign<'a> {
    /// Starts a campaign in `dir`, or resumes the one checkpointed there. A
    /// resumed campaign keeps its persisted model and ledger; `model` is only
    /// used for a fresh start.
    pub fn open(
        settings: LoopSettings,
        mut model: LibraryModel,
        gateway: GatewayConfig,
        backend: Box<dyn Backend>,
        sanitizer: &'a dyn BatchSanitizer,
        library_hash: &str,
        dir: &Path,
    ) -> Result<Self, CampaignError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (model, bank, schedule, ledger, state, snapshots) = match checkpoint_dir(dir) {
            Some(ck) => {
                let state: LoopState = read_json(&ck.join("state.json"))?;
                if state.seed != settings.seed {
                    return Err(CampaignError::SeedMismatch { expected: settings.seed, found: state.seed });
                }
                let bank = SeedBank::load(&ck.join("bank"), Some(library_hash))?;
                log::info!("resuming at iteration {} with {} seeds", state.next_iteration, bank.seeds().len());
                (
                    read_json(&ck.join("model.json"))?,
                    bank,
                    read_json(&ck.join("schedule.json"))?,
                    read_json(&ck.join("ledger.json"))?,
                    state,
                    read_snapshots(&ck.join("snapshots.jsonl"))?,
                )
            }
            None => {
                if model.branch_totals.is_empty() {
                    let totals = sanitizer.branch_totals();
                    if !totals.is_empty() {
                        model.set_branch_totals(totals);
                    }
                }
                let schedule = Schedule::new(&model, settings.schedule.clone());
                let state = LoopState { seed: settings.seed, next_iteration: 0, no_progress: 0, stop: None };
                (model, SeedBank::new(library_hash), schedule, CostLedger::default(), state, Vec::new())
            }
        };
        let apis = model.api_names().into_iter().collect();
        Ok(Campaign {
            settings,
            model,
            apis,
            gateway: Gateway::with_ledger(gateway, backend, ledger),
            sanitizer,
            dir: dir.to_path_buf(),
            bank,
            schedule,
            state,
            snapshots,
        })
    }

    pub fn bank(&self) -> &SeedBank {
        &self.bank
    }

    pub fn model(&self) -> &LibraryModel {
        &self.model
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn ledger(&self) -> CostLedger {
        self.gateway.ledger()
    }

    /// Runs until a stop condition, or for at most `max_iterations` more
    /// iterations.
    pub fn run(&mut self, max_iterations: Option<u64>) -> Result<CampaignSummary, CampaignError> {
        let mut done = 0u64;
        let stop = loop {
            if let Some(s) = self.state.stop {
                break s;
            }
            if max_iterations.is_some_and(|m| done >= m) {
                break StopReason::IterationLimit;
            }
            self.step()?;
            done += 1;
        };
        let summary = self.summary(stop);
        write_atomic(&self.dir.join("summary.json"), &to_pretty(&summary))?;
        Ok(summary)
    }

    pub fn summary(&self, stop: StopReason) -> CampaignSummary {
        CampaignSummary {
            iterations: self.state.next_iteration,
            seeds: self.bank.seeds().len(),
            unique_seeds: self.bank.unique_seeds().count(),
            covered_branches: self.bank.global().len(),
            crashes: self.bank.crashes().count(),
            spend: self.gateway.ledger().total,
            stop,
        }
    }

    /// One iteration. Returns the stop reason if it ended the campaign.
    pub fn step(&mut self) -> Result<Option<StopReason>, CampaignError> {
        let it = self.state.next_iteration;
        let mut rng = ChaCha8Rng::seed_from_u64(self.settings.seed);
        rng.set_stream(it);

        let before_mutation = self.schedule.clone();
        self.bank.update_qualities();
        self.schedule.refresh(&self.model, self.bank.global(), &self.bank.seed_counts())?;
        let energies = self.schedule.stats.iter().map(|s| (s.api.clone(), s.energy)).collect();
        let m = self.schedule.mutate(&self.bank.pivots(), &mut rng)?;
        let gadget = select_gadget(&self.model, self.settings.gadget_limit, &mut rng);

        let mut programs = Vec::new();
        match self.prompt(&m.combination, gadget) {
            Ok(prompt) => {
                let mut req = GenerationRequest::new(prompt, self.settings.n_samples, self.settings.temperature);
                req.combination = Some(m.combination.clone());
                req.nonce = it;
                match self.gateway.generate(&req) {
                    Ok(p) => programs = p,
                    Err(e @ GatewayError::BudgetExhausted { .. }) => {
                        log::info!("stopping: {e}");
                        self.schedule = before_mutation;
                        self.state.stop = Some(StopReason::BudgetExhausted);
                        self.checkpoint()?;
                        return Ok(self.state.stop);
                    }
                    Err(e @ (GatewayError::PromptTooLong { .. } | GatewayError::InvalidRequest(_))) => {
                        log::warn!("iteration {it}: {e}");
                    }
                    Err(e) => return Err(CampaignError::Gateway(e)),
                }
            }
            Err(e) => log::warn!("iteration {it}: {e}"),
        }

        let batch: Vec<(String, String)> = programs.into_iter().enumerate().map(|(i, src)| (format!("it{it}-s{i}"), src)).collect();
        let verdicts = if batch.is_empty() { Vec::new() } else { self.sanitizer.sanitize_batch(&batch, &self.apis, &self.bank.corpus()) };
        let covered_before = self.bank.global().len();
        let mut snap = Snapshot {
            iteration: it,
            operator: m.operator,
            combination: m.combination.apis().to_vec(),
            pivot: m.pivot.clone(),
            generated: batch.len(),
            admitted: 0,
            unique_admitted: 0,
            rejections: BTreeMap::new(),
            new_branches: 0,
            covered_branches: 0,
            seeds: 0,
            unique_seeds: 0,
            crashes: 0,
            spend: Money(0),
            energies,
        };
        for ((id, source), v) in batch.into_iter().zip(verdicts) {
            let v = match v {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("{id}: {e}");
                    *snap.rejections.entry("error".into()).or_default() += 1;
                    continue;
                }
            };
            self.learn_totals(&v.branch_totals);
            if !v.passed() {
                if let (Some(f), Stage::Execution | Stage::Fuzzing) = (&v.failure, v.stage) {
                    self.bank.record_crash(&id, &f.report, f.input.as_deref());
                }
                *snap.rejections.entry(stage_name(v.stage).into()).or_default() += 1;
                continue;
            }
            for blob in &v.new_corpus {
                self.bank.add_corpus(blob);
            }
            let facts = v.facts.unwrap_or_default();
            let admission = Admission {
                source,
                ast_json: v.ast_json,
                combination: m.combination.clone(),
                coverage: v.coverage.unwrap_or_default(),
                density: facts.density,
                critical: facts.critical_calls,
                apis_called: facts.apis_called,
                iteration: it,
            };
            match self.bank.admit(admission) {
                Ok(seed) => {
                    snap.admitted += 1;
                    snap.unique_admitted += seed.is_unique as usize;
                }
                Err(BankError::DuplicateSource(_)) => *snap.rejections.entry("duplicate".into()).or_default() += 1,
                Err(e) => return Err(e.into()),
            }
        }
        snap.covered_branches = self.bank.global().len();
        snap.new_branches = snap.covered_branches - covered_before;
        snap.seeds = self.bank.seeds().len();
        snap.unique_seeds = self.bank.unique_seeds().count();
        snap.crashes = self.bank.crashes().count();
        snap.spend = self.gateway.ledger().total;
        log::info!(
            "iteration {it}: {} generated, {} admitted, {} new branches, {} covered",
            snap.generated,
            snap.admitted,
            snap.new_branches,
            snap.covered_branches
        );

        self.state.no_progress = if snap.new_branches == 0 { self.state.no_progress + 1 } else { 0 };
        self.state.next_iteration += 1;
        if self.state.no_progress >= self.settings.patience {
            self.state.stop = Some(StopReason::NoProgress);
        }
        self.snapshots.push(snap);
        self.checkpoint()?;
        Ok(self.state.stop)
    }

    fn prompt(&self, comb: &ApiCombination, gadget: Vec<ApiFunction>) -> Result<String, String> {
        let signatures: Vec<ApiFunction> =
            comb.apis().iter().map(|a| self.model.api(a).cloned().ok_or_else(|| format!("unknown API `{a}`"))).collect::<Result<_, _>>()?;
        let padding: Vec<ApiFunction> = gadget.into_iter().filter(|g| !comb.contains(&g.name)).collect();
        let shown: Vec<ApiFunction> = signatures.iter().chain(&padding).cloned().collect();
        let mut spec = PromptSpec::new(comb.clone(), signatures);
        spec.context_types = self.model.types_for(&shown).unwrap_or_else(|e| {
            log::warn!("prompt types: {e}");
            Vec::new()
        });
        spec.padding = padding;
        spec.headers = self.settings.headers.clone();
        spec.library_notes = self.settings.notes.clone();
        build_prompt(&self.settings.template, &spec, self.settings.limits).map_err(|e| e.to_string())
    }

    fn learn_totals(&mut self, totals: &BTreeMap<String, u64>) {
        if totals.iter().all(|(f, n)| self.model.branch_totals.get(f) == Some(n)) {
            return;
        }
        let mut merged = self.model.branch_totals.clone();
        merged.extend(totals.iter().map(|(f, n)| (f.clone(), *n)));
        self.model.set_branch_totals(merged);
    }

    /// Writes everything to `checkpoint.new/`, then swaps it in.
    fn checkpoint(&self) -> Result<(), CampaignError> {
        let new = self.dir.join("checkpoint.new");
        if new.exists() {
            fs::remove_dir_all(&new).map_err(io_err(&new))?;
        }
        fs::create_dir_all(&new).map_err(io_err(&new))?;
        self.bank.persist(&new.join("bank"))?;
        write_atomic(&new.join("schedule.json"), &to_pretty(&self.schedule))?;
        write_atomic(&new.join("ledger.json"), &to_pretty(&self.gateway.ledger()))?;
        write_atomic(&new.join("model.json"), &to_pretty(&self.model))?;
        let mut lines = String::new();
        for s in &self.snapshots {
            lines.push_str(&serde_json::to_string(s).expect("snapshots serialize"));
            lines.push('\n');
        }
        write_atomic(&new.join("snapshots.jsonl"), &lines)?;
        write_atomic(&new.join("state.json"), &to_pretty(&self.state))?;

        let cur = self.dir.join("checkpoint");
        let old = self.dir.join("checkpoint.old");
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        if cur.exists() {
            fs::rename(&cur, &old).map_err(io_err(&cur))?;
        }
        fs::rename(&new, &cur).map_err(io_err(&new))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        Ok(())
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Syntax => "syntax",
        Stage::Execution => "execution",
        Stage::Fuzzing => "fuzzing",
        Stage::Coverage => "coverage",
        Stage::Pass => "pass",
    }
}

/// The newest complete checkpoint of a campaign directory.
pub fn checkpoint_dir(dir: &Path) -> Option<PathBuf> {
    ["checkpoint", "checkpoint.old"].iter().map(|n| dir.join(n)).find(|d| d.join("state.json").exists())
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("campaign state serializes") + "\n"
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CampaignError> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, text).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CampaignError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CampaignError::Corrupt { path: path.to_path_buf(), msg: e.to_string() })
}

fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>, CampaignError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CampaignError::Corrupt { path: path.to_path_buf(), msg: e.to_string() }))
        .collect()
}

/// Snapshots of a campaign directory.
pub fn load_snapshots(dir: &Path) -> Result<Vec<Snapshot>, CampaignError> {
    let Some(ck) = checkpoint_dir(dir) else {
        return Err(CampaignError::MissingSnapshots(dir.to_path_buf()));
    };
    let snaps = read_snapshots(&ck.join("snapshots.jsonl"))?;
    if snaps.is_empty() {
        return Err(CampaignError::MissingSnapshots(dir.to_path_buf()));
    }
    Ok(snaps)
}

/// The persisted bank of a campaign directory.
pub fn load_bank(dir: &Path) -> Result<SeedBank, CampaignError> {
    let ck = checkpoint_dir(dir).ok_or_else(|| CampaignError::MissingSnapshots(dir.to_path_buf()))?;
    Ok(SeedBank::load(&ck.join("bank"), None)?)
}

/// The persisted library model of a campaign directory.
pub fn load_model(dir: &Path) -> Result<LibraryModel, CampaignError> {
    let ck = checkpoint_dir(dir).ok_or_else(|| CampaignError::MissingSnapshots(dir.to_path_buf()))?;
    read_json(&ck.join("model.json"))
}

/// Parsed seeds of a bank, skipping any whose stored dump no longer parses.
pub fn bank_programs(bank: &SeedBank, apis: &BTreeSet<String>, unique_only: bool) -> Vec<(String, ProgramAst)> {
    bank.seeds()
        .iter()
        .filter(|s| s.is_unique || !unique_only)
        .filter_map(|s| match ProgramAst::from_dump(&s.ast_json, s.source.clone(), apis.iter().cloned()) {
            Ok(p) => Some((s.id.clone(), p)),
            Err(e) => {
                log::warn!("{}: {e}", s.id);
                None
            }
        })
        .collect()
}

/// Text tables plus CSV series for one or more campaigns.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    /// `campaign,iteration,covered_branches,new_branches,spend_usd`
    pub coverage_csv: String,
    /// `campaign,iteration,api,energy`
    pub energy_csv: String,
    /// Total rejections per reason, summed over every campaign.
    pub rejections: BTreeMap<String, usize>,
}

pub fn report(campaigns: &[(String, Vec<Snapshot>)]) -> Report {
    use std::fmt::Write as _;
    let mut text = String::new();
    let mut coverage_csv = String::from("campaign,iteration,covered_branches,new_branches,spend_usd\n");
    let mut energy_csv = String::from("campaign,iteration,api,energy\n");
    let mut all_rej: BTreeMap<String, usize> = BTreeMap::new();
    for (label, snaps) in campaigns {
        let _ = writeln!(text, "## {label}\n");
        let _ = writeln!(text, "| iteration | operator | generated | admitted | new | covered | seeds | spend |");
        let _ = writeln!(text, "|---|---|---|---|---|---|---|---|");
        let mut rej: BTreeMap<String, usize> = BTreeMap::new();
        let (mut generated, mut admitted) = (0, 0);
        for s in snaps {
            let _ = writeln!(
                text,
                "| {} | {:?} | {} | {} | {} | {} | {} | {} |",
                s.iteration, s.operator, s.generated, s.admitted, s.new_branches, s.covered_branches, s.seeds, s.spend
            );
            let _ = writeln!(coverage_csv, "{label},{},{},{},{:.6}", s.iteration, s.covered_branches, s.new_branches, s.spend.dollars());
            for (api, e) in &s.energies {
                let _ = writeln!(energy_csv, "{label},{},{api},{e}", s.iteration);
            }
            for (k, n) in &s.rejections {
                *rej.entry(k.clone()).or_default() += n;
            }
            generated += s.generated;
            admitted += s.admitted;
        }
        let total: usize = rej.values().sum();
        let hist: Vec<String> = rej.iter().map(|(k, n)| format!("{k} {n}")).collect();
        let _ = writeln!(text, "\nrejections ({total} of {generated} generated, {admitted} admitted): {}", hist.join(", "));
        if let Some(last) = snaps.last() {
            let _ = writeln!(
                text,
                "final: {} branches, {} seeds ({} unique), {} crashes, spend {}\n",
                last.covered_branches, last.seeds, last.unique_seeds, last.crashes, last.spend
            );
        }
        for (k, n) in rej {
            *all_rej.entry(k).or_default() += n;
        }
    }
    Report { text, coverage_csv, energy_csv, rejections: all_rej }
}

/// Builds the library model from pre-made dumps when the config names them,
/// otherwise by dumping the headers and sources with clang.
pub fn load_library_model(lib: &LibraryConfig, tc: Option<&Toolchain>) -> anyhow::Result<LibraryModel> {
    let cflags: Vec<String> =
        lib.build.include_dirs.iter().map(|d| format!("-I{}", d.display())).chain(lib.build.cflags.iter().cloned()).collect();
    let need_tc = || tc.ok_or_else(|| anyhow::anyhow!("no toolchain to dump the library with"));
    let mut model = match &lib.headers_ast {
        Some(p) => ingest_ast(&TranslationUnit::from_json(&fs::read_to_string(p)?)?, &[])?,
        None => {
            let tc = need_tc()?;
            let tmp = tempfile::tempdir()?;
            let src = tmp.path().join("headers.c");
            let text: String = lib.build.headers.iter().map(|h| format!("#include \"{h}\"\n")).collect();
            fs::write(&src, text)?;
            let keep: Vec<PathBuf> =
                lib.build.headers.iter().filter_map(|h| lib.build.include_dirs.iter().map(|d| d.join(h)).find(|p| p.exists())).collect();
            let v = dump_pruned(tc, &src, &cflags, &keep, None)?;
            ingest_ast(&TranslationUnit::from_value(v)?, &[])?
        }
    };
    if lib.impl_ast.is_empty() {
        if let Some(tc) = tc {
            for s in &lib.build.sources {
                let v = dump_pruned(tc, s, &cflags, &[], None)?;
                model.add_call_graph(&TranslationUnit::from_value(v)?);
            }
        }
    } else {
        for p in &lib.impl_ast {
            model.add_call_graph(&TranslationUnit::from_json(&fs::read_to_string(p)?)?);
        }
    }
    Ok(model)
}
