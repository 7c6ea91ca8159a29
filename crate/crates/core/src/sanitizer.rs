//! Four-stage sanitization of generated drivers: syntax check, execution of
//! the corpus under ASan/UBSan and the file sanitizer, short fuzzing rounds,
//! and the critical-path coverage check.
//!
//! Each program gets `work/<id>/{src.c, inst.c, bin, corpus/, profiles/,
//! report.txt}`. Two library flavors are built once: `exec` (guard coverage
//! for branch fingerprints) and `fuzz` (libFuzzer instrumentation).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::analysis::{critical_calls, critical_path, data_flow, density, AnalysisError, Cfg, ProgramAst};
use crate::ast::{prune_dump, TranslationUnit};
use crate::bank::sha256_hex;
use crate::constraints::{AllocProber, ProbeError, ProbeTarget};
use crate::coverage::{decode_dump, BranchSet, Symbols};
use crate::fsan::{instrument, FsanConfig};
use crate::toolchain::{Toolchain, ToolchainError};

const DF_RT: &str = include_str!("../assets/df_rt.c");
const EXEC_MAIN: &str = include_str!("../assets/exec_main.c");
const SAN_FLAGS: &[&str] = &["-fsanitize=address,undefined", "-fno-omit-frame-pointer", "-g", "-gdwarf-4"];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("library build failed:\n{0}")]
    LibraryBuild(String),
    #[error("fuzzing engine unavailable: {0}")]
    FuzzerUnavailable(String),
}

/// How to build the target library.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LibrarySpec {
    pub sources: Vec<PathBuf>,
    pub include_dirs: Vec<PathBuf>,
    pub cflags: Vec<String>,
    pub ldflags: Vec<String>,
    /// Headers as included by drivers, e.g. `toycodec.h`.
    pub headers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub exec_timeout_secs: u64,
    pub fuzz_interval_secs: u64,
    /// Zero disables the fuzzing stage.
    pub fuzz_budget_secs: u64,
    /// Fixed run count per fuzzing round instead of wall-clock intervals.
    pub fuzz_runs: Option<u64>,
    pub fuzz_seed: u64,
    pub max_input_len: usize,
    pub workers: usize,
    /// Keep built binaries in the work directories.
    pub keep_binaries: bool,
    pub fsan: FsanConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            exec_timeout_secs: 10,
            fuzz_interval_secs: 60,
            fuzz_budget_secs: 600,
            fuzz_runs: None,
            fuzz_seed: 1,
            max_input_len: 4096,
            workers: 1,
            keep_binaries: false,
            fsan: FsanConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Syntax,
    Execution,
    Fuzzing,
    Coverage,
    Pass,
}

/// Analysis results carried by verdicts that got past the syntax stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramFacts {
    pub density: u64,
    pub critical_calls: Vec<String>,
    pub apis_called: Vec<String>,
    pub critical_sites: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub report: String,
    pub input: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub stage: Stage,
    pub detail: String,
    pub coverage: Option<BranchSet>,
    pub new_corpus: Vec<Vec<u8>>,
    pub executed_sites: BTreeSet<usize>,
    pub failure: Option<Failure>,
    pub facts: Option<ProgramFacts>,
    /// Pruned AST of the program, for the bank.
    #[serde(skip)]
    pub ast_json: String,
    /// Per-function instrumented edge counts seen in this program's binary.
    pub branch_totals: BTreeMap<String, u64>,
}

impl Verdict {
    fn reject(stage: Stage, detail: impl Into<String>) -> Self {
        Verdict {
            stage,
            detail: detail.into(),
            coverage: None,
            new_corpus: Vec::new(),
            executed_sites: BTreeSet::new(),
            failure: None,
            facts: None,
            ast_json: String::new(),
            branch_totals: BTreeMap::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.stage == Stage::Pass
    }
}

/// Checks that every marked critical-path API site executed. Sites without
/// a marker (inside macro expansions) cannot be observed and are skipped.
pub fn coverage_check(
    prog: &ProgramAst,
    critical_sites: &[usize],
    marked: &BTreeSet<usize>,
    executed: &BTreeSet<usize>,
) -> Result<(), String> {
    for &s in critical_sites {
        if marked.contains(&s) && !executed.contains(&s) {
            let cs = &prog.call_sites[s];
            return Err(format!("critical call `{}` at line {} never executed", cs.callee, cs.line));
        }
    }
    Ok(())
}

/// Sanitizer output that marks a run as failed.
pub fn has_sanitizer_report(stderr: &str) -> bool {
    ["ERROR: AddressSanitizer", "ERROR: LeakSanitizer", "runtime error:", "==FSAN== ERROR", "ERROR: libFuzzer"]
        .iter()
        .any(|m| stderr.contains(m))
}

#[derive(Debug)]
struct RunResult {
    status: Option<i32>,
    timed_out: bool,
    stderr: String,
}

fn run_with_timeout(mut cmd: Command, stderr_path: &Path, timeout: Duration) -> Result<RunResult, PipelineError> {
    let err = std::fs::File::create(stderr_path)?;
    cmd.stdout(Stdio::null()).stderr(err).stdin(Stdio::null());
    let mut child = cmd.spawn()?;
    let start = Instant::now();
    let mut timed_out = false;
    let status = loop {
        if let Some(st) = child.try_wait()? {
            break st;
        }
        if start.elapsed() > timeout {
            let _ = child.kill();
            timed_out = true;
            break child.wait()?;
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let stderr = String::from_utf8_lossy(&std::fs::read(stderr_path)?).into_owned();
    Ok(RunResult { status: status.code(), timed_out, stderr })
}

/// Accumulated result of running a binary over inputs.
#[derive(Debug, Default)]
pub struct ExecOutcome {
    pub coverage: BranchSet,
    pub totals: BTreeMap<String, u64>,
    pub sites: BTreeSet<usize>,
    pub failure: Option<Failure>,
    pub hang: bool,
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub new_inputs: Vec<Vec<u8>>,
    pub failure: Option<Failure>,
}

pub struct Pipeline {
    pub tc: Toolchain,
    pub lib: LibrarySpec,
    pub cfg: PipelineConfig,
    root: PathBuf,
    exec_objs: Vec<PathBuf>,
    fuzz_objs: Vec<PathBuf>,
    build_hash: String,
}

impl Pipeline {
    /// Builds both library flavors and the runtimes under `root/lib`.
    pub fn prepare(tc: Toolchain, lib: LibrarySpec, cfg: PipelineConfig, root: &Path) -> Result<Self, PipelineError> {
        let libdir = root.join("lib");
        std::fs::create_dir_all(libdir.join("exec"))?;
        std::fs::create_dir_all(libdir.join("fuzz"))?;
        std::fs::write(libdir.join("df_rt.c"), DF_RT)?;
        std::fs::write(libdir.join("fsan_rt.c"), crate::fsan::RUNTIME_SOURCE)?;
        std::fs::write(libdir.join("exec_main.c"), EXEC_MAIN)?;

        let mut hasher_input = Vec::new();
        for s in &lib.sources {
            hasher_input.extend(std::fs::read(s)?);
        }
        hasher_input.extend(lib.cflags.join(" ").bytes());
        hasher_input.extend(DF_RT.bytes());
        let build_hash = sha256_hex(&hasher_input);

        let mut p = Pipeline { tc, lib, cfg, root: root.to_path_buf(), exec_objs: Vec::new(), fuzz_objs: Vec::new(), build_hash };
        let stamp = libdir.join("build-hash");
        let fresh = std::fs::read_to_string(&stamp).ok().as_deref() == Some(p.build_hash.as_str());
        let mut exec_objs = Vec::new();
        let mut fuzz_objs = Vec::new();
        for (i, src) in p.lib.sources.iter().enumerate() {
            let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("lib");
            let eo = libdir.join("exec").join(format!("{i}_{stem}.o"));
            let fo = libdir.join("fuzz").join(format!("{i}_{stem}.o"));
            if !fresh || !eo.exists() {
                p.compile(src, &eo, &["-fsanitize-coverage=trace-pc-guard,pc-table"])?;
            }
            let fuzz_enabled = p.cfg.fuzz_budget_secs > 0;
            if fuzz_enabled && (!fresh || !fo.exists()) {
                p.compile(src, &fo, &["-fsanitize=fuzzer-no-link"])?;
            }
            exec_objs.push(eo);
            fuzz_objs.push(fo);
        }
        for (name, extra) in [("df_rt", &[][..]), ("fsan_rt", &[][..]), ("exec_main", &[][..])] {
            let o = libdir.join("exec").join(format!("{name}.o"));
            p.compile_plain(&libdir.join(format!("{name}.c")), &o, extra)?;
            if name != "exec_main" {
                exec_objs.push(o);
            }
        }
        let site_stub = libdir.join("fuzz").join("df_rt.o");
        p.compile_plain(&libdir.join("df_rt.c"), &site_stub, &["-DDF_SITES_ONLY"])?;
        fuzz_objs.push(site_stub);
        fuzz_objs.push(libdir.join("exec").join("fsan_rt.o"));
        std::fs::write(&stamp, &p.build_hash)?;
        p.exec_objs = exec_objs;
        p.fuzz_objs = fuzz_objs;
        if p.cfg.fuzz_budget_secs > 0 {
            p.check_fuzzer()?;
        }
        Ok(p)
    }

    pub fn build_hash(&self) -> &str {
        &self.build_hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn include_flags(&self) -> Vec<String> {
        self.lib.include_dirs.iter().map(|d| format!("-I{}", d.display())).collect()
    }

    fn compile(&self, src: &Path, out: &Path, extra: &[&str]) -> Result<(), PipelineError> {
        let mut cmd = self.tc.command();
        cmd.arg("-c").args(SAN_FLAGS).args(extra).args(&self.lib.cflags).args(self.include_flags()).arg(src).arg("-o").arg(out);
        let o = self.tc.output(cmd)?;
        if !o.status.success() {
            return Err(PipelineError::LibraryBuild(String::from_utf8_lossy(&o.stderr).into_owned()));
        }
        Ok(())
    }

    fn compile_plain(&self, src: &Path, out: &Path, extra: &[&str]) -> Result<(), PipelineError> {
        let mut cmd = self.tc.command();
        cmd.args(["-c", "-g", "-O1"]).args(extra).arg(src).arg("-o").arg(out);
        let o = self.tc.output(cmd)?;
        if !o.status.success() {
            return Err(PipelineError::LibraryBuild(String::from_utf8_lossy(&o.stderr).into_owned()));
        }
        Ok(())
    }

    fn check_fuzzer(&self) -> Result<(), PipelineError> {
        let dir = self.root.join("lib").join("fuzzcheck");
        std::fs::create_dir_all(&dir)?;
        let src = dir.join("t.c");
        std::fs::write(
            &src,
            "#include <stdint.h>\n#include <stddef.h>\nint LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) { return 0; }\n",
        )?;
        let mut cmd = self.tc.command();
        cmd.arg("-fsanitize=fuzzer").arg(&src).arg("-o").arg(dir.join("t"));
        let o = self.tc.output(cmd)?;
        if !o.status.success() {
            return Err(PipelineError::FuzzerUnavailable(String::from_utf8_lossy(&o.stderr).into_owned()));
        }
        Ok(())
    }

    /// Guard counts per library function, from a harness that calls nothing.
    pub fn library_totals(&self) -> Result<BTreeMap<String, u64>, PipelineError> {
        let dir = self.work_dir("_totals");
        std::fs::create_dir_all(&dir)?;
        let src = dir.join("noop.c");
        std::fs::write(
            &src,
            "#include <stdint.h>\n#include <stddef.h>\nint LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) { return 0; }\n",
        )?;
        let exe = dir.join("noop");
        self.build_exec(&src, &exe)?.map_err(PipelineError::LibraryBuild)?;
        Ok(self.execute(&exe, &[Vec::new()], &dir)?.totals)
    }

    pub fn work_dir(&self, id: &str) -> PathBuf {
        self.root.join("work").join(id)
    }

    /// Compiles without linking and returns the pruned AST dump, or the
    /// diagnostics on failure.
    pub fn syntax_check(&self, src_path: &Path) -> Result<Result<serde_json::Value, String>, PipelineError> {
        let mut flags = self.include_flags();
        flags.extend(self.lib.cflags.iter().cloned());
        let out = self.tc.frontend(src_path, &flags)?;
        if !out.ok {
            return Ok(Err(out.diagnostics));
        }
        let main = std::fs::canonicalize(src_path)?;
        let pruned =
            prune_dump(&out.ast_json, |f| std::fs::canonicalize(f).map(|p| p == main).unwrap_or(false)).map_err(ToolchainError::from)?;
        Ok(Ok(pruned))
    }

    /// Links an exec-mode binary; Err carries the linker diagnostics.
    pub fn build_exec(&self, src: &Path, out: &Path) -> Result<Result<(), String>, PipelineError> {
        let mut cmd = self.tc.command();
        cmd.args(SAN_FLAGS)
            .args(&self.lib.cflags)
            .args(self.include_flags())
            .arg(src)
            .args(&self.exec_objs)
            .arg(self.root.join("lib").join("exec").join("exec_main.o"))
            .args(&self.lib.ldflags)
            .arg("-o")
            .arg(out);
        let o = self.tc.output(cmd)?;
        Ok(if o.status.success() { Ok(()) } else { Err(String::from_utf8_lossy(&o.stderr).into_owned()) })
    }

    pub fn build_fuzz(&self, src: &Path, out: &Path) -> Result<Result<(), String>, PipelineError> {
        let mut cmd = self.tc.command();
        cmd.args(SAN_FLAGS)
            .arg("-fsanitize=fuzzer")
            .args(&self.lib.cflags)
            .args(self.include_flags())
            .arg(src)
            .args(&self.fuzz_objs)
            .args(&self.lib.ldflags)
            .arg("-o")
            .arg(out);
        let o = self.tc.output(cmd)?;
        Ok(if o.status.success() { Ok(()) } else { Err(String::from_utf8_lossy(&o.stderr).into_owned()) })
    }

    fn exec_env(&self, cmd: &mut Command) {
        for (k, v) in self.tc.sanitizer_env() {
            cmd.env(k, v);
        }
    }

    /// Runs `exe` once per input (once on empty input when there are none),
    /// each in a fresh directory holding `input_file`. Stops at the first
    /// sanitizer report or hang.
    pub fn execute(&self, exe: &Path, inputs: &[Vec<u8>], dir: &Path) -> Result<ExecOutcome, PipelineError> {
        let profiles = dir.join("profiles");
        std::fs::create_dir_all(&profiles)?;
        let symbols = Symbols::from_binary(&self.tc, exe).map_err(|e| PipelineError::LibraryBuild(e.to_string()))?;
        let empty = [Vec::new()];
        let inputs = if inputs.is_empty() { &empty[..] } else { inputs };
        let mut out = ExecOutcome::default();
        let exe = std::fs::canonicalize(exe)?;
        for (i, input) in inputs.iter().enumerate() {
            let run = tempfile::Builder::new().prefix("run").tempdir_in(dir)?;
            std::fs::write(run.path().join(crate::prompt::INPUT_FILE), input)?;
            let cov_path = profiles.join(format!("run-{i}.cov"));
            let _ = std::fs::remove_file(&cov_path);
            let mut cmd = Command::new(&exe);
            cmd.arg(crate::prompt::INPUT_FILE).current_dir(run.path()).env("DF_COV_OUT", &cov_path);
            self.exec_env(&mut cmd);
            let r = run_with_timeout(cmd, &dir.join("stderr.txt"), Duration::from_secs(self.cfg.exec_timeout_secs))?;
            if let Ok(text) = std::fs::read_to_string(&cov_path) {
                if let Ok(d) = decode_dump(&text, &symbols) {
                    out.coverage.merge(&d.covered);
                    for (f, n) in d.totals {
                        out.totals.entry(f).or_insert(n);
                    }
                    out.sites.extend(d.sites);
                }
            }
            if r.timed_out {
                out.hang = true;
                out.failure = Some(Failure { report: "hang".into(), input: Some(input.clone()) });
                break;
            }
            if r.status != Some(0) || has_sanitizer_report(&r.stderr) {
                let report = if r.stderr.trim().is_empty() { format!("abnormal exit: {:?}", r.status) } else { r.stderr };
                out.failure = Some(Failure { report, input: Some(input.clone()) });
                break;
            }
        }
        Ok(out)
    }

    /// Fuzzes from `corpus` in rounds of the configured interval while the
    /// engine keeps reporting coverage growth, up to the budget.
    pub fn fuzz_round(&self, exe: &Path, corpus: &[Vec<u8>], dir: &Path) -> Result<FuzzOutcome, PipelineError> {
        let seeds = dir.join("corpus");
        let fresh = dir.join("new");
        let crashes = dir.join("crashes");
        for d in [&seeds, &fresh, &crashes] {
            std::fs::create_dir_all(d)?;
        }
        for blob in corpus {
            std::fs::write(seeds.join(&sha256_hex(blob)[..16]), blob)?;
        }
        let exe = std::fs::canonicalize(exe)?;
        let budget = Duration::from_secs(self.cfg.fuzz_budget_secs);
        let start = Instant::now();
        let mut last_cov = 0u64;
        let mut out = FuzzOutcome::default();
        let mut round = 0;
        loop {
            let remaining = budget.saturating_sub(start.elapsed());
            let interval = self.cfg.fuzz_interval_secs.clamp(1, remaining.as_secs().max(1));
            let mut cmd = Command::new(&exe);
            cmd.arg(&fresh)
                .arg(&seeds)
                .arg(format!("-artifact_prefix={}/", crashes.display()))
                .arg(format!("-seed={}", self.cfg.fuzz_seed + round))
                .arg(format!("-max_len={}", self.cfg.max_input_len))
                .arg(format!("-timeout={}", self.cfg.exec_timeout_secs))
                .arg("-close_fd_mask=1")
                .arg("-print_final_stats=0")
                .current_dir(dir);
            match self.cfg.fuzz_runs {
                Some(n) => cmd.arg(format!("-runs={n}")),
                None => cmd.arg(format!("-max_total_time={interval}")),
            };
            self.exec_env(&mut cmd);
            let hard_limit = Duration::from_secs(interval + self.cfg.exec_timeout_secs * 3 + 30);
            let r = run_with_timeout(cmd, &dir.join("fuzz-stderr.txt"), hard_limit)?;
            let crashed = r.status != Some(0) || has_sanitizer_report(&r.stderr);
            if crashed || r.timed_out {
                let input = newest_file(&crashes)?.map(std::fs::read).transpose()?;
                out.failure = Some(Failure { report: r.stderr, input });
                break;
            }
            let cov = last_cov_line(&r.stderr).unwrap_or(last_cov);
            round += 1;
            let grew = cov > last_cov;
            last_cov = cov;
            if self.cfg.fuzz_runs.is_some() || !grew || start.elapsed() >= budget {
                break;
            }
        }
        let mut names: Vec<PathBuf> = std::fs::read_dir(&fresh)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        names.sort();
        for n in names {
            out.new_inputs.push(std::fs::read(n)?);
        }
        Ok(out)
    }

    /// Runs all four stages on one program. `id` names its work directory.
    pub fn sanitize(&self, id: &str, source: &str, apis: &BTreeSet<String>, corpus: &[Vec<u8>]) -> Result<Verdict, PipelineError> {
        let dir = self.work_dir(id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        let src_path = dir.join("src.c");
        std::fs::write(&src_path, source)?;
        let v = self.sanitize_in(&dir, &src_path, source, apis, corpus)?;
        let mut report = format!("stage: {:?}\n{}\n", v.stage, v.detail);
        if let Some(f) = &v.failure {
            report.push_str(&f.report);
        }
        std::fs::write(dir.join("report.txt"), report)?;
        if !self.cfg.keep_binaries {
            for b in ["bin", "bin-fuzz"] {
                let _ = std::fs::remove_file(dir.join(b));
            }
        }
        Ok(v)
    }

    fn sanitize_in(
        &self,
        dir: &Path,
        src_path: &Path,
        source: &str,
        apis: &BTreeSet<String>,
        corpus: &[Vec<u8>],
    ) -> Result<Verdict, PipelineError> {
        // Stage 1: syntax.
        let ast = match self.syntax_check(src_path)? {
            Ok(v) => v,
            Err(diag) => return Ok(Verdict::reject(Stage::Syntax, diag)),
        };
        let ast_json = ast.to_string();
        let tu = match TranslationUnit::from_value(ast) {
            Ok(t) => t,
            Err(e) => return Ok(Verdict::reject(Stage::Syntax, e.to_string())),
        };
        let prog = match ProgramAst::new(tu, source, apis.iter().cloned()) {
            Ok(p) => p,
            Err(e) => return Ok(Verdict::reject(Stage::Syntax, e.to_string())),
        };
        let facts = match analyze(&prog) {
            Ok(f) => f,
            Err(e) => return Ok(Verdict::reject(Stage::Coverage, e.to_string())),
        };
        let inst = match instrument(&prog, &self.cfg.fsan, "src.c") {
            Ok(i) => i,
            Err(e) => return Ok(Verdict::reject(Stage::Syntax, e.to_string())),
        };
        let inst_path = dir.join("inst.c");
        std::fs::write(&inst_path, &inst.source)?;
        let exe = dir.join("bin");
        if let Err(diag) = self.build_exec(&inst_path, &exe)? {
            return Ok(Verdict::reject(Stage::Syntax, format!("link error:\n{diag}")));
        }
        let with_facts = |mut v: Verdict| {
            v.facts = Some(facts.clone());
            v.ast_json = ast_json.clone();
            v
        };

        // Stage 2: execution over the corpus.
        let exec = self.execute(&exe, corpus, dir)?;
        let mut coverage = exec.coverage;
        let mut sites = exec.sites;
        let totals = exec.totals;
        if let Some(f) = exec.failure {
            let mut v = Verdict::reject(Stage::Execution, if exec.hang { "hang" } else { "sanitizer report" });
            v.failure = Some(f);
            return Ok(with_facts(v));
        }

        // Stage 3: fuzzing.
        let mut new_corpus = Vec::new();
        if self.cfg.fuzz_budget_secs > 0 {
            let fexe = dir.join("bin-fuzz");
            if let Err(diag) = self.build_fuzz(&inst_path, &fexe)? {
                return Ok(with_facts(Verdict::reject(Stage::Syntax, format!("link error:\n{diag}"))));
            }
            let fz = self.fuzz_round(&fexe, corpus, dir)?;
            if let Some(f) = fz.failure {
                let mut v = Verdict::reject(Stage::Fuzzing, "crash during fuzzing");
                v.failure = Some(f);
                return Ok(with_facts(v));
            }
            if !fz.new_inputs.is_empty() {
                let again = self.execute(&exe, &fz.new_inputs, dir)?;
                if let Some(f) = again.failure {
                    let mut v = Verdict::reject(Stage::Fuzzing, "sanitizer report on evolved input");
                    v.failure = Some(f);
                    return Ok(with_facts(v));
                }
                coverage.merge(&again.coverage);
                sites.extend(again.sites);
            }
            new_corpus = fz.new_inputs;
        }

        // Stage 4: critical-path coverage.
        if let Err(why) = coverage_check(&prog, &facts.critical_sites, &inst.marked_sites, &sites) {
            let mut v = with_facts(Verdict::reject(Stage::Coverage, why));
            v.executed_sites = sites;
            return Ok(v);
        }
        Ok(with_facts(Verdict {
            stage: Stage::Pass,
            detail: String::new(),
            coverage: Some(coverage),
            new_corpus,
            executed_sites: sites,
            failure: None,
            facts: None,
            ast_json: String::new(),
            branch_totals: totals,
        }))
    }

    /// Sanitizes a batch on the worker pool; results keep input order.
    pub fn sanitize_batch(
        &self,
        programs: &[(String, String)],
        apis: &BTreeSet<String>,
        corpus: &[Vec<u8>],
    ) -> Vec<Result<Verdict, PipelineError>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<Verdict, PipelineError>>>> = Mutex::new((0..programs.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..self.cfg.workers.max(1).min(programs.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((id, src)) = programs.get(i) else { break };
                    let r = self.sanitize(id, src, apis, corpus);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every slot filled")).collect()
    }
}

/// Outcome of fuzzing a finished driver.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriverRun {
    pub crash: Option<Failure>,
    pub elapsed_secs: f64,
    pub final_cov: Option<u64>,
}

impl Pipeline {
    /// Parses `source` (written to `work/<id>/src.c`) into a program AST.
    pub fn program_ast(&self, id: &str, source: &str, apis: &BTreeSet<String>) -> Result<Result<ProgramAst, String>, PipelineError> {
        let dir = self.work_dir(id);
        std::fs::create_dir_all(&dir)?;
        let src = dir.join("src.c");
        std::fs::write(&src, source)?;
        let ast = match self.syntax_check(&src)? {
            Ok(v) => v,
            Err(d) => return Ok(Err(d)),
        };
        Ok(TranslationUnit::from_value(ast)
            .map_err(|e| e.to_string())
            .and_then(|tu| ProgramAst::new(tu, source, apis.iter().cloned()).map_err(|e| e.to_string())))
    }

    /// Builds `source` with the file sanitizer and the fuzzing engine, then
    /// fuzzes it from `corpus` for up to `max_secs` or until the first crash.
    /// Work files live in `dir`.
    pub fn run_driver(
        &self,
        source: &str,
        apis: &BTreeSet<String>,
        corpus: &[Vec<u8>],
        dir: &Path,
        max_secs: u64,
        seed: u64,
    ) -> Result<Result<DriverRun, String>, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let src = dir.join("driver.c");
        std::fs::write(&src, source)?;
        let ast = match self.syntax_check(&src)? {
            Ok(v) => v,
            Err(d) => return Ok(Err(d)),
        };
        let prog = TranslationUnit::from_value(ast)
            .map_err(|e| e.to_string())
            .and_then(|tu| ProgramAst::new(tu, source, apis.iter().cloned()).map_err(|e| e.to_string()));
        let prog = match prog {
            Ok(p) => p,
            Err(d) => return Ok(Err(d)),
        };
        let inst = match instrument(&prog, &self.cfg.fsan, "driver.c") {
            Ok(i) => i,
            Err(e) => return Ok(Err(e.to_string())),
        };
        let inst_path = dir.join("driver.inst.c");
        std::fs::write(&inst_path, &inst.source)?;
        let exe = dir.join("driver-fuzz");
        if let Err(d) = self.build_fuzz(&inst_path, &exe)? {
            return Ok(Err(d));
        }
        let seeds = dir.join("corpus");
        let crashes = dir.join("crashes");
        std::fs::create_dir_all(&seeds)?;
        std::fs::create_dir_all(&crashes)?;
        for blob in corpus {
            std::fs::write(seeds.join(sha256_hex(blob)), blob)?;
        }
        let mut cmd = Command::new(std::fs::canonicalize(&exe)?);
        cmd.arg(&seeds)
            .arg(format!("-artifact_prefix={}/", crashes.display()))
            .arg(format!("-seed={seed}"))
            .arg(format!("-max_len={}", self.cfg.max_input_len))
            .arg(format!("-timeout={}", self.cfg.exec_timeout_secs))
            .arg(format!("-max_total_time={max_secs}"))
            .arg("-close_fd_mask=1")
            .current_dir(dir);
        self.exec_env(&mut cmd);
        let start = Instant::now();
        let hard = Duration::from_secs(max_secs + self.cfg.exec_timeout_secs * 3 + 30);
        let r = run_with_timeout(cmd, &dir.join("fuzz-stderr.txt"), hard)?;
        let crash = if r.status != Some(0) || has_sanitizer_report(&r.stderr) {
            let input = newest_file(&crashes)?.map(std::fs::read).transpose()?;
            Some(Failure { report: r.stderr.clone(), input })
        } else {
            None
        };
        Ok(Ok(DriverRun { crash, elapsed_secs: start.elapsed().as_secs_f64(), final_cov: last_cov_line(&r.stderr) }))
    }
}

/// Density, critical calls and critical-path sites of a parsed program.
pub fn analyze(prog: &ProgramAst) -> Result<ProgramFacts, AnalysisError> {
    let cfg = Cfg::build(prog);
    let path = critical_path(&cfg)?;
    let df = data_flow(prog, &cfg);
    let mut apis_called: Vec<String> = Vec::new();
    for s in prog.api_sites() {
        if !apis_called.contains(&s.callee) {
            apis_called.push(s.callee.clone());
        }
    }
    Ok(ProgramFacts {
        density: density(prog, &df) as u64,
        critical_calls: critical_calls(prog, &cfg, &df)?,
        apis_called,
        critical_sites: cfg.path_api_sites(&path),
    })
}

fn newest_file(dir: &Path) -> Result<Option<PathBuf>, std::io::Error> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        let t = e.metadata()?.modified()?;
        if best.as_ref().is_none_or(|(bt, _)| t > *bt) {
            best = Some((t, e.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Last `cov: N` figure printed by the fuzzing engine.
pub fn last_cov_line(stderr: &str) -> Option<u64> {
    stderr.lines().rev().find_map(|l| {
        let i = l.find(" cov: ")?;
        l[i + 6..].split_whitespace().next()?.parse().ok()
    })
}

/// Allocation probe backed by real builds of the pinned variants.
pub struct BuildProber<'a> {
    pub pipeline: &'a Pipeline,
    pub corpus: Vec<Vec<u8>>,
}

impl AllocProber for BuildProber<'_> {
    fn peak(&self, prog: &ProgramAst, t: &ProbeTarget, value: u64) -> Result<u64, ProbeError> {
        let io = |e: std::io::Error| ProbeError::RunFailed(e.to_string());
        let dir = self.pipeline.work_dir(&format!("probe-{}-{}-{value}", t.api, t.arg));
        std::fs::create_dir_all(&dir).map_err(io)?;
        let src = dir.join("variant.c");
        std::fs::write(&src, t.variant(&prog.source, value)).map_err(io)?;
        let exe = dir.join("bin");
        match self.pipeline.build_exec(&src, &exe) {
            Ok(Ok(())) => {}
            Ok(Err(d)) => return Err(ProbeError::BuildFailed(d)),
            Err(e) => return Err(ProbeError::BuildFailed(e.to_string())),
        }
        let empty = [Vec::new()];
        let inputs = if self.corpus.is_empty() { &empty[..] } else { &self.corpus[..] };
        let mut peak = None;
        for (i, input) in inputs.iter().enumerate() {
            let run = tempfile::Builder::new().prefix("run").tempdir_in(&dir).map_err(io)?;
            std::fs::write(run.path().join(crate::prompt::INPUT_FILE), input).map_err(io)?;
            let out = dir.join(format!("alloc-{i}.txt"));
            let mut cmd = Command::new(std::fs::canonicalize(&exe).map_err(io)?);
            cmd.arg(crate::prompt::INPUT_FILE).current_dir(run.path()).env("DF_ALLOC_OUT", &out);
            self.pipeline.exec_env(&mut cmd);
            let timeout = Duration::from_secs(self.pipeline.cfg.exec_timeout_secs);
            run_with_timeout(cmd, &dir.join("stderr.txt"), timeout).map_err(|e| ProbeError::RunFailed(e.to_string()))?;
            if let Some(p) =
                std::fs::read_to_string(&out).ok().and_then(|s| s.trim().strip_prefix("peak ").and_then(|n| n.parse::<u64>().ok()))
            {
                peak = Some(peak.map_or(p, |q: u64| q.max(p)));
            }
        }
        peak.ok_or_else(|| ProbeError::RunFailed("no peak recorded".into()))
    }
}
