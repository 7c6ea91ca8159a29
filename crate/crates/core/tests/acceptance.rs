//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use driverforge::campaign::{BatchSanitizer, Campaign, LoopSettings, StopReason};
use driverforge::constraints::{infer_all, AllocCriterion, ConstraintKind, InferenceConfig, RecordedProber};
use driverforge::coverage::BranchSet;
use driverforge::gateway::{
    Backend, BackendError, BackendResponse, Gateway, GatewayConfig, GenerationRequest, ModelSpec, Money, StubBackend, StubPool,
};
use driverforge::library::{ApiFunction, LibraryModel, Param};
use driverforge::prompt::{PromptLimits, DEFAULT_TEMPLATE};
use driverforge::sanitizer::{ProgramFacts, Stage, Verdict};
use driverforge::scheduler::{choose_by_energy, energy, quality, ApiStats, Operator, PivotSeed, Schedule, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("took {e:.2?}, limit {limit:?}"))?;
    Ok(e)
}

// 1. Schedule math against direct evaluation.

/// (1 - cov) * exp(-E * (ln(1+s) + ln(1+p))), a different route to the
/// same quantity.
fn energy_oracle(cov: f64, s: u64, p: u64, e: f64) -> f64 {
    (1.0 - cov) * (-e * ((s as f64).ln_1p() + (p as f64).ln_1p())).exp()
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn schedule_math() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let cov: f64 = rng.gen_range(0.0..=1.0);
        let s = rng.gen_range(0..5000u64);
        let p = rng.gen_range(0..5000u64);
        let e: f64 = rng.gen_range(0.0..3.0);
        let got = energy(cov, s, p, e);
        let want = energy_oracle(cov, s, p, e);
        let r = rel_err(got, want);
        ensure(r <= 1e-12, || format!("energy({cov}, {s}, {p}, {e}) = {got}, oracle {want}"))?;
        worst = worst.max(r);
    }
    for _ in 0..1000 {
        let d = rng.gen_range(0..1_000_000u64);
        let u = rng.gen_range(0..1_000_000u64);
        let want = d as u128 + d as u128 * u as u128;
        ensure(quality(d, u) as u128 == want, || format!("quality({d}, {u}) = {}, oracle {want}", quality(d, u)))?;
    }
    let e = within(t, Duration::from_secs(5))?;
    Ok(format!("2000 tuples, worst relative error {worst:.1e}, {e:.2?}"))
}

// 2. Mutation properties.

fn synthetic_schedule(rng: &mut ChaCha8Rng) -> Schedule {
    let n = rng.gen_range(6..=20);
    let stats = (0..n)
        .map(|i| {
            let mut s = ApiStats::new(format!("a{i}"));
            s.energy = if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(0.01..5.0) };
            s
        })
        .collect();
    Schedule { config: ScheduleConfig::default(), stats }
}

fn synthetic_seeds(rng: &mut ChaCha8Rng, n_apis: usize) -> Vec<PivotSeed> {
    let count = rng.gen_range(0..=30);
    (0..count)
        .map(|i| {
            let len = rng.gen_range(0..=12);
            let critical = (0..len)
                .map(|_| if rng.gen_bool(0.1) { "unknown_fn".to_string() } else { format!("a{}", rng.gen_range(0..n_apis)) })
                .collect();
            PivotSeed { id: format!("s{i}"), quality: rng.gen_range(0..10), critical }
        })
        .collect()
}

/// The pivot's combination as the mutator derives it.
fn pivot_comb(s: &Schedule, seed: &PivotSeed) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for a in &seed.critical {
        if !out.contains(a) && s.stats.iter().any(|x| &x.api == a) {
            out.push(a.clone());
        }
    }
    out.truncate(s.config.max_len);
    out
}

fn mutation_properties() -> Check {
    let t = Instant::now();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let mut sched = synthetic_schedule(&mut rng);
        let seeds = synthetic_seeds(&mut rng, sched.stats.len());
        let m = sched.mutate(&seeds, &mut rng).map_err(|e| format!("call {i}: {e}"))?;
        let out: Vec<String> = m.combination.apis().to_vec();
        let fail = |what: &str| format!("call {i}: {what}: {:?} -> {out:?}", m.operator);
        let distinct: BTreeSet<&String> = out.iter().collect();
        ensure(distinct.len() == out.len(), || fail("duplicate API"))?;
        ensure(out.len() <= sched.config.max_len, || fail("too long"))?;
        let pivot = m.pivot.as_ref().and_then(|id| seeds.iter().find(|s| &s.id == id));
        match m.operator {
            Operator::WarmUp => ensure(out.len() == 5, || fail("warm-up length"))?,
            Operator::Insertion => {
                let base = pivot_comb(&sched, pivot.ok_or_else(|| fail("no pivot"))?);
                ensure(out.len() == base.len() + 1 && out[..base.len()] == base[..], || fail("insertion shape"))?;
                ensure(!base.contains(out.last().unwrap()), || fail("inserted a member"))?;
            }
            Operator::Replacement => {
                let base = pivot_comb(&sched, pivot.ok_or_else(|| fail("no pivot"))?);
                ensure(out.len() == base.len(), || fail("replacement changed length"))?;
                let changed: Vec<usize> = (0..out.len()).filter(|&k| out[k] != base[k]).collect();
                ensure(changed.len() == 1 && !base.contains(&out[changed[0]]), || fail("replacement shape"))?;
            }
            Operator::Crossover => {
                let base = pivot_comb(&sched, pivot.ok_or_else(|| fail("no pivot"))?);
                let ok = seeds.iter().any(|other| out.iter().all(|a| base.contains(a) || other.critical.contains(a)));
                ensure(ok, || fail("crossover left the parents' union"))?;
            }
            Operator::Blind => return Err(fail("blind operator without blind mode")),
        }
        *counts.entry(format!("{:?}", m.operator)).or_default() += 1;
    }
    for op in ["WarmUp", "Insertion", "Replacement", "Crossover"] {
        ensure(counts.get(op).copied().unwrap_or(0) > 0, || format!("{op} never exercised"))?;
    }
    let e = within(t, Duration::from_secs(10))?;
    Ok(format!("10000 calls {counts:?}, {e:.2?}"))
}

// 3. Energy-weighted sampling.

fn weighted_sampling() -> Check {
    let stats = vec![ApiStats { energy: 3.0, ..ApiStats::new("hot") }, ApiStats { energy: 1.0, ..ApiStats::new("cold") }];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000u64;
    let mut hot = 0u64;
    for _ in 0..n {
        if choose_by_energy(&stats, &mut rng).map_err(|e| e.to_string())? == "hot" {
            hot += 1;
        }
    }
    let sigma = (n as f64 * 0.75 * 0.25).sqrt();
    let dev = (hot as f64 - 0.75 * n as f64).abs();
    ensure(dev <= 3.0 * sigma, || format!("{hot} of {n} hot draws, {:.1} sigma off", dev / sigma))?;
    Ok(format!("{:.4}/{:.4}, {:.2} sigma", hot as f64 / n as f64, 1.0 - hot as f64 / n as f64, dev / sigma))
}

// 4. Static constraint inference on the fixture dumps.

fn constraint_inference() -> Check {
    let recorded = RecordedProber::from_toml(&std::fs::read_to_string(common::toycodec_dir().join("probes.toml")).unwrap())
        .map_err(|e| e.to_string())?;
    let run = || {
        let progs: Vec<_> = common::seed_programs().into_iter().map(|(_, p)| p).collect();
        infer_all(&progs, &InferenceConfig::default(), Some(&recorded), &AllocCriterion::default())
    };
    let first = run();
    let second = run();
    ensure(first.resolved == second.resolved && first.inferred == second.inferred, || "runs differ".into())?;
    let got = common::keys(&first.resolved);
    let truth = common::ground_truth();
    let tp = got.intersection(&truth).count();
    let precision = tp as f64 / got.len().max(1) as f64;
    let recall = tp as f64 / truth.len().max(1) as f64;
    let kinds: BTreeSet<ConstraintKind> = truth.iter().map(|k| k.2).collect();
    ensure(kinds.len() == 6, || format!("ground truth covers only {kinds:?}"))?;
    ensure(precision == 1.0 && recall == 1.0, || {
        format!(
            "precision {precision:.3} recall {recall:.3}; extra {:?}; missing {:?}",
            got.difference(&truth).collect::<Vec<_>>(),
            truth.difference(&got).collect::<Vec<_>>()
        )
    })?;
    Ok(format!("{tp} constraints over 6 kinds, precision 1.000 recall 1.000, deterministic"))
}

// 5. Persistence, termination and spend.

/// Reads `// cov: f:1 f:2` and `// calls: f g` comments instead of
/// compiling.
struct CommentSanitizer;

fn field<'s>(src: &'s str, key: &str) -> Vec<&'s str> {
    src.lines().filter_map(|l| l.trim().strip_prefix("// ")?.strip_prefix(key)?.strip_prefix(':')).flat_map(str::split_whitespace).collect()
}

impl BatchSanitizer for CommentSanitizer {
    fn sanitize_batch(&self, programs: &[(String, String)], _: &BTreeSet<String>, _: &[Vec<u8>]) -> Vec<Result<Verdict, String>> {
        programs
            .iter()
            .map(|(_, src)| {
                let mut cov = BranchSet::new();
                for b in field(src, "cov") {
                    let (f, id) = b.split_once(':').ok_or("bad cov")?;
                    cov.insert(f, id.parse().map_err(|_| "bad cov")?);
                }
                let calls: Vec<String> = field(src, "calls").iter().map(|s| s.to_string()).collect();
                Ok(Verdict {
                    stage: Stage::Pass,
                    detail: String::new(),
                    coverage: Some(cov),
                    new_corpus: Vec::new(),
                    executed_sites: BTreeSet::new(),
                    failure: None,
                    facts: Some(ProgramFacts {
                        density: calls.len() as u64,
                        critical_calls: calls.clone(),
                        apis_called: calls,
                        critical_sites: Vec::new(),
                    }),
                    ast_json: "{}".into(),
                    branch_totals: BTreeMap::from([("f".into(), 8), ("g".into(), 8), ("h".into(), 8)]),
                })
            })
            .collect()
    }
}

fn model() -> LibraryModel {
    let mut m = LibraryModel::default();
    for name in ["f", "g", "h"] {
        m.apis.push(ApiFunction {
            name: name.into(),
            return_type: "int".into(),
            params: vec![Param { name: Some("x".into()), ty: "int".into() }],
            source_header: "lib.h".into(),
            variadic: false,
        });
    }
    m
}

fn settings() -> LoopSettings {
    LoopSettings {
        seed: 11,
        patience: 10,
        n_samples: 3,
        temperature: 0.9,
        gadget_limit: 100,
        schedule: ScheduleConfig { default_len: 2, warmup_threshold: 2, ..ScheduleConfig::default() },
        headers: vec!["lib.h".into()],
        notes: None,
        template: DEFAULT_TEMPLATE.into(),
        limits: PromptLimits::default(),
    }
}

fn open<'a>(pool: &str, dir: &Path, san: &'a CommentSanitizer) -> Result<Campaign<'a>, String> {
    let pool = StubPool::parse(pool, Path::new(".")).map_err(|e| e.to_string())?;
    Campaign::open(settings(), model(), GatewayConfig::default(), Box::new(StubBackend::new(pool)), san, "lib", dir)
        .map_err(|e| e.to_string())
}

const FIRST: &str = r#"
[[entry]]
combination = ["*"]
programs = ["// cov: f:1 f:2 g:1\n// calls: f g\nint a;"]
"#;

const COVERED: &str = r#"
[[entry]]
combination = ["*"]
programs = [
  "// cov: f:1\n// calls: f\nint b;",
  "// cov: f:2 g:1\n// calls: g f\nint c;",
  "// cov: g:1\n// calls: g\nint d;",
]
"#;

const GROWING: &str = r#"
[[entry]]
combination = ["*"]
programs = [
  "// cov: f:1 f:2\n// calls: f g\nint a;",
  "// cov: f:1 g:1\n// calls: f\nint b;",
  "// cov: g:2 g:3\n// calls: g h\nint d;",
  "// cov: h:1 f:1\n// calls: h f\nint e;",
  "// cov: h:2 h:3 h:4\n// calls: h\nint g;",
  "// cov: f:5 g:6\n// calls: f g h\nint i;",
]
"#;

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap_or_default());
            }
        }
    }
    out
}

fn no_progress_halt() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let san = CommentSanitizer;
    let before = open(FIRST, dir.path(), &san)?.run(Some(1)).map_err(|e| e.to_string())?;
    ensure(before.covered_branches == 3, || format!("priming covered {}", before.covered_branches))?;
    let mut c = open(COVERED, dir.path(), &san)?;
    let s = c.run(Some(1000)).map_err(|e| e.to_string())?;
    let after: Vec<_> = c.snapshots()[1..].to_vec();
    ensure(s.stop == StopReason::NoProgress, || format!("stopped with {:?}", s.stop))?;
    ensure(after.len() == 10, || format!("{} iterations after priming", after.len()))?;
    ensure(after.iter().all(|x| x.new_branches == 0 && x.generated > 0), || "an iteration made progress or generated nothing".into())?;
    Ok(format!("halted after {} no-progress iterations", after.len()))
}

fn kill_and_resume() -> Result<String, String> {
    let san = CommentSanitizer;
    let whole = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = open(GROWING, whole.path(), &san)?.run(None).map_err(|e| e.to_string())?;
    let split = tempfile::tempdir().map_err(|e| e.to_string())?;
    open(GROWING, split.path(), &san)?.run(Some(2)).map_err(|e| e.to_string())?;
    // A kill during the next checkpoint write leaves a partial staging dir.
    std::fs::create_dir_all(split.path().join("checkpoint.new/bank")).map_err(|e| e.to_string())?;
    std::fs::write(split.path().join("checkpoint.new/state.json"), "{\"trunc").map_err(|e| e.to_string())?;
    open(GROWING, split.path(), &san)?.run(Some(3)).map_err(|e| e.to_string())?;
    let b = open(GROWING, split.path(), &san)?.run(None).map_err(|e| e.to_string())?;
    ensure(a == b, || format!("summaries differ: {a:?} vs {b:?}"))?;
    let ta = tree(&whole.path().join("checkpoint"));
    let tb = tree(&split.path().join("checkpoint"));
    ensure(ta.keys().eq(tb.keys()), || "checkpoint file sets differ".into())?;
    for (k, v) in &ta {
        ensure(tb[k] == *v, || format!("{k} differs"))?;
    }
    Ok(format!("{} iterations, {} seeds, {} files identical", a.iterations, a.seeds, ta.len()))
}

/// Returns scripted token counts in order.
struct ScriptedBackend(Mutex<VecDeque<(u64, u64)>>);

impl Backend for ScriptedBackend {
    fn complete(&self, _: &ModelSpec, _: &GenerationRequest, _: u32) -> Result<BackendResponse, BackendError> {
        let (p, c) = self.0.lock().unwrap().pop_front().ok_or_else(|| BackendError::Fatal("script exhausted".into()))?;
        Ok(BackendResponse { texts: vec!["int x;".into()], prompt_tokens: p, completion_tokens: c })
    }
}

fn ledger_spend() -> Result<String, String> {
    // (prompt tokens, completion tokens, needs the 16k window)
    let round = [(1200, 3400, false), (6000, 2000, true), (3900, 1500, false), (14000, 4000, true)];
    let script: VecDeque<(u64, u64)> = (0..25).flat_map(|_| round.iter().map(|&(p, c, _)| (p, c))).collect();
    let cfg = GatewayConfig { max_completion_tokens: 4096, ..GatewayConfig::default() };
    let gw = Gateway::new(cfg, Box::new(ScriptedBackend(Mutex::new(script))));
    let long = "word ".repeat(3000);
    for _ in 0..25 {
        for &(_, _, big) in &round {
            let req = GenerationRequest::new(if big { long.as_str() } else { "short prompt" }, 1, 0.0);
            gw.generate(&req).map_err(|e| e.to_string())?;
        }
    }
    let ledger = gw.ledger();
    // Per round: 4k 1200*0.0015 + 3400*0.002 = 0.0086; 16k 6000*0.003 +
    // 2000*0.004 = 0.026; 4k 0.00585 + 0.003 = 0.00885; 16k 0.042 + 0.016
    // = 0.058. Round total 0.10145, times 25 is $2.53625.
    let expected_cents = 254;
    let models: BTreeSet<&str> = ledger.entries.iter().map(|e| e.model.as_str()).collect();
    ensure(models.len() == 2, || format!("routed only to {models:?}"))?;
    ensure(ledger.total.cents() == expected_cents, || {
        format!("spent {} ({} cents), expected 254 cents", ledger.total, ledger.total.cents())
    })?;
    ensure(ledger.total == Money(2_536_250_000_000), || format!("spent {}", ledger.total))?;
    Ok(format!("{} calls, {}", ledger.entries.len(), ledger.total))
}

fn persistence() -> Check {
    let halt = no_progress_halt().map_err(|e| format!("termination: {e}"))?;
    let resume = kill_and_resume().map_err(|e| format!("resume: {e}"))?;
    let spend = ledger_spend().map_err(|e| format!("ledger: {e}"))?;
    Ok(format!("{halt}; resume: {resume}; ledger: {spend}"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 5] = [
        ("schedule math matches direct evaluation", schedule_math),
        ("mutation operator properties", mutation_properties),
        ("energy-weighted sampling", weighted_sampling),
        ("static constraint inference on fixtures", constraint_inference),
        ("persistence, termination and spend", persistence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| Err(format!("panicked: {p:?}")));
        match r {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
