use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use driverforge::campaign::{
    bank_programs, load_bank, load_library_model, load_model, load_snapshots, report, Campaign, CampaignError, LoopSettings, StopReason,
};
use driverforge::config::{BackendConfig, CampaignConfig};
use driverforge::constraints::{infer_all, resolve, AllocProber, ConstraintReport, RecordedProber};
use driverforge::fusion::{fuse_with_trials, FusionContext, FusionSeed, PipelineTrials, TrialRunner};
use driverforge::gateway::{Backend, HttpBackend, StubBackend, StubPool};
use driverforge::sanitizer::{BuildProber, Pipeline};
use driverforge::toolchain::{dump_pruned, Toolchain};

#[derive(Parser)]
#[command(name = "driverforge", version, about = "Coverage-guided fuzz driver generation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Campaign config file.
    #[arg(short, long)]
    config: PathBuf,
    /// Campaign directory.
    #[arg(short, long, default_value = "campaign")]
    dir: PathBuf,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patience: Option<u64>,
    #[arg(long)]
    n_samples: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Query budget in USD.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    default_len: Option<usize>,
    #[arg(long)]
    gadget_limit: Option<usize>,
    #[arg(long)]
    exponent: Option<f64>,
    #[arg(long)]
    warmup_threshold: Option<usize>,
    #[arg(long)]
    fuzz_interval_secs: Option<u64>,
    #[arg(long)]
    fuzz_budget_secs: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Uniform API selection instead of the power schedule.
    #[arg(long)]
    blind: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run (or resume) a generation campaign.
    Fuzz {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Stop after this many iterations; resumable.
        #[arg(long)]
        max_iterations: Option<u64>,
    },
    /// Infer argument constraints from the campaign's seeds.
    InferConstraints {
        #[command(flatten)]
        common: Common,
        /// Replay allocation measurements from a TOML file.
        #[arg(long, conflicts_with = "probe")]
        recorded: Option<PathBuf>,
        /// Measure allocations by building probe variants.
        #[arg(long)]
        probe: bool,
    },
    /// Fuse the unique seeds into one driver under `<dir>/fused`.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Keep every conversion without trial runs.
        #[arg(long)]
        no_trials: bool,
    },
    /// Fuzz the fused driver.
    RunDriver {
        #[command(flatten)]
        common: Common,
        /// Wall-clock budget in seconds.
        #[arg(long, default_value_t = 600)]
        secs: u64,
    },
    /// Coverage, energy and rejection tables from campaign snapshots.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write coverage.csv and energy.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a pruned clang AST for a C file.
    DumpAst {
        src: PathBuf,
        #[arg(short = 'I')]
        include: Vec<PathBuf>,
        /// Files whose declarations are kept (default: the source itself).
        #[arg(long)]
        keep: Vec<PathBuf>,
        /// Make file paths relative to this directory.
        #[arg(long)]
        strip_prefix: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

/// Error carrying its exit status.
struct Exit(u8, anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Exit {
    fn from(e: E) -> Self {
        Exit(1, e.into())
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Exit {
    Exit(2, e.into())
}

fn toolchain() -> Result<Toolchain, Exit> {
    Toolchain::detect().map_err(|e| Exit(4, e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Fuzz { common, overrides, max_iterations } => fuzz(&common, &overrides, max_iterations),
        Cmd::InferConstraints { common, recorded, probe } => infer(&common, recorded.as_deref(), probe),
        Cmd::Fuse { common, no_trials } => fuse(&common, no_trials),
        Cmd::RunDriver { common, secs } => run_driver(&common, secs),
        Cmd::Report { dirs, out } => report_cmd(&dirs, out.as_deref()),
        Cmd::DumpAst { src, include, keep, strip_prefix, out } => dump_ast(&src, &include, &keep, strip_prefix.as_deref(), out.as_deref()),
    };
    match r {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn set<T: Copy>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn load_config(path: &Path, o: &Overrides) -> Result<CampaignConfig, Exit> {
    let mut c = CampaignConfig::load(path).map_err(config_err)?;
    set(&mut c.seed, o.seed);
    set(&mut c.patience, o.patience);
    set(&mut c.generator.n_samples, o.n_samples);
    set(&mut c.generator.temperature, o.temperature);
    set(&mut c.schedule.schedule.default_len, o.default_len);
    set(&mut c.schedule.gadget_limit, o.gadget_limit);
    set(&mut c.schedule.schedule.exponent, o.exponent);
    set(&mut c.schedule.schedule.warmup_threshold, o.warmup_threshold);
    set(&mut c.pipeline.fuzz_interval_secs, o.fuzz_interval_secs);
    set(&mut c.pipeline.fuzz_budget_secs, o.fuzz_budget_secs);
    set(&mut c.pipeline.workers, o.workers);
    if o.budget.is_some() {
        c.generator.gateway.budget = o.budget;
    }
    c.schedule.schedule.blind |= o.blind;
    c.validate().map_err(config_err)?;
    Ok(c)
}

fn pipeline(cfg: &CampaignConfig, dir: &Path) -> Result<(Toolchain, Pipeline), Exit> {
    let tc = toolchain()?;
    let p = Pipeline::prepare(tc.clone(), cfg.library.build.clone(), cfg.pipeline.clone(), &dir.join("work"))
        .context("preparing the instrumented library")?;
    Ok((tc, p))
}

fn backend(cfg: &CampaignConfig) -> Result<Box<dyn Backend>, Exit> {
    Ok(match &cfg.generator.backend {
        BackendConfig::Stub { pool } => Box::new(StubBackend::new(StubPool::load(pool).map_err(config_err)?)),
        BackendConfig::Http(h) => Box::new(HttpBackend::new(h.clone()).map_err(config_err)?),
    })
}

fn fuzz(common: &Common, o: &Overrides, max_iterations: Option<u64>) -> Result<u8, Exit> {
    let cfg = load_config(&common.config, o)?;
    let settings = LoopSettings::from_config(&cfg).map_err(config_err)?;
    let backend = backend(&cfg)?;
    let (tc, p) = pipeline(&cfg, &common.dir)?;
    let model = load_library_model(&cfg.library, Some(&tc)).context("building the library model")?;
    let mut campaign =
        Campaign::open(settings, model, cfg.generator.gateway.clone(), backend, &p, p.build_hash(), &common.dir).map_err(|e| match e {
            e @ CampaignError::SeedMismatch { .. } => config_err(e),
            e => e.into(),
        })?;
    let summary = campaign.run(max_iterations)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if summary.stop == StopReason::BudgetExhausted { 3 } else { 0 })
}

fn apis_of(dir: &Path) -> Result<BTreeSet<String>, Exit> {
    Ok(load_model(dir)?.api_names().into_iter().collect())
}

fn infer(common: &Common, recorded: Option<&Path>, probe: bool) -> Result<u8, Exit> {
    let cfg = load_config(&common.config, &Overrides::default())?;
    let bank = load_bank(&common.dir)?;
    let apis = apis_of(&common.dir)?;
    let progs: Vec<_> = bank_programs(&bank, &apis, false).into_iter().map(|(_, p)| p).collect();
    let recorded_prober;
    let built;
    let build_prober;
    let prober: Option<&dyn AllocProber> = if let Some(path) = recorded {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        recorded_prober = RecordedProber::from_toml(&text).map_err(config_err)?;
        Some(&recorded_prober)
    } else if probe {
        built = pipeline(&cfg, &common.dir)?.1;
        build_prober = BuildProber { pipeline: &built, corpus: bank.corpus() };
        Some(&build_prober)
    } else {
        None
    };
    let rep = infer_all(&progs, &cfg.inference, prober, &cfg.alloc_probe);
    let out = common.dir.join("constraints.json");
    std::fs::write(&out, serde_json::to_string_pretty(&rep)? + "\n")?;
    for c in &rep.resolved {
        let rel = c.related_arg.map(|r| format!(" (array arg {r})")).unwrap_or_default();
        println!("{:<14} {} arg {}{rel}  support {}", format!("{:?}", c.kind), c.api, c.arg, c.support);
    }
    eprintln!("{} constraints from {} seeds written to {}", rep.resolved.len(), progs.len(), out.display());
    Ok(0)
}

fn constraints_of(dir: &Path, cfg: &CampaignConfig, progs: &[driverforge::analysis::ProgramAst]) -> Result<ConstraintReport, Exit> {
    let path = dir.join("constraints.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        return Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    Ok(infer_all(progs, &cfg.inference, None, &cfg.alloc_probe))
}

fn fuse(common: &Common, no_trials: bool) -> Result<u8, Exit> {
    let cfg = load_config(&common.config, &Overrides::default())?;
    let bank = load_bank(&common.dir)?;
    let model = load_model(&common.dir)?;
    let apis: BTreeSet<String> = model.api_names().into_iter().collect();
    let seeds: Vec<FusionSeed> = bank_programs(&bank, &apis, true).into_iter().map(|(id, prog)| FusionSeed { id, prog }).collect();
    let all: Vec<_> = bank_programs(&bank, &apis, false).into_iter().map(|(_, p)| p).collect();
    let rep = constraints_of(&common.dir, &cfg, &all)?;
    let ctx = FusionContext::new(&seeds, resolve(&rep.resolved), Some(&model), cfg.fusion.clone());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let built = if no_trials { None } else { Some(pipeline(&cfg, &common.dir)?.1) };
    let trials = built.as_ref().map(|p| PipelineTrials { pipeline: p, apis: apis.clone() });
    let (driver, plans) = fuse_with_trials(&seeds, &ctx, trials.as_ref().map(|t| t as &dyn TrialRunner), &mut rng)?;
    let out = common.dir.join("fused");
    driver.write(&out)?;
    std::fs::write(out.join("plans.json"), serde_json::to_string_pretty(&plans)? + "\n")?;
    let converted: usize = plans.iter().map(|(p, _)| p.sites.len()).sum();
    eprintln!("fused {} seeds, {converted} converted arguments, into {}", driver.dispatch.len(), out.join("driver.c").display());
    Ok(0)
}

fn run_driver(common: &Common, secs: u64) -> Result<u8, Exit> {
    let cfg = load_config(&common.config, &Overrides::default())?;
    let fused = common.dir.join("fused");
    let source = std::fs::read_to_string(fused.join("driver.c")).context("no fused driver; run `fuse` first")?;
    let mut corpus = Vec::new();
    let corpus_dir = fused.join("corpus");
    if corpus_dir.exists() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&corpus_dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        paths.sort();
        for p in paths {
            corpus.push(std::fs::read(p)?);
        }
    }
    let apis = apis_of(&common.dir)?;
    let (_, p) = pipeline(&cfg, &common.dir)?;
    let run = p
        .run_driver(&source, &apis, &corpus, &fused.join("run"), secs, cfg.pipeline.fuzz_seed)?
        .map_err(|e| anyhow::anyhow!("fused driver does not build:\n{e}"))?;
    match &run.crash {
        Some(c) => {
            std::fs::write(fused.join("crash.txt"), &c.report)?;
            if let Some(i) = &c.input {
                std::fs::write(fused.join("crash-input"), i)?;
            }
            println!("crash after {:.1} s, report in {}", run.elapsed_secs, fused.join("crash.txt").display());
        }
        None => println!("no crash in {:.1} s (final cov {:?})", run.elapsed_secs, run.final_cov),
    }
    Ok(0)
}

fn report_cmd(dirs: &[PathBuf], out: Option<&Path>) -> Result<u8, Exit> {
    if dirs.is_empty() {
        return Err(config_err(anyhow::anyhow!("no campaign directory given")));
    }
    let mut campaigns = Vec::new();
    for d in dirs {
        campaigns.push((d.display().to_string(), load_snapshots(d)?));
    }
    let r = report(&campaigns);
    print!("{}", r.text);
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("coverage.csv"), &r.coverage_csv)?;
        std::fs::write(o.join("energy.csv"), &r.energy_csv)?;
    }
    Ok(0)
}

fn dump_ast(src: &Path, include: &[PathBuf], keep: &[PathBuf], strip_prefix: Option<&Path>, out: Option<&Path>) -> Result<u8, Exit> {
    let tc = toolchain()?;
    let cflags: Vec<String> = include.iter().map(|i| format!("-I{}", i.display())).collect();
    let v = dump_pruned(&tc, src, &cflags, keep, strip_prefix)?;
    let text = serde_json::to_string_pretty(&v)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(0)
}
