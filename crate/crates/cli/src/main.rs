use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use paged_evict::config::{parse_entries, ConfigError, RunConfig};
use paged_evict::metrics::{emit_csv, emit_jsonl, summarize};
use paged_evict::policy::PolicyKind;
use paged_evict::sim::run_matrix;
use paged_evict::verify::{self, Fault};

const THREADS_ENV: &str = "PAGED_EVICT_THREADS";

#[derive(Parser)]
#[command(name = "paged-evict", version, about = "Paged KV cache eviction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the given policies, budgets and page sizes.
    Run(RunArgs),
    /// Like `run`, but covers every policy unless `--policy` is given.
    Sweep(RunArgs),
    /// Check the library against its oracles.
    Verify(VerifyArgs),
}

/// Values stay strings here so that the config layer reports errors by
/// field name for flags and files alike.
#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated: paged-eviction, streaming-llm, inv-key-l2, key-diff, full.
    #[arg(long)]
    policy: Option<String>,
    /// Cache budget in tokens; comma-separated for several.
    #[arg(long)]
    budget: Option<String>,
    /// Page size in tokens; comma-separated for several.
    #[arg(long)]
    page_size: Option<String>,
    #[arg(long)]
    sink_count: Option<String>,
    /// Prompt length.
    #[arg(long)]
    prefill: Option<String>,
    /// Decode steps.
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    head_dim: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    /// open-loop or closed-loop.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Timed repetitions per run (with --timings).
    #[arg(long)]
    reps: Option<String>,
    /// Measure wall clock per phase.
    #[arg(long)]
    timings: bool,
    /// Pages per sequence per layer.
    #[arg(long)]
    pool_pages: Option<String>,
    /// Prompt 1024, decode 8192, batch 64.
    #[arg(long)]
    large_scale: bool,
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out_jsonl: Option<PathBuf>,
}

impl RunArgs {
    fn flag_entries(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags = [
            ("policy", self.policy.clone()),
            ("budget", self.budget.clone()),
            ("page-size", self.page_size.clone()),
            ("sink-count", self.sink_count.clone()),
            ("prefill", self.prefill.clone()),
            ("decode", self.decode.clone()),
            ("batch", self.batch.clone()),
            ("layers", self.layers.clone()),
            ("heads", self.heads.clone()),
            ("head-dim", self.head_dim.clone()),
            ("d-model", self.d_model.clone()),
            ("mode", self.mode.clone()),
            ("seed", self.seed.clone()),
            ("reps", self.reps.clone()),
            ("timings", self.timings.then(|| "true".to_string())),
            ("pool-pages", self.pool_pages.clone()),
            ("large-scale", self.large_scale.then(|| "true".to_string())),
            ("out-csv", path(&self.out_csv)),
            ("out-jsonl", path(&self.out_jsonl)),
        ];
        flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect()
    }

    fn resolve(&self, all_policies: bool) -> Result<RunConfig, ConfigError> {
        let mut entries = Vec::new();
        if all_policies {
            let all = PolicyKind::ALL.map(PolicyKind::as_str).join(",");
            entries.push(("policy".to_string(), all));
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
            entries.extend(parse_entries(&text)?);
        }
        entries.extend(self.flag_entries());
        RunConfig::from_entries(&entries)
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

fn configure_threads() -> Result<(), ConfigError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError::new(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| ConfigError::new(THREADS_ENV, e.to_string()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn execute(cfg: &RunConfig) -> anyhow::Result<()> {
    let outcomes = run_matrix(&cfg.specs())?;
    let records: Vec<_> = outcomes.iter().map(|o| o.record.clone()).collect();

    if let Some(path) = &cfg.out_csv {
        let mut out = create(path)?;
        emit_csv(&records, &mut out)?;
        out.flush()?;
    }
    if let Some(path) = &cfg.out_jsonl {
        let mut out = create(path)?;
        emit_jsonl(outcomes.iter().flat_map(|o| o.steps.iter()), &mut out)?;
        out.flush()?;
    }

    let mut stdout = io::stdout().lock();
    write!(stdout, "{}", summarize(&records)?)?;
    for (label, path) in [("csv", &cfg.out_csv), ("jsonl", &cfg.out_jsonl)] {
        if let Some(path) = path {
            writeln!(stdout, "wrote {label}: {}", path.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match cli.command {
        Command::Run(args) => run(&args, false),
        Command::Sweep(args) => run(&args, args.policy.is_none()),
        Command::Verify(args) => {
            let report = verify::run(args.seed, args.inject_fault);
            print!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed invariants: {}", report.failed().join(", "));
                ExitCode::from(1)
            }
        }
    }
}

fn run(args: &RunArgs, all_policies: bool) -> ExitCode {
    let cfg = match args.resolve(all_policies) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
