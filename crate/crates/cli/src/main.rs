//! `hybridseq`: train, evaluate, benchmark and sweep the hybrid decoder.
//!
//! Settings resolve as flags > config file > defaults, with `HYBRIDSEQ_SEED`
//! standing in for `--seed`. Exit codes: 0 success, 2 usage, 3 config or
//! input, 4 numeric failure.

mod grid;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hybridseq::model::{load_checkpoint, load_checkpoint_for, save_checkpoint, Arch, HybridStackConfig, Model};
use hybridseq::profiler::{self, BenchConfig, CostReport};
use hybridseq::training::{evaluate, train, write_log, Axis, ExperimentConfig, Stage};
use hybridseq::Error;

use grid::parse_grid;
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "hybridseq", version, about = "Hybrid state-space / attention decoder at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; a hybrid is built from a freshly trained (or given) baseline teacher.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out task instances.
    Eval(EvalArgs),
    /// Cost and wall-clock scaling curves over a grid of video lengths.
    Bench(BenchArgs),
    /// Fit log-log scaling exponents to a bench CSV or JSON file.
    Analyze(AnalyzeArgs),
    /// Train and evaluate every setting of one design axis from a shared teacher.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "HYBRIDSEQ_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    stage: Option<Stage>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    /// Video tokens per instance.
    #[arg(long = "M")]
    m: Option<String>,
    /// Text query tokens per instance.
    #[arg(long = "N")]
    n: Option<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, value_parser = ["none", "mamba", "mamba2"])]
    block: Option<String>,
    #[arg(long = "ca-from-sa", value_parser = ["0", "1"])]
    ca_from_sa: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Hybrid,
    Baseline,
    Both,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Baseline teacher checkpoint; trained from scratch when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Points whose estimated activations exceed this many MiB are not timed.
    #[arg(long, default_value_t = 2048)]
    budget_mib: u64,
    /// Time a training step instead of a pre-fill.
    #[arg(long)]
    train_step: bool,
    /// Report costs only.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// A bench CSV or JSON file.
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    axis: Axis,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Output directory for the re-run; defaults to the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Diverged { .. } | Error::NonFinite { .. } | Error::DegenerateRow { .. }) => 4,
            CliError::Core(Error::Contract(_) | Error::Dimension { .. }) => 2,
            CliError::Core(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Settings layered as defaults, then the config document, then flags.
/// `config_text` replaces the file when replaying a manifest.
fn resolve(c: &Common, config_text: Option<&str>) -> CliResult<ExperimentConfig> {
    resolve_from(ExperimentConfig::default(), c, config_text)
}

fn resolve_from(mut cfg: ExperimentConfig, c: &Common, config_text: Option<&str>) -> CliResult<ExperimentConfig> {
    match (config_text, &c.config) {
        (Some(text), _) => cfg.apply_text(text)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config { line: None, msg: format!("{}: {e}", path.display()) })?;
            cfg.apply_text(&text).map_err(|e| match e {
                Error::Config { line, msg } => Error::Config { line, msg: format!("{}: {msg}", path.display()) },
                e => e,
            })?;
        }
        (None, None) => {}
    }
    let mut set = |k: &str, v: String| {
        cfg.set(k, &v).map_err(|msg| CliError::Core(Error::Config { line: None, msg: format!("--{k}: {msg}") }))
    };
    if let Some(s) = c.seed {
        set("seed", s.to_string())?;
    }
    if let Some(s) = c.stage {
        set("stage", s.to_string())?;
    }
    if let Some(l) = c.lambda {
        set("lambda", l.to_string())?;
    }
    match c.arch {
        Some(ArchArg::Hybrid) => set("arch", "hybrid".into())?,
        Some(ArchArg::Baseline) => set("arch", "baseline".into())?,
        _ => {}
    }
    if let Some(d) = c.d {
        set("d", d.to_string())?;
    }
    if let Some(l) = c.layers {
        set("layers", l.to_string())?;
    }
    if let Some(b) = &c.block {
        set("block", b.clone())?;
    }
    if let Some(v) = &c.ca_from_sa {
        set("ca_from_sa", v.clone())?;
    }
    Ok(cfg)
}

/// `--M` / `--N` as a single value for training runs.
fn single(flag: &str, v: &Option<String>) -> CliResult<Option<String>> {
    match v {
        None => Ok(None),
        Some(s) => s
            .trim()
            .parse::<usize>()
            .map(|x| Some(x.to_string()))
            .map_err(|_| usage(format!("--{flag} takes one integer here, got {s:?}"))),
    }
}

fn resolve_run(c: &Common, config_text: Option<&str>) -> CliResult<ExperimentConfig> {
    let mut cfg = resolve(c, config_text)?;
    for (flag, v) in [("M", single("M", &c.m)?), ("N", single("N", &c.n)?)] {
        if let Some(v) = v {
            cfg.set(flag, &v).map_err(|msg| CliError::Core(Error::Config { line: None, msg }))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> CliResult<PathBuf> {
    let dir = c.out.clone().ok_or_else(|| usage("--out <dir> is required"))?;
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_log_file(path: &Path, log: &[hybridseq::training::LogRecord]) -> CliResult<()> {
    let mut buf = Vec::new();
    write_log(log, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, argv: &[String], config_text: Option<&str>) -> CliResult<()> {
    let cfg = resolve_run(&a.common, config_text)?;
    let dir = out_dir(&a.common)?;
    let mut m = RunManifest::start("train", argv, &cfg);
    let arch = cfg.model.arch;
    let needs_teacher = arch == Arch::Hybrid && (a.from.is_none() || cfg.train.lambda > 0.0);
    let teacher = if !needs_teacher {
        None
    } else if let Some(p) = &a.teacher {
        m.input(p);
        Some(load_checkpoint_for(p, &cfg.teacher_config())?)
    } else {
        let (t, log) = cfg.train_teacher()?;
        let (ckpt, log_path) = (dir.join("teacher.ckpt"), dir.join("teacher.log.ndjson"));
        save_checkpoint(&t, &ckpt)?;
        write_log_file(&log_path, &log)?;
        m.artifact("checkpoint", &ckpt);
        m.artifact("log", &log_path);
        Some(t)
    };
    let mut model = match (&a.from, arch) {
        (Some(p), _) => {
            m.input(p);
            load_checkpoint_for(p, &cfg.model)?
        }
        (None, Arch::Baseline) => Model::new(cfg.model.clone(), cfg.seed)?,
        (None, Arch::Hybrid) => {
            let t = teacher.as_ref().expect("teacher built above");
            Model::hybrid_from_baseline(t, cfg.model.clone(), cfg.seed.wrapping_add(1))?
        }
    };
    let log = train(&mut model, &cfg.train, &cfg.task, teacher.as_ref().filter(|_| cfg.train.lambda > 0.0))?;
    let (ckpt, log_path) = (dir.join("model.ckpt"), dir.join("train.log.ndjson"));
    save_checkpoint(&model, &ckpt)?;
    write_log_file(&log_path, &log)?;
    m.artifact("checkpoint", &ckpt);
    m.artifact("log", &log_path);
    if let Some(last) = log.last() {
        println!("trained {} steps ({}), final loss {:.4}", log.len(), cfg.train.stage, last.loss);
    }
    m.finish(&dir)
}

fn cmd_eval(a: &EvalArgs, argv: &[String], config_text: Option<&str>) -> CliResult<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cfg = resolve_run(&a.common, config_text)?;
    cfg.model = model.config.clone();
    cfg.set("d", &model.config.d.to_string()).map_err(|msg| CliError::Core(Error::Config { line: None, msg }))?;
    cfg.validate()?;
    let report = evaluate(&model, &cfg.task, cfg.eval_instances)?;
    let p = hybridseq::training::binomial_upper_tail(report.correct, report.instances, cfg.chance());
    let json = serde_json::json!({ "report": report, "chance": cfg.chance(), "p_value": p });
    println!("{}", serde_json::to_string_pretty(&json).expect("serializable"));
    if a.common.out.is_some() {
        let dir = out_dir(&a.common)?;
        let mut m = RunManifest::start("eval", argv, &cfg);
        m.input(&a.checkpoint);
        let path = dir.join("eval.json");
        fs::write(&path, serde_json::to_vec_pretty(&json).expect("serializable"))?;
        m.artifact("eval", &path);
        m.finish(&dir)?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, argv: &[String], config_text: Option<&str>) -> CliResult<()> {
    // Benchmarks profile the full-size default stack unless the model is overridden.
    let base = ExperimentConfig { model: HybridStackConfig::default(), ..ExperimentConfig::default() };
    let cfg = resolve_from(base, &a.common, config_text)?;
    let ms = parse_grid(a.common.m.as_deref().unwrap_or("1024:16384:x2")).map_err(usage)?;
    let ns = parse_grid(a.common.n.as_deref().unwrap_or("64")).map_err(usage)?;
    if ns.contains(&0) {
        return Err(usage("--N values must be positive"));
    }
    let arches: &[Arch] = match a.common.arch.unwrap_or(ArchArg::Both) {
        ArchArg::Hybrid => &[Arch::Hybrid],
        ArchArg::Baseline => &[Arch::Baseline],
        ArchArg::Both => &[Arch::Baseline, Arch::Hybrid],
    };
    let bench_cfg = BenchConfig {
        repeats: a.repeats,
        memory_budget_bytes: a.budget_mib.saturating_mul(1 << 20),
        train_step: a.train_step,
        timing: !a.no_timing,
    };
    let grid: Vec<(usize, usize)> = ns.iter().flat_map(|&n| ms.iter().map(move |&m| (m, n))).collect();
    let mut rows: Vec<CostReport> = Vec::new();
    for &arch in arches {
        let model = Model::new(HybridStackConfig { arch, ..cfg.model.clone() }, cfg.seed)?;
        rows.extend(profiler::bench(&model, &grid, &bench_cfg)?);
    }
    let dir = out_dir(&a.common)?;
    let mut m = RunManifest::start("bench", argv, &cfg);
    let (csv_path, json_path) = (dir.join("bench.csv"), dir.join("bench.json"));
    let mut buf = Vec::new();
    profiler::write_csv(&rows, &mut buf)?;
    fs::write(&csv_path, &buf)?;
    let mut buf = Vec::new();
    profiler::write_json(&rows, &mut buf)?;
    fs::write(&json_path, &buf)?;
    m.artifact("bench_csv", &csv_path);
    m.artifact("bench_json", &json_path);
    let skipped = rows.iter().filter(|r| !r.note.is_empty()).count();
    println!("{} rows written to {} ({} untimed)", rows.len(), csv_path.display(), skipped);
    m.finish(&dir)
}

fn cmd_analyze(a: &AnalyzeArgs) -> CliResult<()> {
    let file = fs::File::open(&a.input)?;
    let rows = if a.input.extension().is_some_and(|e| e == "json") {
        profiler::read_json(file)?
    } else {
        profiler::read_csv(file)?
    };
    let fits = profiler::analyze(&rows)?;
    for f in &fits {
        let wall = f.wall.map_or("n/a".to_string(), |w| format!("{:.3} (r² {:.4})", w.slope, w.r2));
        println!(
            "{:<8} N={:<5} flops slope {:.3} ± {:.3} (r² {:.4})  memory slope {:.3}  wall slope {}",
            f.arch, f.n, f.flops.slope, f.flops.slope_stderr, f.flops.r2, f.memory.slope, wall
        );
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_vec_pretty(&fits).expect("serializable"))?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, argv: &[String], config_text: Option<&str>) -> CliResult<()> {
    let cfg = resolve_run(&a.common, config_text)?;
    let dir = out_dir(&a.common)?;
    let mut m = RunManifest::start("sweep", argv, &cfg);
    let report = cfg.sweep(a.axis)?;
    print!("{}", report.table());
    let path = dir.join("sweep.json");
    fs::write(&path, serde_json::to_vec_pretty(&report).expect("serializable"))?;
    m.artifact("sweep", &path);
    m.finish(&dir)
}

fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let m = RunManifest::read(&a.manifest)?;
    // The recorded seed is part of the resolved config; pin it so that the
    // environment cannot change a replay.
    let mut args = Vec::new();
    let mut it = m.argv.iter();
    while let Some(x) = it.next() {
        let strip = (a.out.is_some() && x == "--out") || x == "--seed";
        if strip {
            it.next();
        } else if !(a.out.is_some() && x.starts_with("--out=")) && !x.starts_with("--seed=") {
            args.push(x.clone());
        }
    }
    if !matches!(args.first().map(String::as_str), Some("analyze" | "replay")) {
        args.extend(["--seed".to_string(), m.seed.to_string()]);
    }
    if let Some(out) = &a.out {
        args.extend(["--out".to_string(), out.display().to_string()]);
    }
    let mut argv = vec!["hybridseq".to_string()];
    argv.extend(args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_) | Command::Analyze(_)) {
        return Err(usage("manifest does not record a replayable command"));
    }
    run(&cli, &args, Some(&m.config))
}

fn run(cli: &Cli, argv: &[String], config_text: Option<&str>) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, argv, config_text),
        Command::Eval(a) => cmd_eval(a, argv, config_text),
        Command::Bench(a) => cmd_bench(a, argv, config_text),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a, argv, config_text),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&cli, &argv, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Core(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.code())
        }
    }
}
