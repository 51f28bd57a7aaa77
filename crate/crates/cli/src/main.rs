use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use splm_core::classifier::SynthExperiment;
use splm_core::corpus::SplitRatios;
use splm_core::export::{kernel_csv, mask_csv};
use splm_core::gradcheck_suite::{format_report, run_suite};
use splm_core::train::evaluate;
use splm_core::{Checkpoint, CorpusSplit, FilterVariant, Precision, RunConfig, Scalar, Split, SynthConfig, TrainConfig, TrainRun};

const DATA_DIR_VAR: &str = "SPLM_DATA_DIR";

#[derive(Parser)]
#[command(name = "splm", version, about = "Character-level language models with learned token-axis filterbanks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalise a raw text file and write a train/dev/test split file.
    Prepare(PrepareArgs),
    /// Train a model from a key=value config.
    Train(TrainArgs),
    /// Report mean per-token NLL of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write every filter kernel of a checkpoint as CSV.
    ExportKernels(ExportArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Trainable versus frozen spectral weights on the planted-frequency task.
    SynthClassify(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw text; relative paths that do not exist are looked up under $SPLM_DATA_DIR.
    input: PathBuf,
    /// Output split file (defaults to the input with a .splm extension).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train, dev and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.9, 0.05, 0.05])]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    variant: Option<FilterVariant>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint written with optimiser state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split file; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    split: Split,
    /// Evaluate in this precision instead of the stored one.
    #[arg(long)]
    precision: Option<Precision>,
    /// Also write mean absolute token-adaptive weights per token and channel.
    #[arg(long)]
    mask_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    mask_windows: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per primitive.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Random instances per composite block.
    #[arg(long, default_value_t = 5)]
    composite_seeds: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// First of three consecutive seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the first seed's training set (SPDS format) here.
    #[arg(long)]
    emit_data: Option<PathBuf>,
    /// Stop after writing --emit-data.
    #[arg(long, requires = "emit_data")]
    data_only: bool,
}

/// Marks errors in the user's configuration; these exit with status 2.
#[derive(Debug)]
struct BadConfig(String);

impl std::fmt::Display for BadConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadConfig {}

fn bad_config(e: impl std::fmt::Display) -> anyhow::Error {
    BadConfig(e.to_string()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportKernels(a) => export_kernels(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SynthClassify(a) => synth_classify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<BadConfig>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Existing paths win; otherwise relative paths are tried under `$SPLM_DATA_DIR`.
fn resolve(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_VAR) {
        Some(dir) => Path::new(&dir).join(path),
        None => path.to_path_buf(),
    }
}

fn load_split(path: &Path) -> anyhow::Result<CorpusSplit> {
    let path = resolve(path);
    CorpusSplit::load(&path).with_context(|| format!("cannot load split file {}", path.display()))
}

fn parse_override(s: &str) -> anyhow::Result<(&str, &str)> {
    s.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(|| bad_config(format!("override {s:?} is not key=value")))
}

fn prepare(a: PrepareArgs) -> anyhow::Result<ExitCode> {
    let input = resolve(&a.input);
    let raw = fs::read(&input).with_context(|| format!("cannot read {}", input.display()))?;
    let ratios = SplitRatios { train: a.ratios[0], dev: a.ratios[1], test: a.ratios[2] };
    let split = CorpusSplit::from_raw(&raw, ratios)?;
    let out = a.out.unwrap_or_else(|| input.with_extension("splm"));
    split.save(&out).with_context(|| format!("cannot write {}", out.display()))?;
    println!("train {} dev {} test {}", split.train.len(), split.dev.len(), split.test.len());
    println!("source sha256 {}", split.source_checksum);
    println!("split sha256 {}", split.checksum());
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            RunConfig::parse(&text).map_err(bad_config)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = a.precision {
        cfg.precision = p;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(v) = a.variant {
        cfg.model.filter.variant = v;
    }
    for o in &a.overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(k, v).map_err(bad_config)?;
    }
    cfg.validate().map_err(bad_config)?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = run_config(&a)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose().context("cannot load checkpoint to resume")?;
    let data = resolve(&cfg.data);
    let corpus = load_split(&data)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("cannot create {}", cfg.out_dir.display()))?;
    let metrics = cfg.metrics_path();
    if let Some(dir) = metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(metrics.with_extension("cfg"), cfg.to_text())?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, &data, &corpus, resume),
        Precision::F64 => train_with::<f64>(&cfg, &data, &corpus, resume),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, data: &Path, corpus: &CorpusSplit, resume: Option<Checkpoint>) -> anyhow::Result<ExitCode> {
    let mut run: TrainRun<T> = match &resume {
        Some(c) => {
            if c.model_config()? != cfg.model {
                return Err(bad_config("resumed checkpoint was trained with a different model configuration"));
            }
            let mut run = c.to_run()?;
            if (TrainConfig { steps: cfg.train.steps, ..run.config.clone() }) != cfg.train {
                log::warn!("resuming with the checkpoint's optimiser settings; only train.steps is taken from the config");
            }
            run.config.steps = cfg.train.steps;
            run
        }
        None => TrainRun::new(cfg.model.clone(), cfg.train.clone())?,
    };
    info!(
        "{} model, {} parameters ({} in filters), starting at step {}",
        cfg.model.filter.variant,
        run.model.param_count(),
        run.model.filter_param_count(),
        run.step
    );
    let metrics = cfg.metrics_path();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics)
        .with_context(|| format!("cannot open {}", metrics.display()))?;
    let mut out = BufWriter::new(file);
    let mut write_err = None;
    let remaining = cfg.train.steps.saturating_sub(run.step);
    let result = run.train(corpus, remaining, &mut |r| {
        info!("step {:>6} {:<5} nll {:.4}", r.step, r.split, r.nll_nats);
        if let Err(e) = writeln!(out, "{}", r.to_json()).and_then(|_| out.flush()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("cannot write metrics");
    }
    let last = result?;
    let mut ckpt = Checkpoint::from_run(&run, true);
    ckpt.header.push(("data".into(), data.display().to_string()));
    let path = cfg.out_dir.join("final.ckpt");
    ckpt.save(&path).with_context(|| format!("cannot write {}", path.display()))?;
    println!("step {} dev nll_nats {}", last.step, last.nll_nats);
    println!("checkpoint {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let data = match (&a.data, ckpt.get("data")) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => bail!("checkpoint records no split file; pass --data"),
    };
    let corpus = load_split(&data)?;
    match a.precision.unwrap_or(ckpt.precision) {
        Precision::F32 => eval_with::<f32>(&a, &ckpt, &corpus),
        Precision::F64 => eval_with::<f64>(&a, &ckpt, &corpus),
    }
}

fn eval_with<T: Scalar>(a: &EvalArgs, ckpt: &Checkpoint, corpus: &CorpusSplit) -> anyhow::Result<ExitCode> {
    let model = ckpt.to_model::<T>()?;
    let tc = ckpt.train_config()?;
    let data = corpus.get(a.split);
    let nll = evaluate(&model, data, tc.eval_tokens, tc.eval_batch)?;
    println!("{} nll_nats {}", a.split, nll);
    if let Some(path) = &a.mask_csv {
        let csv = mask_csv(&model, data, a.mask_windows)?;
        fs::write(path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn export_kernels(a: ExportArgs) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let csv = kernel_csv(&ckpt.to_model::<f64>()?)?;
    match a.out {
        Some(p) => fs::write(&p, csv).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let results = run_suite(a.seeds, a.composite_seeds, a.seed)?;
    print!("{}", format_report(&results));
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth_experiment(a: &SynthArgs) -> anyhow::Result<SynthExperiment> {
    let mut e = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            SynthExperiment::parse(&text).map_err(bad_config)?
        }
        None => SynthExperiment::desk(),
    };
    if let Some(s) = a.seed {
        e.seeds = vec![s, s + 1, s + 2];
    }
    if let Some(c) = a.classes {
        e.data.classes = c;
    }
    if let Some(l) = a.length {
        e.data.length = l;
    }
    if let Some(d) = a.dim {
        e.data.dim = d;
    }
    if let Some(n) = a.noise {
        e.data.noise = n;
    }
    for o in &a.overrides {
        let (k, v) = parse_override(o)?;
        e.set(k, v).map_err(bad_config)?;
    }
    e.data.validate().map_err(bad_config)?;
    Ok(e)
}

fn synth_classify(a: SynthArgs) -> anyhow::Result<ExitCode> {
    let e = synth_experiment(&a)?;
    if let Some(path) = &a.emit_data {
        let first = *e.seeds.first().ok_or_else(|| bad_config("no seeds"))?;
        let ds = SynthConfig { seed: first.wrapping_mul(2), ..e.data.clone() }.generate()?;
        ds.save(path).with_context(|| format!("cannot write {}", path.display()))?;
        println!("wrote {} samples to {}", ds.len(), path.display());
        if a.data_only {
            return Ok(ExitCode::SUCCESS);
        }
    }
    let progress = |r: &splm_core::classifier::SeedResult| {
        println!("seed {:>3} trainable {:.4} frozen {:.4}", r.seed, r.trainable, r.frozen);
    };
    let report = match a.precision {
        Precision::F32 => e.run::<f32>(progress)?,
        Precision::F64 => e.run::<f64>(progress)?,
    };
    let (t, f) = (report.mean_trainable(), report.mean_frozen());
    println!("mean trainable {t:.4} frozen {f:.4} (chance {:.4}, majority {:.4})", report.chance, report.majority);
    let ok = t >= f;
    println!("trainable >= frozen: {}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
