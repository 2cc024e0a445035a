use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nsrac::corpus::{build_corpus, inspect_corpus, CorpusSpec};
use nsrac::datagen::RotatingGenerator;
use nsrac::harness::{
    build_rotating_corpus, evaluate_checkpoint, export_plot_data, memory_scaling_suite, needle_sweep, random_records,
    run_experiment, ExperimentConfig, MemorySweepConfig, PlotKind, Setting, SweepAxis,
};
use nsrac::{Error, Result};

/// Retrieval-augmented classification experiments.
#[derive(Parser)]
#[command(name = "nsrac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a corpus file.
    GenCorpus(GenCorpusArgs),
    /// Run an experiment into its output directory.
    Train(TrainArgs),
    /// Score a saved checkpoint.
    Eval(EvalArgs),
    /// Peak tagged memory across one swept hyperparameter.
    SweepMemory(SweepMemoryArgs),
    /// Needle runs over history sizes and seeds.
    SweepNeedle(SweepNeedleArgs),
    /// Write plot data for one figure kind from a run directory.
    ExportPlot(ExportPlotArgs),
    /// Print a corpus header and field digests.
    InspectCorpus { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    /// Rotating-setting examples keyed by a random projection.
    Rotating,
    /// Gaussian features and keys with random labels.
    Random,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "rotating")]
    kind: CorpusKind,
    #[arg(long, default_value_t = 10_000)]
    records: usize,
    #[arg(long, default_value_t = 64)]
    key_dim: usize,
    /// Feature width for random corpora; rotating corpora take theirs from
    /// the setting.
    #[arg(long, default_value_t = 64)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Experiment config whose rotating section defines the generator.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Config source plus field overrides shared by several subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults for `--setting` are used otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    setting: Option<SettingArg>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    history_size: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    /// Any other field as `section.field=value` (TOML value syntax).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Needle,
    Rotating,
    Corpus,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Repetition whose data generators are used.
    #[arg(long, default_value_t = 0)]
    rep: usize,
}

#[derive(Args)]
struct SweepMemoryArgs {
    /// TOML sweep config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    key_dim: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct SweepNeedleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "2,8,32")]
    history_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ExportPlotArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    kind: String,
}

fn config_err(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_err(key, "empty key"))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match (&a.config, a.setting) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(SettingArg::Needle)) | (None, None) => ExperimentConfig::needle(8, "runs/needle"),
        (None, Some(SettingArg::Rotating)) => ExperimentConfig::rotating("runs/rotating"),
        (None, Some(SettingArg::Corpus)) => ExperimentConfig {
            setting: Setting::Corpus,
            ..ExperimentConfig::rotating("runs/corpus")
        },
    };
    if a.config.is_some() {
        if let Some(s) = a.setting {
            cfg.setting = match s {
                SettingArg::Needle => Setting::Needle,
                SettingArg::Rotating => Setting::Rotating,
                SettingArg::Corpus => Setting::Corpus,
            };
        }
    }
    if let Some(v) = &a.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = a.repetitions {
        cfg.repetitions = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.kappa {
        cfg.train.kappa = v;
    }
    if let Some(v) = a.history_size {
        cfg.needle.history_size = v;
        cfg.rotating.history_size = v;
    }
    if let Some(v) = a.hidden_width {
        cfg.model.hidden_width = v;
    }
    if a.overrides.is_empty() {
        cfg.validate()?;
        return Ok(cfg);
    }
    let mut table: toml::Table = cfg.to_toml().parse().map_err(|e| config_err("<config>", format!("{e}")))?;
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| config_err(o, "expected KEY=VALUE"))?;
        set_path(&mut table, k.trim(), v.trim())?;
    }
    ExperimentConfig::from_toml(&table.to_string())
}

fn print_toml<T: serde::Serialize>(v: &T) {
    match toml::to_string(v) {
        Ok(s) => print!("{s}"),
        Err(e) => eprintln!("cannot render output: {e}"),
    }
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let header = match a.kind {
        CorpusKind::Rotating => {
            let rot = match &a.config {
                Some(p) => ExperimentConfig::load(p)?.rotating,
                None => Default::default(),
            };
            let gen = RotatingGenerator::new(rot)?;
            build_rotating_corpus(&gen, a.records, a.key_dim, a.seed, &a.out)?
        }
        CorpusKind::Random => {
            let spec = CorpusSpec {
                feature_dim: a.feature_dim,
                key_dim: a.key_dim,
                label_cardinality: 2,
                label_only: false,
            };
            build_corpus(random_records(a.records, a.feature_dim, a.key_dim, a.seed), spec, &a.out)?
        }
    };
    println!(
        "wrote {} records (D={}, d={}) to {} ({} bytes)",
        header.record_count,
        header.feature_dim,
        header.key_dim,
        a.out.display(),
        header.file_len()
    );
    Ok(())
}

fn sweep_memory(a: SweepMemoryArgs) -> Result<()> {
    let mut base: MemorySweepConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(&p.display().to_string(), e.to_string()))?;
            toml::from_str(&text).map_err(|e| config_err("sweep config", e.message().to_string()))?
        }
        None => MemorySweepConfig::default(),
    };
    let axis: SweepAxis = a.axis.parse()?;
    if let Some(v) = a.work_dir {
        base.work_dir = v;
    }
    for (dst, src) in [
        (&mut base.records, a.records),
        (&mut base.batch_size, a.batch_size),
        (&mut base.kappa, a.kappa),
        (&mut base.key_dim, a.key_dim),
        (&mut base.feature_dim, a.feature_dim),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if let Some(v) = a.steps {
        base.steps = v;
    }
    let r = memory_scaling_suite(&base, axis, &a.values)?;
    println!("axis = \"{}\"", r.axis.as_str());
    println!("label = \"{}\"", r.tag.as_str());
    println!("slope = {}", r.fit.slope);
    println!("intercept = {}", r.fit.intercept);
    println!("r2 = {}", r.fit.r2);
    println!("analytic_slope = {}", r.analytic_slope);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => {
            let mut cfg = load_config(&a.config)?;
            cfg.train.seed = a.seed;
            cfg.validate()?;
            print_toml(&run_experiment(&cfg)?);
            Ok(())
        }
        Command::Eval(a) => {
            let cfg = load_config(&a.config)?;
            print_toml(&evaluate_checkpoint(&cfg, a.rep, &a.checkpoint)?);
            Ok(())
        }
        Command::SweepMemory(a) => sweep_memory(a),
        Command::SweepNeedle(a) => {
            let cfg = load_config(&a.config)?;
            println!("history_size,seed,final_accuracy,exploration_step");
            for r in needle_sweep(&cfg, &a.history_sizes, &a.seeds)? {
                let step = r.exploration_step.map(|s| s.to_string()).unwrap_or_default();
                println!("{},{},{},{}", r.history_size, r.seed, r.final_accuracy, step);
            }
            Ok(())
        }
        Command::ExportPlot(a) => {
            let kind: PlotKind = a.kind.parse()?;
            println!("{}", export_plot_data(&a.run_dir, kind)?.display());
            Ok(())
        }
        Command::InspectCorpus { path } => {
            let i = inspect_corpus(&path)?;
            let h = i.header;
            println!("version = {}", h.version);
            println!("record_count = {}", h.record_count);
            println!("feature_dim = {}", h.feature_dim);
            println!("key_dim = {}", h.key_dim);
            println!("label_cardinality = {}", h.label_cardinality);
            println!("label_only = {}", h.label_only());
            println!("file_len = {}", i.file_len);
            println!("keys_sha256 = \"{}\"", i.keys_sha256);
            println!("timestamps_sha256 = \"{}\"", i.timestamps_sha256);
            println!("features_sha256 = \"{}\"", i.features_sha256);
            println!("labels_sha256 = \"{}\"", i.labels_sha256);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
