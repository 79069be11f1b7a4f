//! Command-line front end: argument parsing, run configuration and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostInputs, Symbol};
use crate::dataset::{self, DataMatrix};
use crate::metrics::{render_class_table, render_json, render_table};
use crate::pipeline::{self, PipelineConfig, PipelineKind, PipelineRun, Task};
use crate::synth::{gaussian_blobs, BlobSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "nbaiot",
    version,
    about = "Botnet traffic classification pipelines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse labelled CSV files into a binary dataset cache.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded Gaussian-blob dataset cache.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1250)]
        per_class: usize,
        #[arg(long, default_value_t = 3)]
        classes: u8,
    },
    /// Train one pipeline and write its run directory.
    Train(RunArgs),
    /// Re-score a run directory on its test rows.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Train all four pipelines on one dataset and tabulate them.
    Compare(RunArgs),
    /// Evaluate the cost expressions.
    Cost {
        /// JSON with the cost symbols; defaults to full-dataset inputs.
        #[arg(long)]
        inputs: Option<PathBuf>,
        /// Two kinds, `a,b`: report where `a` starts costing more than `b`.
        #[arg(long, requires = "vary")]
        crossover: Option<String>,
        #[arg(long)]
        vary: Option<String>,
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long, default_value_t = 1_000_000)]
        to: u64,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct SourceArgs {
    /// Dataset cache written by `ingest` or `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Manifest to ingest on the fly.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub subsample_per_class: Option<usize>,
    /// Single-threaded execution.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run settings as read from `--config`; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub kind: Option<PipelineKind>,
    pub kinds: Option<Vec<PipelineKind>>,
    pub task: Option<Task>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f32>,
    pub subsample_per_class: Option<usize>,
    pub deterministic: bool,
    pub out: Option<PathBuf>,
    pub pipeline: PipelineConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Applies flags on top of the file settings.
    pub fn merge(mut self, args: &RunArgs) -> Result<Self, CliError> {
        let usage = CliError::Usage;
        if args.source.data.is_some() {
            self.data = args.source.data.clone();
        }
        if args.source.manifest.is_some() {
            self.manifest = args.source.manifest.clone();
        }
        if let Some(k) = &args.kind {
            self.kind = Some(k.parse().map_err(usage)?);
        }
        if let Some(t) = &args.task {
            self.task = Some(t.parse().map_err(usage)?);
        }
        self.seed = args.seed.or(self.seed);
        self.epochs = args.epochs.or(self.epochs);
        self.batch = args.batch.or(self.batch);
        self.lr = args.lr.or(self.lr);
        self.subsample_per_class = args.subsample_per_class.or(self.subsample_per_class);
        self.deterministic |= args.deterministic;
        if args.out.is_some() {
            self.out = args.out.clone();
        }
        if self.subsample_per_class == Some(0) {
            return Err(CliError::Usage(
                "--subsample-per-class must be at least 1".into(),
            ));
        }
        Ok(self)
    }

    pub fn task(&self) -> Task {
        self.task.unwrap_or(Task::Multiclass)
    }

    /// Pipeline settings with the top-level overrides folded in.
    pub fn pipeline_config(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        if let Some(s) = self.seed {
            p.hyper.seed = s;
        }
        if let Some(e) = self.epochs {
            p.hyper.epochs = e;
        }
        if let Some(b) = self.batch {
            p.hyper.batch_size = b;
        }
        if let Some(lr) = self.lr {
            p.hyper.lr = lr;
        }
        if self.subsample_per_class.is_some() {
            p.subsample_per_class = self.subsample_per_class;
        }
        p
    }

    fn load_data(&self) -> Result<DataMatrix, CliError> {
        match (&self.data, &self.manifest) {
            (Some(path), _) => DataMatrix::read_cache(path).map_err(data_err),
            (None, Some(manifest)) => {
                let m = dataset::load_manifest(manifest).map_err(data_err)?;
                dataset::ingest(&m).map_err(data_err)
            }
            (None, None) => Err(CliError::Usage(
                "one of --data or --manifest is required".into(),
            )),
        }
    }
}

fn with_threads<T>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T
where
    T: Send,
{
    if deterministic {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    } else {
        f()
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn train_one(
    kind: PipelineKind,
    data: &pipeline::PreparedData,
    config: &PipelineConfig,
    dir: &Path,
) -> Result<PipelineRun, CliError> {
    log::info!("training {kind} into {}", dir.display());
    let run = pipeline::run_pipeline(kind, data, config).map_err(data_err)?;
    pipeline::write_run_dir(&run, dir).map_err(data_err)?;
    Ok(run)
}

fn cmd_train(args: &RunArgs, compare: bool) -> Result<(), CliError> {
    let file = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let rc = file.merge(args)?;
    let config = rc.pipeline_config();
    let task = rc.task();
    let kinds: Vec<PipelineKind> = if compare {
        rc.kinds
            .clone()
            .unwrap_or_else(|| PipelineKind::ALL.to_vec())
    } else {
        vec![rc
            .kind
            .ok_or_else(|| CliError::Usage("--kind is required".into()))?]
    };
    let out = rc.out.clone().unwrap_or_else(|| {
        PathBuf::from(if compare {
            format!("runs/compare-{task}-{}", config.hyper.seed)
        } else {
            format!("runs/{}-{task}-{}", kinds[0], config.hyper.seed)
        })
    });
    let raw = rc.load_data()?;
    with_threads(rc.deterministic, || -> Result<(), CliError> {
        let data = pipeline::prepare(&raw, task, config.hyper.seed, config.subsample_per_class)
            .map_err(data_err)?;
        let mut reports = Vec::new();
        for &kind in &kinds {
            let dir = if compare {
                out.join(kind.as_str())
            } else {
                out.clone()
            };
            let run = train_one(kind, &data, &config, &dir)?;
            if !compare {
                print!("{}", render_class_table(&run.report));
            }
            reports.push(run.report.without_timings());
        }
        if compare {
            write_text(&out.join("comparison.json"), &render_json(&reports))?;
            write_text(&out.join("comparison.txt"), &render_table(&reports))?;
        }
        print!("{}", render_table(&reports));
        Ok(())
    })
}

fn cmd_evaluate(run: &Path, source: &SourceArgs) -> Result<(), CliError> {
    let (meta, model) = pipeline::load_run(run).map_err(data_err)?;
    let rc = RunConfig {
        data: source.data.clone(),
        manifest: source.manifest.clone(),
        ..RunConfig::default()
    };
    let raw = rc.load_data()?;
    let cfg = &meta.config;
    let data = pipeline::prepare(&raw, meta.task, cfg.hyper.seed, cfg.subsample_per_class)
        .map_err(data_err)?;
    let report = pipeline::evaluate_model(&meta, &model, &data).map_err(data_err)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    print!("{}", render_class_table(&report));
    Ok(())
}

fn cmd_cost(
    inputs: Option<&Path>,
    crossover: Option<&str>,
    vary: Option<&str>,
    from: u64,
    to: u64,
) -> Result<(), CliError> {
    let x: CostInputs = match inputs {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| data_err(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| data_err(format!("{}: {e}", p.display())))?
        }
        None => cost::reference_inputs(),
    };
    x.validate().map_err(data_err)?;
    let costs = PipelineKind::ALL
        .iter()
        .map(|&k| cost::cost_pipeline(k, &x))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err)?;
    print!("{}", cost::render_costs(&costs));
    if let (Some(pair), Some(symbol)) = (crossover, vary) {
        let kinds: Vec<PipelineKind> = pair
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(CliError::Usage)?;
        let [a, b] = kinds[..] else {
            return Err(CliError::Usage("--crossover takes two kinds, `a,b`".into()));
        };
        let symbol: Symbol = symbol
            .parse()
            .map_err(|e: cost::CostError| CliError::Usage(e.to_string()))?;
        match cost::crossover(a, b, &x, symbol, from, to).map_err(data_err)? {
            Some(v) => println!(
                "{a} exceeds {b} from {vary} = {v}",
                vary = vary.unwrap_or_default()
            ),
            None => println!("{a} never exceeds {b} for {from}..={to}"),
        }
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { manifest, out } => {
            let m = dataset::load_manifest(&manifest).map_err(data_err)?;
            let data = dataset::ingest(&m).map_err(data_err)?;
            data.write_cache(&out).map_err(data_err)?;
            print!("{}", dataset::class_count_report(&data.class_counts()));
            Ok(())
        }
        Command::Synth {
            out,
            seed,
            per_class,
            classes,
        } => {
            let classes = (0..classes)
                .map(|i| {
                    dataset::ClassId::new(i).ok_or_else(|| {
                        CliError::Usage(format!("at most {} classes", dataset::NUM_CLASSES))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let spec = BlobSpec {
                classes,
                per_class,
                ..BlobSpec::three_class(seed)
            };
            let data = gaussian_blobs(&spec);
            data.write_cache(&out).map_err(data_err)?;
            print!("{}", dataset::class_count_report(&data.class_counts()));
            Ok(())
        }
        Command::Train(args) => cmd_train(&args, false),
        Command::Compare(args) => cmd_train(&args, true),
        Command::Evaluate { run, source } => cmd_evaluate(&run, &source),
        Command::Cost {
            inputs,
            crossover,
            vary,
            from,
            to,
        } => cmd_cost(
            inputs.as_deref(),
            crossover.as_deref(),
            vary.as_deref(),
            from,
            to,
        ),
    }
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
