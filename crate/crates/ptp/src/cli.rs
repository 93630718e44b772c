//! Argument parsing, configuration layering and command dispatch.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ptp_core::baselines::ManualPrompt;
use ptp_core::eval::{aggregate, evaluate_accuracy, Dataset, Method, MethodSpec, SeedRun, SweepGrid};
use ptp_core::model::{Backbone, EncoderMode};
use serde::Deserialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, save_encoder_snapshot, CHECKPOINT_FILE};
use crate::dataset::{read_dataset, synthetic, write_dataset};
use crate::error::{exit, CliError};
use crate::report::{
    prediction_lines, read_report, trace_lines, write_report, FailureRow, Report, ReportRow, TraceLine,
    PREDICTIONS_JSONL, TRACE_JSONL,
};
use crate::runner::{run_timed, sweep};
use crate::store::write_atomic;

const FIXED_SETTINGS: &str = "Fixed settings: optimizer AdamW (beta1 0.9, beta2 0.999, eps 1e-8, \
weight decay 0.01 on prompts and offsets), warm-up rate 0.1 of all optimizer steps, then a constant \
learning rate; temperature 0.01; batch size 32 and learning rate 3e-3 unless overridden. \
The environment variable PTP_SEED (comma-separated) overrides seeds from --config; --seeds overrides both.";

#[derive(Parser, Debug)]
#[command(name = "ptp", version, about = "Prototype-based prompt learning on frozen encoder surrogates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic Gaussian-mixture dataset directory.
    GenData(GenDataArgs),
    /// Fit one method on n-shot episodes, one per seed, and report test accuracy.
    #[command(after_help = FIXED_SETTINGS)]
    Train(TrainArgs),
    /// Re-evaluate saved checkpoints, or the manual prompt, on the full test split.
    Eval(EvalArgs),
    /// Run PTP over a grid of shots, K and lambda.
    #[command(after_help = FIXED_SETTINGS)]
    Sweep(SweepArgs),
    /// Merge report.json files into one report.json and report.csv.
    ExportReport(ExportArgs),
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Dataset directory with train.ptpe, test.ptpe and optionally text.ptpe
    #[arg(long, conflicts_with = "preset")]
    pub data: Option<PathBuf>,
    /// Synthetic preset generated in memory: separable | tiny
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Method: ptp | sp | mcp | vm | lp [default: ptp]
    #[arg(long)]
    pub method: Option<String>,
    /// Encoder mode: bi | single | real-offset [default: bi]
    #[arg(long)]
    pub mode: Option<String>,
    /// Learnable prompt tokens per prototype [default: 16 in bi and real-offset mode, 5 in single mode]
    #[arg(long)]
    pub m: Option<usize>,
    /// Comma-separated run seeds [default: 0,1,2]
    #[arg(long, visible_alias = "seed", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Maximum epochs [default: bi and real-offset 200 for 16/8 shots, 100 for 4/2/1; single 1000 for 16/8, 500 for 4/2/1]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// AdamW learning rate [default: 3e-3]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Apply weight decay to the image prototypes as well
    #[arg(long)]
    pub decay_prototypes: bool,
    /// Give the linear probe a bias term
    #[arg(long)]
    pub lp_bias: bool,
    /// JSON config file; flags take precedence over its values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Synthetic preset: separable | tiny
    #[arg(long, default_value = "separable")]
    pub preset: String,
    /// Generator seed [default: the preset's seed, 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write text.ptpe: the frozen text encoder's embedding of each category under the fixed template
    #[arg(long)]
    pub text: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Labelled examples per category [default: 16]
    #[arg(long)]
    pub shots: Option<usize>,
    /// Number of prototype components [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Regularizer weight [default: 1.0]
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Also snapshot the frozen encoder weights under OUT/encoder after training
    #[arg(long)]
    pub save_encoder: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory of an earlier `train` run (reads its checkpoints/)
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// Without --checkpoints only `mcp` can be evaluated [default: mcp]
    #[arg(long)]
    pub method: Option<String>,
    /// Encoder mode for mcp: bi | single | real-offset [default: bi]
    #[arg(long)]
    pub mode: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated shot counts [default: 16]
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    /// Comma-separated prototype counts [default: 3,5,7]
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Comma-separated regularizer weights [default: 0,0.5,1,2]
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    /// Grid points run concurrently [default: 1]
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// report.json files to merge, in order
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

/// A scalar or a list in the config file.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Keys accepted in a `--config` file.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub preset: Option<String>,
    pub method: Option<String>,
    pub mode: Option<String>,
    pub shots: Option<OneOrMany<usize>>,
    #[serde(alias = "K")]
    pub k: Option<OneOrMany<usize>>,
    pub lambda: Option<OneOrMany<f64>>,
    pub m: Option<usize>,
    pub seeds: Option<OneOrMany<u64>>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub decay_prototypes: Option<bool>,
    pub lp_bias: Option<bool>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Dir(PathBuf),
    Preset(String),
}

/// Fully resolved run settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub source: Source,
    pub method: Method,
    pub mode: EncoderMode,
    pub shots: Vec<usize>,
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub m: Option<usize>,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub decay_prototypes: bool,
    pub lp_bias: bool,
    pub jobs: usize,
}

/// Command-line values that take part in layering.
#[derive(Clone, Debug, Default)]
pub struct FlagValues {
    pub shots: Option<Vec<usize>>,
    pub ks: Option<Vec<usize>>,
    pub lambdas: Option<Vec<f64>>,
    pub jobs: Option<usize>,
}

pub fn parse_seed_list(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("PTP_SEED must be a comma-separated list of integers, got `{s}`")))
}

impl Settings {
    /// Layers defaults, then the config file, then `PTP_SEED`, then flags.
    pub fn resolve(
        data: &DataArgs,
        common: &CommonArgs,
        flags: FlagValues,
        defaults: (Vec<usize>, Vec<f64>),
        env_seed: Option<&str>,
    ) -> Result<Self, CliError> {
        let file = match &common.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let source = match (&data.data, &data.preset, &file.data, &file.preset) {
            (Some(d), _, _, _) => Source::Dir(d.clone()),
            (None, Some(p), _, _) => Source::Preset(p.clone()),
            (None, None, Some(_), Some(_)) => {
                return Err(CliError::Usage("config sets both `data` and `preset`".into()))
            }
            (None, None, Some(d), None) => Source::Dir(d.clone()),
            (None, None, None, Some(p)) => Source::Preset(p.clone()),
            (None, None, None, None) => return Err(CliError::Usage("one of --data or --preset is required".into())),
        };
        let method_name = common.method.clone().or(file.method).unwrap_or_else(|| "ptp".into());
        let method = Method::parse(&method_name)
            .ok_or_else(|| CliError::Usage(format!("unknown method `{method_name}` (ptp, sp, mcp, vm, lp)")))?;
        let mode_name = common.mode.clone().or(file.mode).unwrap_or_else(|| "bi".into());
        let mode = EncoderMode::parse(&mode_name)
            .ok_or_else(|| CliError::Usage(format!("unknown mode `{mode_name}` (bi, single, real-offset)")))?;
        let env_seeds = env_seed.map(parse_seed_list).transpose()?;
        let settings = Settings {
            source,
            method,
            mode,
            shots: flags.shots.or(file.shots.map(OneOrMany::into_vec)).unwrap_or(vec![16]),
            ks: flags.ks.or(file.k.map(OneOrMany::into_vec)).unwrap_or(defaults.0),
            lambdas: flags.lambdas.or(file.lambda.map(OneOrMany::into_vec)).unwrap_or(defaults.1),
            m: common.m.or(file.m),
            seeds: common
                .seeds
                .clone()
                .or(env_seeds)
                .or(file.seeds.map(OneOrMany::into_vec))
                .unwrap_or(vec![0, 1, 2]),
            epochs: common.epochs.or(file.epochs),
            lr: common.lr.or(file.lr).unwrap_or(3e-3),
            batch_size: common.batch_size.or(file.batch_size).unwrap_or(32),
            decay_prototypes: common.decay_prototypes || file.decay_prototypes.unwrap_or(false),
            lp_bias: common.lp_bias || file.lp_bias.unwrap_or(false),
            jobs: flags.jobs.or(file.jobs).unwrap_or(1),
        };
        settings.validate()?;
        Ok(settings)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(m.to_string()));
        if self.shots.is_empty() || self.shots.contains(&0) {
            return bad("shots must be positive");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("K must be positive");
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambda must be finite and non-negative");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.m == Some(0) || self.epochs == Some(0) || self.batch_size == 0 || self.jobs == 0 {
            return bad("m, epochs, batch size and jobs must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    pub fn spec(&self, k: usize, lambda: f64) -> MethodSpec {
        let base = MethodSpec::new(self.method, self.mode);
        MethodSpec {
            k,
            lambda,
            prompt_len: self.m.unwrap_or(base.prompt_len),
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            decay_prototypes: self.decay_prototypes,
            probe_bias: self.lp_bias,
            ..base
        }
    }
}

fn load_source(source: &Source) -> Result<Dataset, CliError> {
    match source {
        Source::Dir(d) => read_dataset(d),
        Source::Preset(p) => Ok(synthetic(p, None)?.0),
    }
}

fn single<T: Copy>(values: &[T], what: &str) -> Result<T, CliError> {
    match values {
        [v] => Ok(*v),
        _ => Err(CliError::Usage(format!("`train` takes a single {what}; use `sweep` for grids"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn summary(row: &ReportRow) {
    println!(
        "{} {} {} shots={} K={} lambda={} acc={}% params={}",
        row.dataset,
        row.method,
        row.mode,
        row.shots,
        row.k.map_or("-".into(), |k| k.to_string()),
        row.lambda.map_or("-".into(), |l| l.to_string()),
        crate::report::percent(row.acc_mean),
        row.params
    );
}

fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let (mut data, config) = synthetic(&args.preset, args.seed)?;
    if args.text {
        let backbone = Backbone::surrogate(EncoderMode::BiEncoder, data.d_lat(), None)?;
        data.text_embeddings = ManualPrompt::new(backbone, &data.catalog)?.template_embeddings()?;
    }
    let encoder = format!("synthetic-gmm:{}:seed={}", args.preset, config.seed);
    write_dataset(&args.out, &data, &encoder)?;
    let clusters: Vec<usize> = (0..config.categories).map(|j| config.cluster_of(j)).collect();
    write_text(
        &args.out.join("clusters.json"),
        &crate::report::canonical_json(&serde_json::json!({ "cluster_of": clusters })),
    )?;
    println!(
        "wrote {} train and {} test rows to {}",
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs, env_seed: Option<&str>) -> Result<(), CliError> {
    let flags = FlagValues {
        shots: args.shots.map(|s| vec![s]),
        ks: args.k.map(|k| vec![k]),
        lambdas: args.lambda.map(|l| vec![l]),
        jobs: None,
    };
    let settings = Settings::resolve(&args.data, &args.common, flags, (vec![5], vec![1.0]), env_seed)?;
    let shots = single(&settings.shots, "shot count")?;
    let k = single(&settings.ks, "K")?;
    let lambda = single(&settings.lambdas, "lambda")?;
    let dataset = load_source(&settings.source)?;
    let spec = settings.spec(k, lambda);
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;

    let outcome = run_timed(&spec, &dataset, shots, &settings.seeds);
    let (report, runs, first_error) = match outcome {
        Ok((result, runs)) => {
            let row = ReportRow::from_result(&result, dataset.catalog.names());
            summary(&row);
            (
                Report {
                    rows: vec![row],
                    failures: Vec::new(),
                },
                runs,
                None,
            )
        }
        Err(failure) => {
            let failures = failure
                .failed
                .iter()
                .map(|(seed, e)| FailureRow {
                    method: spec.method.as_str().into(),
                    shots,
                    k: spec.effective_k(),
                    lambda: spec.effective_lambda(),
                    seed: Some(*seed),
                    error: e.to_string(),
                })
                .collect();
            let first = failure.failed.into_iter().next().map(|(_, e)| e);
            (
                Report {
                    rows: Vec::new(),
                    failures,
                },
                failure.completed,
                first,
            )
        }
    };
    let trace: Vec<TraceLine> = runs
        .iter()
        .flat_map(|r| r.trace.iter().map(move |e| TraceLine::new(r.seed, e)))
        .collect();
    write_text(&args.out.join(TRACE_JSONL), &trace_lines(&trace))?;
    write_text(&args.out.join(PREDICTIONS_JSONL), &prediction_lines(&runs))?;
    for run in &runs {
        let dir = args.out.join("checkpoints").join(format!("seed-{}", run.seed));
        save_checkpoint(&dir, spec.method, spec.mode, run.seed, shots, &dataset, &run.fitted)?;
    }
    if args.save_encoder {
        let backbone = match runs.first().and_then(|r| r.fitted.model()) {
            Some(m) => m.backbone().clone(),
            None => dataset.backbone(spec.mode)?,
        };
        save_encoder_snapshot(&args.out.join("encoder"), &backbone)?;
    }
    write_report(&args.out, &report)?;
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn checkpoint_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let dir = root.join("checkpoints");
    let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(&dir, e))?.path();
        if path.join(CHECKPOINT_FILE).is_file() {
            found.push(path);
        }
    }
    if found.is_empty() {
        return Err(CliError::Data(format!("no checkpoints under {}", dir.display())));
    }
    Ok(found)
}

fn eval(args: &EvalArgs, env_seed: Option<&str>) -> Result<(), CliError> {
    let source = match (&args.data.data, &args.data.preset) {
        (Some(d), _) => Source::Dir(d.clone()),
        (None, Some(p)) => Source::Preset(p.clone()),
        (None, None) => return Err(CliError::Usage("one of --data or --preset is required".into())),
    };
    let dataset = load_source(&source)?;
    let Some(root) = &args.checkpoints else {
        let method = args.method.as_deref().unwrap_or("mcp");
        if method != "mcp" {
            return Err(CliError::Usage(format!(
                "`eval --method {method}` needs --checkpoints from a train run"
            )));
        }
        let mode_name = args.mode.as_deref().unwrap_or("bi");
        let mode = EncoderMode::parse(mode_name).ok_or_else(|| CliError::Usage(format!("unknown mode `{mode_name}`")))?;
        let seeds = match env_seed {
            Some(s) => parse_seed_list(s)?,
            None => vec![0],
        };
        let spec = MethodSpec::new(Method::Mcp, mode);
        let (result, runs) = run_timed(&spec, &dataset, 1, &seeds).map_err(|f| CliError::Data(f.to_string()))?;
        let row = ReportRow::from_result(&result, dataset.catalog.names());
        summary(&row);
        fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
        write_text(&args.out.join(PREDICTIONS_JSONL), &prediction_lines(&runs))?;
        return write_report(
            &args.out,
            &Report {
                rows: vec![row],
                failures: Vec::new(),
            },
        );
    };
    if args.method.is_some() || args.mode.is_some() {
        return Err(CliError::Usage("--method and --mode come from the checkpoints; drop them".into()));
    }
    let start = std::time::Instant::now();
    let mut loaded = Vec::new();
    for dir in checkpoint_dirs(root)? {
        loaded.push(load_checkpoint(&dir, &dataset)?);
    }
    loaded.sort_by_key(|(m, _)| m.seed);
    let (first, _) = &loaded[0];
    let same = |m: &crate::checkpoint::CheckpointManifest| {
        m.method == first.method && m.mode == first.mode && m.shots == first.shots && m.k == first.k && m.lambda == first.lambda
    };
    if !loaded.iter().all(|(m, _)| same(m)) {
        return Err(CliError::Data(format!(
            "checkpoints under {} come from different settings",
            root.display()
        )));
    }
    let method = Method::parse(&first.method).ok_or_else(|| CliError::Data("unknown method in checkpoint".into()))?;
    let mode = EncoderMode::parse(&first.mode).ok_or_else(|| CliError::Data("unknown mode in checkpoint".into()))?;
    let shots = first.shots;
    let spec = MethodSpec {
        k: first.k.unwrap_or(1),
        lambda: first.lambda.unwrap_or(0.0),
        ..MethodSpec::new(method, mode)
    };
    let backbone = dataset.backbone(mode)?;
    let test = backbone.features(&dataset.test.latent_matrix()?)?;
    let mut runs = Vec::new();
    for (manifest, fitted) in loaded {
        let predictions = fitted.predict(&backbone, &dataset.catalog, &test)?;
        let accuracy = evaluate_accuracy(&predictions, dataset.test.labels(), dataset.catalog.len())?;
        runs.push(SeedRun {
            seed: manifest.seed,
            accuracy,
            params: fitted.param_count(),
            predictions,
            trace: Vec::new(),
            clamped: 0,
            fitted,
            train_r2: None,
        });
    }
    let mut result = aggregate(&spec, &dataset.name, shots, &runs)?;
    result.wall_ms = start.elapsed().as_millis() as u64;
    let row = ReportRow::from_result(&result, dataset.catalog.names());
    summary(&row);
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_text(&args.out.join(PREDICTIONS_JSONL), &prediction_lines(&runs))?;
    write_report(
        &args.out,
        &Report {
            rows: vec![row],
            failures: Vec::new(),
        },
    )
}

fn run_sweep(args: &SweepArgs, env_seed: Option<&str>) -> Result<(), CliError> {
    let flags = FlagValues {
        shots: args.shots.clone(),
        ks: args.k.clone(),
        lambdas: args.lambda.clone(),
        jobs: args.jobs,
    };
    let settings = Settings::resolve(
        &args.data,
        &args.common,
        flags,
        (vec![3, 5, 7], vec![0.0, 0.5, 1.0, 2.0]),
        env_seed,
    )?;
    if settings.method != Method::Ptp {
        return Err(CliError::Usage("`sweep` varies K and lambda, so it only runs ptp".into()));
    }
    let dataset = load_source(&settings.source)?;
    let grid = SweepGrid {
        shots: settings.shots.clone(),
        ks: settings.ks.clone(),
        lambdas: settings.lambdas.clone(),
        seeds: settings.seeds.clone(),
    };
    grid.validate()?;
    let base = settings.spec(settings.ks[0], settings.lambdas[0]);
    let outcomes = sweep(&base, &grid, &dataset, settings.jobs);

    let mut report = Report::default();
    let mut trace = Vec::new();
    let mut first_error = None;
    for (point, outcome) in outcomes {
        let failure = |seed, error: String| FailureRow {
            method: Method::Ptp.as_str().into(),
            shots: point.shots,
            k: Some(point.k),
            lambda: Some(point.lambda),
            seed,
            error,
        };
        match outcome {
            Ok((result, runs)) => {
                let row = ReportRow::from_result(&result, dataset.catalog.names());
                summary(&row);
                report.rows.push(row);
                for run in &runs {
                    trace.extend(run.trace.iter().map(|e| TraceLine {
                        shots: Some(point.shots),
                        k: Some(point.k),
                        lambda: Some(point.lambda),
                        ..TraceLine::new(run.seed, e)
                    }));
                }
            }
            Err(f) => {
                for (seed, e) in &f.failed {
                    eprintln!("grid point shots={} K={} lambda={} seed {seed}: {e}", point.shots, point.k, point.lambda);
                    report.failures.push(failure(Some(*seed), e.to_string()));
                }
                if first_error.is_none() {
                    first_error = f.failed.into_iter().next().map(|(_, e)| e);
                }
            }
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_text(&args.out.join(TRACE_JSONL), &trace_lines(&trace))?;
    write_report(&args.out, &report)?;
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn export_report(args: &ExportArgs) -> Result<(), CliError> {
    let mut merged = Report::default();
    for path in &args.input {
        let r = read_report(path)?;
        merged.rows.extend(r.rows);
        merged.failures.extend(r.failures);
    }
    write_report(&args.out, &merged)?;
    println!("{} rows written to {}", merged.rows.len(), args.out.display());
    Ok(())
}

pub fn dispatch(cli: &Cli, env_seed: Option<&str>) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, env_seed),
        Command::Eval(a) => eval(a, env_seed),
        Command::Sweep(a) => run_sweep(a, env_seed),
        Command::ExportReport(a) => export_report(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
/// `env_seed` is the value of `PTP_SEED`, if set.
pub fn run<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match dispatch(&cli, env_seed) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("ptp: {e}");
            e.exit_code()
        }
    }
}
