//! The `clpf` command-line tool.
//!
//! Every subcommand prints its fully resolved settings before doing any work,
//! writes each output through a temporary file renamed into place, reads the
//! outputs back to check them, and deletes everything it wrote if any step
//! fails.

pub mod ingest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::model::{sample_trajectory, ClpfModel, Variant};
use crate::processes::{
    generate_dataset, read_dataset, sample_poisson_grid, sequence_rng, write_dataset, Dataset, DatasetMeta,
    ProcessKind, ProcessSpec, TimeGrid,
};
use crate::train::{
    evaluate_nll, gbm_oracle_nll, predict_dataset, run_ablation, train, AblationCell, MetricsRow, MetricsTable,
    TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "clpf", version, about = "Latent-SDE flow models for irregularly sampled time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic benchmark dataset.
    Generate(GenerateArgs),
    /// Train a model from a config file and flag overrides.
    Train(TrainArgs),
    /// Estimate the test NLL of a checkpoint with the IWAE bound.
    Evaluate(EvaluateArgs),
    /// Draw trajectories from a checkpoint on random or dense grids.
    Sample(SampleArgs),
    /// One-step-ahead prediction on a dataset.
    Predict(PredictArgs),
    /// Train and test every dataset, variant and seed combination.
    Ablate(AblateArgs),
    /// Convert a regularly sampled CSV into an irregular dataset.
    Ingest(IngestArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub process: ProcessKind,
    /// Poisson intensity; defaults to the benchmark value for the process.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Process parameter override, e.g. `--param mu=0.1`.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings: defaults, then the config file, then `--set`, then
/// the dedicated flags.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning-curve CSV; defaults to `<checkpoint stem>_curve.csv`.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 125)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also report the exact likelihood of a GBM dataset.
    #[arg(long)]
    pub oracle: bool,
    /// Metrics CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("grid").required(true).args(["lambda", "dense_step"])))]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample each trajectory on its own Poisson grid of this intensity.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sample on the regular grid `step, 2 step, ..., horizon`.
    #[arg(long)]
    pub dense_step: Option<f64>,
    /// Defaults to the horizon of the training data.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trajectory JSONL; plot CSVs go next to it as `<stem>_plot_<k>.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 125)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only predict the first `limit` sequences.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Per-prediction CSV to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// `NAME=TRAIN,VALIDATION,TEST` dataset paths; repeat per cell.
    #[arg(long = "cell", required = true)]
    pub cells: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "clpf,clpf-independent")]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "id")]
    pub id_column: String,
    /// Length of the interval the row indices are rescaled to.
    #[arg(long, default_value_t = 30.0)]
    pub interval: f64,
    #[arg(long, default_value_t = 2.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Files written by a command, removed again unless the command succeeds.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.with_context(|| format!("writing {}", path.display()))
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}

fn check_csv(path: &Path, header: &[String], rows: usize) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != header {
        bail!("{}: unexpected header {got:?}", path.display());
    }
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter().skip(1) {
            field.parse::<f64>().with_context(|| format!("{}: bad number `{field}`", path.display()))?;
        }
        n += 1;
    }
    if n != rows {
        bail!("{}: expected {rows} rows, found {n}", path.display());
    }
    Ok(())
}

fn echo(command: &str, settings: &[(&str, String)]) {
    println!("# clpf {command}");
    for (k, v) in settings {
        println!("{k} = {v}");
    }
    echo_threads();
}

fn check_dataset(path: &Path, expected: &Dataset) -> Result<()> {
    let back = read_dataset(path).with_context(|| format!("re-reading {}", path.display()))?;
    if back.series.len() != expected.series.len() || back.meta.d != expected.meta.d {
        bail!("{} does not hold the written dataset", path.display());
    }
    Ok(())
}

fn process_spec(kind: ProcessKind, overrides: &[String]) -> Result<ProcessSpec> {
    let mut params = ProcessSpec::default_for(kind).params_json();
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--param expects KEY=VALUE, got `{kv}`"))?;
        let slot = params
            .get_mut(k.trim())
            .ok_or_else(|| anyhow!("{kind} has no parameter `{k}`"))?;
        *slot = serde_json::from_str(v.trim()).with_context(|| format!("value of `{k}`"))?;
    }
    Ok(ProcessSpec::from_json(kind, &params)?)
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let spec = process_spec(a.process, &a.params)?;
    let lambda = a.lambda.unwrap_or(a.process.default_lambda());
    let horizon = a.horizon.unwrap_or(a.process.default_horizon());
    echo(
        "generate",
        &[
            ("process", a.process.to_string()),
            ("params", spec.params_json().to_string()),
            ("lambda", lambda.to_string()),
            ("horizon", horizon.to_string()),
            ("n", a.n.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let mut outputs = Outputs::default();
    let data = generate_dataset(&spec, a.n, lambda, horizon, a.seed)?;
    outputs.track(&a.out);
    write_dataset(&a.out, &data)?;
    check_dataset(&a.out, &data)?;
    println!("wrote {} sequences, mean length {:.2}", data.series.len(), data.mean_length());
    outputs.commit();
    Ok(())
}

/// Resolves the training configuration from a file, `--set` pairs and flags.
pub fn resolve_train_config(
    config: Option<&Path>,
    overrides: &[String],
    flags: &[(&str, Option<String>)],
) -> Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v).map_err(|e| anyhow!("--set {kv}: {e}"))?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(|e| anyhow!("--{k}: {e}"))?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(
        a.config.as_deref(),
        &a.overrides,
        &[
            ("dataset", a.dataset.as_ref().map(|p| p.display().to_string())),
            ("validation", a.validation.as_ref().map(|p| p.display().to_string())),
            ("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("variant", a.variant.clone()),
            ("epochs", a.epochs.map(|e| e.to_string())),
            ("seed", a.seed.map(|s| s.to_string())),
        ],
    )?;
    let curve_path = a.curve.clone().unwrap_or_else(|| sibling(&cfg.checkpoint, "_curve.csv"));
    println!("# clpf train");
    print!("{}", cfg.to_text());
    println!("curve = {}", curve_path.display());
    echo_threads();

    let mut outputs = Outputs::default();
    outputs.track(&cfg.checkpoint);
    outputs.track(&curve_path);
    let outcome = train(&cfg, &mut |line| println!("{line}"))?;

    let header: Vec<String> = ["epoch", "train_loss", "val_nll", "val_se", "elapsed_s", "clip_rate"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = outcome
        .curve
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_nll.to_string(),
                r.val_se.to_string(),
                r.elapsed_s.to_string(),
                r.clip_rate.to_string(),
            ]
        })
        .collect();
    write_atomic(&curve_path, &csv_bytes(&header, &rows)?)?;
    check_csv(&curve_path, &header, rows.len())?;
    ClpfModel::load(&cfg.checkpoint).context("re-reading the checkpoint")?;
    println!(
        "best epoch {} with validation NLL {:.4} (initial {:.4}); checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_nll(),
        outcome.initial_val_nll(),
        cfg.checkpoint.display()
    );
    outputs.commit();
    Ok(())
}

fn echo_threads() {
    println!(
        "threads = {}",
        std::env::var("RAYON_NUM_THREADS").unwrap_or_else(|_| format!("{} (default)", rayon::current_num_threads()))
    );
}

fn load_model(path: &Path) -> Result<ClpfModel> {
    let (model, _) = ClpfModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(model)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    echo(
        "evaluate",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("dataset", a.dataset.display().to_string()),
            ("k", a.k.to_string()),
            ("seed", a.seed.to_string()),
            ("oracle", a.oracle.to_string()),
            ("out", a.out.as_ref().map_or("none".into(), |p| p.display().to_string())),
        ],
    );
    let model = load_model(&a.checkpoint)?;
    let data = read_dataset(&a.dataset)?;
    let report = evaluate_nll(&model, &data.series, a.k, a.seed)?;
    println!(
        "nll = {:.6} ± {:.6} per observation over {} sequences ({:.1} s, clip rate {:.2e})",
        report.nll,
        report.se,
        data.series.len(),
        report.seconds,
        report.clip_rate
    );
    if a.oracle {
        let oracle = gbm_oracle_nll(&data)?;
        println!("oracle nll = {:.6} ± {:.6}", oracle.nll, oracle.se);
    }
    let mut outputs = Outputs::default();
    if let Some(out) = &a.out {
        let mut table = MetricsTable::default();
        table.push(MetricsRow {
            dataset: a.dataset.file_stem().map_or(String::new(), |s| s.to_string_lossy().into_owned()),
            variant: model.config().variant.to_string(),
            seed: a.seed.to_string(),
            nll: report.nll,
            se: report.se,
            wall_clock_s: report.seconds,
            clip_rate: report.clip_rate,
        });
        outputs.track(out);
        table.write_csv(out)?;
        if MetricsTable::read_csv(out)? != table {
            bail!("{} does not hold the written metrics", out.display());
        }
    }
    outputs.commit();
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let horizon = a.horizon.unwrap_or(1.0 / model.config().time_scale);
    echo(
        "sample",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("lambda", a.lambda.map_or("none".into(), |l| l.to_string())),
            ("dense_step", a.dense_step.map_or("none".into(), |s| s.to_string())),
            ("horizon", horizon.to_string()),
            ("n", a.n.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    if a.n == 0 {
        bail!("--n must be positive");
    }
    let grids: Vec<TimeGrid> = (0..a.n)
        .map(|k| match (a.lambda, a.dense_step) {
            (Some(l), _) => sample_poisson_grid(l, horizon, &mut sequence_rng(a.seed, k as u64)),
            (None, Some(step)) => TimeGrid::regular(step, horizon),
            (None, None) => unreachable!("clap requires one grid option"),
        })
        .collect::<std::result::Result<_, _>>()?;
    let trajectories = grids
        .par_iter()
        .enumerate()
        .map(|(k, g)| sample_trajectory(&model, g, a.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k as u64))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let d = model.config().data_dim;
    let data = Dataset {
        meta: DatasetMeta {
            process: "model-sample".into(),
            params: serde_json::json!({
                "checkpoint": a.checkpoint.display().to_string(),
                "variant": model.config().variant,
                "grid": if a.lambda.is_some() { "poisson" } else { "dense" },
                "dense_step": a.dense_step,
            }),
            lambda: a.lambda.unwrap_or(0.0),
            horizon,
            seed: a.seed,
            d,
            n_sequences: a.n,
        },
        series: trajectories.into_iter().map(|t| t.series).collect(),
    };

    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    write_dataset(&a.out, &data)?;
    check_dataset(&a.out, &data)?;
    let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=d).map(|c| format!("x{c}"))).collect();
    for (k, s) in data.series.iter().enumerate() {
        let path = sibling(&a.out, &format!("_plot_{k}.csv"));
        outputs.track(&path);
        let rows: Vec<Vec<String>> = (0..s.len())
            .map(|i| std::iter::once(s.times()[i]).chain(s.value(i).iter().copied()).map(|v| v.to_string()).collect())
            .collect();
        write_atomic(&path, &csv_bytes(&header, &rows)?)?;
        check_csv(&path, &header, rows.len())?;
    }
    println!(
        "wrote {} trajectories ({} points each on average) and their plot CSVs",
        data.series.len(),
        data.mean_length()
    );
    outputs.commit();
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    echo(
        "predict",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("dataset", a.dataset.display().to_string()),
            ("samples", a.samples.to_string()),
            ("seed", a.seed.to_string()),
            ("limit", a.limit.map_or("none".into(), |l| l.to_string())),
            ("out", a.out.as_ref().map_or("none".into(), |p| p.display().to_string())),
        ],
    );
    let model = load_model(&a.checkpoint)?;
    let data = read_dataset(&a.dataset)?;
    let n = a.limit.unwrap_or(data.series.len()).min(data.series.len());
    let report = predict_dataset(&model, &data.series[..n], a.samples, a.seed)?;
    println!(
        "mean L2 error = {:.6} (25% {:.6}, 75% {:.6}) over {} predictions",
        report.mean_l2, report.p25, report.p75, report.n_predictions
    );
    let mut outputs = Outputs::default();
    if let Some(out) = &a.out {
        let d = model.config().data_dim;
        let header: Vec<String> = ["sequence", "t"]
            .into_iter()
            .map(String::from)
            .chain((1..=d).map(|c| format!("pred{c}")))
            .chain((1..=d).map(|c| format!("true{c}")))
            .chain(std::iter::once("l2".to_string()))
            .collect();
        let mut rows = Vec::with_capacity(report.n_predictions);
        for (idx, p) in &report.predictions {
            for (i, &t) in p.times.iter().enumerate() {
                let mut row = vec![idx.to_string(), t.to_string()];
                row.extend(p.predicted.row_slice(i).iter().map(f64::to_string));
                row.extend(p.truth.row_slice(i).iter().map(f64::to_string));
                row.push(p.l2[i].to_string());
                rows.push(row);
            }
        }
        outputs.track(out);
        write_atomic(out, &csv_bytes(&header, &rows)?)?;
        check_csv(out, &header, rows.len())?;
    }
    outputs.commit();
    Ok(())
}

fn parse_cell(spec: &str) -> Result<AblationCell> {
    let (name, paths) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--cell expects NAME=TRAIN,VALIDATION,TEST, got `{spec}`"))?;
    let paths: Vec<&str> = paths.split(',').collect();
    let [train, validation, test] = paths[..] else {
        bail!("--cell {name} needs exactly three dataset paths");
    };
    Ok(AblationCell {
        name: name.to_string(),
        train: read_dataset(Path::new(train))?,
        validation: read_dataset(Path::new(validation))?,
        test: read_dataset(Path::new(test))?,
    })
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let base = resolve_train_config(a.config.as_deref(), &a.overrides, &[])?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    println!("# clpf ablate");
    print!("{}", base.to_text());
    println!("cells = {}", a.cells.join(" "));
    println!("variants = {}", variants.iter().map(Variant::to_string).collect::<Vec<_>>().join(","));
    println!("seeds = {}", a.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    println!("out = {}", a.out.display());
    echo_threads();
    let cells = a.cells.iter().map(|c| parse_cell(c)).collect::<Result<Vec<_>>>()?;

    let mut outputs = Outputs::default();
    let stem = base.checkpoint.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    for cell in &cells {
        for v in &variants {
            for s in &a.seeds {
                outputs.track(&base.checkpoint.with_file_name(format!("{stem}_{}_{v}_{s}.ckpt", cell.name)));
            }
        }
    }
    outputs.track(&a.out);
    let table = run_ablation(&cells, &variants, &base, &a.seeds, &mut |line| println!("{line}"))?;
    table.write_csv(&a.out)?;
    if MetricsTable::read_csv(&a.out)? != table {
        bail!("{} does not hold the written metrics", a.out.display());
    }
    print!("{}", table.to_aligned());
    outputs.commit();
    Ok(())
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    echo(
        "ingest",
        &[
            ("input", a.input.display().to_string()),
            ("id_column", a.id_column.clone()),
            ("interval", a.interval.to_string()),
            ("lambda", a.lambda.to_string()),
            ("seed", a.seed.to_string()),
            ("time_shift", ingest::TIME_SHIFT.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let recordings = ingest::read_recordings(&a.input, &a.id_column).map_err(|e| anyhow!(e))?;
    let opts = ingest::IngestOptions {
        id_column: a.id_column.clone(),
        interval: a.interval,
        lambda: a.lambda,
        seed: a.seed,
    };
    let data = ingest::ingest(&recordings, &opts, &a.input.display().to_string()).map_err(|e| anyhow!(e))?;
    let mut outputs = Outputs::default();
    outputs.track(&a.out);
    write_dataset(&a.out, &data)?;
    check_dataset(&a.out, &data)?;
    println!("wrote {} sequences, mean length {:.2}", data.series.len(), data.mean_length());
    outputs.commit();
    Ok(())
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Ingest(a) => cmd_ingest(a),
    }
}
