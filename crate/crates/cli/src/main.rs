mod config;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ConfigFile, Resolver, UsageError};
use loopsim::dataset::{complete_semisynthetic, load_movielens, split, CompleteMatrix, MovieLensFormat, SplitMode};
use loopsim::exposure::{evaluate_exposure_auc, ExposureModel, PoissonConfig};
use loopsim::recommender::TrainingConfig;
use loopsim::simloop::{run_experiment, ExperimentData, SimVariant, SimulationConfig};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "loopsim", version, about = "Exposure-aware recommendation feedback-loop simulator")]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, env = "LOOPSIM_THREADS")]
    threads: Option<usize>,

    /// `key = value` file supplying defaults for any flag below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fill a ratings file into a dense semi-synthetic ground-truth matrix.
    Complete(CompleteArgs),
    /// Compare exposure estimators by held-out AUC over temporal batches.
    EvalExposure(EvalExposureArgs),
    /// Run the recommend/accept/retrain loop and write metric traces.
    Simulate(SimulateArgs),
}

#[derive(Args, Default)]
struct TrainingFlags {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    propensity_floor: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Default)]
struct PoissonFlags {
    #[arg(long)]
    poisson_k: Option<usize>,
    #[arg(long)]
    poisson_shape: Option<f64>,
    #[arg(long)]
    poisson_rate: Option<f64>,
    #[arg(long)]
    poisson_sweeps: Option<usize>,
}

#[derive(Args)]
struct DatasetFlags {
    /// MovieLens ratings file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `tab_100k` or `coloncolon_1m`.
    #[arg(long)]
    format: Option<MovieLensFormat>,
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    data: DatasetFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args)]
struct EvalExposureArgs {
    #[command(flatten)]
    data: DatasetFlags,
    #[arg(long)]
    batches: Option<usize>,
    /// Comma-separated: popularity, poisson, uniform, random.
    #[arg(long)]
    models: Option<String>,
    /// Negatives drawn per held-out positive.
    #[arg(long)]
    neg_ratio: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// `per_user` cuts every user's timeline; `global` cuts the merged one.
    #[arg(long)]
    split: Option<SplitMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    poisson: PoissonFlags,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dense ground-truth matrix written by `complete`.
    #[arg(long)]
    complete: Option<PathBuf>,
    /// The ratings the complete matrix was built from; the initial training
    /// sets are sampled from these.
    #[command(flatten)]
    data: DatasetFlags,
    /// Comma-separated: mf, pear_mf, propensity_mf, mab_mf, mab_pear_mf.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    slate_size: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    initial_fraction: Option<f64>,
    #[arg(long)]
    relevance_threshold: Option<f64>,
    #[arg(long)]
    discount_base: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per replica-iteration trace.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to `<out>_aggregate.csv`.
    #[arg(long)]
    aggregate_out: Option<PathBuf>,
    /// Defaults to `<out>_ttest.csv`.
    #[arg(long)]
    ttest_out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
    #[command(flatten)]
    poisson: PoissonFlags,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn input<T>(r: loopsim::Result<T>) -> Result<T> {
    r.map_err(|e| {
        if e.is_input_error() {
            UsageError(e.to_string()).into()
        } else {
            anyhow::Error::new(e)
        }
    })
}

fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| usage(format!("missing required setting --{flag}")))
}

fn resolve_training(r: &mut Resolver<'_>, f: TrainingFlags, seed: u64) -> Result<TrainingConfig> {
    let d = TrainingConfig::default();
    let cfg = TrainingConfig {
        alpha: r.value("alpha", f.alpha, d.alpha)?,
        beta: r.value("beta", f.beta, d.beta)?,
        lambda: r.value("lambda", f.lambda, d.lambda)?,
        k: r.value("k", f.k, d.k)?,
        epochs: r.value("epochs", f.epochs, d.epochs)?,
        init_scale: r.value("init_scale", f.init_scale, d.init_scale)?,
        propensity_floor: r.value("propensity_floor", f.propensity_floor, d.propensity_floor)?,
        tolerance: r.value("tolerance", f.tolerance, d.tolerance)?,
        seed,
    };
    input(cfg.validate())?;
    Ok(cfg)
}

fn resolve_poisson(r: &mut Resolver<'_>, f: PoissonFlags, seed: u64) -> Result<PoissonConfig> {
    let d = PoissonConfig::default();
    let cfg = PoissonConfig {
        k: r.value("poisson_k", f.poisson_k, d.k)?,
        shape: r.value("poisson_shape", f.poisson_shape, d.shape)?,
        rate: r.value("poisson_rate", f.poisson_rate, d.rate)?,
        sweeps: r.value("poisson_sweeps", f.poisson_sweeps, d.sweeps)?,
        seed,
    };
    if cfg.k == 0 || !(cfg.shape > 0.0 && cfg.rate > 0.0) {
        bail!(usage("poisson_k, poisson_shape and poisson_rate must be positive"));
    }
    Ok(cfg)
}

fn resolve_dataset(r: &mut Resolver<'_>, f: DatasetFlags) -> Result<(PathBuf, MovieLensFormat)> {
    let path = required(r.optional("dataset", f.dataset.map(|p| p.display().to_string()))?, "dataset")?;
    let format = r.value("format", f.format, MovieLensFormat::Tab100k)?;
    Ok((PathBuf::from(path), format))
}

fn comma_list<T>(text: &str) -> Result<Vec<T>>
where
    T: std::str::FromStr<Err = loopsim::Error>,
{
    let items: Vec<T> = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| usage(e.to_string())))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        bail!(usage(format!("empty list {text:?}")));
    }
    Ok(items)
}

fn cmd_complete(args: CompleteArgs, file: &ConfigFile, threads: usize) -> Result<()> {
    let mut r = Resolver::new(file);
    let (dataset, format) = resolve_dataset(&mut r, args.data)?;
    let seed = r.value("seed", args.seed, 0u64)?;
    let out = PathBuf::from(required(r.optional("out", args.out.map(|p| p.display().to_string()))?, "out")?);
    let training = resolve_training(&mut r, args.training, seed)?;

    let ratings = input(load_movielens(&dataset, format))?;
    let complete = complete_semisynthetic(&ratings, &training, seed)?;
    complete.save(&out)?;
    eprintln!(
        "completed {} users x {} items from {} ratings -> {}",
        complete.n_users(),
        complete.n_items(),
        ratings.len(),
        out.display()
    );

    let mut m = RunManifest::new("complete", threads, r.snapshot);
    m.add_input(&dataset)?;
    m.add_output(&out);
    m.write_next_to(&out)?;
    Ok(())
}

fn cmd_eval_exposure(args: EvalExposureArgs, file: &ConfigFile, threads: usize) -> Result<()> {
    let mut r = Resolver::new(file);
    let (dataset, format) = resolve_dataset(&mut r, args.data)?;
    let batches = r.value("batches", args.batches, 4usize)?;
    let models_text = r.value("models", args.models, "popularity,poisson".to_string())?;
    let neg_ratio = r.value("neg_ratio", args.neg_ratio, 1usize)?;
    let repetitions = r.value("repetitions", args.repetitions, 1usize)?;
    let mode = r.value("split", args.split, SplitMode::PerUser)?;
    let seed = r.value("seed", args.seed, 0u64)?;
    let out = PathBuf::from(required(r.optional("out", args.out.map(|p| p.display().to_string()))?, "out")?);
    let poisson = resolve_poisson(&mut r, args.poisson, seed)?;
    if batches < 2 {
        bail!(usage(format!("--batches must be at least 2, got {batches}")));
    }
    let models: Vec<ExposureModel> = comma_list::<ExposureModel>(&models_text)?
        .into_iter()
        .map(|m| match m {
            ExposureModel::Poisson(_) => ExposureModel::Poisson(poisson),
            other => other,
        })
        .collect();

    let ratings = input(load_movielens(&dataset, format))?;
    let batches = input(split(&ratings, batches, mode))?;
    let mut reports = Vec::new();
    for model in &models {
        let report = input(evaluate_exposure_auc(model, &batches, neg_ratio, repetitions, seed))?;
        eprintln!("{model}: mean AUC {:.4} ± {:.4}", report.mean, report.ci95);
        reports.push((model.name().to_string(), report));
    }
    output::write_auc_csv(&out, &reports)?;

    let mut m = RunManifest::new("eval-exposure", threads, r.snapshot);
    m.add_input(&dataset)?;
    m.add_output(&out);
    m.write_next_to(&out)?;
    Ok(())
}

fn cmd_simulate(args: SimulateArgs, file: &ConfigFile, threads: usize) -> Result<()> {
    let mut r = Resolver::new(file);
    let complete_path = PathBuf::from(required(
        r.optional("complete", args.complete.map(|p| p.display().to_string()))?,
        "complete",
    )?);
    let (dataset, format) = resolve_dataset(&mut r, args.data)?;
    let variants_text = r.value("variants", args.variants, "mf,pear_mf".to_string())?;
    let variants: Vec<SimVariant> = comma_list(&variants_text)?;
    let d = SimulationConfig::default();
    let iterations = r.value("iterations", args.iterations, d.iterations)?;
    let replicas = r.value("replicas", args.replicas, d.replicas)?;
    let slate_size = r.value("slate_size", args.slate_size, d.slate_size)?;
    let epsilon = r.value("epsilon", args.epsilon, d.epsilon)?;
    let initial_fraction = r.value("initial_fraction", args.initial_fraction, d.initial_fraction)?;
    let relevance_threshold = r.value("relevance_threshold", args.relevance_threshold, d.relevance_threshold)?;
    let discount_base = r.value("discount_base", args.discount_base, d.discount_base)?;
    let seed = r.value("seed", args.seed, 0u64)?;
    let out = PathBuf::from(required(r.optional("out", args.out.map(|p| p.display().to_string()))?, "out")?);
    let aggregate_out = r
        .optional("aggregate_out", args.aggregate_out.map(|p| p.display().to_string()))?
        .map(PathBuf::from)
        .unwrap_or_else(|| output::sibling(&out, "aggregate"));
    let ttest_out = r
        .optional("ttest_out", args.ttest_out.map(|p| p.display().to_string()))?
        .map(PathBuf::from)
        .unwrap_or_else(|| output::sibling(&out, "ttest"));
    r.record("aggregate_out", aggregate_out.display());
    r.record("ttest_out", ttest_out.display());
    let training = resolve_training(&mut r, args.training, 0)?;
    let poisson = resolve_poisson(&mut r, args.poisson, 0)?;

    let configs: Vec<SimulationConfig> = variants
        .iter()
        .map(|&variant| SimulationConfig {
            variant,
            iterations,
            slate_size,
            replicas,
            epsilon,
            initial_fraction,
            relevance_threshold,
            discount_base,
            training,
            poisson,
            master_seed: seed,
        })
        .collect();
    for c in &configs {
        input(c.validate())?;
    }

    let observed = input(load_movielens(&dataset, format))?;
    let complete = input(CompleteMatrix::load(&complete_path))?;
    if (complete.n_users(), complete.n_items()) != (observed.n_users(), observed.n_items()) {
        bail!(usage(format!(
            "{} is {}x{} but {} has {} users and {} items",
            complete_path.display(),
            complete.n_users(),
            complete.n_items(),
            dataset.display(),
            observed.n_users(),
            observed.n_items()
        )));
    }
    let data = ExperimentData {
        observed: &observed,
        complete: &complete,
    };
    let result = run_experiment(&configs, &data)?;
    for f in &result.failures {
        eprintln!("warning: {} replica {} failed: {}", f.variant, f.replica, f.error);
    }
    output::write_trace_csv(&out, &result)?;
    output::write_aggregate_csv(&aggregate_out, &result)?;
    output::write_ttest_csv(&ttest_out, &result)?;

    let mut m = RunManifest::new("simulate", threads, r.snapshot);
    m.add_input(&dataset)?;
    m.add_input(&complete_path)?;
    for p in [&out, &aggregate_out, &ttest_out] {
        m.add_output(p);
    }
    m.write_next_to(&out)?;
    Ok(())
}

fn setup_threads(requested: Option<usize>) -> Result<usize> {
    let n = match requested {
        Some(0) => bail!(usage("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("starting worker pool")?;
    Ok(n)
}

fn run(cli: Cli) -> Result<()> {
    let threads = setup_threads(cli.threads)?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Complete(a) => cmd_complete(a, &file, threads),
        Command::EvalExposure(a) => cmd_eval_exposure(a, &file, threads),
        Command::Simulate(a) => cmd_simulate(a, &file, threads),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<UsageError>().is_some()) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
