//! `asymnet`: synthesise datasets, train and evaluate matchers, and check
//! gradients from the command line.
//!
//! Exit codes: 0 success, 1 other failure (I/O), 2 validation, 3 training
//! divergence, 4 gradient check failure.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use asymnet_core::eval::evaluate;
use asymnet_core::features::{load_dataset, synth_generate, write_dataset};
use asymnet_core::gradcheck::{run_suite, Component, TOLERANCE};
use asymnet_core::model::{config_digest, FORMAT_VERSION};
use asymnet_core::numerics::RNG_ALGORITHM;
use asymnet_core::trainer::two_step_train;
use asymnet_core::{Baseline, Dataset, Error, EvalOptions, Model, Provenance, Scoring};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asymnet", version, about = "Sequence-to-item matching with a hierarchical fusion tree")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model; one JSON metrics record per epoch.
    Train(TrainArgs),
    /// Rank galleries and report top-k accuracy as JSON.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a model file's metadata.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds both initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics file (JSON lines); defaults to stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Train only on this category's trajectories.
    #[arg(long)]
    category: Option<String>,
    /// Start from an existing model instead of a fresh one.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Cut-offs, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20")]
    k: Vec<usize>,
    /// Extra fusion baselines to report next to the tree (avg, max, last).
    #[arg(long, value_delimiter = ',')]
    baseline: Vec<Baseline>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Evaluate only this category's queries.
    #[arg(long)]
    category: Option<String>,
    /// Rank against the whole gallery instead of the query's category.
    #[arg(long)]
    cross_category: bool,
    /// Report file; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// First seed; the suite runs `seeds` consecutive ones.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Negate one component's analytic gradient (harness self-test).
    #[arg(long, hide = true)]
    inject_fault: Option<Component>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn validation(msg: impl std::fmt::Display) -> Self {
        Failure {
            code: 2,
            error: anyhow!("{msg}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Shape(_) | Error::Argument(_) | Error::Dataset { .. } | Error::ModelFormat(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        };
        Failure { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CmdResult = Result<(), Failure>;

fn read_config(path: Option<&Path>) -> Result<config::Entries, Failure> {
    match path {
        None => Ok(config::Entries::new()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            config::parse(&text).map_err(|e| Failure::validation(format!("{}: {e}", p.display())))
        }
    }
}

fn synth(args: SynthArgs) -> CmdResult {
    let mut cfg = config::synth(read_config(args.config.as_deref())?).map_err(Failure::validation)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ds = synth_generate(&cfg)?;
    write_dataset(&ds, &args.out)?;
    println!(
        "wrote {}: {} trajectories, {} gallery items, {} categories, dim {}, length {}",
        args.out.display(),
        ds.trajectories().len(),
        ds.gallery().len(),
        ds.categories().len(),
        ds.dim(),
        ds.traj_len()
    );
    Ok(())
}

fn restrict(ds: Dataset, category: Option<&str>) -> Result<Dataset, Failure> {
    match category {
        None => Ok(ds),
        Some(c) if ds.categories().contains(c) => {
            ds.restrict_to_category(c).map_err(|e| Failure::validation(format!("category {c:?}: {e}")))
        }
        Some(c) => Err(Failure::validation(format!(
            "unknown category {c:?}; dataset has {:?}",
            ds.categories()
        ))),
    }
}

fn train(args: TrainArgs) -> CmdResult {
    let mut settings = config::train(read_config(args.config.as_deref())?).map_err(Failure::validation)?;
    if let Some(seed) = args.seed {
        settings.train.seed = seed;
    }
    let ds = load_dataset(&args.data)?;
    settings.model.tree = settings.tree.resolve(ds.traj_len(), settings.gate_bias);
    let seed = settings.train.seed;
    let mut model = match &args.init {
        Some(path) => Model::load(path)?,
        None => Model::init(&settings.model, ds.dim(), seed)?,
    };
    model.check_dataset(&ds)?;
    settings.train.validate()?;
    model.provenance = Provenance {
        seed,
        config_digest: config_digest(&settings.render()),
    };

    let mut sink: Box<dyn Write> = match &args.metrics {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    };
    let mut write_err = None;
    let mut emit = |m: &asymnet_core::EpochMetrics| {
        let line = serde_json::to_string(m).expect("metrics serialise");
        if let Err(e) = writeln!(sink, "{line}").and_then(|_| sink.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let ds = restrict(ds, args.category.as_deref())?;
    two_step_train(&mut model, &ds, &settings.train, &mut emit)?;
    if args.category.is_some() {
        model.category = args.category;
    }
    if let Some(e) = write_err {
        return Err(anyhow::Error::from(e).context("writing metrics").into());
    }
    if !model.is_finite() {
        return Err(Failure {
            code: 3,
            error: anyhow!("trained parameters are not finite"),
        });
    }
    model.save(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> CmdResult {
    if args.k.is_empty() || args.k.contains(&0) {
        return Err(Failure::validation("--k values must be >= 1"));
    }
    if args.workers == Some(0) {
        return Err(Failure::validation("--workers must be >= 1"));
    }
    let model = Model::load(&args.model)?;
    let ds = restrict(load_dataset(&args.data)?, args.category.as_deref())?;
    model.check_dataset(&ds)?;
    let modes = std::iter::once(Scoring::Tree).chain(args.baseline.iter().copied().map(Scoring::Baseline));
    let mut reports = Vec::new();
    for scoring in modes {
        let opts = EvalOptions {
            ks: args.k.clone(),
            scoring,
            within_category: !args.cross_category,
            workers: args.workers,
        };
        reports.push(evaluate(&model, &ds, &opts)?);
    }
    let json = serde_json::to_string_pretty(&reports).context("serialising report")?;
    match &args.out {
        Some(p) => {
            fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?;
            for r in &reports {
                let cells: Vec<String> = r.ks.iter().zip(&r.overall).map(|(k, a)| format!("top-{k} {a:.2}")).collect();
                println!("{:<5} {}", r.mode, cells.join("  "));
            }
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CmdResult {
    let settings = config::gradcheck(read_config(args.config.as_deref())?).map_err(Failure::validation)?;
    let results = run_suite(args.seed..args.seed + settings.seeds, &settings.sizes, args.inject_fault)?;
    println!("{:<10}{:>8}{:>16}  status", "component", "params", "max_rel_error");
    for r in &results {
        println!(
            "{:<10}{:>8}{:>16.3e}  {}",
            r.component.to_string(),
            r.parameters,
            r.max_relative_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            error: anyhow!("gradient check exceeded tolerance {TOLERANCE:e}"),
        })
    }
}

fn inspect(args: InspectArgs) -> CmdResult {
    let model = Model::load(&args.model)?;
    let tree = model.tree.config();
    let info = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "input_dim": model.input_dim(),
        "hidden_dim": model.hidden_dim(),
        "encoder_depth": model.encoder.depth(),
        "fc1_dim": model.ssn.fc1_dim(),
        "leaf_count": tree.leaf_count,
        "level_gate_counts": tree.level_gate_counts,
        "gate_bias": tree.gate_bias,
        "gate_count": tree.gate_count(),
        "parameters": model.encoder.flatten().len() + model.ssn.flatten().len() + model.tree.flatten().len(),
        "category": model.category,
        "seed": model.provenance.seed,
        "rng": RNG_ALGORITHM,
        "config_digest": model.provenance.digest_hex(),
    });
    println!("{}", serde_json::to_string_pretty(&info).context("serialising metadata")?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
