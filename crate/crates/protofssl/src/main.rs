//! Command-line driver: run experiments, generate synthetic datasets, and
//! print the analytical cost report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protofssl::cost::{comm_cost, comp_cost, forward_flops, param_count, ArchSpec, CostParams, Method};
use protofssl::data;
use protofssl::error::Error;
use protofssl::experiment::{run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "protofssl", version, about = "Prototype-based federated semi-supervised learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write metrics.
    Run(RunArgs),
    /// Generate a synthetic blob dataset to a manifest directory.
    GenData(GenDataArgs),
    /// Print per-client computation/communication costs for each method.
    Cost(CostArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults to the built-in desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv and config.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key config overrides, e.g. --set federation.total_rounds=100
    /// or --set partition.distribution.alpha=0.1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory receiving manifest.json, features.bin, labels.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Reference architecture for F and model size.
    #[arg(long, default_value = "resnet9")]
    arch: String,
    #[arg(long, default_value_t = 32)]
    input_hw: usize,
    #[arg(long, default_value_t = 50)]
    labeled: u64,
    #[arg(long, default_value_t = 490)]
    unlabeled: u64,
    #[arg(long, default_value_t = 1)]
    epochs: u64,
    #[arg(long, default_value_t = 2)]
    helpers: u64,
    #[arg(long, default_value_t = 10)]
    classes: u64,
    #[arg(long, default_value_t = 2)]
    augmentations: u64,
    /// Helper refresh interval (weight-sharing baseline).
    #[arg(long, default_value_t = 10)]
    refresh_interval: u64,
    /// Prototype embedding width in reals.
    #[arg(long, default_value_t = 512)]
    embedding_dim: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Cost(args) => cmd_cost(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            log::error!("{err}");
            match err {
                Error::Config(_) | Error::Parse { .. } | Error::Sizing(_) => ExitCode::from(2),
                Error::NonFinite(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Error> {
    let mut value: serde_json::Value = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => serde_json::to_value(ExperimentConfig::desk_default()).unwrap(),
    };
    for entry in &args.overrides {
        apply_override(&mut value, entry)?;
    }
    let mut config: ExperimentConfig = serde_json::from_value(value).map_err(|e| {
        Error::Config(format!("config does not match the expected schema: {e}"))
    })?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&config).unwrap());
        return Ok(ExitCode::SUCCESS);
    }

    let out = run_experiment(&config, args.out.as_deref())?;
    let last = out.records.last().expect("at least the round-0 record");
    println!(
        "finished {} rounds: final accuracy {:.4} (round {}), best {:.4} (round {})",
        config.federation.total_rounds,
        out.final_accuracy,
        last.round,
        out.best_accuracy,
        out.best_round
    );
    println!(
        "simulated totals: {:.3} GFLOP, {:.3} MB",
        last.cum_flops as f64 / 1e9,
        last.cum_bytes as f64 / 1e6
    );
    if let Some(dir) = &args.out {
        println!("metrics written to {}", dir.join("metrics.csv").display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Sets `key.path=value` inside a JSON tree, creating objects as needed;
/// values parse as JSON first and fall back to strings.
fn apply_override(root: &mut serde_json::Value, entry: &str) -> Result<(), Error> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not KEY=VALUE")))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {key}: {} is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("override paths are non-empty")
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode, Error> {
    let dataset = data::synth_blobs(args.classes, args.samples, args.dim, args.separation, args.seed)?;
    let manifest = data::save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} samples ({} classes, dim {}) to {}",
        dataset.len(),
        dataset.num_classes(),
        dataset.dim(),
        manifest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_cost(args: CostArgs) -> Result<ExitCode, Error> {
    let arch = match args.arch.as_str() {
        "resnet8" => ArchSpec::resnet8(),
        "resnet9" => ArchSpec::resnet9(),
        other => {
            return Err(Error::Config(format!(
                "unknown arch {other:?} (expected resnet8 or resnet9)"
            )))
        }
    };
    let params = param_count(&arch);
    let flops = forward_flops(&arch, args.input_hw);
    let p = CostParams {
        flops_per_sample: flops,
        model_bytes: 4 * params,
        prototype_bytes: 4 * args.embedding_dim,
        n_labeled: args.labeled,
        n_unlabeled: args.unlabeled,
        epochs: args.epochs,
        augmentations: args.augmentations,
        helpers: args.helpers,
        classes: args.classes,
        helper_refresh_interval: args.refresh_interval,
    };
    println!(
        "{} @ {}x{}: {} parameters, {:.4} GFLOP/sample, model {:.2} MB, prototype {} B",
        args.arch,
        args.input_hw,
        args.input_hw,
        params,
        flops as f64 / 1e9,
        4.0 * params as f64 / 1e6,
        4 * args.embedding_dim
    );
    println!(
        "per-client per-round costs (labeled {}, unlabeled {}, epochs {}, helpers {}, classes {}):",
        args.labeled, args.unlabeled, args.epochs, args.helpers, args.classes
    );
    println!("{:<18} {:>14} {:>12}", "method", "comp (GFLOP)", "comm (MB)");
    for method in Method::ALL {
        let comp = comp_cost(method, &p)? as f64 / 1e9;
        let comm = comm_cost(method, &p)? / 1e6;
        println!("{:<18} {:>14.1} {:>12.1}", method.name(), comp, comm);
    }
    Ok(ExitCode::SUCCESS)
}
