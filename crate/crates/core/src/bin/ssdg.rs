//! Command-line front end: train, sweep, report, synth and eval.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssdg::config::TrainConfig;
use ssdg::data::{
    export_columnar, generate_synthetic, load_directory_dataset, DatasetBundle, LoadOptions,
    SplitSpec, SyntheticSpec,
};
use ssdg::error::Error;
use ssdg::experiments::{
    evaluate_checkpoint, load_run_log, run_sweep, run_training, write_report, SweepSpec,
};

#[derive(Parser)]
#[command(name = "ssdg", about = "Semi-supervised domain generalization trainer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Root of a <domain>/<class>/<file> image dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Name of the labeled source domain (directory datasets).
    #[arg(long)]
    labeled: Option<String>,
    /// Name of the held-out target domain (directory datasets).
    #[arg(long)]
    target: Option<String>,
    /// Use the synthetic benchmark instead of a directory dataset.
    #[arg(long)]
    synthetic: bool,
    /// Synthetic-spec overrides, key=value (repeatable).
    #[arg(long = "synth", value_name = "KEY=VALUE")]
    synth: Vec<String>,
    /// Image side for directory ingestion.
    #[arg(long, default_value_t = 32)]
    image_side: u32,
    /// Fraction of each source domain held out of training.
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, key=value (repeatable, applied after the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Named ablation arm: no-dapl, no-dc, no-mixup, mixup-all, no-entropy,
    /// no-advmix, supone, naive-pl.
    #[arg(long)]
    ablation: Option<String>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write manifest, metrics log, checkpoint, report.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// One run per grid point per seed; emits an aggregated table.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Build comparison tables and accuracy curves from metrics logs.
    Report {
        /// Metrics logs (metrics.jsonl) to aggregate.
        #[arg(long = "log", value_name = "FILE", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
    /// Generate a synthetic dataset and export it as a columnar file.
    Synth {
        /// Synthetic-spec overrides, key=value (repeatable).
        #[arg(long = "synth", value_name = "KEY=VALUE")]
        synth: Vec<String>,
        /// Output file (columnar text).
        #[arg(long, default_value = "synth.csv")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one domain of a dataset.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Domain to evaluate on (defaults to the dataset's target domain).
        #[arg(long)]
        domain: Option<String>,
    },
}

fn output_dir(requested: PathBuf) -> PathBuf {
    // env override for the output root only
    match std::env::var("SSDG_OUT_DIR") {
        Ok(root) if !root.is_empty() => PathBuf::from(root).join(requested),
        _ => requested,
    }
}

fn build_synth_spec(overrides: &[String]) -> Result<SyntheticSpec, Error> {
    let mut spec = SyntheticSpec::default();
    for kv in overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config("synth", format!("expected key=value, got `{kv}`")))?;
        spec.apply_kv(key.trim(), value.trim())?;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_dataset(args: &DataArgs) -> Result<DatasetBundle, Error> {
    if args.synthetic || args.data.is_none() {
        if args.data.is_none() && !args.synthetic {
            return Err(Error::config(
                "data",
                "no dataset given; pass --data <dir> or --synthetic",
            ));
        }
        return generate_synthetic(&build_synth_spec(&args.synth)?);
    }
    let root = args.data.as_ref().unwrap();
    let labeled = args.labeled.as_deref().ok_or_else(|| {
        Error::config("labeled", "directory datasets need --labeled <domain>")
    })?;
    let options = LoadOptions {
        image_side: args.image_side,
        split: SplitSpec {
            val_fraction: args.val_fraction,
            split_seed: 0,
        },
        ..Default::default()
    };
    let bundle = load_directory_dataset(root, labeled, args.target.as_deref(), &options)?;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    if bundle.skipped_files > 0 {
        eprintln!("warning: skipped {} unreadable files", bundle.skipped_files);
    }
    Ok(bundle)
}

fn apply_ablation(config: &mut TrainConfig, name: &str) -> Result<(), Error> {
    match name {
        "no-dapl" => config.use_dapl = false,
        "no-dc" => config.use_dual_classifier = false,
        "no-mixup" => config.use_mixup = false,
        "mixup-all" => config.mixup_all = true,
        "no-entropy" => config.use_entropy = false,
        "no-advmix" => config.use_adv_mix = false,
        "supone" => *config = config.clone().supone(),
        "naive-pl" => config.gamma = 1.0,
        other => {
            return Err(Error::config(
                "ablation",
                format!("unknown ablation `{other}`"),
            ))
        }
    }
    Ok(())
}

fn build_config(args: &ConfigArgs, data: &DatasetBundle) -> Result<TrainConfig, Error> {
    let mut config = TrainConfig {
        num_classes: data.num_classes(),
        ..Default::default()
    };
    if let Some(path) = &args.config {
        let contents = std::fs::read_to_string(path)?;
        config.apply_file_contents(&contents)?;
    }
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::config("set", format!("expected key=value, got `{kv}`")))?;
        config.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(ablation) = &args.ablation {
        apply_ablation(&mut config, ablation)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { data, config, out } => {
            let bundle = load_dataset(&data)?;
            let cfg = build_config(&config, &bundle)?;
            let out = output_dir(out);
            let artifacts = run_training(cfg, &bundle, &out)?;
            println!(
                "run {} arm {} complete; artifacts in {}",
                artifacts.manifest.run_id,
                artifacts.manifest.arm,
                out.display()
            );
            if let Some(summary) = artifacts.final_summary {
                if let Some(acc) = summary.target_accuracy {
                    println!("final target accuracy: {acc:.4}");
                }
            }
            Ok(())
        }
        Command::Sweep { data, config, out } => {
            let bundle = load_dataset(&data)?;
            let cfg = build_config(&config, &bundle)?;
            let sweep = match &config.config {
                Some(path) => SweepSpec::from_file_contents(&std::fs::read_to_string(path)?)?,
                None => SweepSpec::default(),
            };
            let out = output_dir(out);
            let outcome = run_sweep(&cfg, &bundle, &sweep, &out)?;
            print!("{}", outcome.table);
            if !outcome.failures.is_empty() {
                eprintln!("{} grid points failed:", outcome.failures.len());
                for (point, err) in &outcome.failures {
                    eprintln!("  {point}: {err}");
                }
                std::process::exit(1);
            }
            Ok(())
        }
        Command::Report { logs, out } => {
            let mut parsed = Vec::new();
            for path in &logs {
                parsed.push(load_run_log(path)?);
            }
            let out = output_dir(out);
            let outputs = write_report(&parsed, &out)?;
            for path in outputs {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Synth { synth, out } => {
            let spec = build_synth_spec(&synth)?;
            let bundle = generate_synthetic(&spec)?;
            export_columnar(&bundle, &out)?;
            println!(
                "wrote {} ({} domains, {} classes)",
                out.display(),
                bundle.domains.len(),
                bundle.num_classes()
            );
            Ok(())
        }
        Command::Eval {
            data,
            checkpoint,
            domain,
        } => {
            let bundle = load_dataset(&data)?;
            let domain = domain
                .or_else(|| bundle.target_domain.clone())
                .ok_or_else(|| Error::config("domain", "no domain given and dataset has no target"))?;
            let acc = evaluate_checkpoint(&checkpoint, &bundle, &domain)?;
            println!("accuracy on {domain}: {acc:.4}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
