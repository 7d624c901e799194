use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use pseudoreplay::balancing::{
    assemble_balanced_buffer, assemble_naive_buffer, type_distribution, MetaStats, PartitionKind, TaskPartitions,
};
use pseudoreplay::data::{write_samples_jsonl, Split};
use pseudoreplay::generation::{build_pseudo_dataset, fit_generation_head, read_pool, write_pool, ImagePolicy};
use pseudoreplay::harness::{fit_partition, write_atomic, ExperimentConfig};
use pseudoreplay::learner::Strategy;
use pseudoreplay::metrics::{AccuracyMatrix, MetricsReport};
use pseudoreplay::world::World;
use pseudoreplay::{seed, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "pseudoreplay", version, about = "Data-free continual learning with balanced pseudo-rehearsal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and write its reports.
    Run(RunArgs),
    /// Fit one task's generation head and generate a pool on another task's images.
    Generate(GenerateArgs),
    /// Assemble a replay buffer from generated pools.
    Balance(BalanceArgs),
    /// Compute AP/AF from an accuracy matrix CSV.
    Metrics(MetricsArgs),
    /// Synthetic world utilities.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seeds with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured strategy.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Task whose questions are generated.
    #[arg(long)]
    source_task: String,
    /// Task supplying the images; defaults to the task after the source.
    #[arg(long)]
    image_task: Option<String>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Output pool JSONL; a `.sidecar.json` is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BalanceArgs {
    #[command(flatten)]
    common: Common,
    /// Generated pool JSONL files (each with its sidecar).
    #[arg(long = "pool", required = true)]
    pools: Vec<PathBuf>,
    /// Per-task buffer size.
    #[arg(long)]
    m_hat: usize,
    /// Directory of `<task>.json` meta-statistics; fitted from the task data when absent.
    #[arg(long)]
    meta_stats: Option<PathBuf>,
    /// Output buffer JSONL; `buffer_stats.json` is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    /// Accuracy matrix CSV as written by `run`.
    #[arg(long)]
    matrix: PathBuf,
    /// Writes the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum WorldCommand {
    /// Write the configured world as a stream manifest plus sample JSONL.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn config_err(e: Error) -> Failure {
    Failure::Config(e)
}

fn runtime_err(e: Error) -> Failure {
    Failure::Runtime(e)
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_path(&common.config).map_err(config_err)?;
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(name) = &common.strategy {
        let strategy: Strategy = name.parse().map_err(config_err)?;
        cfg = cfg.with_strategy(strategy).map_err(config_err)?;
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    let report = pseudoreplay::run_experiment(&cfg).map_err(runtime_err)?;
    for s in &report.seeds {
        let af = s.metrics.af.map(|a| format!("{a:.4}")).unwrap_or_else(|| "null".into());
        println!("seed {}: AP={:.4} AF={af} -> {}", s.seed, s.metrics.ap, s.output_dir.display());
    }
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let source = cfg.open_source().map_err(config_err)?;
    let order = source.task_ids();
    let pos = order
        .iter()
        .position(|t| *t == args.source_task)
        .ok_or_else(|| config_err(Error::MissingTask(args.source_task.clone())))?;
    let image_task = match args.image_task {
        Some(t) => t,
        None => order
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| config_err(Error::Config("source task is last; pass --image-task".into())))?,
    };
    let train = source.load(&args.source_task, Split::Train).map_err(runtime_err)?;
    let head = fit_generation_head(&train, cfg.plan.tau, cfg.effective_bucket_width()).map_err(runtime_err)?;
    let images = source.load(&image_task, Split::Train).map_err(runtime_err)?.image_view();
    let policy = if image_task == args.source_task {
        ImagePolicy::PastImages
    } else {
        ImagePolicy::CurrentTask
    };
    let mut rng = seed::stream(cfg.seeds[0], "generate", &[&image_task, &args.source_task]);
    let pool = build_pseudo_dataset(&head, &images, args.count, policy, &mut rng).map_err(runtime_err)?;
    if let Some(dir) = args.out.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime_err(Error::Config(e.to_string())))?;
    }
    write_pool(&args.out, &pool, cfg.plan.tau).map_err(runtime_err)?;
    println!(
        "{} samples for `{}` on `{}` images ({} failures) -> {}",
        pool.len(),
        pool.source_task,
        pool.image_task,
        pool.failure_count,
        args.out.display()
    );
    Ok(())
}

fn balance(args: BalanceArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    let source = cfg.open_source().map_err(config_err)?;
    let embedder = cfg.partition_embedder().map_err(config_err)?;
    let kind = cfg.plan.strategy.partition_kind().unwrap_or(PartitionKind::Clustering);

    let mut pools = Vec::new();
    for p in &args.pools {
        pools.push(read_pool(p, source.feature_dim()).map_err(runtime_err)?.0);
    }
    let mut fns = BTreeMap::new();
    let mut dists = BTreeMap::new();
    for pool in &pools {
        let task = pool.source_task.clone();
        let (f, d) = match &args.meta_stats {
            Some(dir) => {
                let path = dir.join(format!("{task}.json"));
                let text = fs::read_to_string(&path)
                    .map_err(|e| runtime_err(Error::Config(format!("{}: {e}", path.display()))))?;
                let stats: MetaStats = serde_json::from_str(&text).map_err(|e| runtime_err(e.into()))?;
                stats.into_parts().map_err(runtime_err)?
            }
            None => {
                let train = source.load(&task, Split::Train).map_err(runtime_err)?;
                let f = fit_partition(kind, &train, &embedder, cfg.plan.k_clusters, cfg.seeds[0]).map_err(runtime_err)?;
                let d = type_distribution(&train, &f, &embedder).map_err(runtime_err)?;
                (f, d)
            }
        };
        fns.insert(task.clone(), f);
        dists.insert(task, d);
    }

    let partitions = TaskPartitions {
        embedder: &embedder,
        fns: &fns,
    };
    let mut rng = seed::stream(cfg.seeds[0], "balance", &["cli"]);
    let raw = pseudoreplay::RehearsalBuffer::raw(&pools, &partitions).map_err(runtime_err)?;
    let buffer = if cfg.plan.strategy == Strategy::GabNoBalance {
        assemble_naive_buffer(&pools, Some(&partitions), args.m_hat, &mut rng)
    } else {
        assemble_balanced_buffer(&pools, &partitions, &dists, args.m_hat, &mut rng)
    }
    .map_err(runtime_err)?;

    if let Some(dir) = args.out.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime_err(Error::Config(e.to_string())))?;
    }
    write_samples_jsonl(&args.out, &buffer.entries).map_err(runtime_err)?;
    let real: BTreeMap<&String, &Vec<f64>> = dists.iter().map(|(k, d)| (k, &d.probs)).collect();
    let stats = serde_json::json!({
        "m_hat": args.m_hat,
        "real": real,
        "raw": raw.per_task_per_type_counts,
        "balanced": buffer.per_task_per_type_counts,
        "warnings": buffer.warnings,
    });
    let stats_path = args.out.with_file_name("buffer_stats.json");
    let text = serde_json::to_string_pretty(&stats).map_err(|e| runtime_err(e.into()))? + "\n";
    write_atomic(&stats_path, text.as_bytes()).map_err(runtime_err)?;
    println!("{} buffer entries -> {}", buffer.len(), args.out.display());
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.matrix)
        .map_err(|e| config_err(Error::Config(format!("{}: {e}", args.matrix.display()))))?;
    let matrix = AccuracyMatrix::from_csv(&text).map_err(config_err)?;
    let report = MetricsReport::from_matrix(&matrix, BTreeMap::new()).map_err(runtime_err)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| runtime_err(e.into()))? + "\n";
    match args.out {
        Some(p) => write_atomic(&p, json.as_bytes()).map_err(runtime_err)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn world_export(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_path(config).map_err(config_err)?;
    let spec = cfg
        .world
        .ok_or_else(|| config_err(Error::Config("config has no [world] section".into())))?;
    let stream = World::new(spec).and_then(|w| w.stream()).map_err(config_err)?;
    let manifest = stream.write_to_dir(out).map_err(runtime_err)?;
    println!("{} tasks -> {}", stream.num_tasks(), manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Generate(a) => generate(a),
        Command::Balance(a) => balance(a),
        Command::Metrics(a) => metrics(a),
        Command::World {
            command: WorldCommand::Export { config, out },
        } => world_export(&config, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            error!("configuration error: {e}");
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(e)) => {
            error!("runtime error: {e}");
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
