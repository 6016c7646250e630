//! `alure` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use alure::config::{Paths, RunConfig};
use alure::encoder::{evaluation_loss, save_checkpoint, train, training_examples, ModelParams};
use alure::eval::{run_experiment, run_sweep, ExperimentReport, Timing};
use alure::event_model::{
    ingest_histories, read_catalog, read_engagements, synth_generate, temporal_split, write_catalog,
    write_engagements, write_ground_truth, write_histories, EngagementLog,
};
use alure::graph::{build_graph, read_graph, write_graph};
use alure::pipeline::{load_embedder, refresh, Clock, Scheduler, SchedulerEvent, SnapshotStore, SystemClock};
use alure::retrieval::{retrieve_all, write_candidates};
use alure::Error;

#[derive(Debug, Parser)]
#[command(name = "alure", version, about = "Learned user embeddings, similarity graphs and u2u ads retrieval")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Shrinks to k1 = 40, k1' = 5, k2 = 15 and 10k users.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Re-roots every artifact path under this directory.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generates synthetic histories, engagements, catalog and labels.
    Synth {
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Trains the encoder on the histories and writes a checkpoint.
    Train {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Embeds every history and publishes a snapshot.
    Embed {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Builds the user-similarity graph from the current snapshot.
    BuildGraph {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Generates candidates for every graph node.
    Retrieve {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Reference time for recency decay; defaults to the latest engagement.
        #[arg(long)]
        now: Option<i64>,
    },
    /// Runs the synthetic experiment end to end and writes a report.
    Eval {
        #[arg(long)]
        report: Option<PathBuf>,
        /// Seed sweep such as `1-10` or `1,4,9`; overrides `--seed`.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Periodically refreshes the snapshot store until stopped.
    ServeRefresh {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 60)]
        poll_secs: u64,
        /// Stop after this many polls; 0 runs forever.
        #[arg(long, default_value_t = 0)]
        max_ticks: u64,
        /// Refresh once at startup instead of waiting a full interval.
        #[arg(long)]
        refresh_now: bool,
    },
    /// Prints the tool and on-disk format versions.
    Version,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ALURE_LOG", "warn")).init();
    alure::parallel::set_threads(cli.global.threads);

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let usage = |e: Error| Failure::Usage(e.to_string());
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if g.desk_scale {
        cfg.apply_desk_scale();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &g.out_dir {
        cfg.paths = Paths::under(dir);
    }
    let cfg = cfg.resolved();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn parse_seeds(spec: &str) -> CliResult<Vec<u64>> {
    let bad = || Failure::Usage(format!("invalid --seeds `{spec}`; expected `a-b` or a comma list"));
    let mut seeds = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| io_err(path, e))?))
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn run(cli: Cli) -> CliResult {
    if let Command::Version = cli.command {
        println!("alure {}", env!("CARGO_PKG_VERSION"));
        println!("snapshot format {}", alure::pipeline::SNAPSHOT_FORMAT_VERSION);
        println!("checkpoint format {}", alure::encoder::CHECKPOINT_VERSION);
        return Ok(());
    }
    let mut cfg = load_config(&cli.global)?;
    let or = |flag: Option<PathBuf>, default: PathBuf| flag.unwrap_or(default);
    match cli.command {
        Command::Version => unreachable!(),
        Command::Synth { data_dir } => {
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            synth(&cfg)
        }
        Command::Train { data_dir, checkpoint, steps } => {
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            train_cmd(&cfg, &or(checkpoint, cfg.paths.checkpoint.clone()))
        }
        Command::Embed { data_dir, checkpoint, store } => {
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            embed(
                &cfg,
                &or(checkpoint, cfg.paths.checkpoint.clone()),
                &or(store, cfg.paths.snapshot_store.clone()),
            )
        }
        Command::BuildGraph { store, graph } => build_graph_cmd(
            &cfg,
            &or(store, cfg.paths.snapshot_store.clone()),
            &or(graph, cfg.paths.graph.clone()),
        ),
        Command::Retrieve {
            data_dir,
            graph,
            candidates,
            now,
        } => {
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            retrieve(
                &cfg,
                &or(graph, cfg.paths.graph.clone()),
                &or(candidates, cfg.paths.candidates.clone()),
                now,
            )
        }
        Command::Eval { report, seeds } => {
            let seeds = seeds.as_deref().map(parse_seeds).transpose()?;
            eval(&cfg, &or(report, cfg.paths.report.clone()), seeds)
        }
        Command::ServeRefresh {
            data_dir,
            checkpoint,
            store,
            poll_secs,
            max_ticks,
            refresh_now,
        } => {
            if let Some(d) = data_dir {
                cfg.paths.data_dir = d;
            }
            serve_refresh(
                &cfg,
                &or(checkpoint, cfg.paths.checkpoint.clone()),
                &or(store, cfg.paths.snapshot_store.clone()),
                Duration::from_secs(poll_secs),
                max_ticks,
                refresh_now,
            )
        }
    }
}

fn synth(cfg: &RunConfig) -> CliResult {
    let data = synth_generate(&cfg.synth)?;
    let split = temporal_split(&data.histories, cfg.train.heldout_fraction);
    let engagements = EngagementLog::from_histories(&split.train);
    let p = &cfg.paths;
    write_histories(create(&p.histories())?, &split.train)?;
    write_engagements(create(&p.engagements())?, &engagements)?;
    write_engagements(create(&p.heldout())?, &split.heldout)?;
    write_catalog(create(&p.catalog())?, &data.catalog)?;
    write_ground_truth(create(&p.ground_truth())?, &data.ground_truth)?;
    log::info!("wrote synthetic data to {}", p.data_dir.display());
    print_json(serde_json::json!({
        "users": split.train.len(),
        "engagements": engagements.n_engagements(),
        "heldout_engagements": split.heldout.n_engagements(),
        "ads": data.catalog.n_ads(),
        "train_end": split.train_end,
    }));
    Ok(())
}

fn train_cmd(cfg: &RunConfig, checkpoint: &Path) -> CliResult {
    let histories = ingest_histories(&cfg.paths.histories(), cfg.model.n_sources)?.histories;
    let examples = training_examples(&histories, cfg.model.n_sources);
    if examples.len() < 2 {
        return Err(Error::Invalid(format!("only {} training examples", examples.len())).into());
    }
    let probe = &examples[..examples.len().min(cfg.train.eval_examples)];
    let mut params = ModelParams::init(&cfg.model);
    let loss_initial = evaluation_loss(&params, &cfg.model, probe)?;
    let losses = train(&mut params, &cfg.model, &examples, cfg.train.steps)?;
    let loss_final = evaluation_loss(&params, &cfg.model, probe)?;
    if let Some(parent) = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let id = save_checkpoint(&params, &cfg.model, checkpoint)?;
    log::info!("trained {} steps, checkpoint {id:016x}", losses.len());
    print_json(serde_json::json!({
        "examples": examples.len(),
        "steps": losses.len(),
        "loss_initial": loss_initial,
        "loss_final": loss_final,
        "checkpoint_id": format!("{id:016x}"),
    }));
    Ok(())
}

fn embed(cfg: &RunConfig, checkpoint: &Path, store: &Path) -> CliResult {
    let embedder = load_embedder(checkpoint)?;
    let histories = ingest_histories(&cfg.paths.histories(), embedder.config().n_sources)?.histories;
    // Snapshots are stamped with data time so re-runs are reproducible.
    let now = histories
        .iter()
        .filter_map(|h| h.max_timestamp())
        .max()
        .ok_or_else(|| Error::Invalid("no events in any history".into()))?;
    let store = SnapshotStore::open(store)?;
    let out = refresh(&store, &embedder, &histories, now)?;
    print_json(serde_json::json!({
        "snapshot_version": out.snapshot.snapshot_version,
        "model_version": format!("{:016x}", out.snapshot.model_version),
        "users": out.snapshot.len(),
        "skipped": out.skipped,
        "created_at": now,
    }));
    Ok(())
}

fn build_graph_cmd(cfg: &RunConfig, store: &Path, graph_path: &Path) -> CliResult {
    let store = SnapshotStore::open(store)?;
    let snapshot = store
        .current()
        .ok_or_else(|| Error::Invalid(format!("no snapshot published in {}", store.dir().display())))?;
    let build = build_graph(&snapshot, &cfg.graph)?;
    write_graph(&build.graph, create(graph_path)?)?;
    print_json(serde_json::json!({
        "snapshot_version": build.graph.snapshot_version,
        "nodes": build.graph.edges.len(),
        "edges": build.graph.n_edges(),
        "skipped_regions": build.skipped_regions,
        "rejected_users": build.rejected_users,
    }));
    Ok(())
}

fn retrieve(cfg: &RunConfig, graph_path: &Path, candidates: &Path, now: Option<i64>) -> CliResult {
    let graph = read_graph(open(graph_path)?)?;
    let engagements = read_engagements(open(&cfg.paths.engagements())?)?;
    let catalog = read_catalog(open(&cfg.paths.catalog())?)?;
    let now = now
        .or_else(|| engagements.by_user.values().flatten().map(|e| e.timestamp).max())
        .unwrap_or(0);
    let out = retrieve_all(&graph, &engagements, &catalog, &cfg.retrieval, now);
    write_candidates(&out.sets, create(candidates)?)?;
    write_text(&histogram_path(candidates), &out.histogram.to_text())?;
    print!("{}", out.histogram.to_text());
    Ok(())
}

/// `candidates.jsonl` → `candidates.histogram.tsv`.
fn histogram_path(candidates: &Path) -> PathBuf {
    candidates.with_extension("histogram.tsv")
}

fn timing_path(report: &Path) -> PathBuf {
    report.with_extension("timing.json")
}

fn eval(cfg: &RunConfig, report_path: &Path, seeds: Option<Vec<u64>>) -> CliResult {
    let (report, timing): (ExperimentReport, Timing) = match seeds {
        Some(seeds) => run_sweep(cfg, &seeds)?,
        None => run_experiment(cfg)?,
    };
    write_text(report_path, &report.to_json())?;
    // Wall-clock timing lives beside the report so the report stays reproducible.
    let timing: serde_json::Map<String, serde_json::Value> =
        timing.into_iter().map(|(k, v)| (k, serde_json::json!(v))).collect();
    write_text(
        &timing_path(report_path),
        &format!("{}\n", serde_json::Value::Object(timing)),
    )?;
    print!("{}", report.to_text());
    Ok(())
}

fn serve_refresh(
    cfg: &RunConfig,
    checkpoint: &Path,
    store: &Path,
    poll: Duration,
    max_ticks: u64,
    refresh_now: bool,
) -> CliResult {
    let embedder = load_embedder(checkpoint)?;
    let store = SnapshotStore::open(store)?;
    let histories_path = cfg.paths.histories();
    let n_sources = embedder.config().n_sources;
    let source = move || ingest_histories(&histories_path, n_sources).map(|i| i.histories);
    let clock = SystemClock;
    let start = clock.now();
    let start = if refresh_now { start - cfg.refresh.interval } else { start };
    let mut scheduler = Scheduler::new(&store, &embedder, source, cfg.refresh.clone(), start)?;
    let stop = AtomicBool::new(false);
    let mut ticks = 0;
    while !stop.load(std::sync::atomic::Ordering::SeqCst) {
        for event in scheduler.tick(clock.now()) {
            print_json(event_json(&event));
        }
        ticks += 1;
        if max_ticks > 0 && ticks >= max_ticks {
            break;
        }
        std::thread::sleep(poll);
    }
    Ok(())
}

fn event_json(event: &SchedulerEvent) -> serde_json::Value {
    match event {
        SchedulerEvent::RefreshSucceeded { at, version, skipped } => {
            serde_json::json!({"event": "refresh", "at": at, "version": version, "skipped": skipped})
        }
        SchedulerEvent::RefreshFailed { at, error } => {
            serde_json::json!({"event": "refresh_failed", "at": at, "error": error})
        }
        SchedulerEvent::StalenessAlarm { at, age } => {
            serde_json::json!({"event": "stale", "at": at, "age": age})
        }
    }
}
