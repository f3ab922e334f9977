use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deskbot_core::fsm::{Machine, MachineConfig};
use deskbot_core::harness::{self, emit_report, CampaignConfig, Harness, ReportFormat, Task, TrialSpec};
use deskbot_core::kinematics::DhChain;
use deskbot_core::nlu::{
    accuracy, desk_corpus, desk_heldout, experiment_command, load_corpus, train, Dataset, HashedNgrams, Intent,
    MlpModel, NluPipeline, TrainConfig, DEFAULT_THRESHOLD,
};
use deskbot_core::par::Execution;
use deskbot_core::perception::{Lighting, Scene};
use deskbot_core::pruning::{self, PruneConfig, Unit};
use deskbot_hub::{serve, serve_nlu, HubConfig, NluBackend, RuntimeConfig};
use tracing_subscriber::EnvFilter;

/// Simulated desktop arm: control hub, trial harness and classifier tools.
#[derive(Debug, Parser)]
#[command(name = "deskbot", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the control hub on TCP and WebSocket.
    Serve(ServeArgs),
    /// Run the language pipeline as a standalone server.
    ServeNlu(ServeNluArgs),
    /// Run repeated trials of one task and print CSR and CP.
    RunTask(RunTaskArgs),
    /// Run a campaign of tables and write the reports.
    Campaign(CampaignArgs),
    /// Train the intent classifier and save it.
    Train(TrainArgs),
    /// Rank classifier units by permutation importance, prune and quantize.
    Prune(PruneArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Saved classifier; the desk classifier is trained in-process if absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Unknown-intent threshold on the top probability.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

impl ModelArgs {
    fn pipeline(&self) -> Result<NluPipeline> {
        match &self.model {
            Some(path) => {
                let model = MlpModel::load(path).with_context(|| format!("loading {}", path.display()))?;
                let featurizer = HashedNgrams { dim: model.d_in };
                Ok(NluPipeline::new(Box::new(featurizer), model, self.threshold)?)
            }
            None => Ok(NluPipeline::train_desk(&TrainConfig::default(), self.threshold)?),
        }
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// `arm_table1`, `arm_table1_wrist`, or a chain JSON file.
    #[arg(long, default_value = "arm_table1")]
    arm: String,
    /// `office` or a scene JSON file.
    #[arg(long, default_value = "office")]
    scene: String,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 7462)]
    tcp: u16,
    /// WebSocket gateway port; 0 picks a free port.
    #[arg(long, default_value_t = 7463)]
    ws: u16,
    #[arg(long)]
    no_ws: bool,
    #[arg(long, default_value_t = 20.0)]
    telemetry_hz: f64,
    #[arg(long, default_value_t = 20)]
    tick_ms: u64,
    /// Machine settings JSON; missing fields keep their defaults.
    #[arg(long)]
    machine: Option<PathBuf>,
    /// Address of a `serve-nlu` process; interprets text in-process if absent.
    #[arg(long)]
    nlu: Option<SocketAddr>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct ServeNluArgs {
    #[arg(long, default_value = "127.0.0.1:7464")]
    addr: SocketAddr,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LightingArg {
    Bright,
    Dim,
}

impl From<LightingArg> for Lighting {
    fn from(l: LightingArg) -> Self {
        match l {
            LightingArg::Bright => Lighting::Bright,
            LightingArg::Dim => Lighting::Dim,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Md,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Md => ReportFormat::Markdown,
        }
    }
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Run trials on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Args)]
struct RunTaskArgs {
    /// door, switch or cup.
    task: Task,
    /// Spoken command; defaults to the task's first experiment command.
    #[arg(long)]
    command: Option<String>,
    /// Intent a correct recognition must produce, for commands outside the
    /// experiment list.
    #[arg(long)]
    intent: Option<Intent>,
    #[arg(long, default_value_t = harness::DEFAULT_TRIALS)]
    trials: u32,
    /// Word error rate of the simulated transcript.
    #[arg(long, default_value_t = 0.0)]
    wer: f64,
    #[arg(long, value_enum, default_value = "bright")]
    lighting: LightingArg,
    /// Background clutter fraction in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    clutter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_MAX_TICKS)]
    max_ticks: u64,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one JSON record per trial to this file.
    #[arg(long)]
    records: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct CampaignArgs {
    /// Campaign file; the shipped task campaign if absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the trials per row of every table.
    #[arg(long)]
    trials: Option<u32>,
    /// Directory for the per-table and summary reports.
    #[arg(long, default_value = "campaign-out")]
    out: PathBuf,
    #[command(flatten)]
    exec: ExecArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Corpus file (`text<TAB>intent` per line); the desk corpus if absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().hidden)]
    hidden: usize,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UnitArg {
    Input,
    Hidden,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long, value_enum, default_value = "input")]
    unit: UnitArg,
    /// Permutations per unit.
    #[arg(long, default_value_t = PruneConfig::default().k)]
    k: usize,
    /// Fraction of units to remove, least important first.
    #[arg(long, default_value_t = PruneConfig::default().fraction)]
    fraction: f64,
    /// Fixed-point width: 4, 8 or 16.
    #[arg(long, default_value_t = PruneConfig::default().bits)]
    bits: u32,
    #[arg(long, default_value_t = PruneConfig::default().seed)]
    seed: u64,
    /// Evaluation corpus; the held-out desk set if absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Write the quantized model here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    exec: ExecArgs,
    #[command(flatten)]
    model: ModelArgs,
}

fn load_chain(arm: &str) -> Result<DhChain> {
    Ok(match arm {
        "arm_table1" => DhChain::table1(),
        "arm_table1_wrist" => DhChain::table1().with_wrist_roll(),
        path => DhChain::load(path).with_context(|| format!("loading arm {path}"))?,
    })
}

fn load_scene(scene: &str) -> Result<Scene> {
    Ok(match scene {
        "office" => Scene::office(),
        path => Scene::load(path).with_context(|| format!("loading scene {path}"))?,
    })
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

async fn cmd_serve(args: ServeArgs) -> Result<()> {
    let chain = load_chain(&args.arm)?;
    let scene = load_scene(&args.scene)?;
    let config = match &args.machine {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<MachineConfig>(&text).context("machine settings")?
        }
        None => MachineConfig::default(),
    };
    let machine = Machine::desk_with(scene, config, Default::default(), chain)?;
    let nlu = match args.nlu {
        Some(addr) => NluBackend::Remote(addr),
        None => NluBackend::Local(Arc::new(args.model.pipeline()?)),
    };
    let hub = serve(
        machine,
        nlu,
        HubConfig {
            tcp: SocketAddr::new(args.host, args.tcp),
            ws: (!args.no_ws).then(|| SocketAddr::new(args.host, args.ws)),
            runtime: RuntimeConfig {
                tick_ms: args.tick_ms,
                telemetry_hz: args.telemetry_hz,
            },
        },
    )
    .await?;
    println!("tcp {}", hub.tcp_addr());
    if let Some(ws) = hub.ws_addr() {
        println!("ws ws://{ws}/ws");
    }
    tokio::select! {
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
        _ = hub.join() => bail!("hub task stopped unexpectedly"),
    }
    Ok(())
}

async fn cmd_serve_nlu(args: ServeNluArgs) -> Result<()> {
    let pipeline = Arc::new(args.model.pipeline()?);
    let (addr, task) = serve_nlu(pipeline, args.addr).await?;
    println!("nlu {addr}");
    tokio::select! {
        _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
        _ = task => bail!("nlu server stopped unexpectedly"),
    }
    Ok(())
}

fn default_command(task: Task) -> &'static str {
    let id = match task {
        Task::Door => "A",
        Task::Switch => "A1",
        Task::Cup => "C1",
    };
    experiment_command(id).expect("listed experiment command").0
}

fn cmd_run_task(args: RunTaskArgs) -> Result<()> {
    let mut spec = TrialSpec::new(args.task, args.command.as_deref().unwrap_or(default_command(args.task)));
    spec.expected_intent = args.intent;
    spec.trials = args.trials;
    spec.wer = args.wer;
    spec.lighting = args.lighting.into();
    spec.clutter_fraction = args.clutter;
    spec.seed = args.seed;
    spec.max_ticks = args.max_ticks;
    let harness = Harness::with_nlu(Arc::new(args.model.pipeline()?));
    let started = std::time::Instant::now();
    let table = harness.run_trials(&spec, &spec.command_text, args.exec.execution())?;
    tracing::info!(
        elapsed_ms = started.elapsed().as_millis() as u64,
        trials = spec.trials,
        "trials done"
    );
    if let Some(path) = &args.records {
        let mut lines = String::new();
        for r in &table.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        std::fs::write(path, lines).with_context(|| format!("writing {}", path.display()))?;
    }
    let title = format!("{:?} task", args.task);
    let report = emit_report(&title, &[table.row()], args.format.into());
    write_or_print(args.out.as_deref(), &report)
}

fn cmd_campaign(args: CampaignArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => CampaignConfig::load(path)?,
        None => CampaignConfig::paper_tasks(),
    };
    if let Some(n) = args.trials {
        config = config.with_trials(n);
    }
    let base = Harness::with_nlu(Arc::new(args.model.pipeline()?));
    let report = harness::campaign(&config, &base, args.exec.execution())?;
    let names = report.write(&args.out)?;
    print!("{}", report.summary(ReportFormat::Markdown));
    println!("\nWrote {} files to {}.", names.len(), args.out.display());
    Ok(())
}

fn corpus_or(path: Option<&Path>, fallback: fn() -> Vec<(String, String)>) -> Result<Vec<(String, String)>> {
    match path {
        Some(p) => Ok(load_corpus(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(fallback()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let corpus = corpus_or(args.corpus.as_deref(), desk_corpus)?;
    let featurizer = HashedNgrams { dim: args.dim };
    let config = TrainConfig {
        hidden: args.hidden,
        learning_rate: args.learning_rate,
        epochs: args.epochs,
        seed: args.seed,
    };
    let (model, report) = train(&corpus, &config, &featurizer)?;
    println!(
        "trained {} classes on {} utterances: loss {:.4}, training accuracy {:.1}%",
        model.classes(),
        corpus.len(),
        report.final_loss,
        100.0 * report.train_accuracy
    );
    if args.corpus.is_none() {
        let held = Dataset::from_corpus(&desk_heldout(), &featurizer, &model.labels)?;
        println!("held-out accuracy {:.1}%", 100.0 * accuracy(&model, &held));
    }
    model.save(&args.out)?;
    println!("saved {}", args.out.display());
    Ok(())
}

fn cmd_prune(args: PruneArgs) -> Result<()> {
    let pipeline = args.model.pipeline()?;
    let model = pipeline.model();
    let corpus = corpus_or(args.corpus.as_deref(), desk_heldout)?;
    let data = Dataset::from_corpus(&corpus, pipeline.featurizer(), &model.labels)?;
    let config = PruneConfig {
        unit: match args.unit {
            UnitArg::Input => Unit::Input,
            UnitArg::Hidden => Unit::Hidden,
        },
        k: args.k,
        fraction: args.fraction,
        bits: args.bits,
        seed: args.seed,
    };
    let (outcome, quantized) = pruning::run(model, &data, &config, args.exec.execution())?;
    let units = outcome.importance.importance.len();
    println!("rows {}, {units} {:?} units, K = {}", data.len(), config.unit, config.k);
    println!("baseline accuracy   {:.1}%", 100.0 * outcome.baseline_accuracy);
    println!(
        "pruned {} of {units}: accuracy {:.1}%",
        outcome.pruned_units.len(),
        100.0 * outcome.pruned_accuracy
    );
    println!(
        "{}-bit: accuracy {:.1}%, agreement with float {:.1}%",
        config.bits,
        100.0 * outcome.quantized_accuracy,
        100.0 * outcome.quantized_agreement
    );
    let ranking = outcome.importance.ranking();
    let top: Vec<String> = ranking
        .iter()
        .rev()
        .take(5)
        .map(|&j| format!("{j} ({:+.4})", outcome.importance.importance[j]))
        .collect();
    println!("most important: {}", top.join(", "));
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&quantized)?)
            .with_context(|| format!("writing {}", path.display()))?;
        println!("saved {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("DESKBOT_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Cmd::Serve(a) => runtime()?.block_on(cmd_serve(a)),
        Cmd::ServeNlu(a) => runtime()?.block_on(cmd_serve_nlu(a)),
        Cmd::RunTask(a) => cmd_run_task(a),
        Cmd::Campaign(a) => cmd_campaign(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Prune(a) => cmd_prune(a),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}
