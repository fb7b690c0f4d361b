mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsrd_core::evaluation::{
    evaluate_link, evaluate_node, EvalOptions, MetricReport, Setting, Strategy,
};
use dsrd_core::graph::{
    chronological_split, inductive_split, load_dataset, write_dataset, EventStream, SplitPlan,
};
use dsrd_core::network::{Model, ModelConfig};
use dsrd_core::retentive::decay_curves_csv;
use dsrd_core::synthgen::{generate, scaling_csv, scaling_suite, Pattern, SynthSpec};
use dsrd_core::trainer::{fit_observed, history_jsonl, TrainConfig};
use dsrd_core::{checkpoint, Error};
use rayon::prelude::*;

use manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "dsrd",
    version,
    about = "Dual-scale retentive dynamics on event streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event stream.
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint chronologically; prints a JSON report.
    Eval(EvalArgs),
    /// Time training passes over growing synthetic streams; prints CSV.
    Bench(BenchArgs),
    /// Write the learned decay curves of a checkpoint as CSV.
    ExportDecays(DecayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Periodic,
    Bursty,
    Chain,
    Uniform,
}

impl From<PatternArg> for Pattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::Periodic => Pattern::Periodic,
            PatternArg::Bursty => Pattern::Bursty,
            PatternArg::Chain => Pattern::Chain,
            PatternArg::Uniform => Pattern::Uniform,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SettingArg {
    Trans,
    Ind,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Trans => Setting::Transductive,
            SettingArg::Ind => Setting::Inductive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NssArg {
    Rnd,
    Hist,
    Ind,
}

impl From<NssArg> for Strategy {
    fn from(s: NssArg) -> Self {
        match s {
            NssArg::Rnd => Strategy::Random,
            NssArg::Hist => Strategy::Historical,
            NssArg::Ind => Strategy::Inductive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SpanArg {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Link,
    Node,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = PatternArg::Periodic)]
    pattern: PatternArg,
    /// Defaults to 3 for `chain` and 200 otherwise.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, default_value_t = 5000)]
    events: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    bipartite: bool,
    #[arg(long, default_value_t = 0)]
    edge_dim: usize,
    #[arg(long, default_value_t = 0)]
    node_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

/// How the stream is divided; shared by `train` and `eval`.
#[derive(Args, Clone)]
struct SplitArgs {
    #[arg(long, value_enum, default_value_t = SettingArg::Trans)]
    setting: SettingArg,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.15)]
    val_frac: f64,
    /// Fraction of nodes withheld from training in the inductive setting.
    #[arg(long, default_value_t = 0.1)]
    new_node_frac: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl SplitArgs {
    fn plan(&self, stream: &EventStream) -> Result<SplitPlan, Error> {
        match self.setting {
            SettingArg::Trans => chronological_split(stream, self.train_frac, self.val_frac),
            SettingArg::Ind => inductive_split(
                stream,
                self.train_frac,
                self.val_frac,
                self.new_node_frac,
                self.split_seed,
            ),
        }
    }

    fn record(&self, m: &mut RunManifest) {
        m.setting(
            "setting",
            if self.setting == SettingArg::Trans {
                "trans"
            } else {
                "ind"
            },
        );
        m.setting("train_frac", self.train_frac);
        m.setting("val_frac", self.val_frac);
        m.setting("new_node_frac", self.new_node_frac);
        m.setting("split_seed", self.split_seed);
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `key = value` file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    no_decay: bool,
    #[arg(long)]
    no_diffusion: bool,
    #[arg(long)]
    no_state: bool,
    #[arg(long)]
    no_block: bool,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// One or more strategies; several run as independent sweeps.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "rnd")]
    nss: Vec<NssArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SpanArg::Test)]
    span: SpanArg,
    #[arg(long, value_enum, default_value_t = TaskArg::Link)]
    task: TaskArg,
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
    #[command(flatten)]
    split: SplitArgs,
    /// Also write the report here, with a manifest beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Ascending event counts, e.g. `1e4,3e4,1e5`.
    #[arg(long, value_delimiter = ',', default_value = "1e4,1e5", value_parser = parse_count)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1000)]
    nodes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    time_dim: usize,
    #[arg(long, default_value_t = 5)]
    neighbors: usize,
    #[arg(long, default_value_t = 200)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecayArgs {
    /// Omit to export the curves of a freshly initialized default model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    max_steps: usize,
    #[arg(long, default_value_t = 100.0)]
    dt_max: f64,
    #[arg(long, default_value_t = 51)]
    dt_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_count(s: &str) -> Result<usize, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("not a number: {s:?}"))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v <= 1e12) {
        return Err(format!("not a positive whole count: {s:?}"));
    }
    Ok(v as usize)
}

/// Failures after argument parsing: `Usage` exits 2, everything else 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownFlag(_) | Error::InvalidSplit(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(f) = configure_threads() {
        return report(f);
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::ExportDecays(a) => export_decays(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(m) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Failure::Runtime(m) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

/// `DSRD_THREADS` caps the worker pool used by parallel sweeps.
fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var("DSRD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "DSRD_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn synth(a: SynthArgs) -> CmdResult {
    let pattern: Pattern = a.pattern.into();
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        pattern,
        num_nodes: a
            .nodes
            .unwrap_or(if pattern == Pattern::Chain { 3 } else { 200 }),
        num_events: a.events,
        pairs: a.pairs.unwrap_or(defaults.pairs),
        period: a.period.unwrap_or(defaults.period),
        jitter: a.jitter.unwrap_or(defaults.jitter),
        bipartite: a.bipartite,
        seed: a.seed,
        node_dim: a.node_dim,
        edge_dim: a.edge_dim,
        ..defaults
    };
    let stream = generate(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    ensure_dir(&a.out)?;
    let written = write_dataset(&stream, &a.out)?;
    let mut m = RunManifest::new("synth", a.seed);
    m.output_dir = Some(a.out.display().to_string());
    m.setting("spec", &spec);
    for p in &written {
        m.output(p)?;
    }
    let hash = m.write(&a.out)?;
    eprintln!(
        "wrote {} events over {} nodes to {} (manifest {hash})",
        stream.len(),
        stream.num_nodes(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    let overrides = [
        ("max_epochs", a.max_epochs.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("patience", a.patience.map(|v| v.to_string())),
        (
            "task",
            a.task.map(|t| {
                if matches!(t, TaskArg::Link) {
                    "link_prediction"
                } else {
                    "node_classification"
                }
                .to_string()
            }),
        ),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    // Independent flags compose; each one switches its component off.
    for (flag, on) in [
        ("no_decay", a.no_decay),
        ("no_diffusion", a.no_diffusion),
        ("no_state", a.no_state),
        ("no_block", a.no_block),
    ] {
        if on {
            cfg.ablation.set(flag, true)?;
        }
    }
    cfg.validate()?;
    let stream = load_dataset(&a.data)?;
    let plan = a.split.plan(&stream)?;
    let model = Model::new(cfg.model_config(&stream))?;
    let result = fit_observed(&stream, &plan, model, &cfg, |r| {
        eprintln!(
            "epoch {} loss {:.5} val_ap {:.5} val_auc {:.5} ({} ms)",
            r.epoch, r.train_loss, r.val_ap, r.val_auc, r.wall_ms
        );
    })?;

    ensure_dir(&a.out)?;
    let ck = a.out.join("checkpoint.json");
    checkpoint::save(&result.best, &ck)?;
    let hist = a.out.join("history.jsonl");
    std::fs::write(&hist, history_jsonl(&result.history)?)?;

    let mut m = RunManifest::new("train", cfg.seed);
    m.config_path = a.config.as_ref().map(|p| p.display().to_string());
    m.data_paths = vec![a.data.display().to_string()];
    m.output_dir = Some(a.out.display().to_string());
    m.setting("train_config", &cfg);
    a.split.record(&mut m);
    m.input(&a.data)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    m.output(&ck)?;
    let hash = m.write(&a.out)?;
    let best = result.best_epoch.map(|e| result.history[e - 1].val_ap);
    let summary = serde_json::json!({
        "checkpoint": ck.display().to_string(),
        "best_epoch": result.best_epoch,
        "best_val_ap": best,
        "epochs": result.history.len(),
        "manifest_hash": hash,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let model = checkpoint::load(&a.checkpoint)?;
    let stream = load_dataset(&a.data)?;
    let plan = a.split.plan(&stream)?;
    let range = match a.span {
        SpanArg::Val => plan.val_range(),
        SpanArg::Test => plan.test_range(stream.len()),
    };
    let reports: Vec<MetricReport> = match a.task {
        TaskArg::Node => vec![evaluate_node(
            &model,
            &stream,
            &plan,
            range,
            a.batch_size,
            a.seed,
        )?],
        TaskArg::Link => a
            .nss
            .par_iter()
            .map(|&nss| {
                let opts = EvalOptions {
                    setting: a.split.setting.into(),
                    strategy: nss.into(),
                    batch_size: a.batch_size,
                    seed: a.seed,
                };
                evaluate_link(&model, &stream, &plan, range.clone(), &opts)
            })
            .collect::<Result<_, _>>()?,
    };
    let text = if reports.len() == 1 {
        reports[0].to_json()?
    } else {
        serde_json::to_string_pretty(&reports).map_err(Error::from)?
    } + "\n";
    print!("{text}");
    if let Some(out) = &a.out {
        let dir = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        ensure_dir(dir)?;
        std::fs::write(out, &text)?;
        let mut m = RunManifest::new("eval", a.seed);
        m.data_paths = vec![a.data.display().to_string()];
        m.output_dir = Some(dir.display().to_string());
        a.split.record(&mut m);
        m.input(&a.checkpoint)?;
        m.input(&a.data)?;
        m.output(out)?;
        m.write(dir)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let config = ModelConfig {
        dim: a.dim,
        heads: a.heads,
        layers: a.layers,
        time_dim: a.time_dim,
        neighbors: a.neighbors,
        seed: a.seed,
        ..ModelConfig::default()
    };
    config.validate()?;
    let rows = scaling_suite(&a.sizes, a.nodes, &config, a.batch_size, a.repeats, a.seed).map_err(
        |e| match e {
            Error::InvalidInput(m) => Failure::Usage(m),
            e => e.into(),
        },
    )?;
    let csv = scaling_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn export_decays(a: DecayArgs) -> CmdResult {
    let model = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => Model::new(ModelConfig::default())?,
    };
    if a.dt_points < 2 || !(a.dt_max > 0.0) {
        return Err(Failure::Usage(
            "need --dt-points ≥ 2 and --dt-max > 0".into(),
        ));
    }
    let grid: Vec<f64> = (0..a.dt_points)
        .map(|i| a.dt_max * i as f64 / (a.dt_points - 1) as f64)
        .collect();
    let cfg = model.config();
    let csv = decay_curves_csv(
        &model.all_decay_params(),
        cfg.heads,
        a.max_steps,
        &grid,
        cfg.layers,
    );
    match &a.out {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
