//! `phrc` subcommands. Exit codes: 0 success, 2 invalid input, 1 runtime
//! failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phrc_core::datagen::{gen_multimodal_with, gen_phrc_with, MultimodalParams, PhrcParams};
use phrc_core::derive_seed;
use phrc_core::intent::{train_with, BranchModel, ModelConfig, TrainOptions};
use phrc_core::sim::{run_episode, EpisodeOptions, KappaMode, PhrcMetrics, Scenario};
use phrc_core::trajectory::{Branch, CorpusManifest, Trajectory};
use serde_json::json;

use crate::bridge::{self, BridgeOptions};
use crate::checkpoint::{load_model, save_model, write_report};
use crate::config::{controller_config, read_json, scenario, TrainConfig};
use crate::corpus::{read_corpus, write_corpus};
use crate::episode_log::{read_log, write_log};
use crate::eval::{evaluate, windows_of};
use crate::predictors::PredictorPair;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "phrc", version, about = "Intent estimation and role allocation for physical human-robot collaboration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic training corpus.
    Datagen(DatagenArgs),
    /// Train one branch model on a corpus.
    Train(TrainArgs),
    /// Print most-likely, best-of-N and constant-velocity ADE/FDE.
    Eval(EvalArgs),
    /// Run closed-loop episodes and write episode logs.
    Simulate(SimulateArgs),
    /// Serve the realtime sandbox over websocket.
    Serve(ServeArgs),
    /// Recompute collaboration metrics from episode logs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    /// Bifurcating reaches (robot branch).
    Multimodal,
    /// Free and obstacle-avoidance demonstrations (both branches).
    Phrc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Robot,
    Human,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Robot => Branch::Robot,
            BranchArg::Human => Branch::Human,
        }
    }
}

/// Half-open trajectory range `A:B` (either end may be omitted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Select {
    pub start: usize,
    pub end: Option<usize>,
}

impl std::str::FromStr for Select {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s.split_once(':').ok_or("expected A:B")?;
        let num = |x: &str| x.parse::<usize>().map_err(|_| format!("`{x}` is not an index"));
        let start = if a.is_empty() { 0 } else { num(a)? };
        let end = if b.is_empty() { None } else { Some(num(b)?) };
        if end.is_some_and(|e| e < start) {
            return Err("range end precedes start".into());
        }
        Ok(Self { start, end })
    }
}

impl Select {
    fn apply(self, trajs: Vec<Trajectory>) -> Result<Vec<Trajectory>> {
        let end = self.end.unwrap_or(trajs.len());
        if end > trajs.len() {
            return Err(Error::Usage(format!("--select {}:{end} exceeds {} trajectories", self.start, trajs.len())));
        }
        Ok(trajs.into_iter().take(end).skip(self.start).collect())
    }
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long, value_enum, default_value = "multimodal")]
    pub kind: CorpusKind,
    /// Number of multimodal trajectories.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Number of free-motion demonstrations (phrc).
    #[arg(long, default_value_t = 40)]
    pub n_free: usize,
    /// Number of obstacle-avoidance demonstrations (phrc).
    #[arg(long, default_value_t = 60)]
    pub n_avoid: usize,
    /// Sample period in seconds [default: 0.05 multimodal, 0.02 phrc].
    #[arg(long)]
    pub dt: Option<f64>,
    /// Generator parameters as JSON (fields of the kind's parameter set).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub branch: BranchArg,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Network, window and optimizer settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Train on trajectories `A:B` of the corpus only.
    #[arg(long)]
    pub select: Option<Select>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Candidates for best-of-N.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    /// Step between evaluation windows.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Evaluate trajectories `A:B` of the corpus only.
    #[arg(long)]
    pub select: Option<Select>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print CSV instead of a table.
    #[arg(long)]
    pub csv: bool,
    /// Also write `eval.csv` into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Preset (`free`, `standard`, `standard-<seed>`) or a scenario JSON file.
    /// With `standard`, episode i uses the obstacle layout of seed + i.
    #[arg(long, default_value = "standard")]
    pub scenario: String,
    #[arg(long, default_value_t = 1)]
    pub episodes: u64,
    /// Robot checkpoint [default: constant velocity].
    #[arg(long)]
    pub robot: Option<PathBuf>,
    /// Human checkpoint [default: constant velocity].
    #[arg(long)]
    pub human: Option<PathBuf>,
    /// `adaptive` or a fixed value in (0, 1).
    #[arg(long, default_value = "adaptive", value_parser = parse_kappa)]
    pub kappa: KappaMode,
    /// Controller configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Print the summary as CSV.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long)]
    pub robot: Option<PathBuf>,
    #[arg(long)]
    pub human: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of static assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Scenario each session starts in.
    #[arg(long, default_value = "standard")]
    pub scenario: String,
    /// Seconds without client messages before a session is closed.
    #[arg(long, default_value_t = 10.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Episode logs written by `simulate`.
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    #[arg(long)]
    pub csv: bool,
}

fn parse_kappa(s: &str) -> std::result::Result<KappaMode, String> {
    if s == "adaptive" {
        return Ok(KappaMode::Adaptive);
    }
    match s.parse::<f64>() {
        Ok(k) if k > 0.0 && k < 1.0 => Ok(KappaMode::Fixed(k)),
        _ => Err(format!("expected `adaptive` or a number in (0, 1), got `{s}`")),
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Datagen(a) => datagen(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Serve(a) => serve(&a),
        Command::Report(a) => report(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn datagen(a: &DatagenArgs) -> Result<()> {
    create_dir(&a.out)?;
    match a.kind {
        CorpusKind::Multimodal => {
            let params: MultimodalParams = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let dt = a.dt.unwrap_or(0.05);
            let trajs = gen_multimodal_with(a.n, dt, a.seed, &params)?;
            let manifest = CorpusManifest::describe(&trajs, Branch::Robot, dt, a.seed)?;
            let meta = json!({ "kind": "multimodal", "n": a.n, "generator": params });
            let path = a.out.join("multimodal.csv");
            write_corpus(&path, &manifest, &trajs, Some(&meta))?;
            print(&format!("wrote {} trajectories to {}\n", trajs.len(), path.display()))
        }
        CorpusKind::Phrc => {
            let params: PhrcParams = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let dt = a.dt.unwrap_or(0.02);
            let trajs = gen_phrc_with(a.n_free, a.n_avoid, dt, a.seed, &params)?;
            let meta = json!({
                "kind": "phrc",
                "n_free": a.n_free,
                "n_avoid": a.n_avoid,
                "generator": params,
            });
            let mut summary = String::new();
            for (branch, name) in [(Branch::Robot, "phrc_robot.csv"), (Branch::Human, "phrc_human.csv")] {
                let part: Vec<Trajectory> = trajs.iter().filter(|t| t.branch() == branch).cloned().collect();
                let manifest = CorpusManifest::describe(&part, branch, dt, a.seed)?;
                let path = a.out.join(name);
                write_corpus(&path, &manifest, &part, Some(&meta))?;
                writeln!(summary, "wrote {} trajectories to {}", part.len(), path.display()).unwrap();
            }
            print(&summary)
        }
    }
}

fn load_corpus(path: &Path, branch: Branch, select: Option<Select>) -> Result<(f64, Vec<Trajectory>)> {
    let (manifest, trajs) = read_corpus(path)?;
    let trajs = match select {
        Some(s) => s.apply(trajs)?,
        None => trajs,
    };
    // Human-branch corpora carry force; robot models simply ignore it.
    let trajs = trajs
        .into_iter()
        .map(|t| match branch {
            Branch::Robot => t.into_robot(),
            Branch::Human => t.into_human(),
        })
        .collect();
    Ok((manifest.dt, trajs))
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg: TrainConfig = a.config.as_deref().map(read_json).transpose()?.unwrap_or_default();
    let branch = Branch::from(a.branch);
    let (dt, trajs) = load_corpus(&a.corpus, branch, a.select)?;
    let windows = windows_of(&trajs, cfg.obs_len, cfg.fut_len, cfg.stride)?;
    let model_cfg = ModelConfig {
        branch,
        net: cfg.net,
        obs_len: cfg.obs_len,
        fut_len: cfg.fut_len,
    };
    let mut model = BranchModel::new(model_cfg, a.seed)?;
    let opts = TrainOptions {
        epochs: a.epochs.unwrap_or(cfg.train.epochs),
        seed: derive_seed(a.seed, 1),
        ..cfg.train
    };
    let report = train_with(&mut model, &windows, &opts, |e| {
        eprintln!("epoch {:>3}  loss {:.5}  kl {:.5}  recon {:.5}", e.epoch, e.loss, e.kl, e.recon);
    })?;
    create_dir(&a.out)?;
    let name = match branch {
        Branch::Robot => "robot",
        Branch::Human => "human",
    };
    let ckpt = a.out.join(format!("{name}.ckpt"));
    save_model(&ckpt, &model, Some(dt))?;
    write_report(&a.out.join(format!("{name}_report.csv")), &report)?;
    print(&format!(
        "trained {name} model on {} windows; checkpoint {}\n",
        windows.len(),
        ckpt.display()
    ))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let cfg = *ckpt.model.config();
    let (dt, trajs) = load_corpus(&a.corpus, cfg.branch, a.select)?;
    if let Some(model_dt) = ckpt.dt {
        if (model_dt - dt).abs() > 1e-12 {
            eprintln!("warning: model trained at dt {model_dt}, corpus sampled at dt {dt}");
        }
    }
    if a.stride == 0 {
        return Err(Error::Usage("--stride must be >= 1".into()));
    }
    let windows = windows_of(&trajs, cfg.obs_len, cfg.fut_len, a.stride)?;
    let summary = evaluate(&ckpt.model, &windows, a.n, a.seed)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let path = dir.join("eval.csv");
        fs::write(&path, summary.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    if a.csv {
        print(&summary.to_csv())
    } else {
        let mut text = summary.to_table();
        writeln!(
            text,
            "most-likely vs constant velocity: {:.1}% lower ADE",
            100.0 * summary.improvement_over_cv()
        )
        .unwrap();
        writeln!(
            text,
            "best-of-{} <= most-likely on {:.1}% of windows",
            summary.n,
            100.0 * summary.best_not_worse
        )
        .unwrap();
        print(&text)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

const SUMMARY_HEADER: &str = "log,theta_deg,iasst_n,mu,work_j,included_ticks,min_clearance_m,failure";

fn summary_row(name: &str, m: &PhrcMetrics, clearance: Option<f64>, failure: Option<&str>) -> String {
    format!(
        "{name},{},{},{},{},{},{},{}",
        fmt_opt(m.theta),
        fmt_opt(m.iasst),
        fmt_opt(m.mu),
        m.work,
        m.included_ticks,
        fmt_opt(clearance),
        failure.unwrap_or("")
    )
}

fn summary_line(name: &str, m: &PhrcMetrics, clearance: Option<f64>, failure: Option<&str>) -> String {
    let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
    let mut s = format!(
        "{name}: theta {} deg  iasst {} N  mu {}  W {:.4} J  ({} guided ticks)  clearance {} m",
        f(m.theta, 1),
        f(m.iasst, 3),
        f(m.mu, 3),
        m.work,
        m.included_ticks,
        f(clearance, 4)
    );
    if let Some(msg) = failure {
        write!(s, "  FAILED: {msg}").unwrap();
    }
    s
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let config = controller_config(a.config.as_deref())?;
    let base = scenario(&a.scenario)?;
    let pair = PredictorPair::load(a.robot.as_deref(), a.human.as_deref())?;
    let options = EpisodeOptions {
        kappa_mode: a.kappa,
        window_stride: pair.window_stride(&config)?,
        record_predictions: false,
    };
    create_dir(&a.out)?;
    let mut out = String::new();
    if a.csv {
        writeln!(out, "{SUMMARY_HEADER}").unwrap();
    }
    let mut failed = 0;
    for i in 0..a.episodes {
        let seed = a.seed.wrapping_add(i);
        let scn = if a.scenario == "standard" { Scenario::standard(seed) } else { base.clone() };
        let log = run_episode(&scn, &config, &*pair.robot, &*pair.human, &options, seed)?;
        let path = a.out.join(format!("episode_{seed}.csv"));
        write_log(&path, &log)?;
        let h = &log.header;
        let name = path.display().to_string();
        if a.csv {
            writeln!(out, "{}", summary_row(&name, &h.metrics, h.min_clearance, h.failure.as_deref())).unwrap();
        } else {
            writeln!(out, "{}", summary_line(&name, &h.metrics, h.min_clearance, h.failure.as_deref())).unwrap();
        }
        failed += usize::from(h.failure.is_some());
    }
    print(&out)?;
    if failed > 0 {
        return Err(runtime(format!("{failed} episode(s) ended early")));
    }
    Ok(())
}

fn runtime(msg: String) -> Error {
    Error::Runtime(msg)
}

fn serve(a: &ServeArgs) -> Result<()> {
    let config = controller_config(a.config.as_deref())?;
    let start = scenario(&a.scenario)?;
    let pair = PredictorPair::load(a.robot.as_deref(), a.human.as_deref())?;
    if !(a.timeout > 0.0) {
        return Err(Error::Usage("--timeout must be > 0".into()));
    }
    if let Some(dir) = &a.static_dir {
        if !dir.is_dir() {
            return Err(Error::Usage(format!("static directory {} does not exist", dir.display())));
        }
    }
    let opts = BridgeOptions {
        window_stride: pair.window_stride(&config)?,
        predictors: pair,
        config,
        scenario: start,
        static_dir: a.static_dir.clone(),
        liveness: Duration::from_secs_f64(a.timeout),
        seed: a.seed,
        ..BridgeOptions::default()
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| runtime(format!("cannot start runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .map_err(|e| runtime(format!("cannot bind {}: {e}", a.bind)))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| runtime(e.to_string()))?);
        bridge::serve(listener, opts, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut out = String::new();
    if a.csv {
        writeln!(out, "{SUMMARY_HEADER}").unwrap();
    }
    let mut mismatched = Vec::new();
    for path in &a.logs {
        let saved = read_log(path)?;
        let m = saved.metrics(true);
        let name = path.display().to_string();
        let clearance = saved.min_clearance();
        let failure = saved.header.failure.as_deref();
        if a.csv {
            writeln!(out, "{}", summary_row(&name, &m, clearance, failure)).unwrap();
        } else {
            writeln!(out, "{}", summary_line(&name, &m, clearance, failure)).unwrap();
        }
        if m != saved.header.metrics || clearance != saved.header.min_clearance {
            mismatched.push(name);
        }
    }
    print(&out)?;
    if !mismatched.is_empty() {
        return Err(runtime(format!(
            "recomputed metrics differ from the log header in: {}",
            mismatched.join(", ")
        )));
    }
    Ok(())
}
