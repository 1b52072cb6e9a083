//! `qlkplan`: solve ql-k tables, run episodes and batches, serve live
//! sessions and replay traces.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qlkplan::sim::{BatchCell, Driver, EpisodeTrace, Simulator};
use qlkplan::{solve_qlk, tables, Config, Game, QlkTables};
use qlkplan_service::{ServiceConfig, DEFAULT_PLANNER_BUDGET_MS, DEFAULT_TICK_MS};

#[derive(Parser)]
#[command(name = "qlkplan", version, about = "Game-theoretic merge planning with quantal level-k human models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the ql-k tables for a config and cache them by config hash.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Re-solve even when cached tables exist.
        #[arg(long)]
        force: bool,
    },
    /// Run one episode against a simulated ql-k human and write its trace.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planner: PlannerFlags,
        /// True human level (overrides the config).
        #[arg(long)]
        k: Option<usize>,
        /// True human λ (overrides the config).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Run a sweep over planners and human types and write metric reports.
    Batch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planner: PlannerFlags,
        /// Human levels to sweep (default: every solved level).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        /// Human λ values to sweep (default: every solved λ).
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        /// Episodes per cell (overrides the config).
        #[arg(long)]
        reps: Option<usize>,
        /// Start the human uniformly within ± this many metres of the robot.
        #[arg(long)]
        randomize: Option<f64>,
        /// Also write every episode trace.
        #[arg(long)]
        traces: bool,
    },
    /// Start the interaction service for live sessions.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        planner: PlannerFlags,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory with the UI bundle to serve.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TICK_MS)]
        tick_ms: u64,
        #[arg(long, default_value_t = 1)]
        max_sessions: usize,
    },
    /// Check a trace against the dynamics and render it as text or CSV.
    Replay {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for traces and reports (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table cache directory.
    #[arg(long, default_value = ".qlkplan/tables")]
    tables: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PlannerFlags {
    /// Robot driver: ours, blp1 (η₀ = 0) or qlk.
    #[arg(long, value_delimiter = ',')]
    planner: Vec<Driver>,
    /// Information-gain scale η₀.
    #[arg(long)]
    eta0: Option<f64>,
    /// Planner wall-clock budget per decision.
    #[arg(long)]
    budget_ms: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

/// Bad flags or config; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\nRun `qlkplan --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Solve { common, force } => solve(&common, force),
        Cmd::Run { common, planner, k, lambda } => run(&common, &planner, k, lambda),
        Cmd::Batch { common, planner, k, lambda, reps, randomize, traces } => {
            batch(&common, &planner, k, lambda, reps, randomize, traces)
        }
        Cmd::Serve { common, planner, addr, static_dir, tick_ms, max_sessions } => {
            serve(&common, &planner, addr, static_dir, tick_ms, max_sessions)
        }
        Cmd::Replay { trace, format, out } => replay(&trace, format, out.as_deref()),
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p).map_err(|e| usage(e.to_string()))?,
        None => Config::default(),
    };
    cfg.solver.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.scenario.seed = seed;
        cfg.planner.seed = seed;
    }
    Ok(cfg)
}

fn apply_planner_flags(cfg: &mut Config, flags: &PlannerFlags) -> Result<()> {
    if let Some(eta0) = flags.eta0 {
        cfg.planner.eta0 = eta0;
    }
    if let Some(ms) = flags.budget_ms {
        cfg.planner.budget_ms = ms;
    }
    match flags.planner.as_slice() {
        [] => {}
        [one] => cfg.scenario.driver = *one,
        _ => bail!(usage("only `batch` accepts several planners")),
    }
    cfg.planner.validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn table_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("{hash}.qlkt"))
}

fn solve(common: &Common, force: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = &common.tables;
    let hash = cfg.tables_hash();
    let path = table_path(dir, &hash);
    if !force && path.exists() {
        if let Ok(h) = tables::peek(&path) {
            if h.config_hash == hash {
                println!("cache hit: {}", path.display());
                return Ok(());
            }
        }
    }
    let game = Game::new(cfg.game.clone());
    let started = Instant::now();
    let solved = solve_qlk(&game, &cfg.solver)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    tables::save(&solved, &cfg.game.grid, &path)?;
    println!("solved {} states in {:.1} s: {}", game.num_states(), started.elapsed().as_secs_f64(), path.display());
    Ok(())
}

fn load_tables(common: &Common, cfg: &Config) -> Result<(Arc<Game>, Arc<QlkTables>)> {
    let hash = cfg.tables_hash();
    let path = table_path(&common.tables, &hash);
    if !path.exists() {
        let with_config = common.config.as_ref().map(|p| format!(" --config {}", p.display())).unwrap_or_default();
        bail!(
            "no solved tables for this config in {} (hash {}); run `qlkplan solve{}` first",
            common.tables.display(),
            &hash[..12],
            with_config
        );
    }
    let t = tables::load(&path, &hash)?;
    Ok((Arc::new(Game::new(cfg.game.clone())), Arc::new(t)))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(common: &Common, flags: &PlannerFlags, k: Option<usize>, lambda: Option<f64>) -> Result<()> {
    let mut cfg = load_config(common)?;
    apply_planner_flags(&mut cfg, flags)?;
    if let Some(k) = k {
        cfg.scenario.true_k = k;
    }
    if let Some(l) = lambda {
        cfg.scenario.true_lambda = l;
    }
    let (game, tables) = load_tables(common, &cfg)?;
    let sim = Simulator::new(game, tables, cfg.planner.clone())?;
    let trace = sim.run_episode(&cfg.scenario, 0)?;
    let path = out_dir(common)?.join(format!("episode-{}-seed{}.jsonl", cfg.scenario.driver, cfg.scenario.seed));
    trace.save(&path)?;
    eprintln!(
        "{:?} after {} steps{}",
        trace.outcome.outcome,
        trace.outcome.steps,
        trace.outcome.tm.map(|t| format!(", TM {t:.1} s")).unwrap_or_default()
    );
    println!("{}", path.display());
    Ok(())
}

fn batch(
    common: &Common,
    flags: &PlannerFlags,
    ks: Vec<usize>,
    lambdas: Vec<f64>,
    reps: Option<usize>,
    randomize: Option<f64>,
    write_traces: bool,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let drivers = if flags.planner.is_empty() { vec![cfg.scenario.driver] } else { flags.planner.clone() };
    apply_planner_flags(&mut cfg, &PlannerFlags { planner: Vec::new(), ..*flags })?;
    if let Some(r) = reps {
        cfg.scenario.reps = r;
    }
    if randomize.is_some() {
        cfg.scenario.randomize_human_m = randomize;
    }
    let (game, tables) = load_tables(common, &cfg)?;
    let ks = if ks.is_empty() { (1..=tables.solver.k_max).collect() } else { ks };
    let lambdas = if lambdas.is_empty() { tables.solver.lambdas.clone() } else { lambdas };
    let mut cells = Vec::new();
    for &driver in &drivers {
        for &k in &ks {
            for &lambda in &lambdas {
                cells.push(BatchCell { driver, k, lambda });
            }
        }
    }
    let sim = Simulator::new(game, tables, cfg.planner.clone())?;
    let started = Instant::now();
    let (report, traces) = sim.run_batch_traces(&cfg.scenario, &cells)?;
    let dir = out_dir(common)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    std::fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
    std::fs::write(dir.join("inference.csv"), report.inference_csv())?;
    if write_traces {
        let tdir = dir.join("traces");
        std::fs::create_dir_all(&tdir)?;
        for (cell, tr) in cells.iter().zip(&traces) {
            for t in tr {
                t.save(tdir.join(format!("{}-k{}-l{}-ep{}.jsonl", cell.driver, cell.k, cell.lambda, t.header.episode)))?;
            }
        }
    }
    println!("planner  k  lambda   RS     TM (s)  collisions  deadlocks  timeouts");
    for c in &report.cells {
        println!(
            "{:<7} {:>2} {:>7} {:>5.2} {:>10} {:>11} {:>10} {:>9}",
            c.driver.to_string(),
            c.k,
            c.lambda,
            c.rs,
            c.tm_mean.map(|t| format!("{t:.2}")).unwrap_or_else(|| "-".into()),
            c.collisions,
            c.deadlocks,
            c.timeouts
        );
    }
    eprintln!("{} episodes in {:.1} s; reports in {}", cells.len() * cfg.scenario.reps, started.elapsed().as_secs_f64(), dir.display());
    Ok(())
}

fn serve(
    common: &Common,
    flags: &PlannerFlags,
    addr: SocketAddr,
    static_dir: Option<PathBuf>,
    tick_ms: u64,
    max_sessions: usize,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.planner.budget_ms = DEFAULT_PLANNER_BUDGET_MS;
    apply_planner_flags(&mut cfg, flags)?;
    if tick_ms == 0 || max_sessions == 0 {
        bail!(usage("--tick-ms and --max-sessions must be positive"));
    }
    let (game, tables) = load_tables(common, &cfg)?;
    let sim = Simulator::new(game, tables, cfg.planner.clone())?;
    let mut svc = ServiceConfig::new(sim);
    svc.scenario = cfg.scenario.clone();
    svc.tick_ms = tick_ms;
    svc.static_dir = static_dir;
    svc.trace_dir = Some(out_dir(common)?);
    svc.max_sessions = max_sessions;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        qlkplan_service::serve(svc, listener).await?;
        Ok(())
    })
}

fn replay(path: &Path, format: Format, out: Option<&Path>) -> Result<()> {
    let trace = EpisodeTrace::load(path)?;
    let game = Game::new(trace.header.game.clone());
    trace.replay(&game).with_context(|| format!("{} does not replay", path.display()))?;
    let text = match format {
        Format::Text => trace.to_text(),
        Format::Csv => trace.to_csv(),
    };
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
