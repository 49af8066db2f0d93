use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gridwall_console::{ServeConfig, DEFAULT_PORT};
use gridwall_core::arena::{
    play_match, run_arena, Agent, ArenaAgentRecord, ArenaConfig, ArenaState, EloTable, GapSampler, MatchResult, Winner,
};
use gridwall_core::checkpoint::{list_checkpoints, load_checkpoint, save_checkpoint, EXTENSION};
use gridwall_core::env::{Driver, EnvConfig};
use gridwall_core::policy::Policy;
use gridwall_core::trainer::{pretrain_backbone, self_play, OpponentPool, PoolEntry, TrainConfig, TrainLog};

mod config;

use config::GridwallConfig;

const ARENA_FILE: &str = "arena.json";
const POOL_FILE: &str = "pool.json";

#[derive(Parser)]
#[command(name = "gridwall", version, about = "Two-car race strategy: training, arena and pit-wall console")]
struct Cli {
    /// Configuration file (see `gridwall config init`); defaults apply when absent.
    #[arg(long, global = true, env = "GRIDWALL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Configuration file helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Train the single-car backbone.
    Pretrain {
        #[arg(long)]
        seed: Option<u64>,
        /// Environment-step budget, overriding the config.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value = "agents/backbone.gwc")]
        out: PathBuf,
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
    },
    /// Self-play rounds training the interaction module against a pool.
    Selfplay {
        #[arg(long)]
        iters: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "agents/backbone.gwc")]
        backbone: PathBuf,
        /// Where each iteration's best agent is written.
        #[arg(long, default_value = "agents")]
        agents: PathBuf,
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
    },
    /// Round-robin Elo arena over every checkpoint in a directory.
    Arena {
        #[arg(long, default_value = "agents")]
        agents: PathBuf,
        #[arg(long, default_value_t = 100)]
        rounds: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Starting-gap magnitudes, cycled through pairings.
        #[arg(long = "gap", default_values_t = [0.5])]
        gaps: Vec<f64>,
        /// Stop once no rating moves more than this over a round.
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        /// Directory for match traces; defaults to `<agents>/traces`.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// One deterministic race between two agents (ids in the agents directory or checkpoint paths).
    Match {
        a: String,
        b: String,
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        gap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "agents")]
        agents: PathBuf,
    },
    /// Print the persisted leaderboard.
    Rank {
        #[arg(long, default_value = "agents")]
        agents: PathBuf,
    },
    /// Serve the HTTP/WebSocket console.
    Serve {
        #[arg(long, env = "GRIDWALL_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, env = "GRIDWALL_AGENTS", default_value = "agents")]
        agents: PathBuf,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Write the default configuration.
    Init {
        #[arg(default_value = "gridwall.json")]
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print the effective configuration.
    Show,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .with_target(false)
        .init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => GridwallConfig::load(path)?,
        None => GridwallConfig::default(),
    };
    match cli.command {
        Command::Config { action } => config_cmd(action, &cfg),
        Command::Pretrain { seed, steps, out, log } => pretrain(cfg, seed, steps, &out, &log),
        Command::Selfplay { iters, seed, backbone, agents, log } => selfplay(cfg, iters, seed, &backbone, &agents, &log),
        Command::Arena { agents, rounds, seed, gaps, epsilon, traces } => {
            let traces = traces.unwrap_or_else(|| agents.join("traces"));
            arena(&cfg, &agents, ArenaConfig { rounds, epsilon, gaps: GapSampler::Fixed(gaps), seed }, &traces)
        }
        Command::Match { a, b, gap, seed, trace, agents } => match_cmd(&cfg, &agents, &a, &b, gap, seed, trace.as_deref()),
        Command::Rank { agents } => rank(&agents),
        Command::Serve { port, agents } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(gridwall_console::serve(ServeConfig::new(port, agents, cfg.track)))?;
            Ok(())
        }
    }
}

fn config_cmd(action: ConfigAction, cfg: &GridwallConfig) -> Result<()> {
    match action {
        ConfigAction::Init { path, force } => {
            if path.exists() && !force {
                bail!("{} exists; pass --force to overwrite", path.display());
            }
            std::fs::write(&path, GridwallConfig::default().to_json())
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        ConfigAction::Show => print!("{}", cfg.to_json()),
    }
    Ok(())
}

fn pretrain(cfg: GridwallConfig, seed: Option<u64>, steps: Option<u64>, out: &Path, log: &Path) -> Result<()> {
    let train = TrainConfig {
        seed: seed.unwrap_or(cfg.train.seed),
        pretrain_steps: steps.unwrap_or(cfg.train.pretrain_steps),
        ..cfg.train
    };
    let mut log = TrainLog::append_to(log).with_context(|| format!("opening {}", log.display()))?;
    let started = std::time::Instant::now();
    let outcome = pretrain_backbone(&train, &cfg.track, &mut log)?;
    save_checkpoint(&outcome.policy, out).with_context(|| format!("writing {}", out.display()))?;
    let best = outcome.best;
    println!(
        "backbone: race time {:.3} s ({:.2} min), compound rule {}, return {:.3}, best at step {} of {} ({} episodes) in {:.0} s",
        best.race_time,
        best.race_time / 60.0,
        if best.b_cpd { "met" } else { "broken" },
        best.ret,
        best.step,
        outcome.steps,
        outcome.episodes,
        started.elapsed().as_secs_f64()
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct PoolRecord {
    id: String,
    path: Option<String>,
    elo: Option<f64>,
}

fn selfplay(cfg: GridwallConfig, iters: Option<u32>, seed: Option<u64>, backbone: &Path, agents: &Path, log: &Path) -> Result<()> {
    let policy = load_checkpoint(backbone, &cfg.track).with_context(|| format!("loading {}", backbone.display()))?;
    if !policy.backbone_frozen {
        bail!("{} is not a frozen backbone; run `gridwall pretrain` first", backbone.display());
    }
    let seed = seed.unwrap_or(cfg.train.seed);
    let iterations = iters.unwrap_or(cfg.train.iterations);
    let train = TrainConfig { seed, iterations: 1, ..cfg.train };
    std::fs::create_dir_all(agents)?;
    let mut log = TrainLog::append_to(log).with_context(|| format!("opening {}", log.display()))?;
    let mut pool = OpponentPool::with_backbone(&policy);
    let mut paths = vec![Some(backbone.display().to_string())];
    let mut current = policy;
    for _ in 0..iterations {
        let it = pool.iteration;
        let started = std::time::Instant::now();
        let noted = log.notes.len();
        let out = self_play(&current, pool, &train, &mut log)?;
        for note in &log.notes[noted..] {
            eprintln!("note: {note}");
        }
        let r = &out.reports[0];
        pool = out.pool;
        let entry = pool.entries.last().expect("appended").clone();
        let mut best = entry.policy.as_ref().clone();
        let name = format!("selfplay-s{seed}-it{it}");
        best.meta.name = name.clone();
        let path = agents.join(format!("{name}.{EXTENSION}"));
        save_checkpoint(&best, &path)?;
        println!(
            "iteration {it}: best {} elo {:.1}, score vs pool {:.3}, win rate vs backbone {:.3}, {} snapshots{} in {:.0} s -> {}",
            r.best_id,
            r.best_elo,
            r.score_vs_pool,
            r.win_rate_vs_backbone,
            r.snapshots,
            if r.diverged { ", stopped early on divergence" } else { "" },
            started.elapsed().as_secs_f64(),
            path.display()
        );
        paths.push(Some(path.display().to_string()));
        current = best;
    }
    let records: Vec<PoolRecord> = pool
        .entries
        .iter()
        .zip(&paths)
        .map(|(e, p): (&PoolEntry, _)| PoolRecord { id: e.id.clone(), path: p.clone(), elo: e.elo })
        .collect();
    let pool_path = agents.join(POOL_FILE);
    std::fs::write(&pool_path, serde_json::to_string_pretty(&records)?)?;
    println!("pool of {} written to {}", records.len(), pool_path.display());
    Ok(())
}

/// Resolves an agent given as a checkpoint path or an id in `agents`.
fn resolve(agents: &Path, name: &str) -> PathBuf {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        direct
    } else {
        agents.join(format!("{name}.{EXTENSION}"))
    }
}

fn load_agent(cfg: &GridwallConfig, agents: &Path, name: &str) -> Result<(String, Policy)> {
    let path = resolve(agents, name);
    let policy = load_checkpoint(&path, &cfg.track).with_context(|| format!("loading agent '{name}' from {}", path.display()))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| name.to_string());
    Ok((id, policy))
}

fn describe(m: &MatchResult) -> String {
    let verdict = match m.winner {
        Winner::A => format!("{} wins", m.agent_a),
        Winner::B => format!("{} wins", m.agent_b),
        Winner::Draw => "draw".to_string(),
    };
    format!(
        "{verdict}: final gap {:+.3} s, race times {:.3} / {:.3} s, compound rule {} / {}",
        m.final_gap, m.race_time_a, m.race_time_b, m.compound_rule_a, m.compound_rule_b
    )
}

fn match_cmd(cfg: &GridwallConfig, agents: &Path, a: &str, b: &str, gap: f64, seed: u64, trace: Option<&Path>) -> Result<()> {
    let env = Arc::new(EnvConfig::new(cfg.track.clone()));
    let hash = cfg.track.hash();
    let (id_a, pa) = load_agent(cfg, agents, a)?;
    let (id_b, pb) = load_agent(cfg, agents, b)?;
    let agent_a = Agent::new(id_a, Arc::new(pa) as Arc<dyn Driver>, hash.clone());
    let agent_b = Agent::new(id_b, Arc::new(pb) as Arc<dyn Driver>, hash);
    let m = play_match(&agent_a, &agent_b, &env, seed, gap)?;
    println!("{}", describe(&m));
    if let Some(path) = trace {
        std::fs::write(path, m.trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        println!("trace written to {}", path.display());
    }
    Ok(())
}

fn arena(cfg: &GridwallConfig, dir: &Path, arena_cfg: ArenaConfig, traces: &Path) -> Result<()> {
    let env = Arc::new(EnvConfig::new(cfg.track.clone()));
    let mut agents = Vec::new();
    let mut records = Vec::new();
    for (id, path) in list_checkpoints(dir).with_context(|| format!("reading {}", dir.display()))? {
        // Checkpoints for another track still take part, and forfeit.
        let bytes = std::fs::read(&path)?;
        let policy = match gridwall_core::checkpoint::decode(&bytes, None) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let hash = policy.track.hash();
        agents.push(Agent::new(id.clone(), Arc::new(policy) as Arc<dyn Driver>, hash));
        records.push(ArenaAgentRecord { id, path: Some(path.display().to_string()) });
    }
    let state_path = dir.join(ARENA_FILE);
    let (table, mut seeds) = if state_path.exists() {
        let s = ArenaState::load(&state_path)?;
        (Some(s.table), s.seeds)
    } else {
        (None, Vec::new())
    };
    let previous_rounds = table.as_ref().map_or(0, |t| t.rounds_played);
    let out = run_arena(&agents, &env, &arena_cfg, table)?;
    seeds.push(arena_cfg.seed);

    std::fs::create_dir_all(traces)?;
    for (i, m) in out.matches.iter().enumerate() {
        let name = format!("r{}-m{:05}-{}-vs-{}.csv", previous_rounds + 1, i, m.agent_a, m.agent_b);
        std::fs::write(traces.join(name), m.trace.to_csv())?;
    }
    let state = ArenaState { agents: records, table: out.table, seeds };
    state.save(&state_path)?;
    println!(
        "{} matches over {} rounds{}; traces in {}",
        out.matches.len(),
        state.table.rounds_played - previous_rounds,
        if out.converged { ", ratings converged" } else { "" },
        traces.display()
    );
    print_ranking(&state.table);
    Ok(())
}

fn print_ranking(table: &EloTable) {
    for (i, (id, rating)) in table.ranking().iter().enumerate() {
        let games = table.games.get(id).copied().unwrap_or(0);
        println!("{:>3}. {:<32} {:>8.1}  ({} games)", i + 1, id, rating, games);
    }
}

fn rank(dir: &Path) -> Result<()> {
    let path = dir.join(ARENA_FILE);
    let state = ArenaState::load(&path).with_context(|| format!("reading {}; run `gridwall arena` first", path.display()))?;
    print_ranking(&state.table);
    Ok(())
}
