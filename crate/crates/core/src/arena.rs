//! Battle arena: head-to-head matches, Elo ratings and leaderboard state.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Driver, EnvConfig, InitGap};
use crate::rollout::run_episode;
use crate::trace::MatchTrace;

pub const DEFAULT_K: f64 = 32.0;
pub const INITIAL_RATING: f64 = 1000.0;
/// Rating changes are rounded to this grid so sums stay exact.
const RATING_QUANTUM: f64 = 1.0 / 1_048_576.0;

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("agent {agent} was built for track config {found}, arena runs {expected}")]
    ConfigMismatch { agent: String, found: String, expected: String },
    #[error("arena needs at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("arena io: {0}")]
    Io(#[from] std::io::Error),
    #[error("arena state: {0}")]
    Json(#[from] serde_json::Error),
}

/// A named driver bound to the track config it was built for.
#[derive(Clone)]
pub struct Agent {
    pub id: String,
    pub driver: Arc<dyn Driver>,
    pub track_hash: String,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("id", &self.id).field("track_hash", &self.track_hash).finish()
    }
}

impl Agent {
    pub fn new(id: impl Into<String>, driver: Arc<dyn Driver>, track_hash: impl Into<String>) -> Self {
        Self { id: id.into(), driver, track_hash: track_hash.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    A,
    B,
    Draw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub agent_a: String,
    pub agent_b: String,
    pub seed: u64,
    /// A's starting gap; positive means A starts behind.
    pub init_gap: f64,
    pub winner: Winner,
    /// A's gap at the flag.
    pub final_gap: f64,
    pub race_time_a: f64,
    pub race_time_b: f64,
    pub compound_rule_a: bool,
    pub compound_rule_b: bool,
    #[serde(skip)]
    pub trace: MatchTrace,
}

impl MatchResult {
    pub fn score_a(&self) -> f64 {
        match self.winner {
            Winner::A => 1.0,
            Winner::B => 0.0,
            Winner::Draw => 0.5,
        }
    }
}

/// Compound-rule violations lose outright; otherwise the gap decides.
pub fn decide_winner(final_gap_a: f64, rule_a: bool, rule_b: bool) -> Winner {
    match (rule_a, rule_b) {
        (false, true) => Winner::B,
        (true, false) => Winner::A,
        _ if final_gap_a < 0.0 => Winner::A,
        _ if final_gap_a > 0.0 => Winner::B,
        _ => Winner::Draw,
    }
}

fn check_config(agent: &Agent, env: &EnvConfig) -> Result<(), ArenaError> {
    let expected = env.track.hash();
    if agent.track_hash != expected {
        return Err(ArenaError::ConfigMismatch {
            agent: agent.id.clone(),
            found: agent.track_hash.clone(),
            expected,
        });
    }
    Ok(())
}

/// One full race with deterministic drivers; A is car 1.
pub fn play_match(
    a: &Agent,
    b: &Agent,
    env: &Arc<EnvConfig>,
    seed: u64,
    init_gap: f64,
) -> Result<MatchResult, ArenaError> {
    check_config(a, env)?;
    check_config(b, env)?;
    let report = run_episode(env.clone(), a.driver.as_ref(), Some(b.driver.clone()), seed, InitGap::Fixed(init_gap));
    let s = &report.final_state;
    Ok(MatchResult {
        agent_a: a.id.clone(),
        agent_b: b.id.clone(),
        seed,
        init_gap,
        winner: decide_winner(s.duel.gap_1, s.car_1.b_cpd, s.car_i.b_cpd),
        final_gap: s.duel.gap_1,
        race_time_a: s.car_1.t_race,
        race_time_b: s.car_i.t_race,
        compound_rule_a: s.car_1.b_cpd,
        compound_rule_b: s.car_i.b_cpd,
        trace: report.trace,
    })
}

/// Logistic expected score of A against B.
pub fn elo_expected(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

/// Zero-sum rating update. The transfer is rounded to a dyadic grid so the
/// rating sum is conserved exactly in floating point.
pub fn elo_update(r_a: f64, r_b: f64, score_a: f64, k: f64) -> (f64, f64) {
    let delta = k * (score_a - elo_expected(r_a, r_b));
    let delta = (delta / RATING_QUANTUM).round() * RATING_QUANTUM;
    (r_a + delta, r_b - delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u32,
    pub agent_a: String,
    pub agent_b: String,
    pub seed: u64,
    pub init_gap: f64,
    pub score_a: f64,
    pub rating_a: f64,
    pub rating_b: f64,
    pub forfeit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub k: f64,
    pub initial: f64,
    pub ratings: BTreeMap<String, f64>,
    pub games: BTreeMap<String, u32>,
    pub history: Vec<HistoryEntry>,
    pub rounds_played: u32,
}

impl Default for EloTable {
    fn default() -> Self {
        Self::new(DEFAULT_K, INITIAL_RATING)
    }
}

impl EloTable {
    pub fn new(k: f64, initial: f64) -> Self {
        Self {
            k,
            initial,
            ratings: BTreeMap::new(),
            games: BTreeMap::new(),
            history: Vec::new(),
            rounds_played: 0,
        }
    }

    pub fn add_agent(&mut self, id: &str) {
        self.ratings.entry(id.to_string()).or_insert(self.initial);
        self.games.entry(id.to_string()).or_insert(0);
    }

    pub fn rating(&self, id: &str) -> Option<f64> {
        self.ratings.get(id).copied()
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }

    /// Applies one result and returns the absolute rating change.
    pub fn record(&mut self, round: u32, a: &str, b: &str, seed: u64, init_gap: f64, score_a: f64, forfeit: bool) -> f64 {
        self.add_agent(a);
        self.add_agent(b);
        let (ra, rb) = (self.ratings[a], self.ratings[b]);
        let (na, nb) = elo_update(ra, rb, score_a, self.k);
        self.ratings.insert(a.to_string(), na);
        self.ratings.insert(b.to_string(), nb);
        *self.games.get_mut(a).expect("added") += 1;
        *self.games.get_mut(b).expect("added") += 1;
        self.history.push(HistoryEntry {
            round,
            agent_a: a.to_string(),
            agent_b: b.to_string(),
            seed,
            init_gap,
            score_a,
            rating_a: na,
            rating_b: nb,
            forfeit,
        });
        (na - ra).abs()
    }

    /// Agents by descending rating, ties broken by id.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.ratings.iter().map(|(k, r)| (k.clone(), *r)).collect();
        v.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
        v
    }
}

/// Where the starting gaps of arena matches come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GapSampler {
    /// Cycles through the listed magnitudes.
    Fixed(Vec<f64>),
    Uniform { lo: f64, hi: f64 },
}

impl Default for GapSampler {
    fn default() -> Self {
        GapSampler::Fixed(vec![0.5])
    }
}

impl GapSampler {
    fn draw<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> f64 {
        match self {
            GapSampler::Fixed(v) => v[index % v.len()].abs(),
            GapSampler::Uniform { lo, hi } => rng.gen_range(*lo..*hi).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaConfig {
    pub rounds: u32,
    /// Stop once every rating moved less than this over a full round.
    pub epsilon: f64,
    pub gaps: GapSampler,
    pub seed: u64,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        Self { rounds: 100, epsilon: 1.0, gaps: GapSampler::default(), seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ArenaOutcome {
    pub table: EloTable,
    pub matches: Vec<MatchResult>,
    pub converged: bool,
}

/// Round-robin until ratings settle. Each pairing is played twice per round,
/// once with each agent starting behind. Ratings are updated match by match
/// in pairing order. Agents that cannot race on this config forfeit.
pub fn run_arena(
    agents: &[Agent],
    env: &Arc<EnvConfig>,
    cfg: &ArenaConfig,
    table: Option<EloTable>,
) -> Result<ArenaOutcome, ArenaError> {
    if agents.len() < 2 {
        return Err(ArenaError::TooFewAgents(agents.len()));
    }
    let mut table = table.unwrap_or_default();
    for a in agents {
        table.add_agent(&a.id);
    }
    let eligible: Vec<bool> = agents.iter().map(|a| check_config(a, env).is_ok()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut matches = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.rounds {
        let round = table.rounds_played + 1;
        let mut max_change: f64 = 0.0;
        let mut pairing = 0usize;
        for i in 0..agents.len() {
            for j in i + 1..agents.len() {
                let gap = cfg.gaps.draw(pairing, &mut rng);
                pairing += 1;
                for (a, b) in [(i, j), (j, i)] {
                    let seed: u64 = rng.gen();
                    let (score_a, forfeit) = match (eligible[a], eligible[b]) {
                        (true, true) => {
                            let m = play_match(&agents[a], &agents[b], env, seed, gap)?;
                            let s = m.score_a();
                            matches.push(m);
                            (s, false)
                        }
                        (false, true) => (0.0, true),
                        (true, false) => (1.0, true),
                        (false, false) => (0.5, true),
                    };
                    let change = table.record(round, &agents[a].id, &agents[b].id, seed, gap, score_a, forfeit);
                    max_change = max_change.max(change);
                }
            }
        }
        table.rounds_played = round;
        if max_change < cfg.epsilon {
            converged = true;
            break;
        }
    }
    Ok(ArenaOutcome { table, matches, converged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaAgentRecord {
    pub id: String,
    pub path: Option<String>,
}

/// Persisted leaderboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArenaState {
    pub agents: Vec<ArenaAgentRecord>,
    pub table: EloTable,
    pub seeds: Vec<u64>,
}

impl ArenaState {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArenaError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArenaError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
