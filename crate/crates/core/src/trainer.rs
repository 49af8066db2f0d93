//! Policy production: single-car pretraining of the backbone, then rounds of
//! self-play where only the interaction module learns against a pool of
//! frozen earlier agents.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{play_match, run_arena, Agent, ArenaConfig, ArenaError, GapSampler, Winner};
use crate::env::{Driver, EnvConfig, Episode, InitGap, ACTION_DIM};
use crate::policy::{compose, Policy, PolicyMeta};
use crate::replay::{ReplayBuffer, Transition};
use crate::rollout::run_episode;
use crate::sac::{Sac, SacConfig, UpdateStats};
use crate::track::TrackConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sac,
    /// Gradient-free cross-entropy search over the trained network's weights.
    Cem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elite: usize,
    pub init_std: f64,
    pub min_std: f64,
    /// Episodes averaged per candidate when an opponent is involved.
    pub episodes_per_candidate: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { population: 24, elite: 6, init_std: 0.05, min_std: 1e-3, episodes_per_candidate: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Environment steps for backbone pretraining.
    pub pretrain_steps: u64,
    /// Environment steps per self-play iteration.
    pub env_steps: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub tau: f64,
    pub target_entropy: f64,
    pub reward_scale: f64,
    pub init_alpha: f64,
    pub gamma: f64,
    /// Steps collected before the first gradient update.
    pub warmup_steps: u64,
    /// Environment steps per gradient update.
    pub update_every: u64,
    /// Episodes between opponent draws.
    pub opponent_resample: u32,
    /// Probability of drawing the most recent best agent.
    pub p_latest: f64,
    pub iterations: u32,
    /// Snapshot cadence during self-play, in environment steps.
    pub snapshot_every: u64,
    /// Evaluation cadence during pretraining, in environment steps.
    pub pretrain_eval_every: u64,
    /// Approximate matches per agent in the mini-arena that picks the best snapshot.
    pub arena_matches: u32,
    pub win_rate_floor: f64,
    pub divergence_threshold: f64,
    /// Consecutive updates above the threshold before stopping.
    pub divergence_window: u32,
    pub cem: CemConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Sac,
            pretrain_steps: 150_000,
            env_steps: 150_000,
            replay_capacity: 200_000,
            batch_size: 256,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            tau: 5e-3,
            target_entropy: -3.0,
            reward_scale: 0.1,
            init_alpha: 0.05,
            gamma: 1.0,
            warmup_steps: 5_000,
            update_every: 1,
            opponent_resample: 20,
            p_latest: 0.5,
            iterations: 4,
            snapshot_every: 15_000,
            pretrain_eval_every: 2_850,
            arena_matches: 50,
            win_rate_floor: 0.4,
            divergence_threshold: 1e6,
            divergence_window: 500,
            cem: CemConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, why: &str| Err(TrainError::InvalidConfig(format!("{field}: {why}")));
        let counts = [
            ("pretrain_steps", self.pretrain_steps),
            ("env_steps", self.env_steps),
            ("update_every", self.update_every),
            ("snapshot_every", self.snapshot_every),
            ("pretrain_eval_every", self.pretrain_eval_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        if self.replay_capacity == 0 || self.batch_size == 0 {
            return bad("replay_capacity/batch_size", "must be positive");
        }
        if self.opponent_resample == 0 || self.iterations == 0 || self.arena_matches == 0 {
            return bad("opponent_resample/iterations/arena_matches", "must be positive");
        }
        for (name, p) in [("p_latest", self.p_latest), ("win_rate_floor", self.win_rate_floor)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(name, "must lie in [0, 1]");
            }
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("lr_alpha", self.lr_alpha),
            ("reward_scale", self.reward_scale),
            ("init_alpha", self.init_alpha),
            ("divergence_threshold", self.divergence_threshold),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, "must be finite and positive");
            }
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if self.gamma != 1.0 {
            return bad("gamma", "the race is a finite-horizon problem; gamma is fixed at 1");
        }
        if self.cem.elite == 0 || self.cem.elite > self.cem.population || self.cem.episodes_per_candidate == 0 {
            return bad("cem", "need 0 < elite <= population and at least one episode per candidate");
        }
        Ok(())
    }

    pub fn sac(&self) -> SacConfig {
        SacConfig {
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
            lr_alpha: self.lr_alpha,
            tau: self.tau,
            target_entropy: self.target_entropy,
            batch_size: self.batch_size,
            reward_scale: self.reward_scale,
            init_alpha: self.init_alpha,
            gamma: self.gamma,
        }
    }
}

/// State of the learner when training had to stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub phase: String,
    pub step: u64,
    pub episode: u64,
    pub last: UpdateStats,
    pub actor_param_norm: f64,
    pub replay_len: usize,
}

impl std::fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} step {} episode {}: critic loss {}, actor loss {}, alpha {}, |theta| {}, replay {}",
            self.phase,
            self.step,
            self.episode,
            self.last.critic_loss,
            self.last.actor_loss,
            self.last.alpha,
            self.actor_param_norm,
            self.replay_len
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss ({0})")]
    NonFinite(Box<Diagnostics>),
    #[error("opponent pool is empty")]
    EmptyPool,
    #[error("interaction training needs a frozen backbone")]
    BackboneNotFrozen,
    #[error("backbone parameters changed during training ({before} -> {after})")]
    BackboneChanged { before: String, after: String },
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const LOG_HEADER: &str = "step,episode,opponent,return,win,critic_loss,actor_loss,temperature";

/// One training-log line. Episode rows carry a 0/1 win flag (empty when
/// solo); evaluation rows carry the win rate over the evaluation matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub episode: u64,
    pub opponent: String,
    pub ret: f64,
    pub win: Option<f64>,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
}

impl LogRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.opponent,
            self.ret,
            self.win.map(|w| w.to_string()).unwrap_or_default(),
            self.critic_loss,
            self.actor_loss,
            self.temperature
        )
    }
}

/// Training log kept in memory and optionally appended to a CSV file.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub notes: Vec<String>,
    sink: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path`, writing the header only when the file is new.
    pub fn append_to(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let fresh = file.metadata()?.len() == 0;
        let mut sink = BufWriter::new(file);
        if fresh {
            writeln!(sink, "{LOG_HEADER}")?;
        }
        Ok(Self { rows: Vec::new(), notes: Vec::new(), sink: Some(sink) })
    }

    pub fn push(&mut self, row: LogRow) -> std::io::Result<()> {
        if let Some(sink) = &mut self.sink {
            writeln!(sink, "{}", row.csv_line())?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        self.notes.push(msg.into());
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        if let Some(sink) = &mut self.sink {
            sink.flush()?;
        }
        Ok(())
    }
}

fn param_norm(p: &[f64]) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_finite(stats: &UpdateStats, diag: impl FnOnce() -> Diagnostics) -> Result<(), TrainError> {
    if stats.critic_loss.is_finite() && stats.actor_loss.is_finite() && stats.alpha.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite(Box::new(diag())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: u64,
    pub race_time: f64,
    pub b_cpd: bool,
    pub ret: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Best backbone found, frozen, with a zero interaction module.
    pub policy: Policy,
    pub best: Evaluation,
    pub evaluations: Vec<Evaluation>,
    pub steps: u64,
    pub episodes: u64,
}

/// Deterministic single-car race of the backbone.
pub fn evaluate_solo(policy: &Policy, env: &Arc<EnvConfig>, step: u64) -> Evaluation {
    let solo = policy.backbone_only();
    let r = run_episode(env.clone(), &solo, None, 0, InitGap::Fixed(0.0));
    Evaluation { step, race_time: r.final_state.car_1.t_race, b_cpd: r.final_state.car_1.b_cpd, ret: r.total_reward }
}

fn finish_backbone<R: Rng + ?Sized>(mut policy: Policy, rng: &mut R, seed: u64) -> Policy {
    policy.quantize();
    policy.reset_interaction(rng);
    policy.backbone_frozen = true;
    policy.meta = PolicyMeta { name: "backbone".into(), provenance: format!("pretrained, seed {seed}"), elo: None };
    policy
}

/// Trains the backbone on the single-car race and returns the best
/// deterministic snapshot with its backbone frozen.
pub fn pretrain_backbone(cfg: &TrainConfig, track: &TrackConfig, log: &mut TrainLog) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let env = Arc::new(EnvConfig::new(track.clone()));
    let mut policy = Policy::new(track, &mut rng);
    let mut evals = vec![evaluate_solo(&policy, &env, 0)];
    let mut best = (evals[0], policy.backbone.clone());

    let (steps, episodes) = match cfg.algorithm {
        Algorithm::Sac => {
            let mut sac = Sac::new(policy.backbone.clone(), cfg.sac(), &mut rng);
            let mut replay = ReplayBuffer::new(cfg.replay_capacity);
            let mut step = 0u64;
            let mut episode = 0u64;
            let mut last = UpdateStats { alpha: sac.alpha(), ..UpdateStats::default() };
            while step < cfg.pretrain_steps {
                let mut ep = Episode::reset(env.clone(), None, rng.gen(), InitGap::Fixed(0.0));
                let mut ret = 0.0;
                while !ep.is_done() {
                    let obs = policy.normalizer.ego(&ep.ego_observation());
                    let y = sac.sample_action(&obs, &mut rng);
                    let out = ep.step(&compose(&y, &[0.0; ACTION_DIM], track)).expect("episode live");
                    ret += out.reward;
                    replay.push(Transition {
                        obs,
                        action: y.to_vec(),
                        reward: out.reward,
                        next_obs: policy.normalizer.ego(&out.ego),
                        done: out.done,
                        episode,
                        lap: ep.state().k,
                    });
                    step += 1;
                    if step > cfg.warmup_steps && replay.len() >= cfg.batch_size && step.is_multiple_of(cfg.update_every) {
                        last = sac.update(&replay.sample(cfg.batch_size, &mut rng), &mut rng);
                        check_finite(&last, || Diagnostics {
                            phase: "pretrain".into(),
                            step,
                            episode,
                            last,
                            actor_param_norm: param_norm(sac.actor.params()),
                            replay_len: replay.len(),
                        })?;
                    }
                    if step.is_multiple_of(cfg.pretrain_eval_every) || step == cfg.pretrain_steps {
                        policy.backbone = sac.actor.clone();
                        policy.backbone.quantize_f32();
                        let e = evaluate_solo(&policy, &env, step);
                        evals.push(e);
                        if better(&e, &best.0) {
                            best = (e, policy.backbone.clone());
                        }
                    }
                }
                log.push(LogRow {
                    step,
                    episode,
                    opponent: "none".into(),
                    ret,
                    win: None,
                    critic_loss: last.critic_loss,
                    actor_loss: last.actor_loss,
                    temperature: last.alpha,
                })?;
                episode += 1;
            }
            (step, episode)
        }
        Algorithm::Cem => {
            let n_laps = u64::from(track.n_laps);
            let mut spent = 0u64;
            let mut generation = 0u64;
            let mut search = Cem::new(policy.backbone.params().to_vec(), &cfg.cem);
            while spent + n_laps * cfg.cem.population as u64 <= cfg.pretrain_steps {
                let fitness = |params: &[f64]| {
                    let mut p = policy.clone();
                    p.backbone.params_mut().copy_from_slice(params);
                    evaluate_solo(&p, &env, 0).ret
                };
                let gen_best = search.generation(&mut rng, fitness);
                spent += n_laps * cfg.cem.population as u64;
                policy.backbone.params_mut().copy_from_slice(&search.mean);
                policy.backbone.quantize_f32();
                let e = evaluate_solo(&policy, &env, spent);
                evals.push(e);
                if better(&e, &best.0) {
                    best = (e, policy.backbone.clone());
                }
                log.push(LogRow {
                    step: spent,
                    episode: generation,
                    opponent: "none".into(),
                    ret: gen_best,
                    win: None,
                    critic_loss: f64::NAN,
                    actor_loss: f64::NAN,
                    temperature: search.mean_std(),
                })?;
                generation += 1;
            }
            (spent, generation * cfg.cem.population as u64)
        }
    };
    log.flush()?;
    policy.backbone = best.1;
    let policy = finish_backbone(policy, &mut rng, cfg.seed);
    Ok(PretrainOutcome { best: best.0, evaluations: evals, policy, steps, episodes })
}

/// Legal races first, then higher return.
fn better(a: &Evaluation, b: &Evaluation) -> bool {
    (a.b_cpd, a.ret) > (b.b_cpd, b.ret) && (a.b_cpd || !b.b_cpd)
}

/// Diagonal-Gaussian cross-entropy search that maximizes a fitness.
#[derive(Debug, Clone)]
pub struct Cem {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    population: usize,
    elite: usize,
    min_std: f64,
}

impl Cem {
    pub fn new(mean: Vec<f64>, cfg: &CemConfig) -> Self {
        let std = vec![cfg.init_std; mean.len()];
        Self { mean, std, population: cfg.population, elite: cfg.elite, min_std: cfg.min_std }
    }

    pub fn mean_std(&self) -> f64 {
        self.std.iter().sum::<f64>() / self.std.len() as f64
    }

    /// Samples, scores and refits once; returns the best fitness seen.
    /// The current mean is always part of the population.
    pub fn generation<R: Rng + ?Sized>(&mut self, rng: &mut R, mut fitness: impl FnMut(&[f64]) -> f64) -> f64 {
        let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(self.population);
        for i in 0..self.population {
            let cand: Vec<f64> = if i == 0 {
                self.mean.clone()
            } else {
                self.mean
                    .iter()
                    .zip(&self.std)
                    .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            };
            let f = fitness(&cand);
            scored.push((if f.is_finite() { f } else { f64::NEG_INFINITY }, cand));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let elite = &scored[..self.elite];
        let k = self.elite as f64;
        for j in 0..self.mean.len() {
            let m = elite.iter().map(|(_, c)| c[j]).sum::<f64>() / k;
            let v = elite.iter().map(|(_, c)| (c[j] - m).powi(2)).sum::<f64>() / k;
            self.mean[j] = m;
            self.std[j] = v.sqrt().max(self.min_std);
        }
        scored[0].0
    }
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub id: String,
    pub policy: Arc<Policy>,
    /// Mini-arena rating when the entry was added.
    pub elo: Option<f64>,
}

/// Frozen opponents for self-play. `entries[0]` is the backbone-only policy.
#[derive(Debug, Clone)]
pub struct OpponentPool {
    pub entries: Vec<PoolEntry>,
    /// Self-play iteration about to run, from 1.
    pub iteration: u32,
}

impl OpponentPool {
    pub fn with_backbone(policy: &Policy) -> Self {
        let backbone = policy.backbone_only();
        Self {
            entries: vec![PoolEntry { id: "backbone".into(), policy: Arc::new(backbone), elo: None }],
            iteration: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latest(&self) -> Option<&PoolEntry> {
        self.entries.last()
    }
}

/// With probability `p_latest` the newest entry, otherwise a uniform draw.
/// The first iteration always faces the backbone.
pub fn sample_opponent<'a, R: Rng + ?Sized>(
    pool: &'a OpponentPool,
    p_latest: f64,
    rng: &mut R,
) -> Result<&'a PoolEntry, TrainError> {
    if pool.entries.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    if pool.iteration <= 1 {
        return Ok(&pool.entries[0]);
    }
    if rng.gen::<f64>() < p_latest {
        Ok(pool.entries.last().expect("nonempty"))
    } else {
        Ok(&pool.entries[rng.gen_range(0..pool.entries.len())])
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub id: String,
    pub step: u64,
    pub policy: Policy,
    /// Score against the backbone over the evaluation gaps, draws count half.
    pub win_rate_vs_backbone: f64,
}

/// Checks that every complete episode in the replay ends exactly once, on
/// its last lap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayAudit {
    pub transitions: usize,
    pub inconsistent: usize,
}

pub fn audit_replay(replay: &ReplayBuffer, n_laps: u32) -> ReplayAudit {
    let mut audit = ReplayAudit::default();
    for t in replay.iter() {
        audit.transitions += 1;
        if t.done != (t.lap == n_laps) || t.lap == 0 || t.lap > n_laps {
            audit.inconsistent += 1;
        }
    }
    audit
}

#[derive(Debug, Clone)]
pub struct InteractionOutcome {
    pub policy: Policy,
    pub snapshots: Vec<Snapshot>,
    /// Stopped early because the critic loss stayed above the threshold.
    pub diverged: bool,
    pub steps: u64,
    pub episodes: u64,
    pub replay_audit: ReplayAudit,
}

/// Initial gaps of the evaluation matches against the backbone.
pub const EVAL_GAPS: [f64; 2] = [0.5, -0.5];

fn agent_of(id: &str, policy: Arc<Policy>) -> Agent {
    let hash = policy.track.hash();
    Agent::new(id, policy as Arc<dyn Driver>, hash)
}

/// Score of `policy` against the backbone from both sides of [`EVAL_GAPS`].
pub fn win_rate_vs(policy: &Policy, opponent: &Policy) -> Result<f64, TrainError> {
    let env = Arc::new(EnvConfig::new(policy.track.clone()));
    let a = agent_of("candidate", Arc::new(policy.clone()));
    let b = agent_of("opponent", Arc::new(opponent.clone()));
    let mut score = 0.0;
    for gap in EVAL_GAPS {
        let m = play_match(&a, &b, &env, 0, gap)?;
        score += match m.winner {
            Winner::A => 1.0,
            Winner::Draw => 0.5,
            Winner::B => 0.0,
        };
    }
    Ok(score / EVAL_GAPS.len() as f64)
}

/// Trains the interaction module of `policy` against `pool`; the backbone
/// never changes.
pub fn train_interaction(
    policy: &Policy,
    pool: &OpponentPool,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<InteractionOutcome, TrainError> {
    cfg.validate()?;
    if !policy.backbone_frozen {
        return Err(TrainError::BackboneNotFrozen);
    }
    if pool.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let before = policy.backbone_hash();
    let seed = cfg.seed ^ (u64::from(pool.iteration) << 32);
    let out = match cfg.algorithm {
        Algorithm::Sac => train_sac(policy, pool, cfg, log, seed)?,
        Algorithm::Cem => train_cem(policy, pool, cfg, log, seed)?,
    };
    log.flush()?;
    let after = out.policy.backbone_hash();
    if before != after {
        return Err(TrainError::BackboneChanged { before, after });
    }
    Ok(out)
}

fn snapshot(policy: &Policy, interaction: &crate::nn::Mlp, iteration: u32, step: u64, backbone: &Policy) -> Result<Snapshot, TrainError> {
    let mut p = policy.clone();
    p.interaction = interaction.clone();
    p.interaction.quantize_f32();
    let id = format!("it{iteration}-s{step}");
    p.meta = PolicyMeta { name: id.clone(), provenance: format!("self-play iteration {iteration}, step {step}"), elo: None };
    let win_rate_vs_backbone = win_rate_vs(&p, backbone)?;
    Ok(Snapshot { id, step, policy: p, win_rate_vs_backbone })
}

fn log_snapshot(log: &mut TrainLog, s: &Snapshot, episode: u64, last: &UpdateStats) -> std::io::Result<()> {
    log.push(LogRow {
        step: s.step,
        episode,
        opponent: "eval:backbone".into(),
        ret: f64::NAN,
        win: Some(s.win_rate_vs_backbone),
        critic_loss: last.critic_loss,
        actor_loss: last.actor_loss,
        temperature: last.alpha,
    })
}

fn train_sac(
    policy: &Policy,
    pool: &OpponentPool,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    seed: u64,
) -> Result<InteractionOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = Arc::new(EnvConfig::new(policy.track.clone()));
    let backbone = &pool.entries[0].policy;
    let mut sac = Sac::new(policy.interaction.clone(), cfg.sac(), &mut rng);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut snapshots = Vec::new();
    let mut last = UpdateStats { alpha: sac.alpha(), ..UpdateStats::default() };
    let (mut step, mut episode) = (0u64, 0u64);
    let mut over_threshold = 0u32;
    let mut diverged = false;
    let mut opponent = sample_opponent(pool, cfg.p_latest, &mut rng)?;

    'outer: while step < cfg.env_steps {
        if episode > 0 && episode % u64::from(cfg.opponent_resample) == 0 {
            opponent = sample_opponent(pool, cfg.p_latest, &mut rng)?;
        }
        let rival: Arc<dyn Driver> = opponent.policy.clone();
        let mut ep = Episode::reset(env.clone(), Some(rival), rng.gen(), InitGap::Sample);
        let mut ret = 0.0;
        while !ep.is_done() {
            let (o, r) = (ep.ego_observation(), ep.rival_observation());
            let obs = policy.normalizer.joint(&o, &r);
            let y = sac.sample_action(&obs, &mut rng);
            let delta = y.map(|v| policy.delta_bound * v);
            let action = compose(&policy.backbone_forward(&o), &delta, &policy.track);
            let out = ep.step(&action).expect("episode live");
            ret += out.reward;
            replay.push(Transition {
                obs,
                action: y.to_vec(),
                reward: out.reward,
                next_obs: policy.normalizer.joint(&out.ego, &out.rival),
                done: out.done,
                episode,
                lap: ep.state().k,
            });
            step += 1;
            if step > cfg.warmup_steps && replay.len() >= cfg.batch_size && step % cfg.update_every == 0 {
                last = sac.update(&replay.sample(cfg.batch_size, &mut rng), &mut rng);
                check_finite(&last, || Diagnostics {
                    phase: format!("self-play iteration {}", pool.iteration),
                    step,
                    episode,
                    last,
                    actor_param_norm: param_norm(sac.actor.params()),
                    replay_len: replay.len(),
                })?;
                over_threshold = if last.critic_loss > cfg.divergence_threshold { over_threshold + 1 } else { 0 };
                if over_threshold >= cfg.divergence_window {
                    diverged = true;
                    log.note(format!("critic loss above {} for {} updates at step {step}; stopping", cfg.divergence_threshold, cfg.divergence_window));
                    break 'outer;
                }
            }
            if step % cfg.snapshot_every == 0 {
                let s = snapshot(policy, &sac.actor, pool.iteration, step, backbone)?;
                log_snapshot(log, &s, episode, &last)?;
                snapshots.push(s);
            }
        }
        let s = ep.state();
        log.push(LogRow {
            step,
            episode,
            opponent: opponent.id.clone(),
            ret,
            win: Some(if s.duel.gap_1 < 0.0 && s.car_1.b_cpd { 1.0 } else { 0.0 }),
            critic_loss: last.critic_loss,
            actor_loss: last.actor_loss,
            temperature: last.alpha,
        })?;
        episode += 1;
    }
    if snapshots.last().is_none_or(|s| s.step != step) {
        let s = snapshot(policy, &sac.actor, pool.iteration, step, backbone)?;
        log_snapshot(log, &s, episode, &last)?;
        snapshots.push(s);
    }
    let final_policy = snapshots.last().expect("at least one snapshot").policy.clone();
    Ok(InteractionOutcome {
        policy: final_policy,
        snapshots,
        diverged,
        steps: step,
        episodes: episode,
        replay_audit: audit_replay(&replay, policy.track.n_laps),
    })
}

fn train_cem(
    policy: &Policy,
    pool: &OpponentPool,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    seed: u64,
) -> Result<InteractionOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = Arc::new(EnvConfig::new(policy.track.clone()));
    let backbone = &pool.entries[0].policy;
    let n_laps = u64::from(policy.track.n_laps);
    let per_gen = n_laps * (cfg.cem.population * cfg.cem.episodes_per_candidate) as u64;
    let mut search = Cem::new(policy.interaction.params().to_vec(), &cfg.cem);
    let mut snapshots = Vec::new();
    let (mut spent, mut generation) = (0u64, 0u64);
    let mut next_snapshot = cfg.snapshot_every;
    let none = UpdateStats { critic_loss: f64::NAN, actor_loss: f64::NAN, alpha: f64::NAN, entropy: f64::NAN };

    while spent + per_gen <= cfg.env_steps {
        // Common opponents and gaps for every candidate of a generation.
        let games: Vec<(Arc<Policy>, String, u64)> = (0..cfg.cem.episodes_per_candidate)
            .map(|_| {
                let o = sample_opponent(pool, cfg.p_latest, &mut rng)?;
                Ok((o.policy.clone(), o.id.clone(), rng.gen()))
            })
            .collect::<Result<_, TrainError>>()?;
        let fitness = |params: &[f64]| {
            let mut p = policy.clone();
            p.interaction.params_mut().copy_from_slice(params);
            games
                .iter()
                .map(|(opp, _, s)| {
                    let rival: Arc<dyn Driver> = opp.clone();
                    run_episode(env.clone(), &p, Some(rival), *s, InitGap::Sample).total_reward
                })
                .sum::<f64>()
                / games.len() as f64
        };
        let best = search.generation(&mut rng, fitness);
        spent += per_gen;
        log.push(LogRow {
            step: spent,
            episode: generation,
            opponent: games[0].1.clone(),
            ret: best,
            win: None,
            critic_loss: f64::NAN,
            actor_loss: f64::NAN,
            temperature: search.mean_std(),
        })?;
        generation += 1;
        if spent >= next_snapshot {
            next_snapshot += cfg.snapshot_every;
            let mut net = policy.interaction.clone();
            net.params_mut().copy_from_slice(&search.mean);
            let s = snapshot(policy, &net, pool.iteration, spent, backbone)?;
            log_snapshot(log, &s, generation, &none)?;
            snapshots.push(s);
        }
    }
    if snapshots.last().is_none_or(|s| s.step != spent) {
        let mut net = policy.interaction.clone();
        net.params_mut().copy_from_slice(&search.mean);
        let s = snapshot(policy, &net, pool.iteration, spent, backbone)?;
        log_snapshot(log, &s, generation, &none)?;
        snapshots.push(s);
    }
    Ok(InteractionOutcome {
        policy: snapshots.last().expect("at least one snapshot").policy.clone(),
        snapshots,
        diverged: false,
        steps: spent,
        episodes: generation * (cfg.cem.population * cfg.cem.episodes_per_candidate) as u64,
        replay_audit: ReplayAudit::default(),
    })
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    pub iteration: u32,
    pub best_id: String,
    pub best_elo: f64,
    /// Best snapshot's score against pool members in the mini-arena.
    pub score_vs_pool: f64,
    pub win_rate_vs_backbone: f64,
    pub diverged: bool,
    pub snapshots: usize,
}

#[derive(Debug, Clone)]
pub struct SelfPlayOutcome {
    pub pool: OpponentPool,
    pub reports: Vec<IterationReport>,
}

/// Mini-arena over the snapshots of one iteration and the pool; returns the
/// index of the highest-rated snapshot, its rating and its score against
/// the pool.
pub fn pick_best(
    snapshots: &[Snapshot],
    pool: &OpponentPool,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(usize, f64, f64), TrainError> {
    let track = &snapshots[0].policy.track;
    let env = Arc::new(EnvConfig::new(track.clone()));
    let mut agents: Vec<Agent> = snapshots.iter().map(|s| agent_of(&s.id, Arc::new(s.policy.clone()))).collect();
    agents.extend(pool.entries.iter().map(|e| agent_of(&format!("pool:{}", e.id), e.policy.clone())));
    let opponents = (agents.len() - 1) as u32;
    let rounds = cfg.arena_matches.div_ceil(2 * opponents).max(1);
    let arena_cfg = ArenaConfig { rounds, epsilon: 0.0, gaps: GapSampler::Uniform { lo: 0.0, hi: 2.0 }, seed };
    let out = run_arena(&agents, &env, &arena_cfg, None)?;
    let (best, elo) = snapshots
        .iter()
        .enumerate()
        .map(|(i, s)| (i, out.table.rating(&s.id).expect("rated")))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    let id = &snapshots[best].id;
    let (mut score, mut n) = (0.0, 0.0);
    for m in &out.matches {
        let vs_pool = |other: &str| other.starts_with("pool:");
        if &m.agent_a == id && vs_pool(&m.agent_b) {
            score += m.score_a();
            n += 1.0;
        } else if &m.agent_b == id && vs_pool(&m.agent_a) {
            score += 1.0 - m.score_a();
            n += 1.0;
        }
    }
    Ok((best, elo, if n > 0.0 { score / n } else { 0.0 }))
}

/// Runs `cfg.iterations` rounds of training against the pool, each adding
/// the iteration's highest-rated snapshot.
pub fn self_play(
    backbone: &Policy,
    mut pool: OpponentPool,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<SelfPlayOutcome, TrainError> {
    let mut reports = Vec::new();
    let mut current = backbone.clone();
    for _ in 0..cfg.iterations {
        let it = pool.iteration;
        let out = train_interaction(&current, &pool, cfg, log)?;
        let (idx, elo, score_vs_pool) = pick_best(&out.snapshots, &pool, cfg, cfg.seed.wrapping_add(u64::from(it)))?;
        let best = &out.snapshots[idx];
        if score_vs_pool < cfg.win_rate_floor {
            log.note(format!(
                "iteration {it}: best snapshot {} scored {score_vs_pool:.3} against the pool, below the {} floor; appended anyway",
                best.id, cfg.win_rate_floor
            ));
        }
        let mut policy = best.policy.clone();
        policy.meta.elo = Some(elo);
        reports.push(IterationReport {
            iteration: it,
            best_id: best.id.clone(),
            best_elo: elo,
            score_vs_pool,
            win_rate_vs_backbone: best.win_rate_vs_backbone,
            diverged: out.diverged,
            snapshots: out.snapshots.len(),
        });
        current = policy.clone();
        pool.entries.push(PoolEntry { id: best.id.clone(), policy: Arc::new(policy), elo: Some(elo) });
        pool.iteration += 1;
    }
    Ok(SelfPlayOutcome { pool, reports })
}
