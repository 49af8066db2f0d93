//! Full-episode rollouts with deterministic drivers, plus scripted drivers
//! used as baselines and test fixtures.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Driver, EgoObservation, EnvConfig, Episode, EpisodeState, InitGap, OpponentObservation};
use crate::trace::MatchTrace;
use crate::track::{Action, Compound, PitCall};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub trace: MatchTrace,
    pub final_state: EpisodeState,
    /// Undiscounted return of car 1.
    pub total_reward: f64,
    pub rewards: Vec<f64>,
}

/// Runs one episode to the end. `rival = None` is the single-car problem.
pub fn run_episode(
    env: Arc<EnvConfig>,
    car_1: &dyn Driver,
    rival: Option<Arc<dyn Driver>>,
    seed: u64,
    init_gap: InitGap,
) -> EpisodeReport {
    let mut ep = Episode::reset(env, rival, seed, init_gap);
    let mut trace = MatchTrace::default();
    let mut rewards = Vec::with_capacity(ep.laps_remaining() as usize);
    while !ep.is_done() {
        let action = car_1.act(&ep.ego_observation(), &ep.rival_observation());
        let out = ep.step(&action).expect("episode not terminal");
        let s = ep.state();
        trace.record(s.k, &out, &s.car_1, &s.car_i, s.duel.gap_1, s.duel.gap_i);
        rewards.push(out.reward);
    }
    EpisodeReport {
        trace,
        final_state: ep.state().clone(),
        total_reward: rewards.iter().sum(),
        rewards,
    }
}

/// Constant energy allocations with a fixed list of `(lap, compound)`
/// stops. Laps count from 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDriver {
    pub n_laps: u32,
    pub d_ef: f64,
    pub d_eb: f64,
    pub stops: Vec<(u32, Compound)>,
}

impl ScriptedDriver {
    pub fn new(n_laps: u32, stops: Vec<(u32, Compound)>) -> Self {
        Self { n_laps, d_ef: 1.0, d_eb: 0.0, stops }
    }

    pub fn never_pit(n_laps: u32) -> Self {
        Self::new(n_laps, Vec::new())
    }
}

impl Driver for ScriptedDriver {
    fn act(&self, ego: &EgoObservation, _rival: &OpponentObservation) -> Action {
        let lap = self.n_laps - ego.laps_remaining() as u32;
        let ps = self
            .stops
            .iter()
            .find(|(l, _)| *l == lap)
            .map_or(PitCall::NoPit, |(_, c)| PitCall::Fit(*c));
        Action { d_ef: self.d_ef, d_eb: self.d_eb, ps }
    }
}
