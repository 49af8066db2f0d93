//! Human-versus-agent duels, one lap per submitted action.

use std::sync::{Arc, Mutex};

use gridwall_core::arena::{decide_winner, Winner};
use gridwall_core::env::{Driver, EgoObservation, EnvConfig, Episode, InitGap, OpponentObservation};
use gridwall_core::policy::Policy;
use gridwall_core::trace::{MatchTrace, TraceRow};
use gridwall_core::track::{Action, PitCall};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// The human drives car 1.
    Car1,
    Car2,
}

/// An action as typed by the human, in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanAction {
    /// Lap the action is for, from 1. Optional; checked when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lap: Option<u32>,
    pub d_ef: f64,
    pub d_eb: f64,
    pub ps: u8,
}

#[derive(Debug, Error, PartialEq)]
pub enum DuelError {
    #[error("duel already finished")]
    Finished,
    #[error("action is for lap {got} but lap {pending} is pending")]
    WrongLap { got: u32, pending: u32 },
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
}

/// What the human sees before choosing an action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanView {
    /// Lap awaiting an action, from 1.
    pub lap: u32,
    pub ego: EgoObservation,
    pub opponent: OpponentObservation,
    /// The human car's gap; positive means behind.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuelWinner {
    Human,
    Agent,
    Draw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DuelOutcome {
    pub winner: DuelWinner,
    pub final_gap: f64,
    pub human_race_time: f64,
    pub agent_race_time: f64,
    pub human_compound_rule: bool,
    pub agent_compound_rule: bool,
}

/// Result of one lap, as returned to the submitter and pushed on the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapResult {
    pub lap: u32,
    /// Car 1 then car 2.
    pub rows: Vec<TraceRow>,
    pub human_car: u8,
    pub gap: f64,
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub next: Option<HumanView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<DuelOutcome>,
}

/// Rival driver whose next action is set by the session before each lap.
#[derive(Debug)]
struct HumanSlot(Mutex<Action>);

impl Driver for HumanSlot {
    fn act(&self, _ego: &EgoObservation, _rival: &OpponentObservation) -> Action {
        *self.0.lock().expect("slot lock")
    }
}

pub struct DuelSession {
    pub id: u64,
    pub agent_id: String,
    pub human_side: Side,
    pub seed: u64,
    /// Starting gap of the human car.
    pub init_gap: f64,
    agent: Arc<Policy>,
    slot: Arc<HumanSlot>,
    episode: Episode,
    actions: Vec<HumanAction>,
    results: Vec<LapResult>,
    trace: MatchTrace,
}

impl DuelSession {
    pub fn new(
        id: u64,
        agent_id: impl Into<String>,
        agent: Arc<Policy>,
        env: Arc<EnvConfig>,
        human_side: Side,
        gap: f64,
        seed: u64,
    ) -> Self {
        let slot = Arc::new(HumanSlot(Mutex::new(Action::nominal())));
        let (rival, gap_1): (Arc<dyn Driver>, f64) = match human_side {
            Side::Car1 => (agent.clone(), gap),
            Side::Car2 => (slot.clone(), -gap),
        };
        Self {
            id,
            agent_id: agent_id.into(),
            human_side,
            seed,
            init_gap: gap,
            agent,
            slot,
            episode: Episode::reset(env, Some(rival), seed, InitGap::Fixed(gap_1)),
            actions: Vec::new(),
            results: Vec::new(),
            trace: MatchTrace::default(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.episode.is_done()
    }

    pub fn pending_lap(&self) -> Option<u32> {
        (!self.is_done()).then(|| self.episode.state().k + 1)
    }

    pub fn actions(&self) -> &[HumanAction] {
        &self.actions
    }

    pub fn results(&self) -> &[LapResult] {
        &self.results
    }

    pub fn trace(&self) -> &MatchTrace {
        &self.trace
    }

    fn human_gap(&self) -> f64 {
        let duel = self.episode.state().duel;
        match self.human_side {
            Side::Car1 => duel.gap_1,
            Side::Car2 => duel.gap_i,
        }
    }

    /// The human's observations for the pending lap.
    pub fn view(&self) -> Option<HumanView> {
        let lap = self.pending_lap()?;
        let (ego, opponent) = match self.human_side {
            Side::Car1 => (self.episode.ego_observation(), self.episode.rival_observation()),
            Side::Car2 => self.episode.mirrored_observations(),
        };
        Some(HumanView { lap, ego, opponent, gap: self.human_gap() })
    }

    pub fn submit(&mut self, action: HumanAction) -> Result<LapResult, DuelError> {
        let pending = self.pending_lap().ok_or(DuelError::Finished)?;
        if let Some(got) = action.lap {
            if got != pending {
                return Err(DuelError::WrongLap { got, pending });
            }
        }
        let human = to_action(&action)?;
        let step = match self.human_side {
            Side::Car1 => self.episode.step(&human),
            Side::Car2 => {
                let agent_action = self.agent.act(&self.episode.ego_observation(), &self.episode.rival_observation());
                *self.slot.0.lock().expect("slot lock") = human;
                self.episode.step(&agent_action)
            }
        };
        let out = step.map_err(|_| DuelError::Finished)?;
        let s = self.episode.state().clone();
        let first = self.trace.rows.len();
        self.trace.record(s.k, &out, &s.car_1, &s.car_i, s.duel.gap_1, s.duel.gap_i);
        let done = self.is_done();
        let outcome = done.then(|| {
            let w = decide_winner(s.duel.gap_1, s.car_1.b_cpd, s.car_i.b_cpd);
            let (human, agent) = match self.human_side {
                Side::Car1 => (&s.car_1, &s.car_i),
                Side::Car2 => (&s.car_i, &s.car_1),
            };
            let winner = match (w, self.human_side) {
                (Winner::Draw, _) => DuelWinner::Draw,
                (Winner::A, Side::Car1) | (Winner::B, Side::Car2) => DuelWinner::Human,
                _ => DuelWinner::Agent,
            };
            DuelOutcome {
                winner,
                final_gap: self.human_gap(),
                human_race_time: human.t_race,
                agent_race_time: agent.t_race,
                human_compound_rule: human.b_cpd,
                agent_compound_rule: agent.b_cpd,
            }
        });
        let result = LapResult {
            lap: s.k,
            rows: self.trace.rows[first..].to_vec(),
            human_car: match self.human_side {
                Side::Car1 => 1,
                Side::Car2 => 2,
            },
            gap: self.human_gap(),
            done,
            next: self.view(),
            outcome,
        };
        self.actions.push(HumanAction { lap: Some(pending), ..action });
        self.results.push(result.clone());
        Ok(result)
    }
}

/// Checks a human action; out-of-range allocations are clipped later by the
/// environment exactly as for policies.
pub fn to_action(a: &HumanAction) -> Result<Action, DuelError> {
    for (field, v) in [("d_ef", a.d_ef), ("d_eb", a.d_eb)] {
        if !v.is_finite() {
            return Err(DuelError::Invalid { field, message: "must be a finite number".into() });
        }
    }
    let ps = PitCall::from_code(a.ps).ok_or_else(|| DuelError::Invalid {
        field: "ps",
        message: format!("pit code {} is not one of 0, 1, 2, 3", a.ps),
    })?;
    Ok(Action { d_ef: a.d_ef, d_eb: a.d_eb, ps })
}
