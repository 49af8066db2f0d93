//! The episodic two-car race environment.
//!
//! Car 1 is driven from outside through [`Episode::step`]; car i is driven by
//! an embedded [`Driver`]. Both cars see their own full state plus the public
//! view of the rival, advance one lap per step with simultaneous-move
//! semantics, and the gap between them evolves zero-sum.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::duel::{interaction_penalty, update_gaps, DuelState};
use crate::track::{
    nominal_lap_time, tire_time_penalty, wear_increment, Action, CarState, Compound, PitCall,
    TrackConfig,
};

pub const EGO_OBS_DIM: usize = 10;
pub const OPP_OBS_DIM: usize = 4;
pub const OBS_DIM: usize = EGO_OBS_DIM + OPP_OBS_DIM;
pub const STATE_DIM: usize = 18;
pub const ACTION_DIM: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished after {0} laps")]
    Terminal(u32),
    #[error("expected {expected} observation values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid reward config: {0}")]
    InvalidReward(String),
}

/// Own-car view: the eight state components, the previous lap time and the
/// number of laps left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoObservation(pub [f64; EGO_OBS_DIM]);

impl EgoObservation {
    pub fn new(state: &CarState, t_lap: f64, laps_remaining: u32) -> Self {
        let s = state.to_array();
        let mut o = [0.0; EGO_OBS_DIM];
        o[..8].copy_from_slice(&s);
        o[8] = t_lap;
        o[9] = f64::from(laps_remaining);
        Self(o)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, EnvError> {
        let arr: [f64; EGO_OBS_DIM] = values
            .try_into()
            .map_err(|_| EnvError::Dimension { expected: EGO_OBS_DIM, got: values.len() })?;
        Ok(Self(arr))
    }

    pub fn laps_remaining(&self) -> f64 {
        self.0[9]
    }

    pub fn t_lap(&self) -> f64 {
        self.0[8]
    }

    /// Rebuilds the car state. Tire age is not part of the ego view and comes
    /// back as zero.
    pub fn car_state(&self) -> CarState {
        let o = &self.0;
        let tc = Compound::from_code(o[5].round().clamp(1.0, 3.0) as u8).expect("clamped code");
        CarState {
            e_b: o[0],
            e_f: o[1],
            m_car: o[2],
            t_race: o[3],
            b_cpd: o[4] >= 0.5,
            tc,
            tw: o[6],
            b_outlap: o[7] >= 0.5,
            ta: 0,
        }
    }
}

/// What a rival pit wall can see of a car: tire age, last pit call, whether
/// the compound rule is met, and that car's own gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpponentObservation(pub [f64; OPP_OBS_DIM]);

impl OpponentObservation {
    pub fn new(state: &CarState, last_ps: PitCall, t_gap: f64) -> Self {
        Self([
            f64::from(state.ta),
            f64::from(last_ps.code()),
            f64::from(u8::from(state.b_cpd)),
            t_gap,
        ])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, EnvError> {
        let arr: [f64; OPP_OBS_DIM] = values
            .try_into()
            .map_err(|_| EnvError::Dimension { expected: OPP_OBS_DIM, got: values.len() })?;
        Ok(Self(arr))
    }

    pub fn t_gap(&self) -> f64 {
        self.0[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub t_c: f64,
    pub c_win: f64,
    pub c_reg: f64,
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { t_c: 100.0, c_win: 30.0, c_reg: 50.0, gamma: 1.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.c_win.is_nan() || self.c_win <= 0.0 {
            return Err(EnvError::InvalidReward("c_win must be positive".into()));
        }
        if self.gamma != 1.0 {
            return Err(EnvError::InvalidReward("gamma is fixed at 1".into()));
        }
        if !(self.t_c.is_finite() && self.c_reg.is_finite() && self.c_reg >= 0.0) {
            return Err(EnvError::InvalidReward("t_c and c_reg must be finite".into()));
        }
        Ok(())
    }
}

pub fn step_reward(t_lap: f64, rc: &RewardConfig) -> f64 {
    rc.t_c - t_lap
}

pub fn final_reward(final_gap_1: f64, b_cpd: bool, rc: &RewardConfig) -> f64 {
    let win = if final_gap_1 < 0.0 { rc.c_win } else { 0.0 };
    let reg = if b_cpd { 0.0 } else { rc.c_reg };
    win - reg
}

/// Anything that can pick a lap action from the two observation views.
pub trait Driver: Send + Sync {
    fn act(&self, ego: &EgoObservation, rival: &OpponentObservation) -> Action;
}

impl<F> Driver for F
where
    F: Fn(&EgoObservation, &OpponentObservation) -> Action + Send + Sync,
{
    fn act(&self, ego: &EgoObservation, rival: &OpponentObservation) -> Action {
        self(ego, rival)
    }
}

pub const CLIP_FUEL: u8 = 1;
pub const CLIP_BATTERY: u8 = 2;

/// One lap of one car as realized by the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LapOutcome {
    pub t_lap: f64,
    pub t_nom: f64,
    pub tire_penalty: f64,
    pub dt_int: f64,
    pub d_ef: f64,
    pub d_eb: f64,
    pub ps: PitCall,
    /// Bitmask of [`CLIP_FUEL`] and [`CLIP_BATTERY`].
    pub clipped: u8,
}

/// Sanitizes the action, runs the lap and returns the next state.
pub fn advance_car(
    state: &CarState,
    action: &Action,
    dt_int: f64,
    cfg: &TrackConfig,
) -> (CarState, LapOutcome) {
    let mut clipped = 0;

    let [f_lo, f_hi] = cfg.fuel_alloc_range;
    let mut d_ef = action.d_ef.clamp(f_lo, f_hi);
    if d_ef > state.e_f {
        d_ef = state.e_f.max(0.0);
    }
    if d_ef != action.d_ef {
        clipped |= CLIP_FUEL;
    }

    let [b_lo, b_hi] = cfg.batt_alloc_range;
    let d_eb = action
        .d_eb
        .clamp(b_lo, b_hi)
        .clamp(state.e_b - cfg.e_b_max, state.e_b);
    if d_eb != action.d_eb {
        clipped |= CLIP_BATTERY;
    }

    let realized = Action { d_ef, d_eb, ps: action.ps };
    let t_nom = nominal_lap_time(state, &realized, cfg);
    // The outgoing set runs the whole pit lap.
    let tire_penalty = tire_time_penalty(state.tc, state.tw, cfg)
        .expect("tire wear kept within [0, wear_cap]");
    let t_lap = t_nom + tire_penalty + dt_int;

    let e_f = (state.e_f - d_ef).max(0.0);
    let mut next = CarState {
        e_b: (state.e_b - d_eb).clamp(0.0, cfg.e_b_max),
        e_f,
        m_car: cfg.m_dry + cfg.fuel_unit_mass * e_f,
        t_race: state.t_race + t_lap,
        ..*state
    };
    match action.ps {
        PitCall::NoPit => {
            next.tw = (state.tw + wear_increment(state.tc, cfg)).min(cfg.wear_cap);
            next.ta = state.ta + 1;
            next.b_outlap = false;
        }
        PitCall::Fit(compound) => {
            next.b_cpd = state.b_cpd || compound != state.tc;
            next.tc = compound;
            next.tw = 0.0;
            next.ta = 0;
            next.b_outlap = true;
        }
    }

    let outcome = LapOutcome {
        t_lap,
        t_nom,
        tire_penalty,
        dt_int,
        d_ef,
        d_eb,
        ps: action.ps,
        clipped,
    };
    (next, outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitGap {
    Fixed(f64),
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub track: TrackConfig,
    pub reward: RewardConfig,
    /// Uniform sampling interval for [`InitGap::Sample`].
    pub gap_sample_range: [f64; 2],
    pub start_compound: Compound,
}

impl EnvConfig {
    pub fn new(track: TrackConfig) -> Self {
        Self {
            track,
            reward: RewardConfig::default(),
            gap_sample_range: [-2.0, 2.0],
            start_compound: Compound::Medium,
        }
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::new(TrackConfig::default())
    }
}

/// Full simulator state. The flattened Markov state is [`Self::flatten`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub k: u32,
    pub car_1: CarState,
    pub car_i: CarState,
    pub duel: DuelState,
    pub last_ps_1: PitCall,
    pub last_ps_i: PitCall,
    pub last_t_lap_1: f64,
    pub last_t_lap_i: f64,
    pub seed: u64,
}

impl EpisodeState {
    /// `(s1, gap1, si, gapi)`.
    pub fn flatten(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[..8].copy_from_slice(&self.car_1.to_array());
        out[8] = self.duel.gap_1;
        out[9..17].copy_from_slice(&self.car_i.to_array());
        out[17] = self.duel.gap_i;
        out
    }
}

/// Per-lap result for both cars.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub ego: EgoObservation,
    pub rival: OpponentObservation,
    pub reward: f64,
    pub done: bool,
    pub lap_1: LapOutcome,
    /// `None` in solo mode.
    pub lap_i: Option<LapOutcome>,
}

/// One race. Without a rival it is the single-car problem: no slipstream and
/// no winner bonus.
#[derive(Clone)]
pub struct Episode {
    cfg: Arc<EnvConfig>,
    rival: Option<Arc<dyn Driver>>,
    state: EpisodeState,
}

impl std::fmt::Debug for Episode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Episode")
            .field("solo", &self.rival.is_none())
            .field("state", &self.state)
            .finish()
    }
}

impl Episode {
    pub fn reset(
        cfg: Arc<EnvConfig>,
        rival: Option<Arc<dyn Driver>>,
        seed: u64,
        init_gap: InitGap,
    ) -> Self {
        let gap = match init_gap {
            InitGap::Fixed(g) => g,
            InitGap::Sample => {
                let [lo, hi] = cfg.gap_sample_range;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
        };
        let car = CarState::race_start(&cfg.track, cfg.start_compound);
        let state = EpisodeState {
            k: 0,
            car_1: car,
            car_i: car,
            duel: DuelState::antisymmetric(gap),
            last_ps_1: PitCall::NoPit,
            last_ps_i: PitCall::NoPit,
            last_t_lap_1: cfg.track.t0,
            last_t_lap_i: cfg.track.t0,
            seed,
        };
        Self { cfg, rival, state }
    }

    /// Resumes from an arbitrary state.
    pub fn from_state(cfg: Arc<EnvConfig>, rival: Option<Arc<dyn Driver>>, state: EpisodeState) -> Self {
        Self { cfg, rival, state }
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn is_solo(&self) -> bool {
        self.rival.is_none()
    }

    pub fn is_done(&self) -> bool {
        self.state.k >= self.cfg.track.n_laps
    }

    pub fn laps_remaining(&self) -> u32 {
        self.cfg.track.n_laps - self.state.k
    }

    /// Car 1's own view.
    pub fn ego_observation(&self) -> EgoObservation {
        EgoObservation::new(&self.state.car_1, self.state.last_t_lap_1, self.laps_remaining())
    }

    /// Car 1's view of car i.
    pub fn rival_observation(&self) -> OpponentObservation {
        OpponentObservation::new(&self.state.car_i, self.state.last_ps_i, self.state.duel.gap_i)
    }

    /// Car i's own view and its view of car 1.
    pub fn mirrored_observations(&self) -> (EgoObservation, OpponentObservation) {
        let s = &self.state;
        (
            EgoObservation::new(&s.car_i, s.last_t_lap_i, self.laps_remaining()),
            OpponentObservation::new(&s.car_1, s.last_ps_1, s.duel.gap_1),
        )
    }

    pub fn step(&mut self, action_1: &Action) -> Result<StepOutcome, EnvError> {
        if self.is_done() {
            return Err(EnvError::Terminal(self.state.k));
        }
        let track = &self.cfg.track;
        let rc = &self.cfg.reward;

        let lap_i_input = self.rival.as_ref().map(|driver| {
            let (ego_i, view_of_1) = self.mirrored_observations();
            driver.act(&ego_i, &view_of_1)
        });

        let s = &self.state;
        let (car_1, lap_1, car_i, lap_i, duel) = match lap_i_input {
            Some(action_i) => {
                // Both cars use the gaps from before the lap.
                let dt_1 = interaction_penalty(s.duel.gap_1, track);
                let dt_i = interaction_penalty(s.duel.gap_i, track);
                let (car_1, lap_1) = advance_car(&s.car_1, action_1, dt_1, track);
                let (car_i, lap_i) = advance_car(&s.car_i, &action_i, dt_i, track);
                let duel = update_gaps(s.duel, lap_1.t_lap, lap_i.t_lap);
                (car_1, lap_1, car_i, Some(lap_i), duel)
            }
            None => {
                let (car_1, lap_1) = advance_car(&s.car_1, action_1, 0.0, track);
                (car_1, lap_1, s.car_i, None, s.duel)
            }
        };

        let k = s.k + 1;
        let done = k == track.n_laps;
        let mut reward = step_reward(lap_1.t_lap, rc);
        if done {
            reward += if self.rival.is_some() {
                final_reward(duel.gap_1, car_1.b_cpd, rc)
            } else {
                final_reward(0.0, car_1.b_cpd, rc)
            };
        }

        let st = &mut self.state;
        st.k = k;
        st.car_1 = car_1;
        st.duel = duel;
        st.last_ps_1 = lap_1.ps;
        st.last_t_lap_1 = lap_1.t_lap;
        if let Some(lap_i) = lap_i {
            st.car_i = car_i;
            st.last_ps_i = lap_i.ps;
            st.last_t_lap_i = lap_i.t_lap;
        }

        Ok(StepOutcome {
            ego: self.ego_observation(),
            rival: self.rival_observation(),
            reward,
            done,
            lap_1,
            lap_i,
        })
    }
}
