//! Single-car physical model: lap-time map, tire degradation, energy bookkeeping
//! and pit-stop decoding.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("tire wear {tw} outside [0, {cap}]")]
    WearOutOfRange { tw: f64, cap: f64 },
    #[error("invalid track config: {0}")]
    InvalidConfig(String),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Tire compound. The numeric codes match the pit-call codes that fit them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compound {
    Soft,
    Medium,
    Hard,
}

impl Compound {
    pub const ALL: [Compound; 3] = [Compound::Soft, Compound::Medium, Compound::Hard];

    pub fn code(self) -> u8 {
        match self {
            Compound::Soft => 1,
            Compound::Medium => 2,
            Compound::Hard => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Compound::Soft),
            2 => Some(Compound::Medium),
            3 => Some(Compound::Hard),
            _ => None,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Compound::Soft => 'S',
            Compound::Medium => 'M',
            Compound::Hard => 'H',
        }
    }
}

impl fmt::Display for Compound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Compound::Soft => "soft",
            Compound::Medium => "medium",
            Compound::Hard => "hard",
        })
    }
}

/// Per-lap pit decision (`PS`): 0 stay out, 1/2/3 pit for soft/medium/hard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitCall {
    NoPit,
    Fit(Compound),
}

impl PitCall {
    pub fn code(self) -> u8 {
        match self {
            PitCall::NoPit => 0,
            PitCall::Fit(c) => c.code(),
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PitCall::NoPit),
            c => Compound::from_code(c).map(PitCall::Fit),
        }
    }

    pub fn is_stop(self) -> bool {
        self != PitCall::NoPit
    }
}

/// Clip to `[0, 3]`, then round half up.
pub fn decode_pit(ps_raw: f64) -> Result<PitCall, ModelError> {
    if !ps_raw.is_finite() {
        return Err(ModelError::InvalidAction(format!("pit value {ps_raw} is not finite")));
    }
    let code = (ps_raw.clamp(0.0, 3.0) + 0.5).floor() as u8;
    Ok(PitCall::from_code(code.min(3)).expect("code within 0..=3"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompoundParams {
    /// Seconds added on a fresh set relative to a fresh soft.
    pub base_offset: f64,
    /// Linear wear penalty, seconds per unit wear.
    pub alpha: f64,
    /// Quadratic wear penalty, seconds per unit wear squared.
    pub beta: f64,
    /// Wear fraction accumulated per lap.
    pub wear_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompoundTable {
    pub soft: CompoundParams,
    pub medium: CompoundParams,
    pub hard: CompoundParams,
}

impl CompoundTable {
    pub fn get(&self, compound: Compound) -> &CompoundParams {
        match compound {
            Compound::Soft => &self.soft,
            Compound::Medium => &self.medium,
            Compound::Hard => &self.hard,
        }
    }
}

/// Piecewise-linear slipstream penalty `a * gap + b` inside `[gap_lo, gap_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionParams {
    pub a: f64,
    pub b: f64,
    pub gap_lo: f64,
    pub gap_hi: f64,
}

/// Every model constant. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    pub n_laps: u32,
    pub t0: f64,
    pub k_mass: f64,
    pub k_batt: f64,
    pub k_fuel: f64,
    pub m_dry: f64,
    pub fuel_unit_mass: f64,
    pub e_f0: f64,
    pub fuel_alloc_range: [f64; 2],
    pub e_b_max: f64,
    pub batt_alloc_range: [f64; 2],
    pub compounds: CompoundTable,
    pub t_pit_in: f64,
    pub t_pit_out: f64,
    pub interaction: InteractionParams,
    pub wear_cap: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            n_laps: 57,
            t0: 95.0,
            k_mass: 0.033,
            k_batt: 0.4,
            k_fuel: 1.2,
            m_dry: 800.0,
            fuel_unit_mass: 1.754,
            e_f0: 57.0,
            fuel_alloc_range: [0.85, 1.15],
            e_b_max: 1.0,
            batt_alloc_range: [-1.0, 1.0],
            compounds: CompoundTable {
                soft: CompoundParams { base_offset: 0.0, alpha: 2.5, beta: 3.0, wear_rate: 0.045 },
                medium: CompoundParams { base_offset: 0.4, alpha: 3.0, beta: 4.0, wear_rate: 0.032 },
                hard: CompoundParams { base_offset: 1.0, alpha: 3.5, beta: 5.0, wear_rate: 0.022 },
            },
            t_pit_in: 18.0,
            t_pit_out: 4.0,
            interaction: InteractionParams { a: -0.4, b: 0.6, gap_lo: 0.2, gap_hi: 1.5 },
            wear_cap: 1.5,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        let finite = [
            self.t0,
            self.k_mass,
            self.k_batt,
            self.k_fuel,
            self.m_dry,
            self.fuel_unit_mass,
            self.e_f0,
            self.e_b_max,
            self.t_pit_in,
            self.t_pit_out,
            self.wear_cap,
            self.interaction.a,
            self.interaction.b,
            self.interaction.gap_lo,
            self.interaction.gap_hi,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite constant");
        }
        if self.n_laps == 0 {
            return bad("n_laps must be positive");
        }
        if self.t0 <= 0.0 {
            return bad("t0 must be positive");
        }
        if self.interaction.a >= 0.0 {
            return bad("interaction slope a must be negative");
        }
        if self.interaction.gap_lo >= self.interaction.gap_hi {
            return bad("gap_lo must be below gap_hi");
        }
        let [f_lo, f_hi] = self.fuel_alloc_range;
        if !(f_lo.is_finite() && f_hi.is_finite() && f_lo < f_hi && f_lo >= 0.0) {
            return bad("fuel_alloc_range must be a nonempty nonnegative interval");
        }
        let [b_lo, b_hi] = self.batt_alloc_range;
        if !(b_lo.is_finite() && b_hi.is_finite() && b_lo < b_hi) {
            return bad("batt_alloc_range must be a nonempty interval");
        }
        if self.e_b_max <= 0.0 || self.e_f0 < 0.0 || self.wear_cap <= 0.0 {
            return bad("capacities must be positive");
        }
        let c = &self.compounds;
        if !(c.soft.wear_rate > c.medium.wear_rate
            && c.medium.wear_rate > c.hard.wear_rate
            && c.hard.wear_rate > 0.0)
        {
            return bad("wear rates must satisfy soft > medium > hard > 0");
        }
        if !(c.soft.base_offset < c.medium.base_offset && c.medium.base_offset < c.hard.base_offset) {
            return bad("base offsets must satisfy soft < medium < hard");
        }
        for p in [c.soft, c.medium, c.hard] {
            if p.alpha < 0.0 || p.beta < 0.0 || p.alpha + p.beta <= 0.0 {
                return bad("wear penalty must be strictly increasing");
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let cfg: TrackConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the compact JSON encoding. Checkpoints and matches refuse
    /// to mix policies trained on different configs.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(compact))
    }

    /// Fuel mass at race start.
    pub fn m_start(&self) -> f64 {
        self.m_dry + self.fuel_unit_mass * self.e_f0
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-car race state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub e_b: f64,
    pub e_f: f64,
    pub m_car: f64,
    pub t_race: f64,
    /// Two distinct compounds have been raced.
    pub b_cpd: bool,
    pub tc: Compound,
    pub tw: f64,
    /// The upcoming lap starts from the pit lane.
    pub b_outlap: bool,
    /// Laps on the current set.
    pub ta: u32,
}

impl CarState {
    /// Full tanks, full battery, fresh set of `compound`.
    pub fn race_start(cfg: &TrackConfig, compound: Compound) -> Self {
        Self {
            e_b: cfg.e_b_max,
            e_f: cfg.e_f0,
            m_car: cfg.m_start(),
            t_race: 0.0,
            b_cpd: false,
            tc: compound,
            tw: 0.0,
            b_outlap: false,
            ta: 0,
        }
    }

    /// The eight state components in model order.
    pub fn to_array(&self) -> [f64; 8] {
        [
            self.e_b,
            self.e_f,
            self.m_car,
            self.t_race,
            f64::from(u8::from(self.b_cpd)),
            f64::from(self.tc.code()),
            self.tw,
            f64::from(u8::from(self.b_outlap)),
        ]
    }
}

/// A pit-wall decision for one lap. Energy allocations are raw and get
/// clipped by the environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Fuel units allocated this lap (1.0 = nominal).
    pub d_ef: f64,
    /// Normalized battery deployment, negative recharges.
    pub d_eb: f64,
    pub ps: PitCall,
}

impl Action {
    pub fn new(d_ef: f64, d_eb: f64, ps: PitCall) -> Result<Self, ModelError> {
        if !d_ef.is_finite() {
            return Err(ModelError::InvalidAction(format!("d_ef {d_ef} is not finite")));
        }
        if !d_eb.is_finite() {
            return Err(ModelError::InvalidAction(format!("d_eb {d_eb} is not finite")));
        }
        Ok(Self { d_ef, d_eb, ps })
    }

    /// Nominal fuel, no deployment, stay out.
    pub fn nominal() -> Self {
        Self { d_ef: 1.0, d_eb: 0.0, ps: PitCall::NoPit }
    }
}

/// `base_offset + alpha * tw + beta * tw^2` for the given compound.
pub fn tire_time_penalty(compound: Compound, tw: f64, cfg: &TrackConfig) -> Result<f64, ModelError> {
    if !(0.0..=cfg.wear_cap).contains(&tw) {
        return Err(ModelError::WearOutOfRange { tw, cap: cfg.wear_cap });
    }
    let p = cfg.compounds.get(compound);
    Ok(p.base_offset + p.alpha * tw + p.beta * tw * tw)
}

pub fn wear_increment(compound: Compound, cfg: &TrackConfig) -> f64 {
    cfg.compounds.get(compound).wear_rate
}

/// Affine lap-time map plus pit-lane losses. Expects an already clipped action.
pub fn nominal_lap_time(state: &CarState, action: &Action, cfg: &TrackConfig) -> f64 {
    let mut t = cfg.t0 + cfg.k_mass * (state.m_car - cfg.m_dry)
        - cfg.k_batt * action.d_eb
        - cfg.k_fuel * (action.d_ef - 1.0);
    if action.ps.is_stop() {
        t += cfg.t_pit_in;
    }
    if state.b_outlap {
        t += cfg.t_pit_out;
    }
    t
}
