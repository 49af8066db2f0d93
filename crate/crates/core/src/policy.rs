//! The pit-wall agent: a frozen single-car backbone proposing a nominal
//! action and an interaction module adding a bounded correction from the
//! rival's public state.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    Driver, EgoObservation, EnvError, OpponentObservation, ACTION_DIM, EGO_OBS_DIM, OBS_DIM,
};
use crate::nn::{Activation, Mlp};
use crate::track::{decode_pit, Action, TrackConfig};

pub const HIDDEN: [usize; 2] = [64, 64];
/// Initial log-std bias of the stochastic heads.
pub const INIT_LOG_STD: f64 = -1.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Dimension(#[from] EnvError),
    #[error("policy shape mismatch: {0}")]
    Shape(String),
}

/// Fixed per-feature affine normalization, `(x - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ObsNormalizer {
    /// Maps each feature's physical range onto roughly `[-1, 1]`.
    pub fn from_track(cfg: &TrackConfig) -> Self {
        let n = f64::from(cfg.n_laps);
        let t_lap_hi = cfg.t0 + cfg.t_pit_in + cfg.t_pit_out + 15.0;
        let ranges: [(f64, f64); OBS_DIM] = [
            (0.0, cfg.e_b_max),
            (0.0, cfg.e_f0),
            (cfg.m_dry, cfg.m_start()),
            (0.0, n * (cfg.t0 + 5.0)),
            (0.0, 1.0),
            (1.0, 3.0),
            (0.0, cfg.wear_cap),
            (0.0, 1.0),
            (cfg.t0 - 5.0, t_lap_hi),
            (0.0, n),
            // rival: tire age, pit code, rule flag, gap
            (0.0, n / 2.0),
            (0.0, 3.0),
            (0.0, 1.0),
            (-5.0, 5.0),
        ];
        let offset = ranges.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let scale = ranges.iter().map(|(lo, hi)| (0.5 * (hi - lo)).max(1e-9)).collect();
        Self { offset, scale }
    }

    pub fn normalize(&self, x: &[f64], start: usize) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.offset[start + i]) / self.scale[start + i])
            .collect()
    }

    pub fn denormalize(&self, z: &[f64], start: usize) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale[start + i] + self.offset[start + i])
            .collect()
    }

    pub fn ego(&self, o: &EgoObservation) -> Vec<f64> {
        self.normalize(&o.0, 0)
    }

    /// Normalized `(o, õ)` concatenation.
    pub fn joint(&self, o: &EgoObservation, rival: &OpponentObservation) -> Vec<f64> {
        let mut v = self.normalize(&o.0, 0);
        v.extend(self.normalize(&rival.0, EGO_OBS_DIM));
        v
    }
}

/// Provenance carried into checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub name: String,
    pub provenance: String,
    pub elo: Option<f64>,
}

/// Saturates the summed normalized action and maps it to physical units.
pub fn compose(a_nom: &[f64; ACTION_DIM], delta: &[f64; ACTION_DIM], cfg: &TrackConfig) -> Action {
    let s: Vec<f64> = a_nom.iter().zip(delta).map(|(a, d)| (a + d).clamp(-1.0, 1.0)).collect();
    let affine = |x: f64, [lo, hi]: [f64; 2]| lo + 0.5 * (x + 1.0) * (hi - lo);
    Action {
        d_ef: affine(s[0], cfg.fuel_alloc_range),
        d_eb: affine(s[1], cfg.batt_alloc_range),
        ps: decode_pit(affine(s[2], [0.0, 3.0])).expect("finite after clamp"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Ego observation to `(mean, log_std)` of the nominal action.
    pub backbone: Mlp,
    /// Joint observation to `(mean, log_std)` of the correction.
    pub interaction: Mlp,
    pub normalizer: ObsNormalizer,
    /// Bound of the correction in normalized units.
    pub delta_bound: f64,
    pub backbone_frozen: bool,
    pub track: TrackConfig,
    pub meta: PolicyMeta,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(track: &TrackConfig, rng: &mut R) -> Self {
        let mut backbone = actor_net(EGO_OBS_DIM, rng);
        backbone.scale_output_rows(0..ACTION_DIM, 0.1);
        // Start near the nominal action and away from the pit threshold.
        backbone.set_output_bias(2, -1.5);
        let mut policy = Self {
            backbone,
            interaction: actor_net(OBS_DIM, rng),
            normalizer: ObsNormalizer::from_track(track),
            delta_bound: 1.0,
            backbone_frozen: false,
            track: track.clone(),
            meta: PolicyMeta::default(),
        };
        policy.reset_interaction(rng);
        policy.quantize();
        policy
    }

    /// Fresh interaction module whose mean head is exactly zero.
    pub fn reset_interaction<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut net = actor_net(OBS_DIM, rng);
        net.zero_output_rows(0..ACTION_DIM);
        self.interaction = net;
    }

    /// Rounds all parameters to `f32` so checkpoints round-trip exactly.
    pub fn quantize(&mut self) {
        self.backbone.quantize_f32();
        self.interaction.quantize_f32();
    }

    pub fn backbone_hash(&self) -> String {
        self.backbone.param_hash()
    }

    /// Deterministic nominal action in `[-1, 1]^3`.
    pub fn backbone_forward(&self, o: &EgoObservation) -> [f64; ACTION_DIM] {
        let out = self.backbone.forward(&self.normalizer.ego(o));
        [out[0].tanh(), out[1].tanh(), out[2].tanh()]
    }

    pub fn backbone_forward_slice(&self, o: &[f64]) -> Result<[f64; ACTION_DIM], PolicyError> {
        Ok(self.backbone_forward(&EgoObservation::from_slice(o)?))
    }

    /// Deterministic correction in `[-delta_bound, delta_bound]^3`.
    pub fn interaction_forward(&self, o: &EgoObservation, rival: &OpponentObservation) -> [f64; ACTION_DIM] {
        let out = self.interaction.forward(&self.normalizer.joint(o, rival));
        let d = self.delta_bound;
        [d * out[0].tanh(), d * out[1].tanh(), d * out[2].tanh()]
    }

    pub fn interaction_forward_slice(&self, o: &[f64], rival: &[f64]) -> Result<[f64; ACTION_DIM], PolicyError> {
        Ok(self.interaction_forward(&EgoObservation::from_slice(o)?, &OpponentObservation::from_slice(rival)?))
    }

    pub fn act_parts(&self, o: &EgoObservation, rival: &OpponentObservation) -> ActionParts {
        let a_nom = self.backbone_forward(o);
        let delta = self.interaction_forward(o, rival);
        ActionParts { a_nom, delta, action: compose(&a_nom, &delta, &self.track) }
    }

    /// Copy of this policy with a zero correction.
    pub fn backbone_only(&self) -> Policy {
        let mut p = self.clone();
        p.interaction.zero_output_rows(0..ACTION_DIM);
        p.meta = PolicyMeta {
            name: "backbone".into(),
            provenance: format!("backbone of {}", self.meta.name),
            elo: None,
        };
        p
    }
}

impl Driver for Policy {
    fn act(&self, ego: &EgoObservation, rival: &OpponentObservation) -> Action {
        self.act_parts(ego, rival).action
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionParts {
    pub a_nom: [f64; ACTION_DIM],
    pub delta: [f64; ACTION_DIM],
    pub action: Action,
}

/// Actor network: mean and log-std heads for a 3-dimensional action.
pub fn actor_net<R: Rng + ?Sized>(n_in: usize, rng: &mut R) -> Mlp {
    let mut net = Mlp::new(&[n_in, HIDDEN[0], HIDDEN[1], 2 * ACTION_DIM], Activation::Tanh, rng);
    for j in ACTION_DIM..2 * ACTION_DIM {
        net.zero_output_rows(j..j + 1);
        net.set_output_bias(j, INIT_LOG_STD);
    }
    net
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{Compound, PitCall};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_obs(rng: &mut ChaCha8Rng) -> (EgoObservation, OpponentObservation) {
        let mut o = [0.0; EGO_OBS_DIM];
        for v in &mut o {
            *v = rng.gen_range(-200.0..1000.0);
        }
        let r = [rng.gen_range(0.0..50.0), 2.0, 1.0, rng.gen_range(-20.0..20.0)];
        (EgoObservation(o), OpponentObservation(r))
    }

    #[test]
    fn fresh_policy_has_zero_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Policy::new(&TrackConfig::default(), &mut rng);
        for _ in 0..200 {
            let (o, r) = random_obs(&mut rng);
            assert_eq!(p.interaction_forward(&o, &r), [0.0; 3]);
            let a = p.backbone_forward(&o);
            assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
            assert_eq!(a, p.backbone_forward(&o));
            assert_eq!(p.act(&o, &r), compose(&a, &[0.0; 3], &p.track));
        }
    }

    #[test]
    fn correction_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Policy::new(&TrackConfig::default(), &mut rng);
        p.interaction = actor_net(OBS_DIM, &mut rng);
        for v in p.interaction.params_mut() {
            *v *= 40.0;
        }
        p.delta_bound = 0.3;
        for _ in 0..100 {
            let (o, r) = random_obs(&mut rng);
            let d = p.interaction_forward(&o, &r);
            assert!(d.iter().all(|x| x.abs() <= 0.3));
        }
    }

    #[test]
    fn compose_examples() {
        let cfg = TrackConfig::default();
        let a = compose(&[0.0, 0.0, 1.6 / 1.5 - 1.0], &[0.0; 3], &cfg);
        assert_eq!(a.ps, PitCall::Fit(Compound::Medium));
        assert!((a.d_ef - 1.0).abs() < 1e-12);
        assert_eq!(a.d_eb, 0.0);
        let a = compose(&[0.8, -0.9, -1.0], &[0.7, -0.5, 0.0], &cfg);
        assert_eq!(a.d_ef, 1.15);
        assert_eq!(a.d_eb, -1.0);
        assert_eq!(a.ps, PitCall::NoPit);
        let top = compose(&[0.0, 0.0, 1.0], &[0.0; 3], &cfg);
        assert_eq!(top.ps, PitCall::Fit(Compound::Hard));
    }

    #[test]
    fn normalizer_round_trip() {
        let n = ObsNormalizer::from_track(&TrackConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..OBS_DIM).map(|_| rng.gen_range(-500.0..6000.0)).collect();
            let back = n.denormalize(&n.normalize(&x, 0), 0);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Policy::new(&TrackConfig::default(), &mut rng);
        assert!(p.backbone_forward_slice(&[0.0; 11]).is_err());
        assert!(p.interaction_forward_slice(&[0.0; 10], &[0.0; 3]).is_err());
        assert!(p.backbone_forward_slice(&[0.0; 10]).is_ok());
    }

    #[test]
    fn fresh_backbone_does_not_pit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TrackConfig::default();
        let p = Policy::new(&cfg, &mut rng);
        let start = crate::track::CarState::race_start(&cfg, Compound::Medium);
        let o = EgoObservation::new(&start, cfg.t0, cfg.n_laps);
        assert_eq!(p.act(&o, &OpponentObservation([0.0; 4])).ps, PitCall::NoPit);
    }
}
