//! Model invariants checked over generated inputs.

use std::sync::{Arc, Mutex};

use gridwall_core::arena::{elo_expected, EloTable};
use gridwall_core::checkpoint::{decode, encode};
use gridwall_core::env::{
    final_reward, Driver, EgoObservation, EnvConfig, Episode, InitGap, OpponentObservation, ACTION_DIM,
};
use gridwall_core::policy::{compose, Policy};
use gridwall_core::track::{decode_pit, Action, Compound, PitCall, TrackConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_driver(seed: u64) -> Arc<dyn Driver> {
    let rng = Mutex::new(ChaCha8Rng::seed_from_u64(seed));
    Arc::new(move |_: &EgoObservation, _: &OpponentObservation| {
        let mut rng = rng.lock().unwrap();
        let ps = if rng.gen_bool(0.08) {
            PitCall::Fit([Compound::Soft, Compound::Medium, Compound::Hard][rng.gen_range(0..3)])
        } else {
            PitCall::NoPit
        };
        Action { d_ef: rng.gen_range(0.5..1.5), d_eb: rng.gen_range(-1.5..1.5), ps }
    })
}

fn expected_code(x: f64) -> u8 {
    // Nearest integer in [0, 3], halves going up.
    let c = x.clamp(0.0, 3.0);
    let lower = c.floor();
    if c - lower >= 0.5 {
        (lower + 1.0).min(3.0) as u8
    } else {
        lower as u8
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaps_stay_antisymmetric(seed in any::<u64>(), gap in -20.0f64..20.0) {
        let mut ep = Episode::reset(Arc::new(EnvConfig::default()), Some(random_driver(seed ^ 1)), seed, InitGap::Fixed(gap));
        let me = random_driver(seed);
        let mut laps = 0;
        while !ep.is_done() {
            let a = me.act(&ep.ego_observation(), &ep.rival_observation());
            ep.step(&a).unwrap();
            let d = ep.state().duel;
            prop_assert!((d.gap_1 + d.gap_i).abs() <= 1e-9);
            prop_assert_eq!(ep.rival_observation().t_gap(), d.gap_i);
            laps += 1;
        }
        prop_assert_eq!(laps, 57);
        prop_assert!(ep.step(&Action::nominal()).is_err());
    }

    #[test]
    fn bookkeeping_holds_every_lap(seed in any::<u64>(), gap in -3.0f64..3.0) {
        let env = Arc::new(EnvConfig::default());
        let cfg = env.track.clone();
        let mut ep = Episode::reset(env.clone(), Some(random_driver(seed ^ 7)), seed, InitGap::Fixed(gap));
        let me = random_driver(seed);
        let mut ret = 0.0;
        let mut clock = 0.0;
        while !ep.is_done() {
            let a = me.act(&ep.ego_observation(), &ep.rival_observation());
            let out = ep.step(&a).unwrap();
            ret += out.reward;
            clock += out.lap_1.t_lap;
            let s = ep.state();
            for car in [&s.car_1, &s.car_i] {
                prop_assert_eq!(car.m_car, cfg.m_dry + cfg.fuel_unit_mass * car.e_f);
                prop_assert!((0.0..=cfg.e_b_max).contains(&car.e_b));
                prop_assert!(car.e_f >= 0.0);
                prop_assert!((0.0..=cfg.wear_cap).contains(&car.tw));
            }
            let l = out.lap_1;
            prop_assert_eq!(l.t_lap, l.t_nom + l.tire_penalty + l.dt_int);
        }
        let s = ep.state();
        prop_assert!((s.car_1.t_race - clock).abs() <= 1e-9);
        let expected = 57.0 * env.reward.t_c - s.car_1.t_race + final_reward(s.duel.gap_1, s.car_1.b_cpd, &env.reward);
        prop_assert!((ret - expected).abs() <= 1e-9);
    }

    #[test]
    fn composed_actions_are_in_range(
        a in prop::array::uniform3(-3.0f64..3.0),
        d in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let cfg = TrackConfig::default();
        let act = compose(&a, &d, &cfg);
        prop_assert!((0.85..=1.15).contains(&act.d_ef));
        prop_assert!((-1.0..=1.0).contains(&act.d_eb));
        let s2 = (a[2] + d[2]).clamp(-1.0, 1.0);
        prop_assert_eq!(act.ps.code(), expected_code(1.5 * (s2 + 1.0)));
    }

    #[test]
    fn pit_decoding_rounds_half_up(x in -10.0f64..10.0) {
        prop_assert_eq!(decode_pit(x).unwrap().code(), expected_code(x));
    }

    #[test]
    fn fresh_interaction_is_inert(seed in any::<u64>(), obs_seed in any::<u64>()) {
        let cfg = TrackConfig::default();
        let policy = Policy::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(obs_seed);
        let ego = EgoObservation(std::array::from_fn(|_| rng.gen_range(-100.0..1000.0)));
        let opp = OpponentObservation(std::array::from_fn(|_| rng.gen_range(-50.0..50.0)));
        let parts = policy.act_parts(&ego, &opp);
        prop_assert_eq!(parts.delta, [0.0; ACTION_DIM]);
        prop_assert_eq!(parts.action, compose(&parts.a_nom, &[0.0; ACTION_DIM], &cfg));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Policy::new(&TrackConfig::default(), &mut rng);
        for w in p.interaction.params_mut() {
            *w += rng.gen_range(-0.1..0.1);
        }
        p.quantize();
        let back = decode(&encode(&p), Some(&p.track.hash())).unwrap();
        prop_assert_eq!(back.backbone_hash(), p.backbone_hash());
        prop_assert_eq!(back, p);
    }

    #[test]
    fn elo_is_zero_sum(results in prop::collection::vec((0usize..5, 1usize..5, 0u8..3), 1..300)) {
        let mut table = EloTable::default();
        let ids: Vec<String> = (0..5).map(|i| format!("a{i}")).collect();
        for id in &ids {
            table.add_agent(id);
        }
        for (a, off, s) in results {
            let b = (a + off) % 5;
            table.record(1, &ids[a], &ids[b], 0, 0.5, f64::from(s) / 2.0, false);
        }
        prop_assert_eq!(table.total(), 5000.0);
    }

    #[test]
    fn expected_scores_are_complementary(ra in -1000.0f64..4000.0, rb in -1000.0f64..4000.0) {
        prop_assert!((elo_expected(ra, rb) + elo_expected(rb, ra) - 1.0).abs() <= 1e-12);
        prop_assert!((elo_expected(ra, rb) > 0.5) == (ra > rb) || ra == rb);
    }
}
