//! Acceptance suite. Runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line each; exits non-zero if any fails.
//!
//! The training criteria drive the real `gridwall` binary at the default
//! desk budget, so a full run takes around half an hour on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use gridwall_core::arena::{elo_expected, elo_update, run_arena, Agent, ArenaConfig, EloTable, GapSampler};
use gridwall_core::checkpoint::{load_checkpoint, save_checkpoint};
use gridwall_core::duel::interaction_penalty;
use gridwall_core::env::{
    Driver, EgoObservation, EnvConfig, Episode, InitGap, OpponentObservation, ACTION_DIM, EGO_OBS_DIM, OPP_OBS_DIM,
};
use gridwall_core::nn::{Activation, Matrix, Mlp};
use gridwall_core::policy::{compose, Policy};
use gridwall_core::replay::{batch_of, Transition};
use gridwall_core::sac::{Sac, SacConfig, LOG_STD_MAX, LOG_STD_MIN};
use gridwall_core::track::{Action, Compound, PitCall, TrackConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

struct Suite {
    /// Substring filter from the command line, as with the default harness.
    filter: Option<String>,
    run: usize,
    failed: Vec<&'static str>,
}

impl Suite {
    fn check(&mut self, name: &'static str, f: impl FnOnce() -> Verdict) {
        if self.filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            return;
        }
        self.run += 1;
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS  {name:<26} {detail} [{secs:.1} s]"),
            Err(detail) => {
                println!("FAIL  {name:<26} {detail} [{secs:.1} s]");
                self.failed.push(name);
            }
        }
    }
}

fn ensure(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn env() -> Arc<EnvConfig> {
    Arc::new(EnvConfig::default())
}

/// Uniformly random actions, including out-of-range allocations and stops.
fn random_driver(seed: u64) -> Arc<dyn Driver> {
    let rng = Mutex::new(ChaCha8Rng::seed_from_u64(seed));
    Arc::new(move |_: &EgoObservation, _: &OpponentObservation| {
        let mut rng = rng.lock().unwrap();
        let ps = if rng.gen_bool(0.06) {
            PitCall::Fit([Compound::Soft, Compound::Medium, Compound::Hard][rng.gen_range(0..3)])
        } else {
            PitCall::NoPit
        };
        Action { d_ef: rng.gen_range(0.7..1.3), d_eb: rng.gen_range(-1.2..1.2), ps }
    })
}

/// Constant allocations `(1, 0)` with stops at the given 0-based laps.
fn scripted(stops: Vec<(u32, Compound)>) -> Arc<dyn Driver> {
    let n_laps = TrackConfig::default().n_laps;
    Arc::new(move |ego: &EgoObservation, _: &OpponentObservation| {
        let lap = n_laps - ego.0[9] as u32;
        let ps = stops.iter().find(|(l, _)| *l == lap).map_or(PitCall::NoPit, |(_, c)| PitCall::Fit(*c));
        Action { d_ef: 1.0, d_eb: 0.0, ps }
    })
}

fn dimensional_contract() -> Verdict {
    let ep = Episode::reset(env(), Some(random_driver(0)), 0, InitGap::Fixed(0.5));
    let s = ep.state().flatten().len();
    let o = ep.ego_observation().0.len() + ep.rival_observation().0.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let policy = Policy::new(&TrackConfig::default(), &mut rng);
    let a = policy.act_parts(&ep.ego_observation(), &ep.rival_observation()).a_nom.len();
    ensure(
        (s, o, a, ACTION_DIM, EGO_OBS_DIM + OPP_OBS_DIM) == (18, 14, 3, 3, 14),
        format!("state {s}, observation {o}, action {a}"),
    )
}

fn gap_antisymmetry() -> Verdict {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut laps = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for e in 0..1000u64 {
        let me = random_driver(2 * e + 10_000);
        let gap = rng.gen_range(-3.0..3.0);
        let mut ep = Episode::reset(env(), Some(random_driver(2 * e + 10_001)), e, InitGap::Fixed(gap));
        while !ep.is_done() {
            let a = me.act(&ep.ego_observation(), &ep.rival_observation());
            ep.step(&a).map_err(|err| err.to_string())?;
            let d = ep.state().duel;
            worst = worst.max((d.gap_1 + d.gap_i).abs());
            laps += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-9 && laps == 57_000 && secs < 10.0,
        format!("max |gap_1 + gap_i| = {worst:e} over {laps} laps in {secs:.2} s"),
    )
}

fn interaction_penalty_shape() -> Verdict {
    let cfg = TrackConfig::default();
    let mut outside = Vec::new();
    for i in 0..=4000 {
        let g = -10.0 + 20.0 * f64::from(i) / 4000.0;
        if !(0.2..=1.5).contains(&g) && interaction_penalty(g, &cfg) != 0.0 {
            outside.push(g);
        }
    }
    for g in [0.2 - 1e-12, 1.5 + 1e-12, f64::MAX, f64::MIN, 0.0] {
        if interaction_penalty(g, &cfg) != 0.0 {
            outside.push(g);
        }
    }
    let at_hi = interaction_penalty(1.5, &cfg);
    let continuity = (at_hi - interaction_penalty(1.5 + 1e-9, &cfg)).abs();
    let at_lo = interaction_penalty(0.2, &cfg);
    let direct = -0.4 * 0.2 + 0.6;
    ensure(
        outside.is_empty() && continuity <= 1e-12 && at_lo == direct && (at_lo - 0.52).abs() < 1e-15,
        format!("nonzero outside window at {} points, jump at 1.5 = {continuity:e}, value at 0.2 = {at_lo}", outside.len()),
    )
}

fn random_observation(rng: &mut ChaCha8Rng, cfg: &TrackConfig) -> (EgoObservation, OpponentObservation) {
    let n = f64::from(cfg.n_laps);
    let e_f = rng.gen_range(0.0..cfg.e_f0);
    let ego = [
        rng.gen_range(0.0..cfg.e_b_max),
        e_f,
        cfg.m_dry + cfg.fuel_unit_mass * e_f,
        rng.gen_range(0.0..n * 100.0),
        f64::from(rng.gen_range(0..2u8)),
        f64::from(rng.gen_range(1..4u8)),
        rng.gen_range(0.0..cfg.wear_cap),
        f64::from(rng.gen_range(0..2u8)),
        rng.gen_range(90.0..125.0),
        f64::from(rng.gen_range(1..=cfg.n_laps)),
    ];
    let opp = [
        f64::from(rng.gen_range(0..cfg.n_laps)),
        f64::from(rng.gen_range(0..4u8)),
        f64::from(rng.gen_range(0..2u8)),
        rng.gen_range(-30.0..30.0),
    ];
    (EgoObservation(ego), OpponentObservation(opp))
}

fn zero_init_equivalence() -> Verdict {
    let cfg = TrackConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    let mut policies = 0;
    for p in 0..10u64 {
        let policy = Policy::new(&cfg, &mut ChaCha8Rng::seed_from_u64(p));
        policies += 1;
        for _ in 0..1000 {
            let (ego, opp) = random_observation(&mut rng, &cfg);
            let composed = policy.act(&ego, &opp);
            let backbone = compose(&policy.backbone_forward(&ego), &[0.0; ACTION_DIM], &cfg);
            if composed != backbone || policy.interaction_forward(&ego, &opp) != [0.0; ACTION_DIM] {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, format!("{mismatches} mismatches over 10^4 observations ({policies} fresh policies)"))
}

fn bookkeeping() -> Verdict {
    let rc = EnvConfig::default().reward;
    let cfg = TrackConfig::default();
    let mut mass_errors = 0;
    let mut worst_return: f64 = 0.0;
    for e in 0..200u64 {
        let me = random_driver(e + 50_000);
        let mut ep = Episode::reset(env(), Some(random_driver(e + 60_000)), e, InitGap::Fixed(0.5));
        let mut ret = 0.0;
        while !ep.is_done() {
            let a = me.act(&ep.ego_observation(), &ep.rival_observation());
            ret += ep.step(&a).map_err(|err| err.to_string())?.reward;
            let s = ep.state();
            for car in [&s.car_1, &s.car_i] {
                if car.m_car != cfg.m_dry + cfg.fuel_unit_mass * car.e_f {
                    mass_errors += 1;
                }
            }
        }
        let s = ep.state();
        let win = if s.duel.gap_1 < 0.0 { 30.0 } else { 0.0 };
        let reg = if s.car_1.b_cpd { 0.0 } else { -50.0 };
        let expected = f64::from(cfg.n_laps) * rc.t_c - s.car_1.t_race + win + reg;
        worst_return = worst_return.max((ret - expected).abs());
    }
    ensure(
        mass_errors == 0 && worst_return <= 1e-9,
        format!("{mass_errors} mass mismatches, max return error {worst_return:e} over 200 episodes"),
    )
}

fn elo_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ids: Vec<String> = (0..8).map(|i| format!("agent{i}")).collect();
    let mut table = EloTable::new(32.0, 1000.0);
    for id in &ids {
        table.add_agent(id);
    }
    let start = table.total();
    for n in 0..10_000u64 {
        let a = rng.gen_range(0..ids.len());
        let b = (a + rng.gen_range(1..ids.len())) % ids.len();
        let score = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
        table.record(1, &ids[a], &ids[b], n, 0.5, score, false);
    }
    let drift = table.total() - start;
    let mut asym: f64 = 0.0;
    for _ in 0..10_000 {
        let (ra, rb) = (rng.gen_range(0.0..3000.0), rng.gen_range(0.0..3000.0));
        asym = asym.max((elo_expected(ra, rb) + elo_expected(rb, ra) - 1.0).abs());
    }
    let (wa, wb) = elo_update(1000.0, 1000.0, 1.0, 32.0);
    ensure(
        drift == 0.0 && asym <= 1e-12 && (wa, wb) == (1016.0, 984.0),
        format!("sum drift {drift} after 10^4 updates, max symmetry error {asym:e}, equal-rating win {wa}/{wb}"),
    )
}

/// Plain forward pass straight from the flat parameter layout.
fn naive_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut off = 0;
    for s in net.shapes() {
        let p = net.params();
        cur = (0..s.n_out)
            .map(|o| {
                let mut z = p[off + s.n_in * s.n_out + o];
                for i in 0..s.n_in {
                    z += p[off + o * s.n_in + i] * cur[i];
                }
                match s.activation {
                    Activation::Tanh => z.tanh(),
                    Activation::Identity => z,
                }
            })
            .collect();
        off += s.n_in * s.n_out + s.n_out;
    }
    cur
}

fn central_differences(net: &Mlp, loss: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut probe = net.clone();
    (0..net.n_params())
        .map(|i| {
            let p = net.params()[i];
            probe.params_mut()[i] = p + h;
            let up = loss(&probe);
            probe.params_mut()[i] = p - h;
            let down = loss(&probe);
            probe.params_mut()[i] = p;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest per-component relative error; components below 1e-5 are judged on
/// that scale, the round-off floor of the differences.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
        .fold(0.0, f64::max)
}

fn gradient_check() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let obs_dim = EGO_OBS_DIM + OPP_OBS_DIM;
    let actor = gridwall_core::policy::actor_net(obs_dim, &mut rng);
    let mut sac = Sac::new(actor, SacConfig::default(), &mut rng);
    sac.log_alpha = 0.2f64.ln();
    let n = 16;
    let ts: Vec<Transition> = (0..n)
        .map(|i| Transition {
            obs: (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            action: (0..3).map(|_| rng.gen_range(-0.95..0.95)).collect(),
            reward: rng.gen_range(-5.0..5.0),
            next_obs: (0..obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            done: i % 4 == 3,
            episode: 0,
            lap: 1,
        })
        .collect();
    let batch = batch_of(&ts.iter().collect::<Vec<_>>());
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let noise = Matrix::from_rows(n, 3, (0..3 * n).map(|_| rng.gen_range(-2.0..2.0)).collect());

    let mut critic_err: f64 = 0.0;
    for c in &sac.critics {
        let (_, analytic) = Sac::critic_loss(c, &batch, &targets);
        let numeric = central_differences(c, |net| {
            ts.iter()
                .zip(&targets)
                .map(|(t, y)| {
                    let x: Vec<f64> = t.obs.iter().chain(&t.action).copied().collect();
                    (naive_forward(net, &x)[0] - y).powi(2) / n as f64
                })
                .sum()
        });
        critic_err = critic_err.max(relative_error(&analytic, &numeric));
    }

    let (_, analytic, _) = sac.actor_loss(&batch.obs, &noise);
    let alpha = sac.alpha();
    let numeric = central_differences(&sac.actor, |net| {
        let mut total = 0.0;
        for (r, t) in ts.iter().enumerate() {
            let head = naive_forward(net, &t.obs);
            let mut log_prob = 0.0;
            let mut x = t.obs.clone();
            for j in 0..3 {
                let log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (head[3 + j].tanh() + 1.0);
                let eps = noise.row(r)[j];
                let y = (head[j] + log_std.exp() * eps).tanh();
                // Gaussian density pushed through tanh.
                let gauss = (-0.5 * eps * eps).exp() / (log_std.exp() * (2.0 * std::f64::consts::PI).sqrt());
                log_prob += (gauss / (1.0 - y * y)).ln();
                x.push(y);
            }
            let q = naive_forward(&sac.critics[0], &x)[0].min(naive_forward(&sac.critics[1], &x)[0]);
            total += (alpha * log_prob - q) / n as f64;
        }
        total
    });
    let actor_err = relative_error(&analytic, &numeric);
    ensure(
        critic_err <= 1e-4 && actor_err <= 1e-4,
        format!("max relative error: critics {critic_err:e}, actor {actor_err:e} (batch of {n}, f64)"),
    )
}

fn gridwall(args: &[&str], cwd: &Path) -> Result<(String, Duration), String> {
    let started = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_gridwall"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| format!("spawning gridwall: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!("gridwall {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok((stdout, started.elapsed()))
}

fn match_determinism(dir: &Path) -> Verdict {
    let track = TrackConfig::default();
    let agents = dir.join("agents");
    for (i, name) in ["alpha", "bravo"].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut p = Policy::new(&track, &mut rng);
        for w in p.interaction.params_mut() {
            *w += rng.gen_range(-0.05..0.05);
        }
        p.quantize();
        save_checkpoint(&p, agents.join(format!("{name}.gwc"))).map_err(|e| e.to_string())?;
    }
    let run = |trace: &str| gridwall(&["match", "alpha", "bravo", "--seed", "17", "--gap", "0.5", "--trace", trace], dir);
    run("first.csv")?;
    run("second.csv")?;
    let a = std::fs::read(dir.join("first.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dir.join("second.csv")).map_err(|e| e.to_string())?;
    let rows = a.iter().filter(|&&c| c == b'\n').count();
    ensure(a == b && rows == 115, format!("two runs byte-identical: {}, {} bytes, {rows} lines", a == b, a.len()))
}

/// Single-car race time of the fixed-allocation one-stop strategy, searched
/// over every pit lap and both compounds that satisfy the rule.
fn baseline_race_time() -> f64 {
    let env = env();
    let mut best = f64::INFINITY;
    for lap in 0..env.track.n_laps {
        for c in [Compound::Soft, Compound::Hard] {
            let d = scripted(vec![(lap, c)]);
            let mut ep = Episode::reset(env.clone(), None, 0, InitGap::Fixed(0.0));
            while !ep.is_done() {
                let a = d.act(&ep.ego_observation(), &ep.rival_observation());
                ep.step(&a).expect("running");
            }
            let car = ep.state().car_1;
            if car.b_cpd {
                best = best.min(car.t_race);
            }
        }
    }
    best
}

fn pretraining_efficacy(dir: &Path) -> Verdict {
    let (_, elapsed) = gridwall(&["pretrain", "--seed", "0", "--out", "agents/backbone.gwc", "--log", "pretrain_log.csv"], dir)?;
    let policy = load_checkpoint(dir.join("agents/backbone.gwc"), &TrackConfig::default()).map_err(|e| e.to_string())?;
    let solo = policy.backbone_only();
    let mut ep = Episode::reset(env(), None, 0, InitGap::Fixed(0.0));
    while !ep.is_done() {
        let a = solo.act(&ep.ego_observation(), &ep.rival_observation());
        ep.step(&a).map_err(|e| e.to_string())?;
    }
    let car = ep.state().car_1;
    let baseline = baseline_race_time();
    let margin = baseline - car.t_race;
    let minutes = car.t_race / 60.0;
    let secs = elapsed.as_secs_f64();
    ensure(
        car.b_cpd && margin >= 5.0 && (minutes - 90.0).abs() <= 5.0 && secs <= 1800.0,
        format!(
            "race {:.3} s ({minutes:.2} min, rule {}), baseline {baseline:.3} s, margin {margin:.2} s, trained in {secs:.0} s",
            car.t_race, car.b_cpd
        ),
    )
}

fn selfplay_efficacy(dir: &Path) -> Verdict {
    let (_, elapsed) = gridwall(&["selfplay", "--iters", "1", "--seed", "0", "--log", "selfplay_log.csv"], dir)?;
    let track = TrackConfig::default();
    let best = load_checkpoint(dir.join("agents/selfplay-s0-it1.gwc"), &track).map_err(|e| e.to_string())?;
    let backbone = load_checkpoint(dir.join("agents/backbone.gwc"), &track).map_err(|e| e.to_string())?;
    let env = env();
    let a = Agent::new("best", Arc::new(best) as Arc<dyn Driver>, track.hash());
    let b = Agent::new("backbone", Arc::new(backbone) as Arc<dyn Driver>, track.hash());
    let started = Instant::now();
    let (mut wins, mut draws) = (0, 0);
    let mut by_gap = Vec::new();
    for gap in [0.5, -0.5] {
        let mut w = 0;
        for seed in 0..100 {
            let m = gridwall_core::arena::play_match(&a, &b, &env, seed, gap).map_err(|e| e.to_string())?;
            match m.winner {
                gridwall_core::arena::Winner::A => w += 1,
                gridwall_core::arena::Winner::Draw => draws += 1,
                gridwall_core::arena::Winner::B => {}
            }
        }
        wins += w;
        by_gap.push(format!("{w}/100 at {gap:+}"));
    }
    let match_secs = started.elapsed().as_secs_f64();
    let train_secs = elapsed.as_secs_f64();
    ensure(
        wins >= 120 && train_secs <= 1800.0 && match_secs < 60.0,
        format!(
            "won {wins}/200 ({}, {draws} draws), trained in {train_secs:.0} s, matches in {match_secs:.1} s",
            by_gap.join(", ")
        ),
    )
}

fn frozen_backbone(dir: &Path) -> Verdict {
    let track = TrackConfig::default();
    let before = load_checkpoint(dir.join("agents/backbone.gwc"), &track).map_err(|e| e.to_string())?;
    let after = load_checkpoint(dir.join("agents/selfplay-s0-it1.gwc"), &track).map_err(|e| e.to_string())?;
    let (h0, h1) = (before.backbone_hash(), after.backbone_hash());
    let moved = after.interaction.params() != before.interaction.params();
    ensure(
        h0 == h1 && moved && after.backbone_frozen,
        format!("backbone hash {}.. before and {}.. after one iteration; interaction changed: {moved}", &h0[..12], &h1[..12]),
    )
}

fn compound_rule() -> Verdict {
    let env = env();
    let hash = env.track.hash();
    let never = Agent::new("never-pit", scripted(Vec::new()), hash.clone());
    let legal = Agent::new("one-stop", scripted(vec![(25, Compound::Hard)]), hash);
    // Far enough apart that the never-pit car takes the flag first in one orientation.
    let cfg = ArenaConfig { rounds: 1, epsilon: 0.0, gaps: GapSampler::Fixed(vec![2000.0]), seed: 3 };
    let out = run_arena(&[never, legal], &env, &cfg, None).map_err(|e| e.to_string())?;
    let mut ahead_losses = 0;
    for m in &out.matches {
        let (rule, ahead, score) = if m.agent_a == "never-pit" {
            (m.compound_rule_a, m.final_gap < 0.0, m.score_a())
        } else {
            (m.compound_rule_b, m.final_gap > 0.0, 1.0 - m.score_a())
        };
        if rule || score != 0.0 {
            return Err(format!("never-pit scored {score} with rule flag {rule}"));
        }
        if ahead {
            ahead_losses += 1;
        }
    }
    let never_rating = out.table.rating("never-pit").unwrap_or(f64::NAN);
    ensure(
        ahead_losses >= 1 && never_rating < 1000.0,
        format!(
            "never-pit lost all {} matches with b_cpd = false, {ahead_losses} of them while ahead on gap; rating {never_rating:.1}",
            out.matches.len()
        ),
    )
}

/// Both cars two-stop soft-soft with a common second stop. Car 1 starts
/// behind; search every pair of first-stop laps whose out-laps end before the
/// second stop for one where car 1 stops earlier and is ahead once the rival
/// completes its out-lap.
fn undercut_existence() -> Verdict {
    let env = env();
    let second = 38;
    let start_gap = 1.0;
    let mut found = Vec::new();
    let mut rollouts = 0;
    for p in 1..second - 1 {
        for q in 1..second - 1 {
            rollouts += 1;
            let me = scripted(vec![(p, Compound::Soft), (second, Compound::Soft)]);
            let rival = scripted(vec![(q, Compound::Soft), (second, Compound::Soft)]);
            let mut ep = Episode::reset(env.clone(), Some(rival), 0, InitGap::Fixed(start_gap));
            // gaps[k] is car 1's gap after k laps.
            let mut gaps = vec![start_gap];
            while !ep.is_done() {
                let a = me.act(&ep.ego_observation(), &ep.rival_observation());
                ep.step(&a).map_err(|e| e.to_string())?;
                gaps.push(ep.state().duel.gap_1);
            }
            let behind_at_stop = gaps[p as usize] > 0.0;
            let ahead_after_rival_outlap = gaps[q as usize + 2] < 0.0;
            if p < q && behind_at_stop && ahead_after_rival_outlap {
                found.push((p, q, -gaps[q as usize + 2]));
            }
        }
    }
    // Report the tightest one: the rival reacts a single lap later.
    let detail = match found.iter().filter(|(p, q, _)| q - p == 1).max_by(|x, y| x.2.total_cmp(&y.2)) {
        Some((p, q, lead)) => format!(
            "{} of {rollouts} pit-lap pairs undercut; e.g. car 1 stops lap {}, rival lap {}, car 1 leads by {lead:.3} s after the rival's out-lap",
            found.len(),
            p + 1,
            q + 1,
        ),
        None if !found.is_empty() => format!("{} of {rollouts} pit-lap pairs undercut", found.len()),
        None => format!("no undercut in {rollouts} pit-lap pairs"),
    };
    ensure(!found.is_empty() && rollouts <= 57 * 57, detail)
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let dir: PathBuf = work.path().to_path_buf();
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut suite = Suite { filter, run: 0, failed: Vec::new() };
    println!("acceptance suite, working directory {}", dir.display());

    suite.check("dimensional contract", dimensional_contract);
    suite.check("gap antisymmetry", gap_antisymmetry);
    suite.check("interaction penalty", interaction_penalty_shape);
    suite.check("zero-init equivalence", zero_init_equivalence);
    suite.check("bookkeeping identities", bookkeeping);
    suite.check("elo", elo_properties);
    suite.check("gradient check", gradient_check);
    suite.check("match determinism", || match_determinism(&dir));
    suite.check("compound rule", compound_rule);
    suite.check("undercut existence", undercut_existence);
    suite.check("pretraining efficacy", || pretraining_efficacy(&dir));
    suite.check("self-play efficacy", || selfplay_efficacy(&dir));
    suite.check("frozen backbone", || frozen_backbone(&dir));

    if suite.failed.is_empty() {
        println!("acceptance: all {} criteria passed", suite.run);
    } else {
        println!("acceptance: {} of {} failed: {}", suite.failed.len(), suite.run, suite.failed.join(", "));
        std::process::exit(1);
    }
}
