//! Entropy-regularized off-policy actor-critic with twin critics, target
//! networks and a learned temperature.
//!
//! Actions live in `(-1, 1)^3` as the tanh of a Gaussian sample; callers
//! scale them into whatever the environment expects. All gradients are
//! derived by hand and checked against finite differences in the tests.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::ACTION_DIM;
use crate::nn::{Activation, Adam, Matrix, Mlp};
use crate::replay::Batch;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub tau: f64,
    pub target_entropy: f64,
    pub batch_size: usize,
    pub reward_scale: f64,
    pub init_alpha: f64,
    pub gamma: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            tau: 5e-3,
            target_entropy: -3.0,
            batch_size: 256,
            reward_scale: 0.1,
            init_alpha: 0.05,
            gamma: 1.0,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_sech2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Intermediate values of a reparameterized squashed-Gaussian sample.
#[derive(Debug, Clone)]
pub struct Sampled {
    /// Squashed actions, `rows x 3`.
    pub action: Matrix,
    pub log_prob: Vec<f64>,
    raw_log_std: Matrix,
    sigma: Matrix,
    noise: Matrix,
}

/// Maps the raw log-std head smoothly onto `[LOG_STD_MIN, LOG_STD_MAX]`.
fn squash_log_std(raw: f64) -> f64 {
    LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (raw.tanh() + 1.0)
}

/// Actor head output `(mean, raw log-std)` plus noise to actions and log-probs.
pub fn sample_from_head(head: &Matrix, noise: &Matrix) -> Sampled {
    let n = head.rows;
    let mut action = Matrix::zeros(n, ACTION_DIM);
    let mut sigma = Matrix::zeros(n, ACTION_DIM);
    let mut log_prob = vec![0.0; n];
    for r in 0..n {
        let h = head.row(r);
        let eps = noise.row(r);
        let mut lp = 0.0;
        for j in 0..ACTION_DIM {
            let ls = squash_log_std(h[ACTION_DIM + j]);
            let s = ls.exp();
            let u = h[j] + s * eps[j];
            action.row_mut(r)[j] = u.tanh();
            sigma.row_mut(r)[j] = s;
            lp += -0.5 * eps[j] * eps[j] - ls - HALF_LN_2PI - log_sech2(u);
        }
        log_prob[r] = lp;
    }
    Sampled { action, log_prob, raw_log_std: head.columns(ACTION_DIM, 2 * ACTION_DIM), sigma, noise: noise.clone() }
}

pub fn gaussian_noise<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Matrix {
    Matrix::from_rows(rows, ACTION_DIM, (0..rows * ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn critic_net<R: Rng + ?Sized>(obs_dim: usize, hidden: [usize; 2], rng: &mut R) -> Mlp {
    Mlp::new(&[obs_dim + ACTION_DIM, hidden[0], hidden[1], 1], Activation::Tanh, rng)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct Sac {
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    pub log_alpha: f64,
    pub cfg: SacConfig,
    opt_actor: Adam,
    opt_critics: [Adam; 2],
    opt_alpha: Adam,
}

impl Sac {
    pub fn new<R: Rng + ?Sized>(actor: Mlp, cfg: SacConfig, rng: &mut R) -> Self {
        assert_eq!(actor.n_out(), 2 * ACTION_DIM, "actor must emit mean and log-std");
        let obs_dim = actor.n_in();
        let critics = [critic_net(obs_dim, [64, 64], rng), critic_net(obs_dim, [64, 64], rng)];
        let targets = critics.clone();
        Self {
            opt_actor: Adam::new(actor.n_params(), cfg.lr_actor),
            opt_critics: [
                Adam::new(critics[0].n_params(), cfg.lr_critic),
                Adam::new(critics[1].n_params(), cfg.lr_critic),
            ],
            opt_alpha: Adam::new(1, cfg.lr_alpha),
            log_alpha: cfg.init_alpha.ln(),
            actor,
            critics,
            targets,
            cfg,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Stochastic action for data collection.
    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> [f64; ACTION_DIM] {
        let head = self.actor.forward(obs);
        let mut a = [0.0; ACTION_DIM];
        for j in 0..ACTION_DIM {
            let eps: f64 = rng.sample(StandardNormal);
            a[j] = (head[j] + squash_log_std(head[ACTION_DIM + j]).exp() * eps).tanh();
        }
        a
    }

    pub fn mean_action(&self, obs: &[f64]) -> [f64; ACTION_DIM] {
        let head = self.actor.forward(obs);
        [head[0].tanh(), head[1].tanh(), head[2].tanh()]
    }

    /// Temporal-difference targets using next-state noise `next_noise`.
    pub fn critic_targets(&self, batch: &Batch, next_noise: &Matrix) -> Vec<f64> {
        let head = self.actor.forward_batch(&batch.next_obs);
        let next = sample_from_head(head.output(), next_noise);
        let input = batch.next_obs.hcat(&next.action);
        let q1 = self.targets[0].forward_batch(&input);
        let q2 = self.targets[1].forward_batch(&input);
        let alpha = self.alpha();
        (0..batch.reward.len())
            .map(|r| {
                let r_scaled = self.cfg.reward_scale * batch.reward[r];
                if batch.done[r] {
                    r_scaled
                } else {
                    let q_min = q1.output().data[r].min(q2.output().data[r]);
                    r_scaled + self.cfg.gamma * (q_min - alpha * next.log_prob[r])
                }
            })
            .collect()
    }

    /// Mean squared error of `critic` against fixed targets, with its gradient.
    pub fn critic_loss(critic: &Mlp, batch: &Batch, targets: &[f64]) -> (f64, Vec<f64>) {
        let input = batch.obs.hcat(&batch.action);
        let cache = critic.forward_batch(&input);
        let n = targets.len() as f64;
        let q = &cache.output().data;
        let mut loss = 0.0;
        let mut g = Matrix::zeros(q.len(), 1);
        for i in 0..q.len() {
            let d = q[i] - targets[i];
            loss += d * d / n;
            g.data[i] = 2.0 * d / n;
        }
        let mut grads = vec![0.0; critic.n_params()];
        critic.backward(&cache, &g, &mut grads);
        (loss, grads)
    }

    /// Reparameterized actor loss `mean(alpha * log_pi - min Q)` and its
    /// gradient with respect to the actor parameters. Also returns the mean
    /// log-probability.
    pub fn actor_loss(&self, obs: &Matrix, noise: &Matrix) -> (f64, Vec<f64>, f64) {
        let n = obs.rows;
        let nf = n as f64;
        let alpha = self.alpha();
        let cache = self.actor.forward_batch(obs);
        let s = sample_from_head(cache.output(), noise);
        let input = obs.hcat(&s.action);
        let c1 = self.critics[0].forward_batch(&input);
        let c2 = self.critics[1].forward_batch(&input);

        // dL/dQ is -1/n on whichever critic is smaller for each row.
        let mut g1 = Matrix::zeros(n, 1);
        let mut g2 = Matrix::zeros(n, 1);
        let mut loss = 0.0;
        for r in 0..n {
            let (q1, q2) = (c1.output().data[r], c2.output().data[r]);
            let q = if q1 <= q2 {
                g1.data[r] = -1.0 / nf;
                q1
            } else {
                g2.data[r] = -1.0 / nf;
                q2
            };
            loss += (alpha * s.log_prob[r] - q) / nf;
        }
        let mut scratch = vec![0.0; self.critics[0].n_params()];
        let dx1 = self.critics[0].backward(&c1, &g1, &mut scratch);
        let dx2 = self.critics[1].backward(&c2, &g2, &mut scratch);
        let obs_dim = obs.cols;

        let mut g_head = Matrix::zeros(n, 2 * ACTION_DIM);
        let ls_span = 0.5 * (LOG_STD_MAX - LOG_STD_MIN);
        for r in 0..n {
            for j in 0..ACTION_DIM {
                let y = s.action.row(r)[j];
                let dq_da = dx1.row(r)[obs_dim + j] + dx2.row(r)[obs_dim + j];
                let sigma = s.sigma.row(r)[j];
                let eps = s.noise.row(r)[j];
                let d_u = alpha / nf * 2.0 * y + dq_da * (1.0 - y * y);
                let d_ls = d_u * sigma * eps - alpha / nf;
                let t = s.raw_log_std.row(r)[j].tanh();
                g_head.row_mut(r)[j] = d_u;
                g_head.row_mut(r)[ACTION_DIM + j] = d_ls * ls_span * (1.0 - t * t);
            }
        }
        let mut grads = vec![0.0; self.actor.n_params()];
        self.actor.backward(&cache, &g_head, &mut grads);
        let mean_lp = s.log_prob.iter().sum::<f64>() / nf;
        (loss, grads, mean_lp)
    }

    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> UpdateStats {
        let n = batch.reward.len();
        let targets = self.critic_targets(batch, &gaussian_noise(n, rng));
        let mut critic_loss = 0.0;
        for k in 0..2 {
            let (loss, grads) = Self::critic_loss(&self.critics[k], batch, &targets);
            self.opt_critics[k].step(self.critics[k].params_mut(), &grads);
            critic_loss += 0.5 * loss;
        }

        let (actor_loss, grads, mean_lp) = self.actor_loss(&batch.obs, &gaussian_noise(n, rng));
        self.opt_actor.step(self.actor.params_mut(), &grads);

        // d/d(log alpha) of -log_alpha * (log_pi + target)
        let g_alpha = -(mean_lp + self.cfg.target_entropy);
        let mut la = [self.log_alpha];
        self.opt_alpha.step(&mut la, &[g_alpha]);
        self.log_alpha = la[0].clamp(-12.0, 2.0);

        for k in 0..2 {
            let (t, c) = (&mut self.targets[k], &self.critics[k]);
            t.soft_update_from(c, self.cfg.tau);
        }

        UpdateStats { critic_loss, actor_loss, alpha: self.alpha(), entropy: -mean_lp }
    }
}
