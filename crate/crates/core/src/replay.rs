use rand::Rng;

use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub episode: u64,
    /// Lap number completed by this transition, from 1.
    pub lap: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub obs: Matrix,
    pub action: Matrix,
    pub reward: Vec<f64>,
    pub next_obs: Matrix,
    pub done: Vec<bool>,
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(1 << 16)), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        assert!(!self.items.is_empty(), "sampling from empty replay");
        let picks: Vec<&Transition> = (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect();
        batch_of(&picks)
    }
}

pub fn batch_of(items: &[&Transition]) -> Batch {
    let od = items[0].obs.len();
    let ad = items[0].action.len();
    let n = items.len();
    let mut obs = Vec::with_capacity(n * od);
    let mut next_obs = Vec::with_capacity(n * od);
    let mut action = Vec::with_capacity(n * ad);
    for t in items {
        obs.extend_from_slice(&t.obs);
        next_obs.extend_from_slice(&t.next_obs);
        action.extend_from_slice(&t.action);
    }
    Batch {
        obs: Matrix::from_rows(n, od, obs),
        action: Matrix::from_rows(n, ad, action),
        reward: items.iter().map(|t| t.reward).collect(),
        next_obs: Matrix::from_rows(n, od, next_obs),
        done: items.iter().map(|t| t.done).collect(),
    }
}
