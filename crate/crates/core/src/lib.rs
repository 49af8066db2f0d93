//! Two-car race-strategy simulation, learned pit-wall policies, self-play
//! training and Elo-ranked arena.

pub mod checkpoint;
pub mod duel;
pub mod env;
pub mod nn;
pub mod policy;
pub mod track;
pub mod replay;
pub mod sac;
pub mod trace;
pub mod arena;
pub mod rollout;
pub mod trainer;
