//! Determinantal Q-learning for cooperative multi-agent tasks.
//!
//! The joint action-value of `N` agents is modelled as the log-determinant of
//! a partitioned DPP kernel over all agents' observation-action pairs. Each
//! agent acts greedily on its own partition; exploration uses a sequential
//! sampler that projects out already-chosen directions.

pub mod baselines;
pub mod config;
pub mod envs;
pub mod kernel;
pub mod learner;
pub mod linalg;
pub mod rng;
pub mod sampler;
