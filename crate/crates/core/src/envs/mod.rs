//! Cooperative tasks with discrete per-agent observations and actions.

mod blocker;
mod matrix;
mod predprey;
mod spread;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub use blocker::Blocker;
pub use matrix::MatrixGame;
pub use predprey::PredatorPrey;
pub use spread::Spread;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("expected {expected} actions, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("action {action} out of range ({n_actions} actions)")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("step called on a finished episode")]
    StepAfterDone,
    #[error("unknown environment {0:?}")]
    UnknownEnv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_obs: usize,
    pub n_actions: usize,
    pub max_episode_steps: usize,
    /// Best achievable episode return, where known.
    pub optimal_return: Option<f64>,
}

impl EnvSpec {
    pub fn ground_set_size(&self) -> usize {
        self.n_agents * self.n_obs * self.n_actions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<usize>,
    pub reward: f64,
    /// The episode is over, either by reaching a terminal state or the step cap.
    pub done: bool,
    /// The task itself ended; false when only the step cap was hit.
    pub terminal: bool,
}

pub trait Environment {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, rng: &mut Rng) -> Vec<usize>;
    fn step(&mut self, actions: &[usize], rng: &mut Rng) -> Result<StepResult, EnvError>;
    /// Text picture of the current state.
    fn render(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Matrix,
    Blocker,
    Spread,
    #[serde(rename = "predprey")]
    PredPrey,
    #[serde(rename = "predprey-small")]
    PredPreySmall,
}

impl EnvKind {
    pub const ALL: [EnvKind; 5] = [
        EnvKind::Matrix,
        EnvKind::Blocker,
        EnvKind::Spread,
        EnvKind::PredPrey,
        EnvKind::PredPreySmall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Matrix => "matrix",
            EnvKind::Blocker => "blocker",
            EnvKind::Spread => "spread",
            EnvKind::PredPrey => "predprey",
            EnvKind::PredPreySmall => "predprey-small",
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        match self {
            EnvKind::Matrix => Box::new(MatrixGame::new()),
            EnvKind::Blocker => Box::new(Blocker::new()),
            EnvKind::Spread => Box::new(Spread::new()),
            EnvKind::PredPrey => Box::new(PredatorPrey::full()),
            EnvKind::PredPreySmall => Box::new(PredatorPrey::small()),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnvError::UnknownEnv(s.to_string()))
    }
}

pub(crate) fn check_actions(actions: &[usize], n_agents: usize, n_actions: usize) -> Result<(), EnvError> {
    if actions.len() != n_agents {
        return Err(EnvError::WrongArity {
            expected: n_agents,
            got: actions.len(),
        });
    }
    if let Some(&action) = actions.iter().find(|&&a| a >= n_actions) {
        return Err(EnvError::ActionOutOfRange { action, n_actions });
    }
    Ok(())
}

/// Grid moves shared by the navigation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Move {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Move {
    /// Target cell, or the current one when the move leaves the grid.
    pub(crate) fn apply(self, (r, c): (usize, usize), height: usize, width: usize) -> (usize, usize) {
        match self {
            Move::Up if r > 0 => (r - 1, c),
            Move::Down if r + 1 < height => (r + 1, c),
            Move::Left if c > 0 => (r, c - 1),
            Move::Right if c + 1 < width => (r, c + 1),
            _ => (r, c),
        }
    }
}

/// Action ids for the five-action grid tasks: up, down, left, right, stay.
pub(crate) const FIVE_MOVES: [Move; 5] = [Move::Up, Move::Down, Move::Left, Move::Right, Move::Stay];
