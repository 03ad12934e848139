//! Four agents on a 6 × 6 grid must cover four landmarks at once.
//!
//! Landmarks sit at the corners of the inner 4 × 4 square. Agents start
//! clustered in the top-left corner and may share cells. The team pays 1 per
//! step, including the step on which every landmark becomes occupied.
//! Observation: the agent's own cell.

use std::fmt::Write as _;

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult, FIVE_MOVES};
use crate::rng::Rng;

pub(crate) const SIDE: usize = 6;
const CAP: usize = 50;
pub(crate) const LANDMARKS: [(usize, usize); 4] = [(1, 1), (1, 4), (4, 1), (4, 4)];
pub(crate) const STARTS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (0, 2)];

#[derive(Debug, Clone)]
pub struct Spread {
    agents: [(usize, usize); 4],
    t: usize,
    done: bool,
}

impl Default for Spread {
    fn default() -> Self {
        Self::new()
    }
}

impl Spread {
    pub fn new() -> Self {
        Self {
            agents: STARTS,
            t: 0,
            done: false,
        }
    }

    fn obs(&self) -> Vec<usize> {
        self.agents.iter().map(|&(r, c)| r * SIDE + c).collect()
    }

    fn covered(&self) -> bool {
        LANDMARKS.iter().all(|l| self.agents.contains(l))
    }
}

impl Environment for Spread {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 4,
            n_obs: SIDE * SIDE,
            n_actions: FIVE_MOVES.len(),
            max_episode_steps: CAP,
            optimal_return: Some(-6.0),
        }
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<usize> {
        *self = Self::new();
        self.obs()
    }

    fn step(&mut self, actions: &[usize], _rng: &mut Rng) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        check_actions(actions, 4, FIVE_MOVES.len())?;
        for (pos, &a) in self.agents.iter_mut().zip(actions) {
            *pos = FIVE_MOVES[a].apply(*pos, SIDE, SIDE);
        }
        self.t += 1;
        let terminal = self.covered();
        self.done = terminal || self.t >= CAP;
        Ok(StepResult {
            next_obs: self.obs(),
            reward: -1.0,
            done: self.done,
            terminal,
        })
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..SIDE {
            for c in 0..SIDE {
                let ch = match self.agents.iter().position(|&p| p == (r, c)) {
                    Some(i) => char::from(b'1' + i as u8),
                    None if LANDMARKS.contains(&(r, c)) => '*',
                    None => '.',
                };
                out.push(ch);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "t={}", self.t);
        out
    }
}
