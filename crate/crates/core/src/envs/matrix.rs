//! Two-agent repeated matrix game with a hidden high-payoff joint action.
//!
//! Steps 0..8 pay +1 for joint action `(0, 0)`; anything else pays 0 and ends
//! the episode. Step 9 pays +4 for `(1, 1)`, +1 for `(0, 0)` and 0 for a
//! mixed pair, then ends. Observation: `step · 4 + previous joint action`,
//! with code 0 at the start.

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult};
use crate::rng::Rng;

const DECISIONS: usize = 10;
const STEP_CODES: usize = 11;

#[derive(Debug, Clone, Default)]
pub struct MatrixGame {
    t: usize,
    last: usize,
    done: bool,
}

impl MatrixGame {
    pub fn new() -> Self {
        Self::default()
    }

    fn obs(&self) -> Vec<usize> {
        vec![self.t * 4 + self.last; 2]
    }
}

impl Environment for MatrixGame {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_obs: STEP_CODES * 4,
            n_actions: 2,
            max_episode_steps: STEP_CODES,
            optimal_return: Some(13.0),
        }
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<usize> {
        *self = Self::default();
        self.obs()
    }

    fn step(&mut self, actions: &[usize], _rng: &mut Rng) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        check_actions(actions, 2, 2)?;
        let last_decision = self.t + 1 == DECISIONS;
        let reward = match (actions[0], actions[1], last_decision) {
            (0, 0, _) => 1.0,
            (1, 1, true) => 4.0,
            _ => 0.0,
        };
        self.done = reward == 0.0 || last_decision;
        self.last = actions[0] * 2 + actions[1];
        self.t += 1;
        Ok(StepResult {
            next_obs: self.obs(),
            reward,
            done: self.done,
            terminal: self.done,
        })
    }

    fn render(&self) -> String {
        format!("step {} last ({}, {})\n", self.t, self.last / 2, self.last % 2)
    }
}
