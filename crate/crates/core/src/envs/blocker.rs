//! Three agents race to the bottom row of a 7 × 4 grid while two 2-cell
//! blockers slide along that row to cut them off.
//!
//! Each step the agents move first (a move into a blocked bottom cell or off
//! the grid leaves the agent in place). The episode succeeds as soon as any
//! agent stands on the bottom row. Otherwise each blocker, in order, steps one
//! cell toward the column of its nearest agent (Manhattan distance from the
//! blocker's closest cell, ties to the lower column, then lower agent id),
//! without leaving the row or overlapping the other blocker. The team pays 1
//! per step, including the final one. Observation: the agent's own cell.

use std::fmt::Write as _;

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult, FIVE_MOVES};
use crate::rng::Rng;

pub(crate) const WIDTH: usize = 7;
pub(crate) const HEIGHT: usize = 4;
const BOTTOM: usize = HEIGHT - 1;
const CAP: usize = 40;
const START_COLS: [usize; 3] = [0, 3, 6];
const START_BLOCKERS: [usize; 2] = [1, 4];

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Blocker {
    agents: [(usize, usize); 3],
    /// Left column of each blocker's span.
    blockers: [usize; 2],
    t: usize,
    done: bool,
    start_cols: [usize; 3],
    start_blockers: [usize; 2],
}

impl Default for Blocker {
    fn default() -> Self {
        Self::new()
    }
}

impl Blocker {
    pub fn new() -> Self {
        Self::with_layout(START_COLS, START_BLOCKERS)
    }

    pub(crate) fn with_layout(start_cols: [usize; 3], start_blockers: [usize; 2]) -> Self {
        let mut env = Self {
            agents: [(0, 0); 3],
            blockers: start_blockers,
            t: 0,
            done: false,
            start_cols,
            start_blockers,
        };
        env.restart();
        env
    }

    fn restart(&mut self) {
        for (pos, &c) in self.agents.iter_mut().zip(&self.start_cols) {
            *pos = (0, c);
        }
        self.blockers = self.start_blockers;
        self.t = 0;
        self.done = false;
    }

    fn blocked(&self, col: usize) -> bool {
        self.blockers.iter().any(|&l| col == l || col == l + 1)
    }

    fn obs(&self) -> Vec<usize> {
        self.agents.iter().map(|&(r, c)| r * WIDTH + c).collect()
    }

    fn move_blockers(&mut self) {
        for b in 0..2 {
            let l = self.blockers[b];
            let span_dist = |c: usize| {
                if c < l {
                    l - c
                } else if c > l + 1 {
                    c - l - 1
                } else {
                    0
                }
            };
            let target = self
                .agents
                .iter()
                .enumerate()
                .min_by_key(|&(i, &(r, c))| (BOTTOM - r + span_dist(c), c, i))
                .map(|(_, &(_, c))| c)
                .expect("three agents");
            let want = if target < l {
                l - 1
            } else if target > l + 1 {
                l + 1
            } else {
                l
            };
            let other = self.blockers[1 - b];
            let overlaps = want + 1 >= other && other + 1 >= want;
            if want + 1 < WIDTH && !overlaps {
                self.blockers[b] = want;
            }
        }
    }
}

impl Environment for Blocker {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 3,
            n_obs: WIDTH * HEIGHT,
            n_actions: FIVE_MOVES.len(),
            max_episode_steps: CAP,
            optimal_return: Some(-3.0),
        }
    }

    fn reset(&mut self, _rng: &mut Rng) -> Vec<usize> {
        self.restart();
        self.obs()
    }

    fn step(&mut self, actions: &[usize], _rng: &mut Rng) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        check_actions(actions, 3, FIVE_MOVES.len())?;
        for (i, &a) in actions.iter().enumerate() {
            let (r, c) = FIVE_MOVES[a].apply(self.agents[i], HEIGHT, WIDTH);
            if r != BOTTOM || !self.blocked(c) {
                self.agents[i] = (r, c);
            }
        }
        self.t += 1;
        let terminal = self.agents.iter().any(|&(r, _)| r == BOTTOM);
        if !terminal {
            self.move_blockers();
        }
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
        for r in 0..HEIGHT {
            for c in 0..WIDTH {
                let ch = if let Some(i) = self.agents.iter().position(|&p| p == (r, c)) {
                    char::from(b'1' + i as u8)
                } else if r == BOTTOM && self.blocked(c) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "t={}", self.t);
        out
    }
}
