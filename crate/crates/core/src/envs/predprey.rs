//! Predators hunt randomly moving preys on a square grid.
//!
//! Each step the predators move (north, east, south, west; moves off the grid
//! are ignored), then each remaining prey moves to a uniformly chosen cell
//! among staying put and its free in-grid neighbours, then captures are
//! scored. A predator captures a prey when it shares the cell or is
//! orthogonally adjacent. Two or more capturing predators earn +1 and remove
//! the prey; a lone capturer costs 0.5 and the prey stays. The episode ends
//! when every prey is gone.
//!
//! Observation: `cell · 5 + d`, where `d` is the direction of the nearest
//! prey within Chebyshev distance 2 (north, east, south, west) or 4 when no
//! prey is in view.

use std::fmt::Write as _;

use rand::Rng as _;

use super::{check_actions, EnvError, EnvSpec, Environment, StepResult};
use crate::rng::Rng;

const VIEW: usize = 2;
const NO_PREY: usize = 4;
const N_ACTIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct PredatorPrey {
    side: usize,
    cap: usize,
    preds: Vec<(usize, usize)>,
    preys: Vec<Option<(usize, usize)>>,
    t: usize,
    done: bool,
}

impl PredatorPrey {
    /// 7 × 7 grid, four predators, two preys, 200-step cap.
    pub fn full() -> Self {
        Self::new(7, 4, 2, 200)
    }

    /// 5 × 5 grid, two predators, one prey, 100-step cap.
    pub fn small() -> Self {
        Self::new(5, 2, 1, 100)
    }

    pub fn new(side: usize, n_preds: usize, n_preys: usize, cap: usize) -> Self {
        assert!(side >= 2 && n_preds >= 1 && n_preys >= 1 && n_preds + n_preys <= side * side);
        Self {
            side,
            cap,
            preds: vec![(0, 0); n_preds],
            preys: vec![None; n_preys],
            t: 0,
            done: true,
        }
    }

    fn cell(&self, (r, c): (usize, usize)) -> usize {
        r * self.side + c
    }

    fn direction(&self, pred: (usize, usize)) -> usize {
        let nearest = self
            .preys
            .iter()
            .flatten()
            .filter(|&&(r, c)| r.abs_diff(pred.0) <= VIEW && c.abs_diff(pred.1) <= VIEW)
            .min_by_key(|&&(r, c)| r.abs_diff(pred.0) + c.abs_diff(pred.1));
        let Some(&(r, c)) = nearest else {
            return NO_PREY;
        };
        let dr = r as isize - pred.0 as isize;
        let dc = c as isize - pred.1 as isize;
        if dr.abs() >= dc.abs() {
            if dr > 0 {
                2
            } else {
                0
            }
        } else if dc > 0 {
            1
        } else {
            3
        }
    }

    fn obs(&self) -> Vec<usize> {
        self.preds
            .iter()
            .map(|&p| self.cell(p) * 5 + self.direction(p))
            .collect()
    }

    fn step_cell(&self, (r, c): (usize, usize), dir: usize) -> Option<(usize, usize)> {
        match dir {
            0 if r > 0 => Some((r - 1, c)),
            1 if c + 1 < self.side => Some((r, c + 1)),
            2 if r + 1 < self.side => Some((r + 1, c)),
            3 if c > 0 => Some((r, c - 1)),
            _ => None,
        }
    }

    fn capturers(&self, prey: (usize, usize)) -> usize {
        self.preds
            .iter()
            .filter(|&&(r, c)| r.abs_diff(prey.0) + c.abs_diff(prey.1) <= 1)
            .count()
    }

    pub fn preys_left(&self) -> usize {
        self.preys.iter().flatten().count()
    }
}

impl Environment for PredatorPrey {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: self.preds.len(),
            n_obs: self.side * self.side * 5,
            n_actions: N_ACTIONS,
            max_episode_steps: self.cap,
            optimal_return: None,
        }
    }

    fn reset(&mut self, rng: &mut Rng) -> Vec<usize> {
        let cells = self.side * self.side;
        let mut taken = vec![false; cells];
        for i in 0..self.preds.len() {
            let k = loop {
                let k = rng.random_range(0..cells);
                if !taken[k] {
                    break k;
                }
            };
            taken[k] = true;
            self.preds[i] = (k / self.side, k % self.side);
        }
        for i in 0..self.preys.len() {
            let pos = loop {
                let k = rng.random_range(0..cells);
                let pos = (k / self.side, k % self.side);
                if !taken[k] && self.capturers(pos) == 0 {
                    taken[k] = true;
                    break pos;
                }
            };
            self.preys[i] = Some(pos);
        }
        self.t = 0;
        self.done = false;
        self.obs()
    }

    fn step(&mut self, actions: &[usize], rng: &mut Rng) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        check_actions(actions, self.preds.len(), N_ACTIONS)?;
        for i in 0..self.preds.len() {
            if let Some(next) = self.step_cell(self.preds[i], actions[i]) {
                self.preds[i] = next;
            }
        }
        for i in 0..self.preys.len() {
            let Some(pos) = self.preys[i] else { continue };
            let mut options = vec![pos];
            for dir in 0..4 {
                if let Some(next) = self.step_cell(pos, dir) {
                    let free = !self.preds.contains(&next) && !self.preys.contains(&Some(next));
                    if free {
                        options.push(next);
                    }
                }
            }
            self.preys[i] = Some(options[rng.random_range(0..options.len())]);
        }
        let mut reward = 0.0;
        for i in 0..self.preys.len() {
            let Some(pos) = self.preys[i] else { continue };
            match self.capturers(pos) {
                0 => {}
                1 => reward -= 0.5,
                _ => {
                    reward += 1.0;
                    self.preys[i] = None;
                }
            }
        }
        self.t += 1;
        let terminal = self.preys_left() == 0;
        self.done = terminal || self.t >= self.cap;
        Ok(StepResult {
            next_obs: self.obs(),
            reward,
            done: self.done,
            terminal,
        })
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for r in 0..self.side {
            for c in 0..self.side {
                let ch = if let Some(i) = self.preds.iter().position(|&p| p == (r, c)) {
                    char::from(b'A' + i as u8)
                } else if self.preys.contains(&Some((r, c))) {
                    'o'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "t={} preys={}", self.t, self.preys_left());
        out
    }
}
