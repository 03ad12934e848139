//! Tabular comparison learners: independent Q-learning and additive value
//! decomposition, both acting greedily per agent with the kernel's tie rule.

use std::io::{Read, Write};

use rand::Rng as _;

use crate::config::TrainConfig;
use crate::kernel::{GroundSet, KernelError};
use crate::learner::{Agent, LearnerError, TrainStats, Transition};
use crate::rng::Rng;
use crate::sampler::Explored;

pub const TABLE_MAGIC: [u8; 4] = *b"QTAB";
pub const TABLE_VERSION: u32 = 1;

const MAX_ENTRIES: u64 = 1 << 28;

/// One `|O| × |A|` table per agent, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    ground: GroundSet,
    values: Vec<f64>,
}

impl TabularQ {
    pub fn zeros(ground: GroundSet) -> Self {
        Self {
            values: vec![0.0; ground.size()],
            ground,
        }
    }

    pub fn from_values(ground: GroundSet, values: Vec<f64>) -> Result<Self, KernelError> {
        if values.len() != ground.size() {
            return Err(KernelError::ParameterLength {
                expected: ground.size(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite(i));
        }
        Ok(Self { ground, values })
    }

    pub fn ground(&self) -> &GroundSet {
        &self.ground
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, agent: usize, obs: usize, action: usize) -> f64 {
        self.values[self.ground.index(agent, obs, action)]
    }

    pub fn set(&mut self, agent: usize, obs: usize, action: usize, v: f64) {
        let i = self.ground.index(agent, obs, action);
        self.values[i] = v;
    }

    fn row(&self, agent: usize, obs: usize) -> &[f64] {
        let start = self.ground.index(agent, obs, 0);
        &self.values[start..start + self.ground.n_actions()]
    }

    /// Lowest-id argmax of one agent's row.
    pub fn greedy_action(&self, agent: usize, obs: usize) -> usize {
        let mut best = 0;
        for (a, &v) in self.row(agent, obs).iter().enumerate().skip(1) {
            if v > self.row(agent, obs)[best] {
                best = a;
            }
        }
        best
    }

    pub fn max_value(&self, agent: usize, obs: usize) -> f64 {
        self.row(agent, obs)[self.greedy_action(agent, obs)]
    }

    pub fn greedy_joint(&self, joint_obs: &[usize]) -> Result<Vec<usize>, KernelError> {
        self.ground.check_joint_obs(joint_obs)?;
        Ok(joint_obs
            .iter()
            .enumerate()
            .map(|(agent, &o)| self.greedy_action(agent, o))
            .collect())
    }

    /// `Σ_i Q_i(o_i, a_i)`.
    pub fn additive_value(&self, joint_obs: &[usize], actions: &[usize]) -> f64 {
        joint_obs
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(agent, (&o, &a))| self.get(agent, o, a))
            .sum()
    }

    fn check(&self, t: &Transition) -> Result<(), KernelError> {
        self.ground.selection(&t.obs, &t.actions)?;
        self.ground.check_joint_obs(&t.next_obs)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), KernelError> {
        out.write_all(&TABLE_MAGIC)?;
        out.write_all(&TABLE_VERSION.to_le_bytes())?;
        for d in [self.ground.n_agents(), self.ground.n_obs(), self.ground.n_actions()] {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, KernelError> {
        let bad = |m: &str| KernelError::Checkpoint(m.to_string());
        let eof = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => KernelError::Checkpoint("truncated".into()),
            _ => KernelError::Io(e),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(eof)?;
        if magic != TABLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut v = [0u8; 4];
        input.read_exact(&mut v).map_err(eof)?;
        if u32::from_le_bytes(v) != TABLE_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut dims = [0u64; 3];
        for d in &mut dims {
            let mut b = [0u8; 8];
            input.read_exact(&mut b).map_err(eof)?;
            *d = u64::from_le_bytes(b);
        }
        let total = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&t| t <= MAX_ENTRIES)
            .ok_or_else(|| bad("implausible shape"))?;
        let ground = GroundSet::new(dims[0] as usize, dims[1] as usize, dims[2] as usize)?;
        let mut values = Vec::with_capacity(total as usize);
        let mut b = [0u8; 8];
        for _ in 0..total {
            input.read_exact(&mut b).map_err(eof)?;
            values.push(f64::from_le_bytes(b));
        }
        if input.read(&mut [0u8; 1])? != 0 {
            return Err(bad("trailing bytes"));
        }
        Self::from_values(ground, values)
    }
}

/// Per-agent Q-learning on the team reward, one transition at a time in batch order.
///
/// Returns the mean over transitions and agents of the squared TD error before each update.
pub fn iql_train_step(
    tables: &mut TabularQ,
    batch: &[&Transition],
    learning_rate: f64,
    gamma: f64,
) -> Result<f64, KernelError> {
    let n = tables.ground.n_agents();
    let mut sq = 0.0;
    for t in batch {
        tables.check(t)?;
        for agent in 0..n {
            let boot = if t.done { 0.0 } else { tables.max_value(agent, t.next_obs[agent]) };
            let y = t.reward + gamma * boot;
            let q = tables.get(agent, t.obs[agent], t.actions[agent]);
            sq += (y - q).powi(2);
            tables.set(agent, t.obs[agent], t.actions[agent], q + learning_rate * (y - q));
        }
    }
    Ok(if batch.is_empty() { 0.0 } else { sq / (batch.len() * n) as f64 })
}

/// Additive joint value with the joint TD error applied to every agent's entry.
///
/// Returns the mean squared joint TD error before each update.
pub fn vdn_train_step(
    tables: &mut TabularQ,
    batch: &[&Transition],
    learning_rate: f64,
    gamma: f64,
) -> Result<f64, KernelError> {
    let n = tables.ground.n_agents();
    let mut sq = 0.0;
    for t in batch {
        tables.check(t)?;
        let boot = if t.done {
            0.0
        } else {
            (0..n).map(|agent| tables.max_value(agent, t.next_obs[agent])).sum()
        };
        let y = t.reward + gamma * boot;
        let err = y - tables.additive_value(&t.obs, &t.actions);
        sq += err * err;
        for agent in 0..n {
            let q = tables.get(agent, t.obs[agent], t.actions[agent]);
            tables.set(agent, t.obs[agent], t.actions[agent], q + learning_rate * err);
        }
    }
    Ok(if batch.is_empty() { 0.0 } else { sq / batch.len() as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TabularKind {
    Independent,
    Additive,
}

/// A tabular learner with uniform ε-greedy exploration.
#[derive(Debug, Clone)]
pub struct TabularAgent {
    kind: TabularKind,
    tables: TabularQ,
    learning_rate: f64,
    gamma: f64,
}

impl TabularAgent {
    pub fn new(kind: TabularKind, ground: GroundSet, config: &TrainConfig) -> Self {
        Self::from_tables(kind, TabularQ::zeros(ground), config)
    }

    pub fn from_tables(kind: TabularKind, tables: TabularQ, config: &TrainConfig) -> Self {
        Self {
            kind,
            tables,
            learning_rate: config.learning_rate,
            gamma: config.gamma,
        }
    }

    pub fn tables(&self) -> &TabularQ {
        &self.tables
    }
}

impl Agent for TabularAgent {
    fn algo(&self) -> &'static str {
        match self.kind {
            TabularKind::Independent => "iql",
            TabularKind::Additive => "vdn",
        }
    }

    fn act(&mut self, obs: &[usize], epsilon: f64, rng: &mut Rng) -> Result<Explored, LearnerError> {
        let greedy = self.tables.greedy_joint(obs)?;
        if rng.random::<f64>() < epsilon {
            let n_actions = self.tables.ground.n_actions();
            Ok(Explored {
                actions: (0..greedy.len()).map(|_| rng.random_range(0..n_actions)).collect(),
                sampled: true,
                degenerate_slices: 0,
            })
        } else {
            Ok(Explored {
                actions: greedy,
                sampled: false,
                degenerate_slices: 0,
            })
        }
    }

    fn greedy(&self, obs: &[usize]) -> Result<Vec<usize>, LearnerError> {
        Ok(self.tables.greedy_joint(obs)?)
    }

    fn train(&mut self, batch: &[&Transition]) -> Result<TrainStats, LearnerError> {
        let loss = match self.kind {
            TabularKind::Independent => iql_train_step(&mut self.tables, batch, self.learning_rate, self.gamma)?,
            TabularKind::Additive => vdn_train_step(&mut self.tables, batch, self.learning_rate, self.gamma)?,
        };
        Ok(TrainStats {
            td_loss: (!batch.is_empty()).then_some(loss),
            penalty: None,
            skipped: false,
        })
    }

    /// Per-agent argmax against the brute-force joint argmax of the additive value.
    fn igm(&self, obs: &[usize]) -> Option<bool> {
        if self.kind != TabularKind::Additive {
            return None;
        }
        let gs = self.tables.ground;
        let count = gs.joint_action_count().filter(|&c| c <= crate::sampler::ORACLE_GUARD)?;
        let greedy = self.tables.greedy_joint(obs).ok()?;
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..count {
            let v = self.tables.additive_value(obs, &gs.joint_action(k));
            if v > best.0 {
                best = (v, k);
            }
        }
        Some(gs.joint_action(best.1) == greedy)
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<(), LearnerError> {
        Ok(self.tables.write(out)?)
    }
}
