//! Determinantal Q-learning.
//!
//! The online kernel is fitted to one-step targets built from a periodically
//! copied target kernel; each agent's target action is its own greedy action
//! under the target kernel, so no joint maximization is needed.

mod metrics;
mod optim;
mod replay;
mod run;

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::config::TrainConfig;
use crate::envs::EnvError;
use crate::kernel::{self, KernelError, KernelGrad, QDppKernel, SvPenalty, MAX_AGENTS};
use crate::rng::Rng;
use crate::sampler::{self, Explored, SamplerError};

pub use metrics::{
    read_greedy_csv, read_metrics_csv, CsvSink, GreedyRow, MetricsRow, MetricsSink, NullSink, GREEDY_HEADER,
    METRICS_HEADER,
};
pub use optim::RmsProp;
pub use replay::{ReplayBuffer, Transition};
pub use run::{evaluate_greedy, make_agent, run_training, train, Agent, Algo, RunSummary, TrainStats};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("environment and agent disagree: {0}")]
    Mismatch(String),
}

/// Value of a squared-TD objective over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdLoss {
    /// `Σ (y − Q)²` over the batch.
    pub loss: f64,
    pub transitions: usize,
    /// Transitions whose diversity gradient was dropped on a singular Gram.
    pub zeroed: usize,
}

/// One-step target `r + γ·Q_target(o′, greedy_target(o′))`, or `r` at a terminal step.
pub fn td_target(target: &QDppKernel, t: &Transition, gamma: f64) -> Result<f64, KernelError> {
    if t.done {
        return Ok(t.reward);
    }
    let next = target.greedy_joint(&t.next_obs)?;
    let sel = target.ground().selection(&t.next_obs, &next)?;
    Ok(t.reward + gamma * target.joint_q(&sel))
}

/// `Σ (y − Q(o, a))²` with gradients through the online kernel only.
///
/// This is the plain per-transition form; [`QDppLearner`] computes the same
/// objective with batching shortcuts.
pub fn td_loss(
    kernel: &QDppKernel,
    target: &QDppKernel,
    batch: &[&Transition],
    gamma: f64,
    mut grad: Option<&mut KernelGrad>,
) -> Result<TdLoss, KernelError> {
    let mut loss = 0.0;
    let mut zeroed = 0;
    for t in batch {
        let y = td_target(target, t, gamma)?;
        let sel = kernel.ground().selection(&t.obs, &t.actions)?;
        let q = match grad.as_deref_mut() {
            Some(g) => {
                let (q, z) = kernel.accumulate_joint_q_grad(sel.indices(), |q| 2.0 * (q - y), g);
                zeroed += usize::from(z);
                q
            }
            None => kernel.joint_q(&sel),
        };
        loss += (y - q).powi(2);
    }
    Ok(TdLoss {
        loss,
        transitions: batch.len(),
        zeroed,
    })
}

/// Whether the per-agent greedy tuple is also the joint argmax of the kernel's Q.
///
/// Both sides break ties toward the lexicographically first joint action.
pub fn igm_check(kernel: &QDppKernel, joint_obs: &[usize]) -> Result<bool, SamplerError> {
    let gs = kernel.ground();
    gs.check_joint_obs(joint_obs)?;
    let count = sampler::guarded_count(kernel)?;
    let greedy = kernel.greedy_joint(joint_obs)?;
    let mut indices = vec![0; gs.n_agents()];
    let mut best = f64::NEG_INFINITY;
    let mut best_k = 0;
    for k in 0..count {
        let actions = gs.joint_action(k);
        for (agent, (&o, &a)) in joint_obs.iter().zip(&actions).enumerate() {
            indices[agent] = gs.index(agent, o, a);
        }
        let q = kernel.joint_q_indices(&indices);
        if q > best {
            best = q;
            best_k = k;
        }
    }
    Ok(gs.joint_action(best_k) == greedy)
}

/// `log det(B_Y B_Yᵀ) / Σ_{j∈Y} D_j`, or `None` when the denominator is ~0.
pub fn dq_ratio(kernel: &QDppKernel, indices: &[usize]) -> Option<f64> {
    let (sum_d, det) = kernel.joint_parts(indices);
    if sum_d.abs() <= 1e-9 {
        return None;
    }
    Some(det.max(kernel::DET_FLOOR).ln() / sum_d)
}

/// Mixed-radix code of a short id list, or `None` on overflow.
fn joint_code(ids: &[usize], radix: usize, seed: u64) -> Option<u64> {
    ids.iter().try_fold(seed, |acc, &x| acc.checked_mul(radix as u64)?.checked_add(x as u64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Incidents {
    /// Transitions whose diversity gradient was zeroed on a singular Gram.
    pub zeroed_gradients: u64,
    /// Updates dropped because the loss or gradient was not finite.
    pub skipped_updates: u64,
    /// Penalty evaluations skipped on eigen-solver failure.
    pub penalty_failures: u64,
}

struct Group {
    indices: [usize; MAX_AGENTS],
    sum_y: f64,
    count: usize,
}

/// Online and target kernels plus optimizer state.
pub struct QDppLearner {
    kernel: QDppKernel,
    target: QDppKernel,
    optim: RmsProp,
    penalty: Option<SvPenalty>,
    penalty_weight: f64,
    penalty_interval: u64,
    gamma: f64,
    grad: KernelGrad,
    updates: u64,
    target_greedy: Vec<usize>,
    target_values: HashMap<u64, f64>,
    group_of: HashMap<u64, usize>,
    groups: Vec<Group>,
    targets: Vec<(usize, f64)>,
    incidents: Incidents,
}

impl QDppLearner {
    pub fn new(kernel: QDppKernel, config: &TrainConfig) -> Result<Self, KernelError> {
        let penalty = if config.penalty {
            Some(SvPenalty::new(config.delta)?)
        } else {
            None
        };
        let optim = RmsProp::new(&kernel, config.learning_rate, config.rmsprop_alpha, config.rmsprop_eps);
        let grad = KernelGrad::zeros_like(&kernel);
        let mut learner = Self {
            target: kernel.clone(),
            kernel,
            optim,
            penalty,
            penalty_weight: config.penalty_weight,
            penalty_interval: config.penalty_interval,
            gamma: config.gamma,
            grad,
            updates: 0,
            target_greedy: Vec::new(),
            target_values: HashMap::new(),
            group_of: HashMap::new(),
            groups: Vec::new(),
            targets: Vec::new(),
            incidents: Incidents::default(),
        };
        learner.refresh_target_tables();
        Ok(learner)
    }

    pub fn kernel(&self) -> &QDppKernel {
        &self.kernel
    }

    pub fn target(&self) -> &QDppKernel {
        &self.target
    }

    pub fn incidents(&self) -> Incidents {
        let mut i = self.incidents;
        i.penalty_failures = self.penalty.as_ref().map_or(0, |p| p.failures());
        i
    }

    /// Copies the online kernel into the target.
    pub fn sync_target(&mut self) {
        self.target.copy_params_from(&self.kernel);
        self.refresh_target_tables();
    }

    fn refresh_target_tables(&mut self) {
        let gs = *self.target.ground();
        self.target_greedy.clear();
        for agent in 0..gs.n_agents() {
            for obs in 0..gs.n_obs() {
                self.target_greedy
                    .push(self.target.greedy_action(agent, obs).expect("in range"));
            }
        }
        self.target_values.clear();
    }

    fn target_value(&mut self, next_obs: &[usize]) -> f64 {
        let gs = *self.target.ground();
        let code = joint_code(next_obs, gs.n_obs(), 0);
        if let Some(v) = code.and_then(|c| self.target_values.get(&c)) {
            return *v;
        }
        let mut idx = [0usize; MAX_AGENTS];
        for (agent, &o) in next_obs.iter().enumerate() {
            idx[agent] = gs.index(agent, o, self.target_greedy[agent * gs.n_obs() + o]);
        }
        let v = self.target.joint_q_indices(&idx[..next_obs.len()]);
        if let Some(c) = code {
            self.target_values.insert(c, v);
        }
        v
    }

    /// One optimizer update on the squared TD error of `batch` plus the
    /// weighted penalty. Returns the mean per-transition squared TD error.
    pub fn train_step(&mut self, batch: &[&Transition]) -> Result<TrainStats, KernelError> {
        let gs = *self.kernel.ground();
        let n = gs.n_agents();
        for t in batch {
            gs.check_joint_obs(&t.obs)?;
            gs.check_joint_obs(&t.next_obs)?;
            if t.actions.len() != n || t.actions.iter().any(|&a| a >= gs.n_actions()) {
                return Err(KernelError::WrongArity {
                    expected: n,
                    got: t.actions.len(),
                });
            }
        }
        self.group_of.clear();
        self.groups.clear();
        self.targets.clear();
        for t in batch {
            let y = if t.done {
                t.reward
            } else {
                t.reward + self.gamma * self.target_value(&t.next_obs)
            };
            let key = joint_code(&t.obs, gs.n_obs(), 0).and_then(|c| joint_code(&t.actions, gs.n_actions(), c));
            let next_id = self.groups.len();
            let g = match key {
                Some(k) => *self.group_of.entry(k).or_insert(next_id),
                None => next_id,
            };
            if g == self.groups.len() {
                let mut indices = [0usize; MAX_AGENTS];
                for (agent, (&o, &a)) in t.obs.iter().zip(&t.actions).enumerate() {
                    indices[agent] = gs.index(agent, o, a);
                }
                self.groups.push(Group {
                    indices,
                    sum_y: 0.0,
                    count: 0,
                });
            }
            self.groups[g].sum_y += y;
            self.groups[g].count += 1;
            self.targets.push((g, y));
        }

        let mut q_of = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let (sum_y, count) = (g.sum_y, g.count as f64);
            let (q, zeroed) =
                self.kernel
                    .accumulate_joint_q_grad(&g.indices[..n], |q| 2.0 * (count * q - sum_y), &mut self.grad);
            self.incidents.zeroed_gradients += u64::from(zeroed) * g.count as u64;
            q_of.push(q);
        }
        let loss: f64 = self.targets.iter().map(|&(g, y)| (y - q_of[g]).powi(2)).sum();

        let mut penalty_value = None;
        if let Some(pen) = self.penalty.as_mut() {
            if self.updates % self.penalty_interval == 0 {
                let e = pen.evaluate(&self.kernel, Some((&mut self.grad, self.penalty_weight)));
                if e.converged {
                    penalty_value = Some(e.value);
                }
            }
        }
        self.updates += 1;

        let objective = loss + self.penalty_weight * penalty_value.unwrap_or(0.0);
        let skipped = !objective.is_finite() || !self.grad.is_finite();
        if skipped {
            self.incidents.skipped_updates += 1;
            log::warn!("non-finite loss or gradient; update skipped");
        } else {
            self.optim.step(&mut self.kernel, &self.grad);
        }
        self.grad.zero();
        Ok(TrainStats {
            td_loss: if batch.is_empty() { None } else { Some(loss / batch.len() as f64) },
            penalty: penalty_value,
            skipped,
        })
    }
}

impl Agent for QDppLearner {
    fn algo(&self) -> &'static str {
        "qdpp"
    }

    fn act(&mut self, obs: &[usize], epsilon: f64, rng: &mut Rng) -> Result<Explored, LearnerError> {
        Ok(sampler::explore_action(&self.kernel, obs, epsilon, rng)?)
    }

    fn greedy(&self, obs: &[usize]) -> Result<Vec<usize>, LearnerError> {
        Ok(self.kernel.greedy_joint(obs)?)
    }

    fn train(&mut self, batch: &[&Transition]) -> Result<TrainStats, LearnerError> {
        Ok(self.train_step(batch)?)
    }

    fn on_target_interval(&mut self) {
        self.sync_target();
    }

    fn dq_ratio(&self, obs: &[usize], actions: &[usize]) -> Option<f64> {
        let sel = self.kernel.ground().selection(obs, actions).ok()?;
        dq_ratio(&self.kernel, sel.indices())
    }

    fn igm(&self, obs: &[usize]) -> Option<bool> {
        igm_check(&self.kernel, obs).ok()
    }

    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<(), LearnerError> {
        Ok(kernel::write_checkpoint(&self.kernel, out)?)
    }

    fn incidents(&self) -> Incidents {
        QDppLearner::incidents(self)
    }
}
