//! The Q-DPP kernel.
//!
//! The ground set enumerates every agent's observation-action pairs and is
//! partitioned by agent. Each item `j` carries a log-quality `D[j]` (which is
//! the agent's individual Q-value for that pair) and a diversity vector
//! `b[j]` with `‖b[j]‖ ≤ 1`. The implicit kernel row is
//! `w[j] = exp(D[j] / 2) · b[j]`, so for a valid joint selection `Y`
//!
//! ```text
//! Q(o, a) = log det(W_Y W_Yᵀ) = Σ_{j∈Y} D[j] + log det(B_Y B_Yᵀ)
//! ```

mod checkpoint;
mod penalty;

use std::ops::Range;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::rng::Rng;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use penalty::{sv_penalty, PenaltyEval, SvPenalty};

/// Gram determinants below this floor are clamped before taking the log.
pub const DET_FLOOR: f64 = 1e-12;
/// Upper bound on agents; keeps per-transition scratch on the stack.
pub const MAX_AGENTS: usize = 16;
/// Slack allowed on the unit-norm constraint of diversity vectors.
pub const NORM_SLACK: f64 = 1e-6;

const INIT_LOG_QUALITY: f64 = 0.01;
const INIT_DIVERSITY_NORM: f64 = 0.99;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("ground set dimensions must be positive (agents {n_agents}, obs {n_obs}, actions {n_actions})")]
    EmptyGroundSet {
        n_agents: usize,
        n_obs: usize,
        n_actions: usize,
    },
    #[error("{0} agents exceed the supported maximum of {MAX_AGENTS}")]
    TooManyAgents(usize),
    #[error("agent {agent} out of range ({n_agents} agents)")]
    AgentOutOfRange { agent: usize, n_agents: usize },
    #[error("observation {obs} out of range ({n_obs} observations)")]
    ObsOutOfRange { obs: usize, n_obs: usize },
    #[error("action {action} out of range ({n_actions} actions)")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("expected {expected} per-agent entries, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("feature dimension {feature_dim} is below the agent count {n_agents}")]
    FeatureDimTooSmall { feature_dim: usize, n_agents: usize },
    #[error("parameter buffer has {got} entries, expected {expected}")]
    ParameterLength { expected: usize, got: usize },
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("diversity vector {index} has norm {norm} > 1")]
    NormViolation { index: usize, norm: f64 },
    #[error("delta must lie in (0, 1], got {0}")]
    BadDelta(f64),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// All agents' observation-action pairs, partitioned by agent.
///
/// Index layout: `agent·|O||A| + obs·|A| + action`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundSet {
    n_agents: usize,
    n_obs: usize,
    n_actions: usize,
}

impl GroundSet {
    pub fn new(n_agents: usize, n_obs: usize, n_actions: usize) -> Result<Self, KernelError> {
        if n_agents == 0 || n_obs == 0 || n_actions == 0 {
            return Err(KernelError::EmptyGroundSet {
                n_agents,
                n_obs,
                n_actions,
            });
        }
        if n_agents > MAX_AGENTS {
            return Err(KernelError::TooManyAgents(n_agents));
        }
        Ok(Self {
            n_agents,
            n_obs,
            n_actions,
        })
    }

    #[inline]
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    #[inline]
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Ground-set size `M = N·|O|·|A|`.
    #[inline]
    pub fn size(&self) -> usize {
        self.n_agents * self.n_obs * self.n_actions
    }

    #[inline]
    pub fn partition_size(&self) -> usize {
        self.n_obs * self.n_actions
    }

    #[inline]
    pub fn index(&self, agent: usize, obs: usize, action: usize) -> usize {
        debug_assert!(agent < self.n_agents && obs < self.n_obs && action < self.n_actions);
        agent * self.partition_size() + obs * self.n_actions + action
    }

    /// Agent owning a ground-set index.
    #[inline]
    pub fn partition_of(&self, index: usize) -> usize {
        index / self.partition_size()
    }

    /// `(agent, obs, action)` of a ground-set index.
    pub fn decompose(&self, index: usize) -> (usize, usize, usize) {
        let agent = index / self.partition_size();
        let rest = index % self.partition_size();
        (agent, rest / self.n_actions, rest % self.n_actions)
    }

    fn check_agent_obs(&self, agent: usize, obs: usize) -> Result<(), KernelError> {
        if agent >= self.n_agents {
            return Err(KernelError::AgentOutOfRange {
                agent,
                n_agents: self.n_agents,
            });
        }
        if obs >= self.n_obs {
            return Err(KernelError::ObsOutOfRange {
                obs,
                n_obs: self.n_obs,
            });
        }
        Ok(())
    }

    /// The `|A|` consecutive indices available to `agent` when it observes `obs`.
    pub fn valid_slice(&self, agent: usize, obs: usize) -> Result<Range<usize>, KernelError> {
        self.check_agent_obs(agent, obs)?;
        let start = self.index(agent, obs, 0);
        Ok(start..start + self.n_actions)
    }

    pub fn check_joint_obs(&self, joint_obs: &[usize]) -> Result<(), KernelError> {
        if joint_obs.len() != self.n_agents {
            return Err(KernelError::WrongArity {
                expected: self.n_agents,
                got: joint_obs.len(),
            });
        }
        for (agent, &obs) in joint_obs.iter().enumerate() {
            self.check_agent_obs(agent, obs)?;
        }
        Ok(())
    }

    /// Builds the selection `{(o_i, a_i)}` for a joint observation and action.
    pub fn selection(&self, joint_obs: &[usize], actions: &[usize]) -> Result<JointSelection, KernelError> {
        self.check_joint_obs(joint_obs)?;
        if actions.len() != self.n_agents {
            return Err(KernelError::WrongArity {
                expected: self.n_agents,
                got: actions.len(),
            });
        }
        let mut indices = Vec::with_capacity(self.n_agents);
        for (agent, (&obs, &action)) in joint_obs.iter().zip(actions).enumerate() {
            if action >= self.n_actions {
                return Err(KernelError::ActionOutOfRange {
                    action,
                    n_actions: self.n_actions,
                });
            }
            indices.push(self.index(agent, obs, action));
        }
        Ok(JointSelection(indices))
    }

    /// `|A|^N`, or `None` on overflow.
    pub fn joint_action_count(&self) -> Option<usize> {
        self.n_actions.checked_pow(u32::try_from(self.n_agents).ok()?)
    }

    /// Decodes the `k`-th joint action in lexicographic order (agent 0 most significant).
    pub fn joint_action(&self, mut k: usize) -> Vec<usize> {
        let mut actions = vec![0; self.n_agents];
        for slot in actions.iter_mut().rev() {
            *slot = k % self.n_actions;
            k /= self.n_actions;
        }
        actions
    }
}

/// One ground-set index per agent, in agent order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JointSelection(Vec<usize>);

impl JointSelection {
    #[inline]
    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn actions(&self, ground: &GroundSet) -> Vec<usize> {
        self.0.iter().map(|&j| j % ground.n_actions()).collect()
    }

    pub fn into_indices(self) -> Vec<usize> {
        self.0
    }
}

/// Dense gradient buffer shaped like the kernel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub log_quality: Vec<f64>,
    pub diversity: Vec<f64>,
}

impl KernelGrad {
    pub fn zeros_like(kernel: &QDppKernel) -> Self {
        Self {
            log_quality: vec![0.0; kernel.log_quality.len()],
            diversity: vec![0.0; kernel.diversity.len()],
        }
    }

    pub fn zero(&mut self) {
        self.log_quality.iter_mut().for_each(|x| *x = 0.0);
        self.diversity.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.log_quality.iter().chain(&self.diversity).all(|x| x.is_finite())
    }
}

/// Gradient of the joint Q-value restricted to the selected items.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGradient {
    pub indices: Vec<usize>,
    /// `∂Q/∂D[j]` per selected item; always one.
    pub log_quality: Vec<f64>,
    /// `∂Q/∂b[j]` per selected item, `N × P` row-major.
    pub diversity: Vec<f64>,
    /// Set when the Gram determinant fell under [`DET_FLOOR`] and the diversity
    /// gradient was zeroed.
    pub diversity_zeroed: bool,
}

/// Learnable `(D, B)` parameters over a ground set.
#[derive(Debug, Clone, PartialEq)]
pub struct QDppKernel {
    ground: GroundSet,
    feature_dim: usize,
    log_quality: Vec<f64>,
    diversity: Vec<f64>,
}

impl QDppKernel {
    /// Initializes `D ~ U(−0.01, 0.01)` and each `b` as a random direction of norm 0.99.
    pub fn random(ground: GroundSet, feature_dim: usize, rng: &mut Rng) -> Result<Self, KernelError> {
        check_feature_dim(&ground, feature_dim)?;
        let m = ground.size();
        let log_quality = (0..m)
            .map(|_| rng.random_range(-INIT_LOG_QUALITY..INIT_LOG_QUALITY))
            .collect();
        let mut diversity = vec![0.0; m * feature_dim];
        for row in diversity.chunks_exact_mut(feature_dim) {
            loop {
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(rng);
                }
                let n = linalg::norm_sq(row).sqrt();
                if n > 1e-8 {
                    row.iter_mut().for_each(|x| *x *= INIT_DIVERSITY_NORM / n);
                    break;
                }
            }
        }
        Ok(Self {
            ground,
            feature_dim,
            log_quality,
            diversity,
        })
    }

    /// Wraps explicit parameters, validating shape, finiteness and `‖b‖ ≤ 1`.
    pub fn from_parts(
        ground: GroundSet,
        feature_dim: usize,
        log_quality: Vec<f64>,
        diversity: Vec<f64>,
    ) -> Result<Self, KernelError> {
        check_feature_dim(&ground, feature_dim)?;
        let m = ground.size();
        if log_quality.len() != m {
            return Err(KernelError::ParameterLength {
                expected: m,
                got: log_quality.len(),
            });
        }
        if diversity.len() != m * feature_dim {
            return Err(KernelError::ParameterLength {
                expected: m * feature_dim,
                got: diversity.len(),
            });
        }
        if let Some(k) = log_quality.iter().chain(&diversity).position(|x| !x.is_finite()) {
            return Err(KernelError::NonFinite(k));
        }
        for (index, row) in diversity.chunks_exact(feature_dim).enumerate() {
            let norm = linalg::norm_sq(row).sqrt();
            if norm > 1.0 + NORM_SLACK {
                return Err(KernelError::NormViolation { index, norm });
            }
        }
        Ok(Self {
            ground,
            feature_dim,
            log_quality,
            diversity,
        })
    }

    #[inline]
    pub fn ground(&self) -> &GroundSet {
        &self.ground
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    #[inline]
    pub fn log_quality(&self) -> &[f64] {
        &self.log_quality
    }

    /// Diversity vectors, `M × P` row-major.
    #[inline]
    pub fn diversity(&self) -> &[f64] {
        &self.diversity
    }

    #[inline]
    pub fn diversity_row(&self, j: usize) -> &[f64] {
        &self.diversity[j * self.feature_dim..(j + 1) * self.feature_dim]
    }

    /// Mutable access for optimizers. Callers must restore `‖b‖ ≤ 1` with
    /// [`QDppKernel::project_to_unit_ball`] afterwards.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.log_quality, &mut self.diversity)
    }

    /// Kernel row `w[j] = exp(D[j]/2) · b[j]`.
    pub fn kernel_row(&self, j: usize) -> Vec<f64> {
        let s = (0.5 * self.log_quality[j]).exp();
        self.diversity_row(j).iter().map(|x| s * x).collect()
    }

    /// The full `M × P` matrix `W`.
    pub fn kernel_matrix(&self) -> Matrix {
        let m = self.ground.size();
        let mut data = Vec::with_capacity(m * self.feature_dim);
        for j in 0..m {
            data.extend(self.kernel_row(j));
        }
        Matrix::from_vec(m, self.feature_dim, data).expect("kernel parameters are finite")
    }

    /// `‖b[j]‖² · exp(D[j])`.
    #[inline]
    pub fn quality_score(&self, j: usize) -> f64 {
        linalg::norm_sq(self.diversity_row(j)) * self.log_quality[j].exp()
    }

    /// `D[j] + ln ‖b[j]‖²`, the log of [`QDppKernel::quality_score`].
    #[inline]
    pub fn log_quality_score(&self, j: usize) -> f64 {
        self.log_quality[j] + linalg::norm_sq(self.diversity_row(j)).ln()
    }

    /// Decentralized greedy action: argmax of the quality score over the
    /// agent's valid slice, lowest action id on ties.
    pub fn greedy_action(&self, agent: usize, obs: usize) -> Result<usize, KernelError> {
        let slice = self.ground.valid_slice(agent, obs)?;
        Ok(self.greedy_in_slice(slice))
    }

    #[inline]
    fn greedy_in_slice(&self, slice: Range<usize>) -> usize {
        let start = slice.start;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for j in slice {
            let s = self.log_quality_score(j);
            if s > best_score {
                best_score = s;
                best = j - start;
            }
        }
        best
    }

    /// Per-agent greedy actions for a joint observation.
    pub fn greedy_joint(&self, joint_obs: &[usize]) -> Result<Vec<usize>, KernelError> {
        self.ground.check_joint_obs(joint_obs)?;
        Ok(joint_obs
            .iter()
            .enumerate()
            .map(|(agent, &obs)| {
                let start = self.ground.index(agent, obs, 0);
                self.greedy_in_slice(start..start + self.ground.n_actions())
            })
            .collect())
    }

    /// Gram matrix of the selected diversity vectors, written into `gram`.
    #[inline]
    fn selected_gram(&self, indices: &[usize], gram: &mut [f64]) {
        let n = indices.len();
        for a in 0..n {
            let ba = self.diversity_row(indices[a]);
            for b in a..n {
                let v = linalg::dot(ba, self.diversity_row(indices[b]));
                gram[a * n + b] = v;
                gram[b * n + a] = v;
            }
        }
    }

    /// `(Σ D, det(B_Y B_Yᵀ))` for a selection.
    pub fn joint_parts(&self, indices: &[usize]) -> (f64, f64) {
        let n = indices.len();
        let mut gram = [0.0; MAX_AGENTS * MAX_AGENTS];
        self.selected_gram(indices, &mut gram[..n * n]);
        let det = linalg::clamp_gram_det(linalg::lu_determinant_in_place(&mut gram[..n * n], n));
        let sum_d = indices.iter().map(|&j| self.log_quality[j]).sum();
        (sum_d, det)
    }

    /// Joint Q-value `Σ D + log max(det(B_Y B_Yᵀ), DET_FLOOR)`.
    pub fn joint_q(&self, selection: &JointSelection) -> f64 {
        self.joint_q_indices(selection.indices())
    }

    #[inline]
    pub fn joint_q_indices(&self, indices: &[usize]) -> f64 {
        let (sum_d, det) = self.joint_parts(indices);
        sum_d + det.max(DET_FLOOR).ln()
    }

    /// The same value computed from the kernel rows, `log det(W_Y W_Yᵀ)`.
    ///
    /// Unclamped; returns `-inf` for a singular selection.
    pub fn joint_q_from_rows(&self, selection: &JointSelection) -> f64 {
        let rows: Vec<Vec<f64>> = selection.indices().iter().map(|&j| self.kernel_row(j)).collect();
        let w = Matrix::from_rows(&rows).expect("kernel rows are finite");
        linalg::det_gram(&w).ln()
    }

    /// Adds `s · ∂Q/∂θ` for one selection into `grad`, where `s = scale(Q)`.
    ///
    /// Returns `(Q, diversity_zeroed)`.
    pub fn accumulate_joint_q_grad(
        &self,
        indices: &[usize],
        scale: impl FnOnce(f64) -> f64,
        grad: &mut KernelGrad,
    ) -> (f64, bool) {
        let n = indices.len();
        let p = self.feature_dim;
        let mut gram = [0.0; MAX_AGENTS * MAX_AGENTS];
        let mut work = [0.0; MAX_AGENTS * MAX_AGENTS];
        let mut inv = [0.0; MAX_AGENTS * MAX_AGENTS];
        self.selected_gram(indices, &mut gram[..n * n]);
        work[..n * n].copy_from_slice(&gram[..n * n]);
        let det = linalg::clamp_gram_det(linalg::lu_determinant_in_place(&mut work[..n * n], n));
        let sum_d: f64 = indices.iter().map(|&j| self.log_quality[j]).sum();
        let q = sum_d + det.max(DET_FLOOR).ln();
        let scale = scale(q);
        for &j in indices {
            grad.log_quality[j] += scale;
        }
        let zeroed = !(det > DET_FLOOR) || !linalg::invert_in_place(&mut gram[..n * n], &mut inv[..n * n], n);
        if !zeroed {
            // ∂ log det(G)/∂b_a = 2 Σ_c (G⁻¹)_{ac} b_c
            for (a, &ja) in indices.iter().enumerate() {
                let dst = &mut grad.diversity[ja * p..(ja + 1) * p];
                for (c, &jc) in indices.iter().enumerate() {
                    let coef = 2.0 * scale * inv[a * n + c];
                    linalg::axpy(coef, &self.diversity[jc * p..(jc + 1) * p], dst);
                }
            }
        }
        (q, zeroed)
    }

    /// Analytic gradient of [`QDppKernel::joint_q`] over the selected items.
    pub fn grad_joint_q(&self, selection: &JointSelection) -> JointGradient {
        let indices = selection.indices();
        let n = indices.len();
        let p = self.feature_dim;
        let mut gram = vec![0.0; n * n];
        self.selected_gram(indices, &mut gram);
        let mut work = gram.clone();
        let det = linalg::clamp_gram_det(linalg::lu_determinant_in_place(&mut work, n));
        let mut inv = vec![0.0; n * n];
        let ok = det > DET_FLOOR && linalg::invert_in_place(&mut gram, &mut inv, n);
        let mut diversity = vec![0.0; n * p];
        if ok {
            for a in 0..n {
                let dst = &mut diversity[a * p..(a + 1) * p];
                for (c, &jc) in indices.iter().enumerate() {
                    linalg::axpy(2.0 * inv[a * n + c], self.diversity_row(jc), dst);
                }
            }
        } else {
            log::debug!("singular diversity Gram (det {det:e}); diversity gradient zeroed");
        }
        JointGradient {
            indices: indices.to_vec(),
            log_quality: vec![1.0; n],
            diversity,
            diversity_zeroed: !ok,
        }
    }

    /// Rescales every `b[j]` with `‖b[j]‖ > 1` back onto the unit sphere.
    ///
    /// Returns how many rows were rescaled.
    pub fn project_to_unit_ball(&mut self) -> usize {
        let mut count = 0;
        for row in self.diversity.chunks_exact_mut(self.feature_dim) {
            let n2 = linalg::norm_sq(row);
            if n2 > 1.0 {
                let s = 1.0 / n2.sqrt();
                row.iter_mut().for_each(|x| *x *= s);
                count += 1;
            }
        }
        count
    }

    pub fn max_diversity_norm(&self) -> f64 {
        self.diversity
            .chunks_exact(self.feature_dim)
            .map(|r| linalg::norm_sq(r).sqrt())
            .fold(0.0, f64::max)
    }

    /// Overwrites the parameters with those of `other` (same shape).
    pub fn copy_params_from(&mut self, other: &QDppKernel) {
        debug_assert_eq!(self.ground, other.ground);
        self.log_quality.copy_from_slice(&other.log_quality);
        self.diversity.copy_from_slice(&other.diversity);
    }
}

fn check_feature_dim(ground: &GroundSet, feature_dim: usize) -> Result<(), KernelError> {
    if feature_dim < ground.n_agents() {
        return Err(KernelError::FeatureDimTooSmall {
            feature_dim,
            n_agents: ground.n_agents(),
        });
    }
    Ok(())
}
