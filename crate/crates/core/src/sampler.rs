//! Sampling joint actions from the kernel.
//!
//! [`orthogonalizing_sample`] walks the agents in order, draws one item from
//! each agent's slice with probability proportional to its projected quality
//! score, and removes the chosen direction from everything drawn later.
//! [`exact_distribution`] enumerates every joint action and is only meant for
//! small instances.

use rand::Rng as _;
use thiserror::Error;

use crate::kernel::{JointSelection, KernelError, QDppKernel};
use crate::linalg::{self, LinalgError, Matrix};
use crate::rng::Rng;

/// Largest joint-action space the enumeration routines accept.
pub const ORACLE_GUARD: usize = 1_000_000;
/// A slice whose best projected score is below this fraction of its
/// unprojected scale is treated as spanned by earlier picks.
pub const DEGENERATE_REL: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("joint action space of {count} exceeds the enumeration limit {ORACLE_GUARD}")]
    GuardExceeded { count: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One draw of the orthogonalizing sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub actions: Vec<usize>,
    pub selection: JointSelection,
    /// Squared norm of each chosen diversity vector after projection, in agent order.
    pub residual_norms_sq: Vec<f64>,
    /// Slices where every projected score vanished and a uniform pick was made.
    pub degenerate_slices: usize,
}

pub fn orthogonalizing_sample(kernel: &QDppKernel, joint_obs: &[usize], rng: &mut Rng) -> Result<Sample, SamplerError> {
    let gs = kernel.ground();
    gs.check_joint_obs(joint_obs)?;
    let n = gs.n_agents();
    let na = gs.n_actions();
    let p = kernel.feature_dim();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut residual_norms_sq = Vec::with_capacity(n);
    let mut degenerate_slices = 0;
    let mut work = vec![0.0; na * p];
    let mut scores = vec![0.0; na];
    for (agent, &obs) in joint_obs.iter().enumerate() {
        let start = gs.index(agent, obs, 0);
        let d_max = (start..start + na)
            .map(|j| kernel.log_quality()[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut scale = 0.0f64;
        for a in 0..na {
            let j = start + a;
            let v = &mut work[a * p..(a + 1) * p];
            v.copy_from_slice(kernel.diversity_row(j));
            let q = (kernel.log_quality()[j] - d_max).exp();
            scale = scale.max(linalg::norm_sq(v) * q);
            for u in &basis {
                linalg::project_out(v, u);
            }
            scores[a] = linalg::norm_sq(v) * q;
        }
        let best = scores.iter().copied().fold(0.0, f64::max);
        let pick = if scale > 0.0 && best > DEGENERATE_REL * scale {
            categorical(&scores, rng)
        } else {
            degenerate_slices += 1;
            log::debug!("degenerate slice for agent {agent}; uniform fallback");
            rng.random_range(0..na)
        };
        let chosen = &work[pick * p..(pick + 1) * p];
        let r2 = linalg::norm_sq(chosen);
        residual_norms_sq.push(r2);
        if scale > 0.0 && scores[pick] > DEGENERATE_REL * scale {
            basis.push(chosen.to_vec());
        }
        actions.push(pick);
    }
    let selection = gs.selection(joint_obs, &actions)?;
    Ok(Sample {
        actions,
        selection,
        residual_norms_sq,
        degenerate_slices,
    })
}

/// Index drawn with probability proportional to `weights` (non-negative, positive sum).
pub(crate) fn categorical(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding left `u` past the end: fall back to the last positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Probabilities over all joint actions, lexicographic in `(a_1, …, a_N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub n_agents: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
    /// Every determinant was zero and the uniform distribution was returned.
    pub all_zero: bool,
}

impl JointDistribution {
    pub fn index_of(&self, actions: &[usize]) -> usize {
        actions.iter().fold(0, |k, &a| k * self.n_actions + a)
    }

    pub fn prob(&self, actions: &[usize]) -> f64 {
        self.probs[self.index_of(actions)]
    }

    pub fn actions(&self, mut k: usize) -> Vec<usize> {
        let mut out = vec![0; self.n_agents];
        for slot in out.iter_mut().rev() {
            *slot = k % self.n_actions;
            k /= self.n_actions;
        }
        out
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub(crate) fn guarded_count(kernel: &QDppKernel) -> Result<usize, SamplerError> {
    let gs = kernel.ground();
    match gs.joint_action_count() {
        Some(c) if c <= ORACLE_GUARD => Ok(c),
        Some(c) => Err(SamplerError::GuardExceeded { count: c.to_string() }),
        None => Err(SamplerError::GuardExceeded {
            count: format!("{}^{}", gs.n_actions(), gs.n_agents()),
        }),
    }
}

/// Normalized `det(L_Y)` over every valid selection for `joint_obs`.
pub fn exact_distribution(kernel: &QDppKernel, joint_obs: &[usize]) -> Result<JointDistribution, SamplerError> {
    let gs = kernel.ground();
    gs.check_joint_obs(joint_obs)?;
    let count = guarded_count(kernel)?;
    let n = gs.n_agents();
    let na = gs.n_actions();
    let p = kernel.feature_dim();
    // Rows rescaled by a per-agent constant; the factor cancels on normalization.
    let mut rows = vec![0.0; n * na * p];
    for (agent, &obs) in joint_obs.iter().enumerate() {
        let start = gs.index(agent, obs, 0);
        let d_max = (start..start + na)
            .map(|j| kernel.log_quality()[j])
            .fold(f64::NEG_INFINITY, f64::max);
        for a in 0..na {
            let s = (0.5 * (kernel.log_quality()[start + a] - d_max)).exp();
            let dst = &mut rows[(agent * na + a) * p..(agent * na + a + 1) * p];
            for (x, &b) in dst.iter_mut().zip(kernel.diversity_row(start + a)) {
                *x = s * b;
            }
        }
    }
    let mut probs = Vec::with_capacity(count);
    let mut w_y = Matrix::zeros(n, p);
    for k in 0..count {
        let actions = gs.joint_action(k);
        for (agent, &a) in actions.iter().enumerate() {
            w_y.row_mut(agent)
                .copy_from_slice(&rows[(agent * na + a) * p..(agent * na + a + 1) * p]);
        }
        probs.push(linalg::det_gram(&w_y).max(0.0));
    }
    let total: f64 = probs.iter().sum();
    let all_zero = !(total > 0.0);
    if all_zero {
        log::warn!("all joint determinants vanish; returning the uniform distribution");
        probs.iter_mut().for_each(|x| *x = 1.0 / count as f64);
    } else {
        probs.iter_mut().for_each(|x| *x /= total);
    }
    Ok(JointDistribution {
        n_agents: n,
        n_actions: na,
        probs,
        all_zero,
    })
}

/// Partition balance of the kernel restricted to the current observation.
///
/// Compares the squared singular values of the stacked slice rows with those
/// of each slice alone (zero-padded to `P`) and returns the smallest ratio,
/// clamped to `(0, 1]`. Returns 0 when some slice lacks a direction the
/// stack has.
pub fn measure_delta(kernel: &QDppKernel, joint_obs: &[usize]) -> Result<f64, SamplerError> {
    let gs = kernel.ground();
    gs.check_joint_obs(joint_obs)?;
    let p = kernel.feature_dim();
    let na = gs.n_actions();
    let mut slices = Vec::with_capacity(gs.n_agents());
    for (agent, &obs) in joint_obs.iter().enumerate() {
        let start = gs.index(agent, obs, 0);
        slices.push((start..start + na).map(|j| kernel.kernel_row(j)).collect::<Vec<_>>());
    }
    let stacked: Vec<Vec<f64>> = slices.iter().flatten().cloned().collect();
    let full = padded_sq(&linalg::singular_values(&Matrix::from_rows(&stacked)?)?, p);
    let top = full[0];
    if !(top > 0.0) {
        return Ok(1.0);
    }
    let mut delta = 1.0f64;
    for rows in &slices {
        let part = padded_sq(&linalg::singular_values(&Matrix::from_rows(rows)?)?, p);
        for k in 0..p {
            if full[k] > 1e-12 * top {
                delta = delta.min(part[k] / full[k]);
            }
        }
    }
    Ok(if delta > 1e-12 { delta.min(1.0) } else { 0.0 })
}

fn padded_sq(sv: &[f64], p: usize) -> Vec<f64> {
    let mut out: Vec<f64> = sv.iter().map(|s| s * s).collect();
    out.resize(p.max(out.len()), 0.0);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub actions: Vec<usize>,
    pub empirical: f64,
    pub exact: f64,
    /// `exact / δ^N`; `None` when the bound is vacuous.
    pub bound: Option<f64>,
    /// `None` when skipped.
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub delta: f64,
    pub n_draws: usize,
    pub rows: Vec<BoundRow>,
    pub degenerate_slices: usize,
}

impl BoundReport {
    pub fn skipped(&self) -> bool {
        self.rows.iter().all(|r| r.pass.is_none())
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass != Some(false))
    }
}

/// Draws `n_draws` samples and checks each joint outcome against `exact / δ^N`
/// with a five-standard-error allowance.
pub fn theorem1_check(
    kernel: &QDppKernel,
    joint_obs: &[usize],
    n_draws: usize,
    rng: &mut Rng,
) -> Result<BoundReport, SamplerError> {
    let exact = exact_distribution(kernel, joint_obs)?;
    let delta = measure_delta(kernel, joint_obs)?;
    let mut counts = vec![0usize; exact.len()];
    let mut degenerate_slices = 0;
    for _ in 0..n_draws {
        let s = orthogonalizing_sample(kernel, joint_obs, rng)?;
        degenerate_slices += s.degenerate_slices;
        counts[exact.index_of(&s.actions)] += 1;
    }
    let n = kernel.ground().n_agents() as i32;
    let rows = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let empirical = if n_draws > 0 { c as f64 / n_draws as f64 } else { 0.0 };
            let bound = (delta > 0.0).then(|| exact.probs[k] / delta.powi(n));
            let se = if n_draws > 0 {
                (empirical * (1.0 - empirical) / n_draws as f64).sqrt()
            } else {
                0.0
            };
            BoundRow {
                actions: exact.actions(k),
                empirical,
                exact: exact.probs[k],
                bound,
                pass: bound.map(|b| empirical <= b + 5.0 * se),
            }
        })
        .collect();
    Ok(BoundReport {
        delta,
        n_draws,
        rows,
        degenerate_slices,
    })
}

/// Result of one exploratory action choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Explored {
    pub actions: Vec<usize>,
    pub sampled: bool,
    pub degenerate_slices: usize,
}

/// With probability `epsilon` draws from the orthogonalizing sampler,
/// otherwise returns each agent's greedy action.
pub fn explore_action(
    kernel: &QDppKernel,
    joint_obs: &[usize],
    epsilon: f64,
    rng: &mut Rng,
) -> Result<Explored, SamplerError> {
    if rng.random::<f64>() < epsilon {
        let s = orthogonalizing_sample(kernel, joint_obs, rng)?;
        Ok(Explored {
            actions: s.actions,
            sampled: true,
            degenerate_slices: s.degenerate_slices,
        })
    } else {
        Ok(Explored {
            actions: kernel.greedy_joint(joint_obs)?,
            sampled: false,
            degenerate_slices: 0,
        })
    }
}
