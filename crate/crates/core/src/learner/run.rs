//! The acting/learning loop shared by every algorithm.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{TabularAgent, TabularKind};
use crate::config::TrainConfig;
use crate::envs::{EnvKind, Environment};
use crate::kernel::{GroundSet, KernelError, QDppKernel};
use crate::rng::{stream, Rng, Stream};
use crate::sampler::Explored;

use super::{GreedyRow, Incidents, LearnerError, MetricsRow, MetricsSink, ReplayBuffer, Transition};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainStats {
    /// Mean per-transition squared TD error of the update.
    pub td_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub skipped: bool,
}

pub trait Agent {
    fn algo(&self) -> &'static str;
    fn act(&mut self, obs: &[usize], epsilon: f64, rng: &mut Rng) -> Result<Explored, LearnerError>;
    fn greedy(&self, obs: &[usize]) -> Result<Vec<usize>, LearnerError>;
    fn train(&mut self, batch: &[&Transition]) -> Result<TrainStats, LearnerError>;
    /// Called whenever the completed-episode count reaches a multiple of the target interval.
    fn on_target_interval(&mut self) {}
    fn dq_ratio(&self, _obs: &[usize], _actions: &[usize]) -> Option<f64> {
        None
    }
    fn igm(&self, _obs: &[usize]) -> Option<bool> {
        None
    }
    fn write_checkpoint(&self, out: &mut dyn Write) -> Result<(), LearnerError>;
    fn incidents(&self) -> Incidents {
        Incidents::default()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub metrics: Vec<MetricsRow>,
    pub greedy: Vec<GreedyRow>,
    pub steps: u64,
    pub episodes: u64,
    pub degenerate_samples: u64,
    pub incidents: Incidents,
}

/// Mean undiscounted return of `episodes` greedy episodes.
pub fn evaluate_greedy(
    env: &mut dyn Environment,
    agent: &dyn Agent,
    episodes: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>, LearnerError> {
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = env.reset(rng);
        let mut total = 0.0;
        loop {
            let actions = agent.greedy(&obs)?;
            let r = env.step(&actions, rng)?;
            total += r.reward;
            obs = r.next_obs;
            if r.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

#[derive(Default)]
struct Interval {
    returns: Vec<f64>,
    td_loss: (f64, u64),
    penalty: (f64, u64),
    dq: (f64, u64),
    degenerate: u64,
}

fn mean((sum, n): (f64, u64)) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Runs `config.max_steps` environment steps of acting and learning.
///
/// One update per step once the replay holds `batch_size` episodes; until
/// then actions are fully exploratory. Every `metrics_interval` steps a row
/// goes to `sink`, followed by a greedy-evaluation row on a separate
/// environment instance when `eval_episodes > 0`.
pub fn run_training(
    env: &mut dyn Environment,
    eval_env: &mut dyn Environment,
    agent: &mut dyn Agent,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<RunSummary, LearnerError> {
    let spec = env.spec();
    let started = Instant::now();
    let mut env_rng = stream(config.seed, Stream::Env);
    let mut explore_rng = stream(config.seed, Stream::Explore);
    let mut replay_rng = stream(config.seed, Stream::Replay);
    let mut eval_rng = stream(config.seed, Stream::Eval);

    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut summary = RunSummary::default();
    let mut interval = Interval::default();
    let mut recent: VecDeque<Vec<usize>> = VecDeque::with_capacity(config.igm_window + 1);
    let mut episode: Vec<Transition> = Vec::with_capacity(spec.max_episode_steps);
    let mut episode_return = 0.0;
    let mut epsilon;
    let mut obs = if config.max_steps > 0 { env.reset(&mut env_rng) } else { Vec::new() };

    for step in 1..=config.max_steps {
        let warm = buffer.len() >= config.batch_size;
        epsilon = if warm { config.epsilon_at(step - 1) } else { 1.0 };
        let chosen = agent.act(&obs, epsilon, &mut explore_rng)?;
        interval.degenerate += chosen.degenerate_slices as u64;
        if let Some(r) = agent.dq_ratio(&obs, &chosen.actions) {
            interval.dq.0 += r;
            interval.dq.1 += 1;
        }
        if let Some(pos) = recent.iter().position(|o| *o == obs) {
            recent.remove(pos);
        }
        recent.push_back(obs.clone());
        if recent.len() > config.igm_window {
            recent.pop_front();
        }

        let result = env.step(&chosen.actions, &mut env_rng)?;
        episode_return += result.reward;
        episode.push(Transition {
            obs: std::mem::take(&mut obs),
            actions: chosen.actions,
            reward: result.reward,
            next_obs: result.next_obs.clone(),
            done: result.terminal,
        });
        if result.done {
            buffer.push(std::mem::take(&mut episode));
            summary.episodes += 1;
            interval.returns.push(episode_return);
            episode_return = 0.0;
            if summary.episodes % config.target_update_interval as u64 == 0 {
                agent.on_target_interval();
            }
            obs = env.reset(&mut env_rng);
        } else {
            obs = result.next_obs;
        }

        if buffer.len() >= config.batch_size {
            let batch = buffer.sample_batch(config.batch_size, &mut replay_rng);
            let stats = agent.train(&batch)?;
            if let Some(l) = stats.td_loss.filter(|_| !stats.skipped) {
                interval.td_loss.0 += l;
                interval.td_loss.1 += 1;
            }
            if let Some(p) = stats.penalty {
                interval.penalty.0 += p;
                interval.penalty.1 += 1;
            }
        }

        summary.steps = step;
        if step % config.metrics_interval == 0 || step == config.max_steps {
            let igm: Vec<bool> = recent.iter().filter_map(|o| agent.igm(o)).collect();
            let row = MetricsRow {
                step,
                episode: summary.episodes,
                mean_return: (!interval.returns.is_empty())
                    .then(|| interval.returns.iter().sum::<f64>() / interval.returns.len() as f64),
                td_loss: mean(interval.td_loss),
                penalty: mean(interval.penalty),
                dq_ratio: mean(interval.dq),
                igm_rate: (!igm.is_empty())
                    .then(|| igm.iter().filter(|&&b| b).count() as f64 / igm.len() as f64),
                epsilon,
                degenerate_samples: interval.degenerate,
                wallclock_s: if config.wallclock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            summary.degenerate_samples += interval.degenerate;
            sink.metrics(&row)?;
            summary.metrics.push(row);
            if config.eval_episodes > 0 {
                let returns = evaluate_greedy(eval_env, agent, config.eval_episodes, &mut eval_rng)?;
                let g = GreedyRow {
                    step,
                    episode: summary.episodes,
                    greedy_return: returns.iter().sum::<f64>() / returns.len() as f64,
                };
                sink.greedy(&g)?;
                summary.greedy.push(g);
            }
            interval = Interval::default();
        }
    }
    summary.incidents = agent.incidents();
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Qdpp,
    Iql,
    Vdn,
}

impl Algo {
    pub const ALL: [Algo; 3] = [Algo::Qdpp, Algo::Iql, Algo::Vdn];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Qdpp => "qdpp",
            Algo::Iql => "iql",
            Algo::Vdn => "vdn",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?} (expected qdpp, iql or vdn)"))
    }
}

/// A freshly initialized agent; kernel parameters come from the seed's init stream.
pub fn make_agent(algo: Algo, ground: GroundSet, config: &TrainConfig) -> Result<Box<dyn Agent>, KernelError> {
    Ok(match algo {
        Algo::Qdpp => {
            let kernel = QDppKernel::random(ground, config.feature_dim, &mut stream(config.seed, Stream::Init))?;
            Box::new(super::QDppLearner::new(kernel, config)?)
        }
        Algo::Iql => Box::new(TabularAgent::new(TabularKind::Independent, ground, config)),
        Algo::Vdn => Box::new(TabularAgent::new(TabularKind::Additive, ground, config)),
    })
}

/// Builds the environment pair and agent, then runs [`run_training`].
pub fn train(
    env: EnvKind,
    algo: Algo,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(Box<dyn Agent>, RunSummary), LearnerError> {
    let mut train_env = env.make();
    let mut eval_env = env.make();
    let spec = train_env.spec();
    let ground = GroundSet::new(spec.n_agents, spec.n_obs, spec.n_actions)?;
    let mut agent = make_agent(algo, ground, config)?;
    let summary = run_training(train_env.as_mut(), eval_env.as_mut(), agent.as_mut(), config, sink)?;
    Ok((agent, summary))
}
