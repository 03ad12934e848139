//! Episode-granularity replay.

use std::collections::VecDeque;

use rand::seq::index;

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<usize>,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub next_obs: Vec<usize>,
    /// The task ended here, so the target does not bootstrap.
    pub done: bool,
}

/// Bounded FIFO of whole episodes.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    episodes: VecDeque<Vec<Transition>>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            episodes: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Stores an episode, evicting the oldest when full. Empty episodes are ignored.
    pub fn push(&mut self, episode: Vec<Transition>) {
        if episode.is_empty() {
            return;
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn episode(&self, i: usize) -> &[Transition] {
        &self.episodes[i]
    }

    /// Indices of `k` distinct episodes drawn uniformly (all of them when fewer are stored).
    pub fn sample_indices(&self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let n = self.episodes.len();
        if k >= n {
            return (0..n).collect();
        }
        index::sample(rng, n, k).into_vec()
    }

    /// Every transition of `k` uniformly drawn episodes.
    pub fn sample_batch(&self, k: usize, rng: &mut Rng) -> Vec<&Transition> {
        self.sample_indices(k, rng)
            .into_iter()
            .flat_map(|i| self.episodes[i].iter())
            .collect()
    }
}
