//! Replay storage partitioned by task and tagged by provenance.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::env::Action;
use crate::error::{Error, Result};
use crate::infer::ContextTuple;

/// How a transition came to exist.
///
/// `Real` is environment experience; `ImaginedReal` was dreamed by the
/// world model under the posterior of a real task; `Imagined` was dreamed
/// under an interpolated latent with no corresponding real task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Real,
    ImaginedReal,
    Imagined,
}

impl Provenance {
    pub fn tag(&self) -> &'static str {
        match self {
            Provenance::Real => "R",
            Provenance::ImaginedReal => "IR",
            Provenance::Imagined => "I",
        }
    }
}

/// One stored interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Genuine episode end at `next_state`; horizon cuts stay false.
    pub terminal: bool,
    pub provenance: Provenance,
}

impl Transition {
    pub fn context_tuple(&self) -> ContextTuple {
        ContextTuple {
            state: self.state.clone(),
            action: self.action.clone(),
            reward: self.reward,
            next_state: self.next_state.clone(),
        }
    }
}

/// Ring buffers keyed by task index. Each task keeps at most
/// `capacity_per_task` transitions; a trailing `recent_window` is what
/// context sampling draws from, so the encoder sees fresh behaviour.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity_per_task: usize,
    recent_window: usize,
    tasks: BTreeMap<usize, VecDeque<Transition>>,
}

impl ReplayBuffer {
    pub fn new(capacity_per_task: usize, recent_window: usize) -> Self {
        ReplayBuffer {
            capacity_per_task: capacity_per_task.max(1),
            recent_window: recent_window.max(1),
            tasks: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, task: usize, transition: Transition) {
        let q = self.tasks.entry(task).or_default();
        if q.len() == self.capacity_per_task {
            q.pop_front();
        }
        q.push_back(transition);
    }

    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.tasks.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.tasks.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, task: usize, filter: Option<Provenance>) -> usize {
        self.tasks.get(&task).map_or(0, |q| match filter {
            None => q.len(),
            Some(p) => q.iter().filter(|t| t.provenance == p).count(),
        })
    }

    pub fn clear(&mut self) {
        self.tasks.clear();
    }

    fn matching<'a>(
        &'a self,
        task: usize,
        filter: Option<Provenance>,
        recent_only: bool,
    ) -> Vec<&'a Transition> {
        let Some(q) = self.tasks.get(&task) else {
            return Vec::new();
        };
        let skip = if recent_only {
            q.len().saturating_sub(self.recent_window)
        } else {
            0
        };
        q.iter()
            .skip(skip)
            .filter(|t| filter.map_or(true, |p| t.provenance == p))
            .collect()
    }

    /// Uniform sample of `n` distinct transitions for one task.
    /// `recent_only` restricts to the trailing window, which is how
    /// encoder contexts are drawn.
    pub fn sample(
        &self,
        task: usize,
        n: usize,
        filter: Option<Provenance>,
        recent_only: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<&Transition>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut pool = self.matching(task, filter, recent_only);
        if pool.len() < n {
            return Err(Error::InsufficientData(format!(
                "task {task}: requested {n}, have {} (filter {:?}, recent_only {recent_only})",
                pool.len(),
                filter.map(|p| p.tag())
            )));
        }
        pool.shuffle(rng);
        pool.truncate(n);
        Ok(pool)
    }

    /// Most recent `n` transitions of a task in time order, regardless of
    /// provenance filter windows.
    pub fn tail(&self, task: usize, n: usize) -> Vec<&Transition> {
        let Some(q) = self.tasks.get(&task) else {
            return Vec::new();
        };
        q.iter().skip(q.len().saturating_sub(n)).collect()
    }
}
