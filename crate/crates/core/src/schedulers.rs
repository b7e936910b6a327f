//! Dispatch policies: pure choice functions over the waiting queue.
//!
//! Every chooser returns the index of the task to start next, or `None` for an
//! empty queue. Ties always fall back to (arrival, task id).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::TaskRequest;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyId {
    Fifo,
    Pas,
    Eas,
}

impl StrategyId {
    pub const ALL: [StrategyId; 3] = [StrategyId::Fifo, StrategyId::Pas, StrategyId::Eas];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Fifo => "fifo",
            StrategyId::Pas => "pas",
            StrategyId::Eas => "eas",
        }
    }

    /// Whether the provider applies the self-penalty rule to its estimates.
    pub fn uses_provider_penalty(self) -> bool {
        matches!(self, StrategyId::Pas | StrategyId::Eas)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fifo" => Ok(StrategyId::Fifo),
            "pas" => Ok(StrategyId::Pas),
            "eas" => Ok(StrategyId::Eas),
            other => Err(format!("unknown strategy `{other}` (expected fifo, pas or eas)")),
        }
    }
}

/// How PAS measures a queued task's patience.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PasKey {
    /// `expected_rt / ((now − arrival) + Δ)`: the patience index the task would
    /// get if it started right now.
    #[default]
    Dynamic,
    /// The user's historical mean patience index as recorded by the provider.
    Historical,
}

fn tie_break<T: SimTime>(a: &TaskRequest<T>, b: &TaskRequest<T>) -> Ordering {
    a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id))
}

fn argmin_by<T, F>(queue: &[TaskRequest<T>], mut cmp: F) -> Option<usize>
where
    T: SimTime,
    F: FnMut(&TaskRequest<T>, &TaskRequest<T>) -> Ordering,
{
    let mut best: Option<usize> = None;
    for (i, task) in queue.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                if cmp(task, &queue[b]) == Ordering::Less {
                    best = Some(i);
                }
            }
        }
    }
    best
}

pub fn choose_fifo<T: SimTime>(queue: &[TaskRequest<T>]) -> Option<usize> {
    argmin_by(queue, tie_break)
}

/// Dynamic PAS key of a queued task evaluated at `now`.
pub fn pas_key<T: SimTime>(task: &TaskRequest<T>, now: T) -> T {
    task.expected_rt / ((now - task.arrival) + task.duration)
}

pub fn choose_pas<T: SimTime>(queue: &[TaskRequest<T>], now: T, key: PasKey) -> Option<usize> {
    match key {
        PasKey::Dynamic => argmin_by(queue, |a, b| {
            pas_key(a, now)
                .total_cmp(&pas_key(b, now))
                .then_with(|| tie_break(a, b))
        }),
        PasKey::Historical => argmin_by(queue, |a, b| {
            a.user_patience
                .total_cmp(&b.user_patience)
                .then_with(|| tie_break(a, b))
        }),
    }
}

pub fn choose_eas<T: SimTime>(queue: &[TaskRequest<T>]) -> Option<usize> {
    argmin_by(queue, |a, b| {
        a.expectation_deadline()
            .total_cmp(&b.expectation_deadline())
            .then_with(|| tie_break(a, b))
    })
}

/// Dispatches to the chooser for `strategy`.
pub fn choose<T: SimTime>(
    strategy: StrategyId,
    queue: &[TaskRequest<T>],
    now: T,
    pas_key: PasKey,
) -> Option<usize> {
    match strategy {
        StrategyId::Fifo => choose_fifo(queue),
        StrategyId::Pas => choose_pas(queue, now, pas_key),
        StrategyId::Eas => choose_eas(queue),
    }
}
