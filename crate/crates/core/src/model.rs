//! Domain types shared by every part of the simulator.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u64);

/// Dense user index, `0..|U|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

impl UserId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("task {task} starts at {start} before its arrival at {arrival}")]
    StartBeforeArrival { task: u64, arrival: String, start: String },
    #[error("task {task} has non-positive duration {duration}")]
    NonPositiveDuration { task: u64, duration: String },
    #[error("task {task} has negative arrival time {arrival}")]
    NegativeArrival { task: u64, arrival: String },
    #[error("patience index needs a positive response time, got {0}")]
    NonPositiveResponse(String),
    #[error("happiness state has {state} entries but {critical} critical levels were given")]
    DimensionMismatch { state: usize, critical: usize },
}

/// One job submission.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest<T> {
    pub id: TaskId,
    pub user: UserId,
    pub arrival: T,
    pub duration: T,
    /// Provider-side expected response time, fixed when the task was submitted.
    /// EAS and PAS order on this value.
    pub expected_rt: T,
    /// The user's tolerance w(u) in force at submission.
    pub tolerance: T,
    /// Provider's running mean of this user's past patience indexes (1.0 before any).
    pub user_patience: f64,
}

impl<T: SimTime> TaskRequest<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.duration.is_positive() {
            return Err(ModelError::NonPositiveDuration {
                task: self.id.0,
                duration: self.duration.to_string(),
            });
        }
        if self.arrival < T::zero() {
            return Err(ModelError::NegativeArrival {
                task: self.id.0,
                arrival: self.arrival.to_string(),
            });
        }
        Ok(())
    }

    /// EAS soft deadline: arrival plus expected response time.
    pub fn expectation_deadline(&self) -> T {
        self.arrival + self.expected_rt
    }
}

/// Per-user state: tolerance, happiness, critical level and waiting-time history.
#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile<T> {
    pub user: UserId,
    pub tolerance: T,
    pub happiness: T,
    pub initial_happiness: T,
    pub critical_level: T,
    pub active: bool,
    /// Most recent waiting times `r(t) − Δ(t)`, at most `window` entries.
    pub wait_history: VecDeque<T>,
    pub window: usize,
    /// Maximum acceptable response time, when the user has one.
    pub threshold: Option<f64>,
}

impl<T: SimTime> UserProfile<T> {
    pub fn new(user: UserId, tolerance: T, happiness: T, critical_level: T, window: usize) -> Self {
        Self {
            user,
            tolerance,
            happiness,
            initial_happiness: happiness,
            critical_level,
            active: happiness > critical_level,
            wait_history: VecDeque::with_capacity(window),
            window: window.max(1),
            threshold: None,
        }
    }

    pub fn push_wait(&mut self, wait: T) {
        if self.wait_history.len() == self.window {
            self.wait_history.pop_front();
        }
        self.wait_history.push_back(wait);
    }
}

/// Outcome of one serviced task.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRecord<T> {
    pub task_id: TaskId,
    pub user: UserId,
    pub arrival: T,
    pub start: T,
    pub completion: T,
    pub duration: T,
    pub response_time: T,
    pub excess_delay: T,
    /// User-side expectation in force when the task completed.
    pub expected_rt: T,
    pub patience_index: f64,
    /// Response time exceeded the user's personal threshold.
    pub over_threshold: bool,
}

/// Happiness of every user, index-aligned with [`UserId`].
#[derive(Debug, Clone, PartialEq)]
pub struct HappinessState<T> {
    pub values: Vec<T>,
}

impl<T: SimTime> HappinessState<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn l1(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v)
    }
}

/// `r(t) = (s(t) − a(t)) + Δ(t)`.
pub fn response_time<T: SimTime>(arrival: T, start: T, duration: T) -> Result<T, ModelError> {
    if start.definitely_lt(arrival) {
        return Err(ModelError::StartBeforeArrival {
            task: 0,
            arrival: arrival.to_string(),
            start: start.to_string(),
        });
    }
    if !duration.is_positive() {
        return Err(ModelError::NonPositiveDuration {
            task: 0,
            duration: duration.to_string(),
        });
    }
    Ok((start - arrival) + duration)
}

/// `e(u,t) = r(t) − (Δ(t) + w(u))`; negative when served ahead of expectation.
pub fn excess_delay<T: SimTime>(response_time: T, duration: T, tolerance: T) -> T {
    response_time - (duration + tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Exact;

    #[test]
    fn response_time_examples() {
        assert_eq!(response_time(0.0, 0.0, 10.0).unwrap(), 10.0);
        assert_eq!(response_time(100.0, 130.0, 10.0).unwrap(), 40.0);
        // FIFO family-F task submitted at 3kΔ+ε, started at 3kΔ+Δ (Δ=10, ε=6, k=1).
        let r = response_time(Exact::from_integer(36), Exact::from_integer(40), Exact::from_integer(10));
        assert_eq!(r.unwrap(), Exact::from_integer(14));
    }

    #[test]
    fn response_time_rejects_start_before_arrival() {
        assert!(matches!(
            response_time(10.0, 5.0, 1.0),
            Err(ModelError::StartBeforeArrival { .. })
        ));
        assert!(response_time(10.0, 10.0, 0.0).is_err());
    }

    #[test]
    fn excess_delay_examples() {
        assert_eq!(excess_delay(10.0, 10.0, 20.0), -20.0);
        assert_eq!(excess_delay(10.0, 10.0, 0.0), 0.0);
        assert_eq!(excess_delay(45.0, 10.0, 20.0), 15.0);
    }

    #[test]
    fn wait_history_is_bounded() {
        let mut p = UserProfile::new(UserId(0), 0.0, 1.0, 0.5, 3);
        for w in 0..10 {
            p.push_wait(w as f64);
        }
        assert_eq!(p.wait_history.iter().copied().collect::<Vec<_>>(), vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn task_validation() {
        let mut t = TaskRequest {
            id: TaskId(1),
            user: UserId(0),
            arrival: 0.0,
            duration: 10.0,
            expected_rt: 10.0,
            tolerance: 0.0,
            user_patience: 1.0,
        };
        assert!(t.validate().is_ok());
        t.duration = 0.0;
        assert!(matches!(t.validate(), Err(ModelError::NonPositiveDuration { .. })));
        t.duration = 1.0;
        t.arrival = -1.0;
        assert!(matches!(t.validate(), Err(ModelError::NegativeArrival { .. })));
    }
}
