//! User behaviour: how expectations form, how patience is measured and how
//! happiness and tolerance react to each completed request.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::schedulers::StrategyId;
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BehaviorError {
    #[error("no response time has been accepted yet")]
    NoHistory,
    #[error("impact table row {row} raises happiness by {delta}")]
    RaisingImpact { row: usize, delta: String },
    #[error("tolerance window must be at least 2, got {0}")]
    WindowTooSmall(usize),
}

/// Parameters of the EWMA-with-outlier-filter expectation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectationParams {
    pub alpha: f64,
    pub ewma_window: usize,
    pub outlier_window: usize,
    /// A sample this fraction below the recent mean is not fed to the EWMA.
    pub outlier_cutoff: f64,
    /// Multiplicative slack added on top of the EWMA.
    pub margin: f64,
}

impl Default for ExpectationParams {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            ewma_window: 20,
            outlier_window: 4,
            outlier_cutoff: 0.3,
            margin: 0.2,
        }
    }
}

/// What happened to a sample offered to an [`ExpectationModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleOutcome {
    Accepted,
    /// Filtered as an outlier; kept in the recent window only.
    Filtered,
    /// Provider self-penalty: the EWMA was fed `penalty` instead of the observation.
    Penalised { penalty: f64 },
}

/// Expected-response-time estimator used by users and by the provider.
///
/// The EWMA is the recursive form `ewma ← α·sample + (1 − α)·ewma` over accepted
/// samples. `accepted` keeps the last `ewma_window` accepted samples for
/// diagnostics; `recent` keeps the last `outlier_window` raw observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationModel {
    params: ExpectationParams,
    ewma: Option<f64>,
    accepted: VecDeque<f64>,
    recent: VecDeque<f64>,
}

impl ExpectationModel {
    pub fn new(params: ExpectationParams) -> Self {
        Self {
            params,
            ewma: None,
            accepted: VecDeque::with_capacity(params.ewma_window),
            recent: VecDeque::with_capacity(params.outlier_window),
        }
    }

    pub fn params(&self) -> &ExpectationParams {
        &self.params
    }

    pub fn ewma(&self) -> Option<f64> {
        self.ewma
    }

    pub fn accepted(&self) -> impl Iterator<Item = f64> + '_ {
        self.accepted.iter().copied()
    }

    pub fn recent(&self) -> impl Iterator<Item = f64> + '_ {
        self.recent.iter().copied()
    }

    fn recent_mean(&self) -> Option<f64> {
        if self.recent.is_empty() {
            None
        } else {
            Some(self.recent.iter().sum::<f64>() / self.recent.len() as f64)
        }
    }

    fn push_recent(&mut self, rt: f64) {
        if self.recent.len() == self.params.outlier_window.max(1) {
            self.recent.pop_front();
        }
        self.recent.push_back(rt);
    }

    fn feed_ewma(&mut self, sample: f64) {
        let a = self.params.alpha;
        self.ewma = Some(match self.ewma {
            None => sample,
            Some(prev) => a * sample + (1.0 - a) * prev,
        });
        if self.accepted.len() == self.params.ewma_window.max(1) {
            self.accepted.pop_front();
        }
        self.accepted.push_back(sample);
    }

    /// Offers a new observed response time.
    ///
    /// The sample always enters the recent window. It reaches the EWMA unless the
    /// recent window is full and the sample lies more than `outlier_cutoff` below
    /// the window's mean (measured before insertion).
    pub fn update(&mut self, rt: f64) -> SampleOutcome {
        assert!(rt > 0.0 && rt.is_finite(), "response time must be positive, got {rt}");
        let filtered = self.recent.len() >= self.params.outlier_window
            && self
                .recent_mean()
                .is_some_and(|mean| rt < (1.0 - self.params.outlier_cutoff) * mean);
        self.push_recent(rt);
        if filtered {
            SampleOutcome::Filtered
        } else {
            self.feed_ewma(rt);
            SampleOutcome::Accepted
        }
    }

    /// `ewma × (1 + margin)`.
    pub fn expected_response_time(&self) -> Result<f64, BehaviorError> {
        self.ewma
            .map(|e| e * (1.0 + self.params.margin))
            .ok_or(BehaviorError::NoHistory)
    }

    /// Expected response time, falling back to `cold_start` before any sample.
    pub fn expected_or(&self, cold_start: f64) -> f64 {
        self.expected_response_time().unwrap_or(cold_start)
    }
}

/// Provider-side update with the self-penalty rule.
///
/// Under PAS and EAS a response slower than `provider_max` feeds `penalty_rt` to
/// the EWMA instead of the observation, which pulls that user's estimate down and
/// raises their priority next time. The observation itself still enters the
/// recent window.
pub fn provider_penalty_update(
    model: &mut ExpectationModel,
    actual_rt: f64,
    provider_max: f64,
    penalty_rt: f64,
    strategy: StrategyId,
) -> SampleOutcome {
    if strategy.uses_provider_penalty() && actual_rt > provider_max {
        model.push_recent(actual_rt);
        model.feed_ewma(penalty_rt);
        SampleOutcome::Penalised { penalty: penalty_rt }
    } else {
        model.update(actual_rt)
    }
}

/// `expected / actual`; below 1 means the user waited longer than expected.
pub fn patience_index(expected_rt: f64, actual_rt: f64) -> Result<f64, ModelError> {
    if !(actual_rt > 0.0) {
        return Err(ModelError::NonPositiveResponse(actual_rt.to_string()));
    }
    Ok(expected_rt / actual_rt)
}

/// Active-user predicate: strictly above the critical level.
pub fn is_active<T: PartialOrd>(happiness: T, critical: T) -> bool {
    happiness > critical
}

/// The happiness impact function `i`, resolved for one user group.
#[derive(Debug, Clone, PartialEq)]
pub enum HappinessImpact<T> {
    /// No change while `e ≤ threshold`, otherwise a drop of `(h0 − c) / divisor`.
    StepAbove { threshold: T, divisor: T },
    /// Piecewise constant: the first row with `e ≤ upto` applies its (non-positive)
    /// change; past the last row, the last row's change applies.
    Table(Vec<(T, T)>),
}

impl<T: SimTime> HappinessImpact<T> {
    /// Step with tolerance `alpha` that exhausts `h0 − c` after `b − 1` violations.
    pub fn step_above_alpha(alpha: T, b: usize) -> Self {
        HappinessImpact::StepAbove {
            threshold: alpha,
            divisor: T::from_int(b as i64 - 1),
        }
    }

    /// Step at zero excess delay spreading `h0 − c` over `beta` violations.
    pub fn step_above_zero(beta: T) -> Self {
        HappinessImpact::StepAbove {
            threshold: T::zero(),
            divisor: beta,
        }
    }

    pub fn table(rows: Vec<(T, T)>) -> Result<Self, BehaviorError> {
        for (row, &(_, delta)) in rows.iter().enumerate() {
            if delta > T::zero() {
                return Err(BehaviorError::RaisingImpact {
                    row,
                    delta: delta.to_string(),
                });
            }
        }
        Ok(HappinessImpact::Table(rows))
    }

    /// Change in happiness caused by excess delay `e`.
    pub fn delta(&self, e: T, h0: T, critical: T) -> T {
        match self {
            HappinessImpact::StepAbove { threshold, divisor } => {
                if e <= *threshold {
                    T::zero()
                } else {
                    -((h0 - critical) / *divisor)
                }
            }
            HappinessImpact::Table(rows) => rows
                .iter()
                .find(|(upto, _)| e <= *upto)
                .or(rows.last())
                .map_or(T::zero(), |&(_, d)| d),
        }
    }
}

/// Result of one happiness update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HappinessUpdate<T> {
    pub value: T,
    /// The additive update left `[0, 1]` and was clamped back.
    pub clamped: bool,
}

/// `h + i(e)`, clamped into `[0, 1]`.
pub fn happiness_step<T: SimTime>(
    h: T,
    impact: &HappinessImpact<T>,
    e: T,
    h0: T,
    critical: T,
) -> HappinessUpdate<T> {
    let raw = h + impact.delta(e, h0, critical);
    let one = T::from_int(1);
    if raw < T::zero() {
        HappinessUpdate { value: T::zero(), clamped: true }
    } else if raw > one {
        HappinessUpdate { value: one, clamped: true }
    } else {
        HappinessUpdate { value: raw, clamped: false }
    }
}

/// Tolerance `j`: mean of the last `b` waiting times, left-padded with `padding`.
///
/// `history` runs oldest to newest.
pub fn tolerance_step<T, I>(history: I, b: usize, padding: T) -> T
where
    T: SimTime,
    I: IntoIterator<Item = T>,
    I::IntoIter: DoubleEndedIterator,
{
    let b = b.max(1);
    let mut sum = T::zero();
    let mut n = 0usize;
    for w in history.into_iter().rev().take(b) {
        sum = sum + w;
        n += 1;
    }
    for _ in n..b {
        sum = sum + padding;
    }
    sum / T::from_int(b as i64)
}

/// Window configuration for `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToleranceModel<T> {
    pub window: usize,
    pub padding: T,
}

impl<T: SimTime> ToleranceModel<T> {
    pub fn new(window: usize, padding: T) -> Result<Self, BehaviorError> {
        if window < 2 {
            return Err(BehaviorError::WindowTooSmall(window));
        }
        Ok(Self { window, padding })
    }

    pub fn tolerance<I>(&self, history: I) -> T
    where
        I: IntoIterator<Item = T>,
        I::IntoIter: DoubleEndedIterator,
    {
        tolerance_step(history, self.window, self.padding)
    }
}

/// Think time between receiving a result and the next request, `U[0, max]`.
pub fn sample_think_time<R: Rng + ?Sized>(rng: &mut R, max: f64) -> f64 {
    if max <= 0.0 {
        0.0
    } else {
        rng.random_range(0.0..=max)
    }
}

/// A user's personal response-time threshold, `U[low, high]`.
pub fn sample_threshold<R: Rng + ?Sized>(rng: &mut R, low: f64, high: f64) -> f64 {
    if high <= low {
        low
    } else {
        rng.random_range(low..=high)
    }
}
