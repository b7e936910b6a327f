//! Arrival sources: the 24-hour closed-loop user curves and the periodic
//! two-group worst-case scenarios.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::HappinessImpact;
use crate::model::UserId;
use crate::time::{Exact, SimTime};

pub const DAY_SECONDS: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("scenario parameter violates {0}")]
    Bound(String),
    #[error("user curve segment at {at}s wants {users} users, above the maximum of {max}")]
    TooManyUsers { at: f64, users: usize, max: usize },
    #[error("user curve is empty or does not start at 0")]
    BadCurve,
    #[error("unknown workload `{0}` (expected flat, normal, peaky or family-f)")]
    UnknownKind(String),
    #[error("proposition {0} has no periodic scenario (expected 2, 3 or 4)")]
    UnknownProposition(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadKind {
    Flat,
    Normal,
    Peaky,
    FamilyF,
}

impl WorkloadKind {
    pub const DAILY: [WorkloadKind; 3] = [WorkloadKind::Flat, WorkloadKind::Normal, WorkloadKind::Peaky];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::Flat => "flat",
            WorkloadKind::Normal => "normal",
            WorkloadKind::Peaky => "peaky",
            WorkloadKind::FamilyF => "family-f",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorkloadKind {
    type Err = WorkloadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "flat" => Ok(WorkloadKind::Flat),
            "normal" => Ok(WorkloadKind::Normal),
            "peaky" => Ok(WorkloadKind::Peaky),
            "family-f" | "family_f" | "familyf" => Ok(WorkloadKind::FamilyF),
            other => Err(WorkloadError::UnknownKind(other.to_string())),
        }
    }
}

/// Shape parameters of the daily curves. Magnitudes are artifact defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveParams {
    pub max_users: usize,
    pub flat_users: usize,
    pub baseline_users: usize,
    pub work_users: usize,
    pub peak_users: usize,
    pub work_start_hour: f64,
    pub work_end_hour: f64,
    pub normal_peak_hours: Vec<f64>,
    pub normal_peak_minutes: f64,
    pub spike_users: usize,
    pub spike_hours: Vec<f64>,
    pub spike_minutes: f64,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            max_users: 100,
            flat_users: 60,
            baseline_users: 20,
            work_users: 60,
            peak_users: 100,
            work_start_hour: 8.0,
            work_end_hour: 18.0,
            normal_peak_hours: vec![9.0, 13.0, 17.5],
            normal_peak_minutes: 30.0,
            spike_users: 100,
            spike_hours: vec![4.0, 10.0, 15.0, 21.0],
            spike_minutes: 15.0,
        }
    }
}

/// Piecewise-constant number of engaged users over the day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCurve {
    /// `(start second, users)`, strictly increasing starts, first at 0.
    pub segments: Vec<(f64, usize)>,
    pub max_users: usize,
}

impl UserCurve {
    pub fn new(segments: Vec<(f64, usize)>, max_users: usize) -> Result<Self, WorkloadError> {
        if segments.first().is_none_or(|s| s.0 != 0.0) {
            return Err(WorkloadError::BadCurve);
        }
        for &(at, users) in &segments {
            if users > max_users {
                return Err(WorkloadError::TooManyUsers { at, users, max: max_users });
            }
        }
        if segments.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(WorkloadError::BadCurve);
        }
        Ok(Self { segments, max_users })
    }

    pub fn users_at(&self, t: f64) -> usize {
        let idx = self.segments.partition_point(|s| s.0 <= t);
        self.segments[idx.saturating_sub(1)].1
    }

    /// Samples `f` at every breakpoint and merges equal neighbours.
    fn from_fn(breaks: Vec<f64>, horizon: f64, max_users: usize, f: impl Fn(f64) -> usize) -> Result<Self, WorkloadError> {
        let mut points: Vec<f64> = breaks
            .into_iter()
            .filter(|t| *t >= 0.0 && *t < horizon)
            .chain(std::iter::once(0.0))
            .collect();
        points.sort_by(f64::total_cmp);
        points.dedup();
        let mut segments: Vec<(f64, usize)> = Vec::new();
        for t in points {
            let users = f(t);
            if segments.last().is_none_or(|s| s.1 != users) {
                segments.push((t, users));
            }
        }
        Self::new(segments, max_users)
    }

    /// Time-weighted integral of the curve in user-seconds.
    pub fn user_seconds(&self, horizon: f64) -> f64 {
        let mut total = 0.0;
        for (i, &(start, users)) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map_or(horizon, |s| s.0).min(horizon);
            if end > start {
                total += (end - start) * users as f64;
            }
        }
        total
    }
}

/// A closed-loop daily workload: who is engaged when, over `horizon` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyWorkload {
    pub kind: WorkloadKind,
    pub horizon: f64,
    pub curve: UserCurve,
    pub seed: u64,
}

fn hour(h: f64) -> f64 {
    h * 3600.0
}

/// Builds the user-count curve for one of the three daily shapes.
pub fn generate_daily(kind: WorkloadKind, params: &CurveParams, horizon: f64, seed: u64) -> Result<DailyWorkload, WorkloadError> {
    let max = params.max_users;
    let curve = match kind {
        WorkloadKind::Flat => UserCurve::new(vec![(0.0, params.flat_users)], max)?,
        WorkloadKind::Normal => {
            let peak_len = params.normal_peak_minutes * 60.0;
            let peaks: Vec<f64> = params.normal_peak_hours.iter().map(|&h| hour(h)).collect();
            let (ws, we) = (hour(params.work_start_hour), hour(params.work_end_hour));
            let mut breaks = vec![ws, we];
            for &p in &peaks {
                breaks.push(p);
                breaks.push(p + peak_len);
            }
            UserCurve::from_fn(breaks, horizon, max, |t| {
                if peaks.iter().any(|&p| t >= p && t < p + peak_len) {
                    params.peak_users
                } else if t >= ws && t < we {
                    params.work_users
                } else {
                    params.baseline_users
                }
            })?
        }
        WorkloadKind::Peaky => {
            let len = params.spike_minutes * 60.0;
            let spikes: Vec<f64> = params.spike_hours.iter().map(|&h| hour(h)).collect();
            let breaks = spikes.iter().flat_map(|&s| [s, s + len]).collect();
            UserCurve::from_fn(breaks, horizon, max, |t| {
                if spikes.iter().any(|&s| t >= s && t < s + len) {
                    params.spike_users
                } else {
                    params.baseline_users
                }
            })?
        }
        WorkloadKind::FamilyF => return Err(WorkloadError::UnknownKind("family-f is not a daily shape".into())),
    };
    Ok(DailyWorkload { kind, horizon, curve, seed })
}

/// Which periodic construction to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Proposition {
    /// FIFO keeps `m` of `2m` users while EAS keeps all.
    FifoLosesGroup,
    /// EAS keeps `m` of `2m` users while FIFO keeps all.
    EasLosesGroup,
    /// Both strategies end with `m` users.
    BothLoseGroup,
}

impl Proposition {
    pub fn number(self) -> u8 {
        match self {
            Proposition::FifoLosesGroup => 2,
            Proposition::EasLosesGroup => 3,
            Proposition::BothLoseGroup => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self, WorkloadError> {
        match n {
            2 => Ok(Proposition::FifoLosesGroup),
            3 => Ok(Proposition::EasLosesGroup),
            4 => Ok(Proposition::BothLoseGroup),
            other => Err(WorkloadError::UnknownProposition(other)),
        }
    }
}

/// Free parameters of a periodic two-group scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyFParams<T> {
    pub m: usize,
    pub delta: T,
    pub epsilon: T,
    pub b: usize,
    pub periods: usize,
    pub h0: T,
    pub critical: T,
}

impl FamilyFParams<Exact> {
    /// `h0 = 1`, `c = 1/2`, `b + 2` periods.
    pub fn exact(m: usize, delta: i64, epsilon: i64, b: usize) -> Self {
        Self {
            m,
            delta: Exact::from_integer(delta),
            epsilon: Exact::from_integer(epsilon),
            b,
            periods: b + 2,
            h0: Exact::from_integer(1),
            critical: Exact::new(1, 2),
        }
    }
}

/// One of the two equal-size user groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec<T> {
    /// Submission instants within each period.
    pub offsets: Vec<T>,
    pub initial_tolerance: T,
    /// Value completing the tolerance window before `b` samples exist.
    pub padding: T,
    pub impact: HappinessImpact<T>,
}

/// A fully resolved periodic scenario. Users `0..m` form the first group and
/// `m..2m` the second.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFamilyConfig<T> {
    pub proposition: Proposition,
    pub params: FamilyFParams<T>,
    pub period: T,
    pub groups: [GroupSpec<T>; 2],
}

impl<T: SimTime> ScenarioFamilyConfig<T> {
    pub fn user_count(&self) -> usize {
        2 * self.params.m
    }

    /// 0 for the first group, 1 for the second.
    pub fn group_of(&self, user: UserId) -> usize {
        usize::from(user.index() >= self.params.m)
    }

    /// Every `(arrival, user)` over all periods, assuming nobody abandons.
    pub fn arrival_stream(&self) -> Vec<(T, UserId)> {
        let mut out = Vec::new();
        for k in 0..self.params.periods {
            let base = self.period * T::from_int(k as i64);
            for u in 0..self.user_count() {
                let user = UserId(u as u32);
                for &o in &self.groups[self.group_of(user)].offsets {
                    out.push((base + o, user));
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out
    }
}

/// Builds the periodic scenario for `proposition` exactly as its construction
/// prescribes, rejecting parameters outside the construction's bounds.
pub fn generate_family_f<T: SimTime>(
    params: &FamilyFParams<T>,
    proposition: Proposition,
) -> Result<ScenarioFamilyConfig<T>, WorkloadError> {
    let d = params.delta;
    let eps = params.epsilon;
    let int = T::from_int;
    if params.m == 0 {
        return Err(WorkloadError::Bound("m ≥ 1".into()));
    }
    if params.b < 2 {
        return Err(WorkloadError::Bound("b ≥ 2".into()));
    }
    if params.periods == 0 {
        return Err(WorkloadError::Bound("periods ≥ 1".into()));
    }
    if !d.is_positive() {
        return Err(WorkloadError::Bound("Δ > 0".into()));
    }
    if !eps.is_positive() || eps > d {
        return Err(WorkloadError::Bound(format!("0 < ε ≤ Δ (ε = {eps}, Δ = {d})")));
    }
    let one = int(1);
    if !(params.h0 > params.critical) || params.critical < T::zero() || params.h0 > one {
        return Err(WorkloadError::Bound("0 ≤ c < h0 ≤ 1".into()));
    }
    let b = params.b;
    let zero = T::zero();
    let (period, groups) = match proposition {
        Proposition::FifoLosesGroup => {
            if !(eps < int(3) * d / int(4)) {
                return Err(WorkloadError::Bound(format!("ε < 3Δ/4 (ε = {eps}, 3Δ/4 = {})", int(3) * d / int(4))));
            }
            (
                int(3) * d,
                [
                    GroupSpec {
                        offsets: vec![zero, eps],
                        initial_tolerance: int(2) * d,
                        padding: int(2) * d,
                        impact: HappinessImpact::step_above_alpha(d, b),
                    },
                    GroupSpec {
                        offsets: vec![int(4) * eps / int(3)],
                        initial_tolerance: d,
                        padding: d,
                        impact: HappinessImpact::step_above_alpha(zero, b),
                    },
                ],
            )
        }
        Proposition::EasLosesGroup => {
            if !(eps < d / int(2)) {
                return Err(WorkloadError::Bound(format!("ε < Δ/2 (ε = {eps}, Δ/2 = {})", d / int(2))));
            }
            (
                int(3) * d,
                [
                    GroupSpec {
                        offsets: vec![zero, eps],
                        initial_tolerance: int(3) * d / int(2),
                        padding: int(3) * d / int(2),
                        impact: HappinessImpact::step_above_zero(int(b as i64 - 1)),
                    },
                    GroupSpec {
                        offsets: vec![int(2) * eps],
                        initial_tolerance: d,
                        padding: d,
                        impact: HappinessImpact::step_above_zero(int(b as i64 + 1)),
                    },
                ],
            )
        }
        Proposition::BothLoseGroup => (
            int(2) * d,
            [
                GroupSpec {
                    offsets: vec![zero],
                    initial_tolerance: int(2) * d,
                    padding: int(2) * d,
                    impact: HappinessImpact::step_above_alpha(d, b),
                },
                GroupSpec {
                    offsets: vec![eps],
                    initial_tolerance: zero,
                    padding: zero,
                    impact: HappinessImpact::step_above_alpha(zero, b),
                },
            ],
        ),
    };
    Ok(ScenarioFamilyConfig {
        proposition,
        params: params.clone(),
        period,
        groups,
    })
}

/// Any arrival source the engine can run.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Daily(DailyWorkload),
    FamilyF(ScenarioFamilyConfig<Exact>),
}
