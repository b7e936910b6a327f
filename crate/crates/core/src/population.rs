//! User populations that drive the engine: closed-loop daily users, the
//! periodic two-group scenarios and fixed batches.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::behavior::{
    happiness_step, is_active, provider_penalty_update, sample_think_time, sample_threshold,
    ExpectationModel, HappinessImpact, ToleranceModel,
};
use crate::config::SimConfig;
use crate::engine::{Agenda, EngineError, Feedback, Population};
use crate::model::{CompletionRecord, HappinessState, TaskRequest, UserId, UserProfile};
use crate::schedulers::StrategyId;
use crate::time::SimTime;
use crate::workloads::{DailyWorkload, ScenarioFamilyConfig};

const WAKE: u64 = 1 << 63;

fn wake_token(user: usize, generation: u32) -> u64 {
    WAKE | (u64::from(generation) << 24) | user as u64
}

fn curve_token(segment: usize) -> u64 {
    segment as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Thinking,
    InFlight,
}

#[derive(Debug, Clone)]
struct DailyUser {
    rng: ChaCha8Rng,
    own: ExpectationModel,
    provider: ExpectationModel,
    threshold: f64,
    patience_sum: f64,
    patience_n: u64,
    phase: Phase,
    /// Leaves the loop once the in-flight request completes.
    draining: bool,
    generation: u32,
    profile: UserProfile<f64>,
}

/// Closed-loop users following a daily user-count curve.
///
/// Users are engaged in id order and released last-in first-out. Each engaged
/// user submits, waits for the result, thinks for `U[0, think_time_max]` and
/// submits again. Every user draws from its own random stream, so a given seed
/// produces the same think times and thresholds under every strategy.
#[derive(Debug, Clone)]
pub struct DailyPopulation {
    config: SimConfig,
    workload: DailyWorkload,
    strategy: StrategyId,
    users: Vec<DailyUser>,
    engaged: usize,
    tolerance: Option<ToleranceModel<f64>>,
    impact: HappinessImpact<f64>,
}

impl DailyPopulation {
    pub fn new(config: &SimConfig, workload: DailyWorkload, strategy: StrategyId) -> Self {
        let n = workload.curve.max_users;
        let user_params = config.user_expectation();
        let provider_params = config.provider_expectation();
        let users = (0..n)
            .map(|u| {
                let mut rng = ChaCha8Rng::seed_from_u64(workload.seed);
                rng.set_stream(u as u64);
                let threshold =
                    sample_threshold(&mut rng, config.threshold_range.low, config.threshold_range.high);
                let mut profile = UserProfile::new(
                    UserId(u as u32),
                    (threshold - config.job_length).max(0.0),
                    config.initial_happiness,
                    config.critical_level,
                    config.history_window,
                );
                profile.threshold = Some(threshold);
                DailyUser {
                    rng,
                    own: ExpectationModel::new(user_params),
                    provider: ExpectationModel::new(provider_params),
                    threshold,
                    patience_sum: 0.0,
                    patience_n: 0,
                    phase: Phase::Idle,
                    draining: false,
                    generation: 0,
                    profile,
                }
            })
            .collect();
        let tolerance = config.happiness_enabled.then(|| ToleranceModel {
            window: config.history_window,
            padding: 0.0,
        });
        Self {
            config: config.clone(),
            workload,
            strategy,
            users,
            engaged: 0,
            tolerance,
            impact: HappinessImpact::step_above_zero((config.history_window as f64 - 1.0).max(1.0)),
        }
    }

    /// Users still willing to use the service.
    pub fn active_users(&self) -> usize {
        self.users.iter().filter(|u| u.profile.active).count()
    }

    fn tolerance_of(&self, u: usize) -> f64 {
        let user = &self.users[u];
        match &self.tolerance {
            Some(model) => {
                let padding = (user.threshold - self.config.job_length).max(0.0);
                let m = ToleranceModel { padding, ..model.clone() };
                m.tolerance(user.profile.wait_history.iter().copied())
            }
            None => (user.own.expected_or(self.config.job_length) - self.config.job_length).max(0.0),
        }
    }

    fn submit(&mut self, u: usize, agenda: &mut Agenda<f64>) -> Result<(), EngineError> {
        let id = agenda.next_task_id();
        let tolerance = self.tolerance_of(u);
        let job = self.config.job_length;
        let user = &mut self.users[u];
        user.phase = Phase::InFlight;
        let patience = if user.patience_n == 0 {
            1.0
        } else {
            user.patience_sum / user.patience_n as f64
        };
        agenda.submit(TaskRequest {
            id,
            user: UserId(u as u32),
            arrival: agenda.now(),
            duration: job,
            expected_rt: user.provider.expected_or(job),
            tolerance,
            user_patience: patience,
        })
    }

    fn think(&mut self, u: usize, agenda: &mut Agenda<f64>) {
        let user = &mut self.users[u];
        let pause = sample_think_time(&mut user.rng, self.config.think_time_max);
        user.phase = Phase::Thinking;
        user.generation = user.generation.wrapping_add(1);
        agenda.timer(agenda.now() + pause, wake_token(u, user.generation));
    }

    fn retarget(&mut self, target: usize, agenda: &mut Agenda<f64>) -> Result<(), EngineError> {
        let target = target.min(self.users.len());
        while self.engaged < target {
            let u = self.engaged;
            self.engaged += 1;
            let user = &mut self.users[u];
            user.draining = false;
            if user.phase == Phase::Idle && user.profile.active {
                self.submit(u, agenda)?;
            }
        }
        while self.engaged > target {
            self.engaged -= 1;
            let user = &mut self.users[self.engaged];
            match user.phase {
                Phase::InFlight => user.draining = true,
                Phase::Thinking => {
                    user.generation = user.generation.wrapping_add(1);
                    user.phase = Phase::Idle;
                }
                Phase::Idle => {}
            }
        }
        Ok(())
    }
}

impl Population<f64> for DailyPopulation {
    fn user_count(&self) -> usize {
        self.users.len()
    }

    fn start(&mut self, agenda: &mut Agenda<f64>) -> Result<(), EngineError> {
        for (i, &(at, _)) in self.workload.curve.segments.iter().enumerate() {
            if at < self.workload.horizon {
                agenda.timer(at, curve_token(i));
            }
        }
        Ok(())
    }

    fn on_timer(&mut self, token: u64, agenda: &mut Agenda<f64>) -> Result<(), EngineError> {
        if token & WAKE == 0 {
            let target = self.workload.curve.segments[token as usize].1;
            return self.retarget(target, agenda);
        }
        let u = (token & 0xFF_FFFF) as usize;
        let generation = ((token & !WAKE) >> 24) as u32;
        let user = &self.users[u];
        if user.phase == Phase::Thinking && user.generation == generation {
            self.submit(u, agenda)?;
        }
        Ok(())
    }

    fn user_expectation(&self, task: &TaskRequest<f64>) -> f64 {
        self.users[task.user.index()].own.expected_or(self.config.job_length)
    }

    fn threshold(&self, user: UserId) -> Option<f64> {
        Some(self.users[user.index()].threshold)
    }

    fn on_completion(
        &mut self,
        record: &CompletionRecord<f64>,
        agenda: &mut Agenda<f64>,
    ) -> Result<Feedback<f64>, EngineError> {
        let u = record.user.index();
        let strategy = self.strategy;
        let (max_rt, penalty) = (self.config.provider_max_rt, self.config.penalty_rt);
        let (h0, c) = (self.config.initial_happiness, self.config.critical_level);
        let mut feedback = Feedback::default();
        {
            let user = &mut self.users[u];
            let rt = record.response_time;
            user.own.update(rt);
            provider_penalty_update(&mut user.provider, rt, max_rt, penalty, strategy);
            user.patience_sum += record.patience_index;
            user.patience_n += 1;
            user.phase = Phase::Idle;
            if self.tolerance.is_some() && user.profile.active {
                let step = happiness_step(user.profile.happiness, &self.impact, record.excess_delay, h0, c);
                user.profile.happiness = step.value;
                feedback.happiness_changed = true;
                feedback.clamped = step.clamped;
                if !is_active(step.value, user.profile.critical_level) {
                    user.profile.active = false;
                    feedback.abandoned = true;
                }
            }
            user.profile.push_wait(rt - record.duration);
        }
        if self.tolerance.is_some() {
            feedback.tolerance = Some(self.tolerance_of(u));
        }
        let user = &mut self.users[u];
        let keep_going = u < self.engaged && !user.draining && user.profile.active;
        user.draining = false;
        if keep_going {
            self.think(u, agenda);
        }
        Ok(feedback)
    }

    fn happiness(&self) -> HappinessState<f64> {
        HappinessState::new(self.users.iter().map(|u| u.profile.happiness).collect())
    }

    fn critical_levels(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.profile.critical_level).collect()
    }
}

/// The two-group periodic scenario, in any time type.
///
/// Every user of a group submits at each of the group's offsets in every period
/// while it is active. The provider's expectation is `Δ + w(u)` at submission.
#[derive(Debug, Clone)]
pub struct FamilyFPopulation<T> {
    scenario: ScenarioFamilyConfig<T>,
    users: Vec<UserProfile<T>>,
    models: [ToleranceModel<T>; 2],
}

impl<T: SimTime> FamilyFPopulation<T> {
    pub fn new(scenario: ScenarioFamilyConfig<T>) -> Self {
        let p = &scenario.params;
        let users = (0..scenario.user_count())
            .map(|u| {
                let user = UserId(u as u32);
                let g = &scenario.groups[scenario.group_of(user)];
                UserProfile::new(user, g.initial_tolerance, p.h0, p.critical, p.b)
            })
            .collect();
        let models = [0, 1].map(|g| ToleranceModel {
            window: p.b,
            padding: scenario.groups[g].padding,
        });
        Self { scenario, users, models }
    }

    pub fn scenario(&self) -> &ScenarioFamilyConfig<T> {
        &self.scenario
    }

    pub fn profiles(&self) -> &[UserProfile<T>] {
        &self.users
    }

    fn offsets_per_period(&self) -> usize {
        self.scenario.groups.iter().map(|g| g.offsets.len()).max().unwrap_or(0)
    }
}

impl<T: SimTime> Population<T> for FamilyFPopulation<T> {
    fn user_count(&self) -> usize {
        self.users.len()
    }

    fn start(&mut self, agenda: &mut Agenda<T>) -> Result<(), EngineError> {
        let per = self.offsets_per_period() as u64;
        for k in 0..self.scenario.params.periods {
            let base = self.scenario.period * T::from_int(k as i64);
            for (g, group) in self.scenario.groups.iter().enumerate() {
                for (j, &o) in group.offsets.iter().enumerate() {
                    agenda.timer(base + o, ((k as u64 * 2 + g as u64) * per) + j as u64);
                }
            }
        }
        Ok(())
    }

    fn on_timer(&mut self, token: u64, agenda: &mut Agenda<T>) -> Result<(), EngineError> {
        let per = self.offsets_per_period() as u64;
        let g = ((token / per) % 2) as usize;
        let delta = self.scenario.params.delta;
        for u in 0..self.users.len() {
            let profile = &self.users[u];
            if self.scenario.group_of(profile.user) != g || !profile.active {
                continue;
            }
            let w = profile.tolerance;
            let id = agenda.next_task_id();
            agenda.submit(TaskRequest {
                id,
                user: profile.user,
                arrival: agenda.now(),
                duration: delta,
                expected_rt: delta + w,
                tolerance: w,
                user_patience: 1.0,
            })?;
        }
        Ok(())
    }

    fn user_expectation(&self, task: &TaskRequest<T>) -> T {
        task.expected_rt
    }

    fn on_completion(
        &mut self,
        record: &CompletionRecord<T>,
        _agenda: &mut Agenda<T>,
    ) -> Result<Feedback<T>, EngineError> {
        let g = self.scenario.group_of(record.user);
        let (h0, c) = (self.scenario.params.h0, self.scenario.params.critical);
        let impact = &self.scenario.groups[g].impact;
        let user = &mut self.users[record.user.index()];
        let mut feedback = Feedback::default();
        if user.active {
            let step = happiness_step(user.happiness, impact, record.excess_delay, h0, c);
            feedback.happiness_changed = step.value != user.happiness;
            feedback.clamped = step.clamped;
            user.happiness = step.value;
            if !is_active(user.happiness, user.critical_level) {
                user.active = false;
                feedback.abandoned = true;
            }
        }
        user.push_wait(record.response_time - record.duration);
        user.tolerance = self.models[g].tolerance(user.wait_history.iter().copied());
        feedback.tolerance = Some(user.tolerance);
        Ok(feedback)
    }

    fn happiness(&self) -> HappinessState<T> {
        HappinessState::new(self.users.iter().map(|u| u.happiness).collect())
    }

    fn critical_levels(&self) -> Vec<T> {
        self.users.iter().map(|u| u.critical_level).collect()
    }
}

/// Happiness change as a function of excess delay.
pub type ImpactFn<T> = Arc<dyn Fn(T) -> T + Send + Sync>;

/// One request of a batch; each belongs to its own user.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTask<T> {
    pub arrival: T,
    pub duration: T,
    pub tolerance: T,
}

/// A fixed set of requests, one user per request, all starting at `h0`.
#[derive(Clone)]
pub struct BatchPopulation<T> {
    tasks: Vec<BatchTask<T>>,
    happiness: Vec<T>,
    critical: T,
    impact: ImpactFn<T>,
}

impl<T: SimTime> BatchPopulation<T> {
    pub fn new(tasks: Vec<BatchTask<T>>, h0: T, critical: T, impact: ImpactFn<T>) -> Self {
        let happiness = vec![h0; tasks.len()];
        Self { tasks, happiness, critical, impact }
    }
}

/// `h + delta`, clamped into `[0, 1]`.
pub fn clamp_unit<T: SimTime>(v: T) -> T {
    v.max_of(T::zero()).min_of(T::from_int(1))
}

impl<T: SimTime> Population<T> for BatchPopulation<T> {
    fn user_count(&self) -> usize {
        self.tasks.len()
    }

    fn start(&mut self, agenda: &mut Agenda<T>) -> Result<(), EngineError> {
        for (u, t) in self.tasks.iter().enumerate() {
            let id = agenda.next_task_id();
            agenda.submit(TaskRequest {
                id,
                user: UserId(u as u32),
                arrival: t.arrival,
                duration: t.duration,
                expected_rt: t.duration + t.tolerance,
                tolerance: t.tolerance,
                user_patience: 1.0,
            })?;
        }
        Ok(())
    }

    fn on_timer(&mut self, _: u64, _: &mut Agenda<T>) -> Result<(), EngineError> {
        Ok(())
    }

    fn user_expectation(&self, task: &TaskRequest<T>) -> T {
        task.expected_rt
    }

    fn on_completion(
        &mut self,
        record: &CompletionRecord<T>,
        _: &mut Agenda<T>,
    ) -> Result<Feedback<T>, EngineError> {
        let u = record.user.index();
        let raw = self.happiness[u] + (self.impact)(record.excess_delay);
        let value = clamp_unit(raw);
        let clamped = value != raw;
        self.happiness[u] = value;
        Ok(Feedback {
            happiness_changed: true,
            clamped,
            abandoned: false,
            tolerance: None,
        })
    }

    fn happiness(&self) -> HappinessState<T> {
        HappinessState::new(self.happiness.clone())
    }

    fn critical_levels(&self) -> Vec<T> {
        vec![self.critical; self.tasks.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_simulation, EngineConfig, SeriesMode};
    use crate::time::Exact;
    use crate::workloads::{generate_daily, generate_family_f, CurveParams, FamilyFParams, Proposition, UserCurve, WorkloadKind};

    fn small_day(users: usize, horizon: f64, seed: u64) -> DailyWorkload {
        DailyWorkload {
            kind: WorkloadKind::Flat,
            horizon,
            curve: UserCurve::new(vec![(0.0, users)], users).unwrap(),
            seed,
        }
    }

    fn run_day(w: DailyWorkload, servers: usize, s: StrategyId) -> crate::engine::SimTrace<f64> {
        let cfg = SimConfig::default();
        let mut pop = DailyPopulation::new(&cfg, w.clone(), s);
        let mut ec = EngineConfig::new(servers, s);
        ec.horizon = Some(w.horizon);
        run_simulation(&ec, &mut pop).unwrap()
    }

    #[test]
    fn one_outstanding_request_per_user() {
        let trace = run_day(small_day(5, 2_000.0, 3), 1, StrategyId::Fifo);
        let mut by_user: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 5];
        for r in &trace.completions {
            by_user[r.user.index()].push((r.arrival, r.completion));
        }
        for reqs in by_user {
            assert!(!reqs.is_empty());
            for pair in reqs.windows(2) {
                assert!(pair[1].0 >= pair[0].1, "next submission before previous result");
            }
        }
    }

    #[test]
    fn daily_run_is_deterministic_and_strategy_sensitive() {
        let a = run_day(small_day(20, 3_000.0, 9), 2, StrategyId::Eas);
        let b = run_day(small_day(20, 3_000.0, 9), 2, StrategyId::Eas);
        assert_eq!(a, b);
        let c = run_day(small_day(20, 3_000.0, 10), 2, StrategyId::Eas);
        assert_ne!(a.completions, c.completions);
    }

    #[test]
    fn thresholds_are_shared_across_strategies() {
        let cfg = SimConfig::default();
        let w = small_day(4, 100.0, 5);
        let a = DailyPopulation::new(&cfg, w.clone(), StrategyId::Fifo);
        let b = DailyPopulation::new(&cfg, w, StrategyId::Pas);
        for u in 0..4 {
            let t = a.threshold(UserId(u)).unwrap();
            assert_eq!(Some(t), b.threshold(UserId(u)));
            assert!((40.0..=60.0).contains(&t));
        }
    }

    #[test]
    fn curve_drops_release_newest_users_first() {
        let w = DailyWorkload {
            kind: WorkloadKind::Flat,
            horizon: 4_000.0,
            curve: UserCurve::new(vec![(0.0, 6), (1_000.0, 2)], 6).unwrap(),
            seed: 1,
        };
        let trace = run_day(w, 6, StrategyId::Fifo);
        for r in &trace.completions {
            if r.arrival >= 1_000.0 {
                assert!(r.user.index() < 2, "user {} submitted after release", r.user);
            }
        }
        assert!(trace.completions.iter().any(|r| r.user.index() == 5));
    }

    #[test]
    fn unloaded_flat_day_meets_expectations() {
        let w = generate_daily(WorkloadKind::Flat, &CurveParams::default(), 3_600.0, 2).unwrap();
        let trace = run_day(w, 100, StrategyId::Fifo);
        assert!(trace.completions.iter().all(|r| r.response_time == 10.0));
        assert!(trace.completions.iter().all(|r| r.patience_index >= 1.0));
    }

    #[test]
    fn happiness_can_drive_abandonment() {
        let mut cfg = SimConfig::default();
        cfg.happiness_enabled = true;
        let w = small_day(30, 20_000.0, 4);
        let mut pop = DailyPopulation::new(&cfg, w.clone(), StrategyId::Fifo);
        let mut ec = EngineConfig::new(1, StrategyId::Fifo);
        ec.horizon = Some(w.horizon);
        let trace = run_simulation(&ec, &mut pop).unwrap();
        assert!(!trace.abandonments.is_empty());
        assert_eq!(pop.active_users(), 30 - trace.abandonments.len());
    }

    #[test]
    fn family_f_first_period_matches_closed_forms() {
        let mut p = FamilyFParams::exact(2, 10, 6, 5);
        p.periods = 1;
        let sc = generate_family_f(&p, Proposition::FifoLosesGroup).unwrap();
        for (s, want) in [(StrategyId::Fifo, [10, 14, 22]), (StrategyId::Eas, [10, 24, 12])] {
            let mut pop = FamilyFPopulation::new(sc.clone());
            let mut ec = EngineConfig::new(2, s);
            ec.series = SeriesMode::EveryCompletion;
            let trace = run_simulation::<Exact, _>(&ec, &mut pop).unwrap();
            assert_eq!(trace.completions.len(), 6);
            for r in &trace.completions {
                let slot = if r.arrival == Exact::from_integer(0) {
                    0
                } else if r.arrival == Exact::from_integer(6) {
                    1
                } else {
                    2
                };
                assert_eq!(r.response_time, Exact::from_integer(want[slot]), "{s} {r:?}");
            }
        }
    }

    #[test]
    fn batch_population_applies_impact() {
        let tasks = vec![
            BatchTask { arrival: 0.0, duration: 10.0, tolerance: 0.0 },
            BatchTask { arrival: 0.0, duration: 10.0, tolerance: 0.0 },
        ];
        let impact: ImpactFn<f64> = Arc::new(|e: f64| -e / 100.0);
        let mut pop = BatchPopulation::new(tasks, 1.0, 0.5, impact);
        let trace = run_simulation(&EngineConfig::new(1, StrategyId::Fifo), &mut pop).unwrap();
        let h = trace.final_happiness().unwrap();
        assert_eq!(h.values, vec![1.0, 0.9]);
    }
}
