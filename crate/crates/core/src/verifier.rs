//! Exact checks of the scheduling results: brute-force batch optimisation and
//! the periodic two-group scenarios, all driven through the regular engine on
//! rational time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use num_traits::{Signed, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{run_simulation, EngineConfig, EngineError, SeriesMode, SimTrace};
use crate::model::{excess_delay, UserId};
use crate::population::{clamp_unit, BatchPopulation, BatchTask, FamilyFPopulation, ImpactFn};
use crate::schedulers::StrategyId;
use crate::time::Exact;
use crate::workloads::{generate_family_f, FamilyFParams, Proposition, ScenarioFamilyConfig, WorkloadError};

/// Largest batch [`brute_force_batch`] will enumerate.
pub const MAX_BATCH: usize = 9;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("batch of {0} tasks is too large to enumerate (at most {MAX_BATCH})")]
    BatchTooLarge(usize),
    #[error("batch needs at least one task and one server")]
    EmptyBatch,
    #[error("batch tasks must share one duration")]
    UnequalDurations,
    #[error(transparent)]
    Scenario(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn q(n: i64, d: i64) -> Exact {
    Exact::new(n, d)
}

fn int(n: i64) -> Exact {
    Exact::from_integer(n)
}

// ---------------------------------------------------------------------------
// Batches

/// Start of every task on a given server.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulePlan {
    /// `(task index, server, start)`, in start order.
    pub assignments: Vec<(usize, usize, Exact)>,
}

impl SchedulePlan {
    /// Greedy list schedule: each task in `order` goes to the server that frees
    /// first, starting no earlier than its arrival.
    pub fn list_schedule(tasks: &[BatchTask<Exact>], m: usize, order: &[usize]) -> Self {
        let mut free = vec![Exact::zero(); m];
        let mut assignments = Vec::with_capacity(order.len());
        for &i in order {
            let (server, &at) = free
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
                .expect("m ≥ 1");
            let start = at.max(tasks[i].arrival);
            free[server] = start + tasks[i].duration;
            assignments.push((i, server, start));
        }
        Self { assignments }
    }

    pub fn start_of(&self, task: usize) -> Option<Exact> {
        self.assignments.iter().find(|a| a.0 == task).map(|a| a.2)
    }

    /// Non-preemption, capacity and release-time checks.
    pub fn is_feasible(&self, tasks: &[BatchTask<Exact>], m: usize) -> bool {
        let mut per_server: BTreeMap<usize, Vec<(Exact, Exact)>> = BTreeMap::new();
        for &(i, s, start) in &self.assignments {
            if s >= m || start < tasks[i].arrival {
                return false;
            }
            per_server.entry(s).or_default().push((start, start + tasks[i].duration));
        }
        per_server.values_mut().all(|v| {
            v.sort();
            v.windows(2).all(|w| w[1].0 >= w[0].1)
        })
    }
}

/// How the summed happiness change of a pair of requests moves with `|a| + |b|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ImpactClass {
    Constant,
    NonIncreasing,
    NonDecreasing,
}

/// Per-request impact `f`, judged on pairs through `q(a, b) = f(a) + f(b)`.
#[derive(Clone)]
pub struct PairImpactFunction {
    pub class: ImpactClass,
    pub f: ImpactFn<Exact>,
}

impl std::fmt::Debug for PairImpactFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PairImpactFunction").field("class", &self.class).finish()
    }
}

impl PairImpactFunction {
    pub fn constant(value: Exact) -> Self {
        Self {
            class: ImpactClass::Constant,
            f: Arc::new(move |_| value),
        }
    }

    /// `−|e| / scale`.
    pub fn linear_decreasing(scale: i64) -> Self {
        Self {
            class: ImpactClass::NonIncreasing,
            f: Arc::new(move |e: Exact| -e.abs() / int(scale)),
        }
    }

    pub fn pair(&self, a: Exact, b: Exact) -> Exact {
        (self.f)(a) + (self.f)(b)
    }

    /// Whether `q` behaves as the declared class on every pair of `points`.
    pub fn matches_class(&self, points: &[(Exact, Exact)]) -> bool {
        let mut v: Vec<(Exact, Exact)> = points
            .iter()
            .map(|&(a, b)| (a.abs() + b.abs(), self.pair(a, b)))
            .collect();
        v.sort();
        match self.class {
            ImpactClass::Constant => v.windows(2).all(|w| w[0].1 == w[1].1),
            ImpactClass::NonIncreasing => v.windows(2).all(|w| w[0].0 == w[1].0 || w[1].1 <= w[0].1),
            ImpactClass::NonDecreasing => v.windows(2).all(|w| w[0].0 == w[1].0 || w[1].1 >= w[0].1),
        }
    }
}

/// An equal-duration batch, one user per request.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInstance {
    pub tasks: Vec<BatchTask<Exact>>,
    pub m: usize,
    pub h0: Exact,
    pub critical: Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchOutcome {
    pub plans: usize,
    pub best_l1: String,
    pub best_order: Vec<usize>,
    pub fifo_l1: String,
    pub eas_l1: String,
    pub fifo_optimal: bool,
    pub eas_optimal: bool,
    /// Pairs `x + m < y` (arrival order) with `a(x) + w(x) > a(y) + w(y)`.
    pub exchange_pairs: usize,
    /// Exchange pairs on which swapping changed the summed excess delay, or
    /// did not lower the larger excess delay.
    pub identity_violations: Vec<String>,
    #[serde(skip)]
    pub best: Exact,
    #[serde(skip)]
    pub fifo: Exact,
    #[serde(skip)]
    pub eas: Exact,
}

fn plan_l1(inst: &BatchInstance, plan: &SchedulePlan, impact: &PairImpactFunction) -> Exact {
    let mut total = Exact::zero();
    for &(i, _, start) in &plan.assignments {
        let t = &inst.tasks[i];
        let r = start + t.duration - t.arrival;
        let e = excess_delay(r, t.duration, t.tolerance);
        total += clamp_unit(inst.h0 + (impact.f)(e));
    }
    total
}

fn engine_l1(inst: &BatchInstance, impact: &PairImpactFunction, strategy: StrategyId) -> Result<(Exact, SimTrace<Exact>), VerifyError> {
    let mut pop = BatchPopulation::new(inst.tasks.clone(), inst.h0, inst.critical, impact.f.clone());
    let trace = run_simulation(&EngineConfig::new(inst.m, strategy), &mut pop)?;
    let l1 = trace.final_happiness().map(|h| h.l1()).unwrap_or_else(Exact::zero);
    Ok((l1, trace))
}

fn permutations(n: usize, mut visit: impl FnMut(&[usize])) {
    // Heap's algorithm
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            visit(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Enumerates every service order of a batch and compares the best final L1
/// norm with the ones FIFO and EAS reach in the engine.
pub fn brute_force_batch(inst: &BatchInstance, impact: &PairImpactFunction) -> Result<BatchOutcome, VerifyError> {
    let n = inst.tasks.len();
    if n == 0 || inst.m == 0 {
        return Err(VerifyError::EmptyBatch);
    }
    if n > MAX_BATCH {
        return Err(VerifyError::BatchTooLarge(n));
    }
    let d = inst.tasks[0].duration;
    if inst.tasks.iter().any(|t| t.duration != d) {
        return Err(VerifyError::UnequalDurations);
    }
    let mut best: Option<(Exact, Vec<usize>)> = None;
    let mut plans = 0;
    permutations(n, |order| {
        plans += 1;
        let plan = SchedulePlan::list_schedule(&inst.tasks, inst.m, order);
        debug_assert!(plan.is_feasible(&inst.tasks, inst.m));
        let l1 = plan_l1(inst, &plan, impact);
        if best.as_ref().is_none_or(|(b, _)| l1 > *b) {
            best = Some((l1, order.to_vec()));
        }
    });
    let (best, best_order) = best.expect("at least one order");
    let (fifo, fifo_trace) = engine_l1(inst, impact, StrategyId::Fifo)?;
    let (eas, _) = engine_l1(inst, impact, StrategyId::Eas)?;

    // exchange pairs in arrival order, judged on the FIFO plan
    let mut by_arrival: Vec<usize> = (0..n).collect();
    by_arrival.sort_by(|&a, &b| inst.tasks[a].arrival.cmp(&inst.tasks[b].arrival).then(a.cmp(&b)));
    let start: BTreeMap<usize, Exact> = fifo_trace
        .completions
        .iter()
        .map(|r| (r.user.index(), r.start))
        .collect();
    let deadline = |i: usize| inst.tasks[i].arrival + inst.tasks[i].tolerance;
    let e_at = |i: usize, s: Exact| s - inst.tasks[i].arrival - inst.tasks[i].tolerance;
    let mut exchange_pairs = 0;
    let mut identity_violations = Vec::new();
    for xi in 0..n {
        for yi in (xi + inst.m + 1)..n {
            let (x, y) = (by_arrival[xi], by_arrival[yi]);
            if deadline(x) <= deadline(y) {
                continue;
            }
            exchange_pairs += 1;
            let (sx, sy) = (start[&x], start[&y]);
            let (e1x, e1y) = (e_at(x, sx), e_at(y, sy));
            let (e2x, e2y) = (e_at(x, sy), e_at(y, sx));
            if e1x + e1y != e2x + e2y || e1x.max(e1y) <= e2x.max(e2y) {
                identity_violations.push(format!(
                    "pair ({x}, {y}): before ({e1x}, {e1y}), swapped ({e2x}, {e2y})"
                ));
            }
        }
    }
    Ok(BatchOutcome {
        plans,
        best_l1: best.to_string(),
        best_order,
        fifo_l1: fifo.to_string(),
        eas_l1: eas.to_string(),
        fifo_optimal: fifo == best,
        eas_optimal: eas == best,
        exchange_pairs,
        identity_violations,
        best,
        fifo,
        eas,
    })
}

/// A random equal-duration batch: `2..=max_tasks` tasks, arrivals in `[0, 20]`,
/// tolerances in `[0, 30]`, `Δ = 10`.
pub fn random_batch<R: Rng>(rng: &mut R, max_tasks: usize, m: usize, h0: Exact, critical: Exact) -> BatchInstance {
    let n = rng.random_range(2..=max_tasks.max(2));
    let tasks = (0..n)
        .map(|_| BatchTask {
            arrival: int(rng.random_range(0..=20)),
            duration: int(10),
            tolerance: int(rng.random_range(0..=30)),
        })
        .collect();
    BatchInstance { tasks, m, h0, critical }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub strategy: StrategyId,
    pub completions: usize,
    pub active_at_end: usize,
    pub final_happiness: Vec<String>,
    pub abandonments: Vec<(u32, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub proposition: u8,
    pub parameters: BTreeMap<String, String>,
    pub runs: Vec<RunSummary>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerificationReport {
    fn new(proposition: u8, parameters: BTreeMap<String, String>, runs: Vec<RunSummary>, checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { proposition, parameters, runs, checks, passed }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn run(&self, strategy: StrategyId) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.strategy == strategy)
    }

    /// Human-readable report.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "proposition {}", self.proposition);
        for (k, v) in &self.parameters {
            let _ = writeln!(s, "  {k} = {v}");
        }
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{}: {} completions, {} active at end, final h = [{}]",
                r.strategy,
                r.completions,
                r.active_at_end,
                r.final_happiness.join(", ")
            );
            for (u, t) in &r.abandonments {
                let _ = writeln!(s, "  user {u} abandoned at {t}");
            }
        }
        for c in &self.checks {
            let _ = writeln!(s, "[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        let _ = writeln!(s, "overall: {}", if self.passed { "PASS" } else { "FAIL" });
        s
    }
}

// ---------------------------------------------------------------------------
// Periodic scenarios

/// One exact run of a periodic scenario.
#[derive(Debug, Clone)]
pub struct PeriodicRun {
    pub strategy: StrategyId,
    pub scenario: ScenarioFamilyConfig<Exact>,
    pub trace: SimTrace<Exact>,
}

impl PeriodicRun {
    pub fn execute(scenario: &ScenarioFamilyConfig<Exact>, strategy: StrategyId) -> Result<Self, VerifyError> {
        let mut pop = FamilyFPopulation::new(scenario.clone());
        let mut config = EngineConfig::new(scenario.params.m, strategy);
        config.series = SeriesMode::EveryCompletion;
        let trace = run_simulation(&config, &mut pop)?;
        Ok(Self { strategy, scenario: scenario.clone(), trace })
    }

    fn critical(&self) -> Exact {
        self.scenario.params.critical
    }

    pub fn active_at_end(&self) -> usize {
        let c = self.critical();
        self.trace
            .final_happiness()
            .map_or(0, |h| h.values.iter().filter(|v| **v > c).count())
    }

    pub fn users_of_group(&self, g: usize) -> Vec<UserId> {
        (0..self.scenario.user_count())
            .map(|u| UserId(u as u32))
            .filter(|&u| self.scenario.group_of(u) == g)
            .collect()
    }

    /// `h0` followed by the user's happiness after each of its completions.
    pub fn trajectory(&self, user: UserId) -> Vec<Exact> {
        let mut out = vec![self.scenario.params.h0];
        for s in &self.trace.happiness_series {
            if s.user == Some(user) {
                out.push(s.state.values[user.index()]);
            }
        }
        out
    }

    fn offset_of(&self, arrival: Exact) -> Exact {
        let p = self.scenario.period;
        arrival - p * (arrival / p).floor()
    }

    fn period_of(&self, arrival: Exact) -> i64 {
        (arrival / self.scenario.period).floor().to_integer()
    }

    /// Full state at completion `i`, for failure reports.
    fn describe(&self, i: usize) -> String {
        let r = &self.trace.completions[i];
        let h = &self.trace.happiness_series[i + 1].state.values;
        let w = self.trace.tolerance_series.get(i).map_or("-".to_string(), |t| t.2.to_string());
        format!(
            "{} completion #{i}: user {} task {} a={} s={} r={} e={} → h(u)={} w(u)={}; h=[{}]",
            self.strategy,
            r.user,
            r.task_id,
            r.arrival,
            r.start,
            r.response_time,
            r.excess_delay,
            h[r.user.index()],
            w,
            h.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
        )
    }

    fn first_abandonment(&self) -> Option<String> {
        let c = self.critical();
        let idx = self.trace.completions.iter().enumerate().position(|(i, r)| {
            let before = self.trace.happiness_series[i].state.values[r.user.index()];
            let after = self.trace.happiness_series[i + 1].state.values[r.user.index()];
            before > c && after <= c
        })?;
        Some(self.describe(idx))
    }

    /// Checks every completion against `want(offset)`; reports the first mismatch.
    fn closed_forms(&self, name: &str, want: &[(Exact, Exact)]) -> Check {
        for (i, r) in self.trace.completions.iter().enumerate() {
            let o = self.offset_of(r.arrival);
            match want.iter().find(|(wo, _)| *wo == o) {
                Some(&(_, rt)) if rt == r.response_time => {}
                Some(&(_, rt)) => {
                    return Check::new(name, false, format!("expected r = {rt} at offset {o}; first divergence: {}", self.describe(i)))
                }
                None => return Check::new(name, false, format!("unexpected offset {o}: {}", self.describe(i))),
            }
        }
        let forms: Vec<String> = want.iter().map(|(o, r)| format!("{o}→{r}")).collect();
        Check::new(name, true, format!("{} completions match {{{}}}", self.trace.completions.len(), forms.join(", ")))
    }

    fn active_count(&self, name: &str, want: usize) -> Check {
        let got = self.active_at_end();
        let mut detail = format!("{} active at end (want {want})", got);
        if got != want {
            match self.first_abandonment() {
                Some(ev) => {
                    let _ = write!(detail, "; first abandonment: {ev}");
                }
                None => detail.push_str("; nobody abandoned"),
            }
        }
        Check::new(name, got == want, detail)
    }

    /// Mean of `w(u)` over the completions of the user's last complete period.
    pub fn tolerance_limit(&self, user: UserId) -> Option<Exact> {
        let per_period = self.scenario.groups[self.scenario.group_of(user)].offsets.len();
        let mut by_period: BTreeMap<i64, Vec<Exact>> = BTreeMap::new();
        for (i, r) in self.trace.completions.iter().enumerate() {
            if r.user == user {
                by_period.entry(self.period_of(r.arrival)).or_default().push(self.trace.tolerance_series[i].2);
            }
        }
        let (_, ws) = by_period.iter().rev().find(|(_, v)| v.len() == per_period)?;
        Some(ws.iter().copied().sum::<Exact>() / int(ws.len() as i64))
    }

    fn tolerance_limit_check(&self, name: &str, group: usize, want: Exact) -> Check {
        for u in self.users_of_group(group) {
            match self.tolerance_limit(u) {
                Some(w) if w == want => {}
                Some(w) => return Check::new(name, false, format!("user {u}: w → {w}, want {want}")),
                None => return Check::new(name, false, format!("user {u} never completed a full period")),
            }
        }
        Check::new(name, true, format!("w(u) → {want}"))
    }

    fn summary(&self) -> RunSummary {
        RunSummary {
            strategy: self.strategy,
            completions: self.trace.completions.len(),
            active_at_end: self.active_at_end(),
            final_happiness: self
                .trace
                .final_happiness()
                .map(|h| h.values.iter().map(|v| v.to_string()).collect())
                .unwrap_or_default(),
            abandonments: self.trace.abandonments.iter().map(|(u, t)| (u.0, t.to_string())).collect(),
        }
    }
}

fn parameters(p: &FamilyFParams<Exact>, period: Exact) -> BTreeMap<String, String> {
    [
        ("m", p.m.to_string()),
        ("delta", p.delta.to_string()),
        ("epsilon", p.epsilon.to_string()),
        ("b", p.b.to_string()),
        ("periods", p.periods.to_string()),
        ("period", period.to_string()),
        ("h0", p.h0.to_string()),
        ("c", p.critical.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Runs a periodic scenario under FIFO and EAS and checks the construction's
/// claims exactly.
pub fn verify_periodic(params: &FamilyFParams<Exact>, proposition: Proposition) -> Result<VerificationReport, VerifyError> {
    let sc = generate_family_f(params, proposition)?;
    let fifo = PeriodicRun::execute(&sc, StrategyId::Fifo)?;
    let eas = PeriodicRun::execute(&sc, StrategyId::Eas)?;
    let (m, d, eps, b) = (params.m, params.delta, params.epsilon, params.b);
    let (h0, c) = (params.h0, params.critical);
    let mut checks = Vec::new();
    match proposition {
        Proposition::FifoLosesGroup => {
            checks.push(fifo.active_count("fifo_ends_with_m_active", m));
            checks.push(trajectory_hits(&fifo, "fifo_u2_reaches_c_at_iteration_b_minus_1", 1, b - 1, c, true));
            checks.push(all_active_throughout(&eas, "eas_keeps_2m_active_throughout"));
            checks.push(eas.active_count("eas_ends_with_2m_active", 2 * m));
            let f43 = int(4) * eps / int(3);
            checks.push(fifo.closed_forms(
                "fifo_response_times",
                &[(int(0), d), (eps, int(2) * d - eps), (f43, int(3) * d - f43)],
            ));
            checks.push(eas.closed_forms(
                "eas_response_times",
                &[(int(0), d), (eps, int(3) * d - eps), (f43, int(2) * d - f43)],
            ));
            checks.push(tolerance_below(&fifo, "fifo_u2_tolerance_below_bound", 1, b - 1, int(2) * d - f43));
            checks.push(fifo.tolerance_limit_check("fifo_u1_tolerance_limit", 0, (d - eps) / int(2)));
            checks.push(eas.tolerance_limit_check("eas_u2_tolerance_limit", 1, d - f43));
            checks.push(eas.tolerance_limit_check("eas_u1_tolerance_limit", 0, d - eps / int(2)));
        }
        Proposition::EasLosesGroup => {
            checks.push(fifo.active_count("fifo_ends_with_2m_active", 2 * m));
            let bb = b as i64;
            let closed = int(2) * h0 / int(bb + 1) + int(bb - 1) * c / int(bb + 1);
            checks.push(trajectory_hits(&fifo, "fifo_u2_happiness_at_step_b_minus_1", 1, b - 1, closed, false));
            checks.push(equilibrium(&fifo, "fifo_u2_equilibrium_after_3b_delta", 1, int(3 * bb) * d));
            checks.push(eas.active_count("eas_ends_with_m_active", m));
            checks.push(group_abandoned(&eas, "eas_first_group_abandons", 0));
            checks.push(fifo.tolerance_limit_check("fifo_u1_tolerance_limit", 0, (d - eps) / int(2)));
        }
        Proposition::BothLoseGroup => {
            checks.push(fifo.active_count("fifo_ends_with_m_active", m));
            checks.push(eas.active_count("eas_ends_with_m_active", m));
        }
    }
    Ok(VerificationReport::new(
        proposition.number(),
        parameters(params, sc.period),
        vec![fifo.summary(), eas.summary()],
        checks,
    ))
}

fn trajectory_hits(run: &PeriodicRun, name: &str, group: usize, step: usize, want: Exact, strictly_above_before: bool) -> Check {
    let c = run.critical();
    for u in run.users_of_group(group) {
        let traj = run.trajectory(u);
        let Some(&h) = traj.get(step) else {
            return Check::new(name, false, format!("user {u} has only {} completions", traj.len() - 1));
        };
        if h != want {
            let t: Vec<String> = traj.iter().take(step + 2).map(|v| v.to_string()).collect();
            return Check::new(name, false, format!("user {u}: h_{step} = {h}, want {want}; trajectory {}", t.join(" → ")));
        }
        if strictly_above_before && traj[..step].iter().any(|v| *v <= c) {
            return Check::new(name, false, format!("user {u} reached c before step {step}"));
        }
    }
    let t: Vec<String> = run
        .trajectory(run.users_of_group(group)[0])
        .iter()
        .take(step + 1)
        .map(|v| v.to_string())
        .collect();
    Check::new(name, true, format!("h_{step} = {want}; trajectory {}", t.join(" → ")))
}

fn all_active_throughout(run: &PeriodicRun, name: &str) -> Check {
    let c = run.critical();
    for (i, s) in run.trace.happiness_series.iter().enumerate().skip(1) {
        if s.state.values.iter().any(|v| *v <= c) {
            return Check::new(name, false, format!("first divergence: {}", run.describe(i - 1)));
        }
    }
    Check::new(name, true, format!("all users above c after each of {} completions", run.trace.completions.len()))
}

fn tolerance_below(run: &PeriodicRun, name: &str, group: usize, first: usize, bound: Exact) -> Check {
    for u in run.users_of_group(group) {
        let idx: Vec<usize> = run
            .trace
            .completions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.user == u)
            .map(|(i, _)| i)
            .take(first)
            .collect();
        for i in idx {
            let w = run.trace.tolerance_series[i].2;
            if w >= bound {
                return Check::new(name, false, format!("w(u) = {w} ≥ {bound}: {}", run.describe(i)));
            }
        }
    }
    Check::new(name, true, format!("w(u) < {bound} for the first {first} iterations"))
}

/// Every task of `group` submitted at or after `from` has zero excess delay.
fn equilibrium(run: &PeriodicRun, name: &str, group: usize, from: Exact) -> Check {
    let mut n = 0;
    for (i, r) in run.trace.completions.iter().enumerate() {
        if r.arrival >= from && run.scenario.group_of(r.user) == group {
            n += 1;
            if !r.excess_delay.is_zero() {
                return Check::new(name, false, format!("e ≠ 0 after a ≥ {from}; first divergence: {}", run.describe(i)));
            }
        }
    }
    if n == 0 {
        return Check::new(name, false, format!("no task submitted at or after {from}"));
    }
    Check::new(name, true, format!("e = 0 on all {n} second-group tasks with a ≥ {from}"))
}

fn group_abandoned(run: &PeriodicRun, name: &str, group: usize) -> Check {
    let left: Vec<UserId> = run.trace.abandonments.iter().map(|(u, _)| *u).collect();
    let mut want = run.users_of_group(group);
    let mut got = left.clone();
    want.sort();
    got.sort();
    let show = |v: &[UserId]| v.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(", ");
    Check::new(name, got == want, format!("abandoned [{}], want [{}]", show(&got), show(&want)))
}

// ---------------------------------------------------------------------------
// Batch verification report

/// Randomised batch check: a constant impact leaves FIFO and EAS optimal, and a
/// non-increasing one never favours FIFO over EAS when an exchange pair exists.
pub fn verify_batches(instances: usize, max_tasks: usize, seed: u64) -> Result<VerificationReport, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h0 = q(1, 2);
    let c = q(1, 4);
    let constant = PairImpactFunction::constant(q(-1, 10));
    let decreasing = PairImpactFunction::linear_decreasing(400);
    let sample: Vec<(Exact, Exact)> = (-30..=30).step_by(5).flat_map(|a| (-30..=30).step_by(10).map(move |b| (int(a), int(b)))).collect();
    let mut checks = vec![
        Check::new("constant_impact_class", constant.matches_class(&sample), "q(a, b) constant on sampled points"),
        Check::new(
            "decreasing_impact_class",
            decreasing.matches_class(&sample),
            "q(a, b) non-increasing in |a| + |b| on sampled points",
        ),
    ];
    let (mut const_fail, mut with_pair, mut eas_worse, mut ident) = (None, 0, None, None);
    for k in 0..instances {
        let m = if k % 2 == 0 { 1 } else { 2 };
        let inst = random_batch(&mut rng, max_tasks, m, h0, c);
        let a = brute_force_batch(&inst, &constant)?;
        if (!a.fifo_optimal || !a.eas_optimal) && const_fail.is_none() {
            const_fail = Some(format!("instance {k}: best {} fifo {} eas {}", a.best_l1, a.fifo_l1, a.eas_l1));
        }
        let b = brute_force_batch(&inst, &decreasing)?;
        if b.exchange_pairs > 0 {
            with_pair += 1;
            if b.eas < b.fifo && eas_worse.is_none() {
                eas_worse = Some(format!("instance {k}: eas {} < fifo {} ({:?})", b.eas_l1, b.fifo_l1, inst.tasks));
            }
        }
        if ident.is_none() {
            if let Some(v) = b.identity_violations.first() {
                ident = Some(format!("instance {k}: {v}"));
            }
        }
        if b.best < b.fifo.max(b.eas) {
            return Ok(VerificationReport::new(
                1,
                BTreeMap::new(),
                Vec::new(),
                vec![Check::new("enumeration_dominates", false, format!("instance {k}: engine plan beats every enumerated plan"))],
            ));
        }
    }
    checks.push(Check::new(
        "constant_impact_fifo_eas_optimal",
        const_fail.is_none(),
        const_fail.unwrap_or_else(|| format!("{instances} instances")),
    ));
    checks.push(Check::new(
        "decreasing_impact_eas_not_worse",
        eas_worse.is_none(),
        eas_worse.unwrap_or_else(|| format!("{with_pair} of {instances} instances contain an exchange pair")),
    ));
    checks.push(Check::new(
        "exchange_pair_identities",
        ident.is_none(),
        ident.unwrap_or_else(|| "sum of excess delays kept, maximum lowered".into()),
    ));
    let mut params = BTreeMap::new();
    params.insert("instances".into(), instances.to_string());
    params.insert("max_tasks".into(), max_tasks.to_string());
    params.insert("seed".into(), seed.to_string());
    params.insert("h0".into(), h0.to_string());
    params.insert("c".into(), c.to_string());
    params.insert("instances_with_exchange_pair".into(), with_pair.to_string());
    Ok(VerificationReport::new(1, params, Vec::new(), checks))
}
