//! Deterministic discrete-event loop.
//!
//! Arrivals enter a waiting queue; whenever servers are idle the strategy picks
//! the next task to start. Completions are handed to a [`Population`], which
//! updates its users and may submit follow-up requests or set timers.
//!
//! All events sharing a timestamp are processed (completions, then timers, then
//! arrivals, each in sequence order) before a single dispatch pass, so a server
//! freed at `t` can take a request that arrives at `t`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::behavior::patience_index;
use crate::model::{
    excess_delay, response_time, CompletionRecord, HappinessState, ModelError, TaskId, TaskRequest,
    UserId,
};
use crate::schedulers::{choose, PasKey, StrategyId};
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("malformed workload: {0}")]
    MalformedTask(#[from] ModelError),
    #[error("server count must be at least 1")]
    NoServers,
    #[error("task {task} submitted at {arrival}, which is before the current time {now}")]
    SubmittedInPast { task: u64, arrival: String, now: String },
}

#[derive(Debug, Clone)]
pub enum EventKind<T> {
    Completion { task: TaskRequest<T>, server: usize, start: T },
    Timer(u64),
    Arrival(TaskRequest<T>),
}

impl<T> EventKind<T> {
    fn rank(&self) -> u8 {
        match self {
            EventKind::Completion { .. } => 0,
            EventKind::Timer(_) => 1,
            EventKind::Arrival(_) => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Event<T> {
    pub time: T,
    pub kind: EventKind<T>,
    pub seq: u64,
}

impl<T: SimTime> Event<T> {
    fn order(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.seq.cmp(&other.seq))
    }
}

impl<T: SimTime> PartialEq for Event<T> {
    fn eq(&self, other: &Self) -> bool {
        self.order(other) == Ordering::Equal
    }
}

impl<T: SimTime> Eq for Event<T> {}

impl<T: SimTime> PartialOrd for Event<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: SimTime> Ord for Event<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap
        other.order(self)
    }
}

/// Pending events plus id allocation. Populations schedule work through it.
pub struct Agenda<T> {
    heap: BinaryHeap<Event<T>>,
    seq: u64,
    next_task: u64,
    now: T,
}

impl<T: SimTime> Agenda<T> {
    fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            seq: 0,
            next_task: 0,
            now: T::zero(),
        }
    }

    pub fn now(&self) -> T {
        self.now
    }

    pub fn next_task_id(&mut self) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        id
    }

    fn push(&mut self, time: T, kind: EventKind<T>) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Event { time, kind, seq });
    }

    /// Schedules the arrival of `task` at `task.arrival`.
    pub fn submit(&mut self, task: TaskRequest<T>) -> Result<(), EngineError> {
        task.validate()?;
        if task.arrival.definitely_lt(self.now) {
            return Err(EngineError::SubmittedInPast {
                task: task.id.0,
                arrival: task.arrival.to_string(),
                now: self.now.to_string(),
            });
        }
        let at = task.arrival;
        self.push(at, EventKind::Arrival(task));
        Ok(())
    }

    pub fn timer(&mut self, at: T, token: u64) {
        self.push(at.max_of(self.now), EventKind::Timer(token));
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }
}

/// What a population reports after handling a completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Feedback<T> {
    pub happiness_changed: bool,
    pub clamped: bool,
    pub abandoned: bool,
    /// New tolerance of the user, when it is tracked.
    pub tolerance: Option<T>,
}

impl<T> Default for Feedback<T> {
    fn default() -> Self {
        Self {
            happiness_changed: false,
            clamped: false,
            abandoned: false,
            tolerance: None,
        }
    }
}

/// The users driving a simulation.
pub trait Population<T: SimTime> {
    fn user_count(&self) -> usize;

    /// Schedules the initial submissions and timers.
    fn start(&mut self, agenda: &mut Agenda<T>) -> Result<(), EngineError>;

    fn on_timer(&mut self, token: u64, agenda: &mut Agenda<T>) -> Result<(), EngineError>;

    /// The user's own expectation for `task`, read just before its completion is
    /// reported.
    fn user_expectation(&self, task: &TaskRequest<T>) -> T;

    fn threshold(&self, _user: UserId) -> Option<f64> {
        None
    }

    fn on_completion(
        &mut self,
        record: &CompletionRecord<T>,
        agenda: &mut Agenda<T>,
    ) -> Result<Feedback<T>, EngineError>;

    fn happiness(&self) -> HappinessState<T>;

    fn critical_levels(&self) -> Vec<T>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BusySlot<T> {
    Idle,
    Busy { task: TaskId, completion: T },
}

/// `m` identical non-preemptive servers.
#[derive(Debug, Clone)]
pub struct ServerPool<T> {
    slots: Vec<BusySlot<T>>,
}

impl<T: SimTime> ServerPool<T> {
    pub fn new(m: usize) -> Self {
        Self {
            slots: vec![BusySlot::Idle; m],
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn busy(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, BusySlot::Busy { .. }))
            .count()
    }

    pub fn idle_slot(&self) -> Option<usize> {
        self.slots.iter().position(|s| matches!(s, BusySlot::Idle))
    }

    pub fn slots(&self) -> &[BusySlot<T>] {
        &self.slots
    }

    fn occupy(&mut self, slot: usize, task: TaskId, completion: T) {
        debug_assert!(matches!(self.slots[slot], BusySlot::Idle));
        self.slots[slot] = BusySlot::Busy { task, completion };
    }

    fn release(&mut self, slot: usize) {
        self.slots[slot] = BusySlot::Idle;
    }
}

/// A task started by [`dispatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    pub task: TaskRequest<T>,
    pub server: usize,
    pub start: T,
}

/// Starts queued tasks on idle servers at `now`, in the order `strategy` picks
/// them, until either runs out.
pub fn dispatch<T: SimTime>(
    queue: &mut Vec<TaskRequest<T>>,
    pool: &mut ServerPool<T>,
    now: T,
    strategy: StrategyId,
    pas_key: PasKey,
) -> Vec<Assignment<T>> {
    let mut started = Vec::new();
    while let Some(server) = pool.idle_slot() {
        let Some(idx) = choose(strategy, queue, now, pas_key) else {
            break;
        };
        let task = queue.swap_remove(idx);
        pool.occupy(server, task.id, now + task.duration);
        started.push(Assignment { task, server, start: now });
    }
    started
}

/// How often the happiness vector is sampled into the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeriesMode {
    /// After every completion (small exact scenarios).
    EveryCompletion,
    /// At the start, on every abandonment and at the end.
    #[default]
    Endpoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig<T> {
    pub servers: usize,
    pub strategy: StrategyId,
    pub pas_key: PasKey,
    /// Drop the queued tasks of a user who abandons instead of serving them.
    pub cancel_queued_on_abandon: bool,
    /// Timers and arrivals after this instant are discarded; in-flight work drains.
    pub horizon: Option<T>,
    pub series: SeriesMode,
}

impl<T: SimTime> EngineConfig<T> {
    pub fn new(servers: usize, strategy: StrategyId) -> Self {
        Self {
            servers,
            strategy,
            pas_key: PasKey::Dynamic,
            cancel_queued_on_abandon: false,
            horizon: None,
            series: SeriesMode::Endpoints,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HappinessSample<T> {
    pub time: T,
    /// User whose completion triggered the sample, if any.
    pub user: Option<UserId>,
    pub state: HappinessState<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub submitted: u64,
    pub completed: u64,
    pub cancelled: u64,
    pub clamp_events: u64,
    pub max_queue_len: usize,
    pub events: u64,
}

/// Everything observed during one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace<T> {
    pub strategy: StrategyId,
    pub servers: usize,
    /// In completion order.
    pub completions: Vec<CompletionRecord<T>>,
    pub happiness_series: Vec<HappinessSample<T>>,
    /// `(time, user, w(u))` after each tolerance change.
    pub tolerance_series: Vec<(T, UserId, T)>,
    pub abandonments: Vec<(UserId, T)>,
    pub critical_levels: Vec<T>,
    pub stats: RunStats,
}

impl<T: SimTime> SimTrace<T> {
    pub fn final_happiness(&self) -> Option<&HappinessState<T>> {
        self.happiness_series.last().map(|s| &s.state)
    }
}

/// Engine state visible to observers after every dispatch pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub now: T,
    pub queued: usize,
    pub busy: usize,
    pub servers: usize,
    pub submitted: u64,
    pub completed: u64,
    pub cancelled: u64,
}

pub fn run_simulation<T, P>(config: &EngineConfig<T>, population: &mut P) -> Result<SimTrace<T>, EngineError>
where
    T: SimTime,
    P: Population<T> + ?Sized,
{
    run_simulation_observed(config, population, &mut |_| {})
}

pub fn run_simulation_observed<T, P>(
    config: &EngineConfig<T>,
    population: &mut P,
    observer: &mut dyn FnMut(&Checkpoint<T>),
) -> Result<SimTrace<T>, EngineError>
where
    T: SimTime,
    P: Population<T> + ?Sized,
{
    if config.servers == 0 {
        return Err(EngineError::NoServers);
    }
    let mut agenda = Agenda::new();
    let mut pool = ServerPool::new(config.servers);
    let mut queue: Vec<TaskRequest<T>> = Vec::new();
    let mut trace = SimTrace {
        strategy: config.strategy,
        servers: config.servers,
        completions: Vec::new(),
        happiness_series: vec![HappinessSample {
            time: T::zero(),
            user: None,
            state: population.happiness(),
        }],
        tolerance_series: Vec::new(),
        abandonments: Vec::new(),
        critical_levels: population.critical_levels(),
        stats: RunStats::default(),
    };

    population.start(&mut agenda)?;

    while let Some(first) = agenda.heap.pop() {
        let now = first.time;
        agenda.now = now;
        let mut pending = Some(first);
        loop {
            let event = match pending.take() {
                Some(e) => e,
                None => match agenda.heap.peek() {
                    Some(e) if e.time == now => agenda.heap.pop().expect("peeked"),
                    _ => break,
                },
            };
            trace.stats.events += 1;
            let beyond_horizon = config.horizon.is_some_and(|h| now > h);
            match event.kind {
                EventKind::Completion { task, server, start } => {
                    pool.release(server);
                    complete(config, population, &mut agenda, &mut queue, &mut trace, task, start, now)?;
                }
                EventKind::Timer(token) => {
                    if !beyond_horizon {
                        population.on_timer(token, &mut agenda)?;
                    }
                }
                EventKind::Arrival(task) => {
                    if !beyond_horizon {
                        trace.stats.submitted += 1;
                        queue.push(task);
                    }
                }
            }
        }

        for a in dispatch(&mut queue, &mut pool, now, config.strategy, config.pas_key) {
            let done = a.start + a.task.duration;
            agenda.push(
                done,
                EventKind::Completion {
                    task: a.task,
                    server: a.server,
                    start: a.start,
                },
            );
        }
        trace.stats.max_queue_len = trace.stats.max_queue_len.max(queue.len());
        observer(&Checkpoint {
            now,
            queued: queue.len(),
            busy: pool.busy(),
            servers: pool.capacity(),
            submitted: trace.stats.submitted,
            completed: trace.stats.completed,
            cancelled: trace.stats.cancelled,
        });
    }

    if config.series == SeriesMode::Endpoints || trace.completions.is_empty() {
        trace.happiness_series.push(HappinessSample {
            time: agenda.now,
            user: None,
            state: population.happiness(),
        });
    }
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn complete<T, P>(
    config: &EngineConfig<T>,
    population: &mut P,
    agenda: &mut Agenda<T>,
    queue: &mut Vec<TaskRequest<T>>,
    trace: &mut SimTrace<T>,
    task: TaskRequest<T>,
    start: T,
    now: T,
) -> Result<(), EngineError>
where
    T: SimTime,
    P: Population<T> + ?Sized,
{
    let rt = response_time(task.arrival, start, task.duration).map_err(|e| match e {
        ModelError::StartBeforeArrival { arrival, start, .. } => ModelError::StartBeforeArrival {
            task: task.id.0,
            arrival,
            start,
        },
        other => other,
    })?;
    let expected = population.user_expectation(&task);
    let record = CompletionRecord {
        task_id: task.id,
        user: task.user,
        arrival: task.arrival,
        start,
        completion: now,
        duration: task.duration,
        response_time: rt,
        excess_delay: excess_delay(rt, task.duration, task.tolerance),
        expected_rt: expected,
        patience_index: patience_index(expected.to_f64(), rt.to_f64())?,
        over_threshold: population.threshold(task.user).is_some_and(|th| rt.to_f64() > th),
    };
    let feedback = population.on_completion(&record, agenda)?;
    trace.stats.completed += 1;
    if feedback.clamped {
        trace.stats.clamp_events += 1;
    }
    if let Some(w) = feedback.tolerance {
        trace.tolerance_series.push((now, task.user, w));
    }
    if feedback.abandoned {
        trace.abandonments.push((task.user, now));
        if config.cancel_queued_on_abandon {
            let before = queue.len();
            queue.retain(|t| t.user != task.user);
            trace.stats.cancelled += (before - queue.len()) as u64;
        }
    }
    let sample = match config.series {
        SeriesMode::EveryCompletion => true,
        SeriesMode::Endpoints => feedback.abandoned,
    };
    if sample {
        trace.happiness_series.push(HappinessSample {
            time: now,
            user: Some(task.user),
            state: population.happiness(),
        });
    }
    trace.completions.push(record);
    Ok(())
}
