//! Invariant checks shared by the property tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use patsim_core::behavior::{
    happiness_step, tolerance_step, ExpectationModel, ExpectationParams, HappinessImpact, SampleOutcome,
};
use patsim_core::config::SimConfig;
use patsim_core::engine::{run_simulation_observed, Checkpoint, EngineConfig, SimTrace};
use patsim_core::population::{BatchPopulation, BatchTask, DailyPopulation};
use patsim_core::workloads::{DailyWorkload, UserCurve, WorkloadKind};
use patsim_core::StrategyId;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub fn strategy() -> impl Strategy<Value = StrategyId> {
    prop_oneof![Just(StrategyId::Fifo), Just(StrategyId::Pas), Just(StrategyId::Eas)]
}

/// `(arrival, duration, tolerance)` triples on a coarse integer grid.
pub fn task_list() -> impl Strategy<Value = Vec<(u8, u8, u8)>> {
    prop::collection::vec((0u8..60, 1u8..25, 0u8..40), 1..25)
}

fn check_checkpoints(cps: &[Checkpoint<f64>]) -> Result<(), TestCaseError> {
    for cp in cps {
        prop_assert!(cp.busy <= cp.servers);
        prop_assert!(
            cp.queued == 0 || cp.busy == cp.servers,
            "idle server with {} queued at t={}",
            cp.queued,
            cp.now
        );
        prop_assert_eq!(
            cp.submitted,
            cp.completed + cp.busy as u64 + cp.queued as u64 + cp.cancelled,
            "task conservation at t={}",
            cp.now
        );
    }
    Ok(())
}

fn check_service(trace: &SimTrace<f64>, servers: usize) -> Result<(), TestCaseError> {
    let mut edges: Vec<(f64, i32)> = Vec::new();
    for r in &trace.completions {
        prop_assert!(r.start >= r.arrival);
        prop_assert_eq!(r.completion, r.start + r.duration, "task {} was moved", r.task_id);
        edges.push((r.start, 1));
        edges.push((r.completion, -1));
    }
    // ends sort before starts at equal instants
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut load = 0;
    for (_, d) in edges {
        load += d;
        prop_assert!(load <= servers as i32, "more than {} tasks in service", servers);
    }
    for w in trace.completions.windows(2) {
        prop_assert!(w[0].completion <= w[1].completion);
    }
    Ok(())
}

/// Work conservation, non-preemption and task conservation on a fixed batch.
pub fn engine_invariants(tasks: &[(u8, u8, u8)], servers: usize, s: StrategyId) -> Result<(), TestCaseError> {
    let batch: Vec<BatchTask<f64>> = tasks
        .iter()
        .map(|&(a, d, w)| BatchTask { arrival: a as f64, duration: d as f64, tolerance: w as f64 })
        .collect();
    let mut pop = BatchPopulation::new(batch, 1.0, 0.5, Arc::new(|e: f64| -e.max(0.0) / 50.0));
    let mut cps = Vec::new();
    let trace = run_simulation_observed(&EngineConfig::new(servers, s), &mut pop, &mut |c| cps.push(c.clone()))
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    check_checkpoints(&cps)?;
    check_service(&trace, servers)?;
    prop_assert_eq!(trace.completions.len(), tasks.len());
    let mut ids: Vec<u64> = trace.completions.iter().map(|r| r.task_id.0).collect();
    ids.sort();
    ids.dedup();
    prop_assert_eq!(ids.len(), tasks.len(), "a task completed twice");
    for h in &trace.happiness_series {
        prop_assert!(h.state.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    Ok(())
}

/// The same invariants on a closed-loop run with abandonment and, optionally,
/// cancellation of queued work.
pub fn daily_invariants(seed: u64, users: usize, servers: usize, s: StrategyId, cancel: bool) -> Result<(), TestCaseError> {
    let mut cfg = SimConfig::default();
    cfg.happiness_enabled = true;
    cfg.cancel_queued_on_abandon = cancel;
    let w = DailyWorkload {
        kind: WorkloadKind::Flat,
        horizon: 3_000.0,
        curve: UserCurve::new(vec![(0.0, users), (1_000.0, users / 2), (2_000.0, users)], users).unwrap(),
        seed,
    };
    let mut pop = DailyPopulation::new(&cfg, w.clone(), s);
    let mut ec = EngineConfig::new(servers, s);
    ec.cancel_queued_on_abandon = cancel;
    ec.horizon = Some(w.horizon);
    let mut cps = Vec::new();
    let trace = run_simulation_observed(&ec, &mut pop, &mut |c| cps.push(c.clone()))
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    check_checkpoints(&cps)?;
    check_service(&trace, servers)?;
    let last = cps.last().unwrap();
    prop_assert_eq!(last.queued + last.busy, 0);
    prop_assert_eq!(trace.stats.submitted, trace.stats.completed + trace.stats.cancelled);
    if !cancel {
        prop_assert_eq!(trace.stats.cancelled, 0);
    }
    // abandonment is absorbing
    let c = cfg.critical_level;
    let mut prev = usize::MAX;
    for sample in &trace.happiness_series {
        let l0 = sample.state.values.iter().filter(|v| **v >= c).count();
        prop_assert!(l0 <= prev);
        prev = l0;
    }
    Ok(())
}

pub fn impact() -> impl Strategy<Value = HappinessImpact<f64>> {
    prop_oneof![
        (-50.0f64..50.0, 0.5f64..10.0).prop_map(|(t, d)| HappinessImpact::StepAbove { threshold: t, divisor: d }),
        prop::collection::vec((-50.0f64..50.0, -2.0f64..=0.0), 1..5)
            .prop_map(|rows| HappinessImpact::table(rows).unwrap()),
    ]
}

pub fn clamping(h: f64, imp: &HappinessImpact<f64>, e: f64, h0: f64, c: f64) -> Result<(), TestCaseError> {
    let raw = h + imp.delta(e, h0, c);
    let step = happiness_step(h, imp, e, h0, c);
    prop_assert!((0.0..=1.0).contains(&step.value));
    prop_assert_eq!(step.clamped, !(0.0..=1.0).contains(&raw));
    if !step.clamped {
        prop_assert_eq!(step.value, raw);
    }
    prop_assert!(step.value <= h.max(0.0).min(1.0) || imp.delta(e, h0, c) > 0.0);
    Ok(())
}

/// The EWMA is always a convex combination of the samples it was fed.
pub fn ewma_bound(samples: &[f64], alpha: f64) -> Result<(), TestCaseError> {
    let params = ExpectationParams { alpha, ..ExpectationParams::default() };
    let mut m = ExpectationModel::new(params);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &s in samples {
        if m.update(s) == SampleOutcome::Accepted {
            lo = lo.min(s);
            hi = hi.max(s);
        }
        let e = m.ewma().unwrap();
        prop_assert!(e >= lo - 1e-9 * hi.abs() && e <= hi + 1e-9 * hi.abs(), "ewma {} outside [{}, {}]", e, lo, hi);
        prop_assert!(m.recent().count() <= params.outlier_window);
        prop_assert!(m.accepted().count() <= params.ewma_window);
    }
    Ok(())
}

/// A window of `b` equal waits (padding included) has that wait as its mean,
/// and a full window ignores the padding.
pub fn tolerance_idempotence(x: i32, b: usize, k: usize, hist: &[i32], pad: i32) -> Result<(), TestCaseError> {
    let x = x as f64;
    let same = vec![x; k.min(b)];
    prop_assert_eq!(tolerance_step(same, b, x), x);
    if hist.len() >= b {
        let h: Vec<f64> = hist.iter().map(|v| *v as f64).collect();
        let tail = &h[h.len() - b..];
        let want = tail.iter().sum::<f64>() / b as f64;
        prop_assert_eq!(tolerance_step(h.clone(), b, pad as f64), want);
    }
    Ok(())
}
