//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use patsim_core::behavior::{
    provider_penalty_update, sample_threshold, ExpectationModel, ExpectationParams, SampleOutcome,
};
use patsim_core::config::ExperimentConfig;
use patsim_core::experiment::run_experiment;
use patsim_core::population::BatchTask;
use patsim_core::verifier::{
    brute_force_batch, random_batch, BatchInstance, PairImpactFunction, PeriodicRun,
};
use patsim_core::workloads::{generate_family_f, FamilyFParams, Proposition, WorkloadKind};
use patsim_core::{Exact, StrategyId, UserId};
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn q(n: i64, d: i64) -> Exact {
    Exact::new(n, d)
}

fn int(n: i64) -> Exact {
    Exact::from_integer(n)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<String, String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(format!("{took:.2?}"))
}

fn runs(p: &FamilyFParams<Exact>, prop: Proposition) -> (PeriodicRun, PeriodicRun) {
    let sc = generate_family_f(p, prop).unwrap();
    (
        PeriodicRun::execute(&sc, StrategyId::Fifo).unwrap(),
        PeriodicRun::execute(&sc, StrategyId::Eas).unwrap(),
    )
}

fn second_group(run: &PeriodicRun) -> Vec<UserId> {
    run.users_of_group(1)
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let p = FamilyFParams::exact(2, 10, 6, 5);
    let (fifo, eas) = runs(&p, Proposition::FifoLosesGroup);
    let c = q(1, 2);
    ensure(fifo.active_at_end() == 2, || format!("FIFO ends with {} active", fifo.active_at_end()))?;
    for u in second_group(&fifo) {
        let traj = fifo.trajectory(u);
        ensure(traj.get(4) == Some(&c), || format!("user {u}: trajectory {traj:?}"))?;
        ensure(traj[..4].iter().all(|h| *h > c), || format!("user {u} reached c early: {traj:?}"))?;
    }
    ensure(eas.active_at_end() == 4, || format!("EAS ends with {} active", eas.active_at_end()))?;
    let t = within(started, Duration::from_secs(1))?;
    Ok(format!("FIFO 2 active, U2 h_4 = 1/2, EAS 4 active ({t})"))
}

fn criterion_2() -> Outcome {
    let p = FamilyFParams::exact(2, 10, 6, 5);
    let (fifo, eas) = runs(&p, Proposition::FifoLosesGroup);
    let forms = [
        (&fifo, [(0, 10), (6, 14), (8, 22)]),
        (&eas, [(0, 10), (6, 24), (8, 12)]),
    ];
    let mut seen = BTreeMap::new();
    for (run, want) in forms {
        for r in &run.trace.completions {
            let offset = r.arrival - int(30) * (r.arrival / int(30)).floor();
            let (_, rt) = want
                .iter()
                .find(|(o, _)| int(*o) == offset)
                .ok_or_else(|| format!("{}: unexpected offset {offset}", run.strategy))?;
            ensure(r.response_time == int(*rt), || {
                format!("{}: task at {} has r = {}, want {rt}", run.strategy, r.arrival, r.response_time)
            })?;
            *seen.entry(run.strategy).or_insert(0) += 1;
        }
    }
    Ok(format!("FIFO {{10,14,22}} on {} tasks, EAS {{10,24,12}} on {} tasks", seen[&StrategyId::Fifo], seen[&StrategyId::Eas]))
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let p = FamilyFParams::exact(2, 10, 4, 5);
    let (fifo, eas) = runs(&p, Proposition::EasLosesGroup);
    let (h0, c, b) = (int(1), q(1, 2), 5i64);
    let closed = int(2) * h0 / int(b + 1) + int(b - 1) * c / int(b + 1);
    let mut problems = Vec::new();
    for u in second_group(&fifo) {
        let traj = fifo.trajectory(u);
        if traj.get(4) != Some(&closed) {
            problems.push(format!("user {u}: h_4 = {:?}, want {closed}", traj.get(4)));
        }
    }
    if fifo.active_at_end() != 4 {
        let left: Vec<String> = fifo.trace.abandonments.iter().map(|(u, t)| format!("user {u} at {t}")).collect();
        problems.push(format!("FIFO ends with {} active (abandoned: {})", fifo.active_at_end(), left.join(", ")));
    }
    if eas.active_at_end() != 2 {
        problems.push(format!("EAS ends with {} active", eas.active_at_end()));
    }
    let t = within(started, Duration::from_secs(1))?;
    if problems.is_empty() {
        Ok(format!("FIFO 4 active, U2 h_4 = {closed}, EAS 2 active ({t})"))
    } else {
        Err(problems.join("; "))
    }
}

fn criterion_4() -> Outcome {
    let p = FamilyFParams::exact(2, 10, 6, 5);
    let (fifo, eas) = runs(&p, Proposition::BothLoseGroup);
    ensure(fifo.active_at_end() == 2 && eas.active_at_end() == 2, || {
        format!("FIFO {} active, EAS {} active", fifo.active_at_end(), eas.active_at_end())
    })?;
    Ok("FIFO 2 active, EAS 2 active".into())
}

/// Independent optimum: recursive enumeration with its own list scheduling.
fn oracle_best(inst: &BatchInstance, f: &dyn Fn(Exact) -> Exact) -> Exact {
    fn go(inst: &BatchInstance, f: &dyn Fn(Exact) -> Exact, free: &mut Vec<Exact>, left: &mut Vec<usize>, acc: Exact, best: &mut Option<Exact>) {
        if left.is_empty() {
            if best.is_none_or(|b| acc > b) {
                *best = Some(acc);
            }
            return;
        }
        for k in 0..left.len() {
            let i = left.remove(k);
            let s = (0..free.len()).min_by(|a, b| free[*a].cmp(&free[*b]).then(a.cmp(b))).unwrap();
            let t = &inst.tasks[i];
            let start = free[s].max(t.arrival);
            let old = free[s];
            free[s] = start + t.duration;
            let e = start - t.arrival - t.tolerance;
            let h = (inst.h0 + f(e)).max(int(0)).min(int(1));
            go(inst, f, free, left, acc + h, best);
            free[s] = old;
            left.insert(k, i);
        }
    }
    let mut best = None;
    go(inst, f, &mut vec![int(0); inst.m], &mut (0..inst.tasks.len()).collect(), int(0), &mut best);
    best.unwrap()
}

fn has_exchange_pair(inst: &BatchInstance) -> bool {
    let mut order: Vec<&BatchTask<Exact>> = inst.tasks.iter().collect();
    order.sort_by(|a, b| a.arrival.cmp(&b.arrival));
    (0..order.len()).any(|x| {
        ((x + inst.m + 1)..order.len())
            .any(|y| order[x].arrival + order[x].tolerance > order[y].arrival + order[y].tolerance)
    })
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let constant = PairImpactFunction::constant(q(-1, 10));
    let decreasing = PairImpactFunction::linear_decreasing(400);
    let (mut with_pair, n) = (0, 240);
    for k in 0..n {
        let m = 1 + k % 2;
        let inst = random_batch(&mut rng, 8, m, q(1, 2), q(1, 4));
        let a = brute_force_batch(&inst, &constant).map_err(|e| e.to_string())?;
        let best = oracle_best(&inst, &|_| q(-1, 10));
        ensure(a.best == best && a.fifo == best && a.eas == best, || {
            format!("constant, instance {k}: oracle {best}, enumeration {}, fifo {}, eas {}", a.best, a.fifo, a.eas)
        })?;
        let b = brute_force_batch(&inst, &decreasing).map_err(|e| e.to_string())?;
        let f = |e: Exact| -num_traits::Signed::abs(&e) / int(400);
        let best = oracle_best(&inst, &f);
        ensure(b.best == best, || format!("decreasing, instance {k}: oracle {best}, enumeration {}", b.best))?;
        if has_exchange_pair(&inst) {
            with_pair += 1;
            ensure(b.eas >= b.fifo, || format!("instance {k}: EAS {} < FIFO {}", b.eas, b.fifo))?;
        }
    }
    ensure(with_pair > 0, || "no instance contained an exchange pair".into())?;
    let t = within(started, Duration::from_secs(30))?;
    Ok(format!("{n} batches, {with_pair} with an exchange pair ({t})"))
}

fn criterion_6() -> Outcome {
    let params = ExpectationParams::default();
    let mut m = ExpectationModel::new(params);
    for s in [100.0, 100.0, 100.0, 100.0] {
        m.update(s);
    }
    let before = m.ewma();
    ensure(m.update(69.0) == SampleOutcome::Filtered && m.ewma() == before, || "31% drop not filtered".into())?;
    ensure(m.recent().last() == Some(69.0), || "filtered sample not retained".into())?;
    ensure(m.update(71.0) == SampleOutcome::Accepted, || "sample above cutoff filtered".into())?;

    let mut m = ExpectationModel::new(params);
    m.update(50.0);
    ensure(m.expected_response_time() == Ok(60.0), || format!("margin: {:?}", m.expected_response_time()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let t = sample_threshold(&mut rng, 40.0, 60.0);
        ensure((40.0..=60.0).contains(&t), || format!("threshold {t}"))?;
    }

    for s in StrategyId::ALL {
        let mut m = ExpectationModel::new(ExpectationParams { margin: 0.0, ..params });
        let out = provider_penalty_update(&mut m, 65.0, 60.0, 40.0, s);
        let want = if s == StrategyId::Fifo { 65.0 } else { 40.0 };
        ensure(m.ewma() == Some(want), || format!("{s}: ewma {:?} after 65 s ({out:?})", m.ewma()))?;
        let mut m = ExpectationModel::new(ExpectationParams { margin: 0.0, ..params });
        provider_penalty_update(&mut m, 55.0, 60.0, 40.0, s);
        ensure(m.ewma() == Some(55.0), || format!("{s}: 55 s was penalised"))?;
    }
    Ok("outlier rule, 20% margin, [40, 60] thresholds, 60→40 penalty for PAS/EAS only".into())
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ExperimentConfig::default();
    let started = Instant::now();
    let out = run_experiment(&config, Some(dir.path())).map_err(|e| e.to_string())?;
    let t = within(started, Duration::from_secs(300))?;
    ensure(out.cells == 243 && out.request_files.len() == 243, || format!("{} cells", out.cells))?;
    let mut notes = Vec::new();
    for w in WorkloadKind::DAILY {
        let good = [8, 10, 12].into_iter().find(|&r| {
            let row = |s| out.row(s, w, r).unwrap();
            let (f, p, e) = (row(StrategyId::Fifo), row(StrategyId::Pas), row(StrategyId::Eas));
            let mean = |x: &patsim_core::analytics::SummaryRow| x.mean_patience_sub_one.unwrap_or(1.0);
            mean(p) > mean(f)
                && mean(e) > mean(f)
                && p.pct_patience_to_zero < f.pct_patience_to_zero
                && e.pct_patience_to_zero < f.pct_patience_to_zero
        });
        let r = good.ok_or_else(|| format!("{w}: PAS and EAS do not beat FIFO at any r in {{8, 10, 12}}"))?;
        let pct: Vec<f64> = StrategyId::ALL
            .iter()
            .map(|&s| out.row(s, w, 20).unwrap().pct_patience_to_zero)
            .collect();
        let spread = pct.iter().cloned().fold(f64::MIN, f64::max) - pct.iter().cloned().fold(f64::MAX, f64::min);
        ensure(spread < 0.02, || format!("{w}: r=20 pct spread {spread}"))?;
        notes.push(format!("{w} r={r}"));
    }
    Ok(format!("{} ({t} for 243 cells)", notes.join(", ")))
}

fn criterion_8() -> Outcome {
    let mut config = ExperimentConfig::from_flat_json(
        r#"{"matrix.strategies": ["pas", "fifo"], "matrix.workloads": ["normal", "peaky"],
            "matrix.resources": [8], "matrix.seeds": [7]}"#,
    )
    .map_err(|e| e.to_string())?;
    config.matrix.workers = 2;
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let x = run_experiment(&config, Some(a.path())).map_err(|e| e.to_string())?;
    run_experiment(&config, Some(b.path())).map_err(|e| e.to_string())?;
    let mut files = 0;
    for path in x.request_files.iter().chain([&a.path().join("summary.csv")]) {
        let rel = path.strip_prefix(a.path()).unwrap();
        let (p, q) = (std::fs::read(path).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        ensure(p == q, || format!("{} differs between runs", rel.display()))?;
        files += 1;
    }
    Ok(format!("{files} files byte-identical across two runs"))
}

fn criterion_9() -> Outcome {
    use proptest::prelude::*;
    let started = Instant::now();
    let mut runner = TestRunner::new(Config { cases: 150, failure_persistence: None, ..Config::default() });
    runner
        .run(&(common::task_list(), 1usize..4, common::strategy()), |(t, m, s)| common::engine_invariants(&t, m, s))
        .map_err(fail("work/task conservation, non-preemption"))?;
    let mut runner = TestRunner::new(Config { cases: 10, failure_persistence: None, ..Config::default() });
    runner
        .run(&(0u64..1000, 4usize..30, 1usize..4, common::strategy(), any::<bool>()), |(seed, u, m, s, c)| {
            common::daily_invariants(seed, u, m, s, c)
        })
        .map_err(fail("closed-loop conservation"))?;
    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    runner
        .run(&(-0.5f64..1.5, common::impact(), -100.0f64..100.0), |(h, imp, e)| common::clamping(h, &imp, e, 1.0, 0.5))
        .map_err(fail("happiness clamping"))?;
    runner
        .run(&(prop::collection::vec(0.1f64..500.0, 1..80), 0.05f64..=1.0), |(s, a)| common::ewma_bound(&s, a))
        .map_err(fail("EWMA convex bound"))?;
    runner
        .run(
            &(-50i32..50, 2usize..8, 0usize..10, prop::collection::vec(-50i32..50, 0..15), -50i32..50),
            |(x, b, k, h, p)| common::tolerance_idempotence(x, b, k, &h, p),
        )
        .map_err(fail("tolerance window mean"))?;
    let t = within(started, Duration::from_secs(60))?;
    Ok(format!("all invariants hold ({t})"))
}

fn fail<E: std::fmt::Display>(name: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{name}: {e}")
}

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 9] = [
        (1, "FIFO loses a group, EAS keeps all", criterion_1),
        (2, "response-time closed forms", criterion_2),
        (3, "EAS loses a group, FIFO keeps all", criterion_3),
        (4, "both strategies lose a group", criterion_4),
        (5, "batch optimality oracle", criterion_5),
        (6, "model constants", criterion_6),
        (7, "daily matrix comparison", criterion_7),
        (8, "byte-identical reruns", criterion_8),
        (9, "invariant suite", criterion_9),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        match check() {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(detail) => {
                println!("criterion {n} FAIL  {name}: {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
