//! Strategy × workload × resource-count sweeps over the daily workloads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analytics::{
    happiness_norms, histogram_rows, read_requests_csv, read_summary_csv, write_histogram_csv, write_requests_csv,
    write_summary_csv, AnalyticsError, CellKey, HistogramRow, RequestAccumulator, RequestMetrics,
    SummaryRow,
};
use crate::config::ExperimentConfig;
use crate::engine::{run_simulation, EngineConfig, EngineError, SimTrace};
use crate::model::ModelError;
use crate::population::DailyPopulation;
use crate::schedulers::StrategyId;
use crate::workloads::{generate_daily, WorkloadError, WorkloadKind};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("cell {cell}: {source}")]
    Workload { cell: String, source: WorkloadError },
    #[error("cell {cell}: {source}")]
    Engine { cell: String, source: EngineError },
    #[error(transparent)]
    Output(#[from] AnalyticsError),
    #[error("cell {cell}: {source}")]
    Model { cell: String, source: ModelError },
    #[error("cannot create {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("could not start worker pool: {0}")]
    Pool(String),
    #[error("no per-request CSV files found under {0}")]
    NoRequests(String),
}

/// Runs one daily simulation.
pub fn run_cell(config: &ExperimentConfig, cell: &CellKey) -> Result<SimTrace<f64>, ExperimentError> {
    let name = || cell.file_stem();
    let workload = generate_daily(cell.workload, &config.workload, config.sim.horizon, cell.seed)
        .map_err(|source| ExperimentError::Workload { cell: name(), source })?;
    let mut population = DailyPopulation::new(&config.sim, workload, cell.strategy);
    let mut engine = EngineConfig::new(cell.resources, cell.strategy);
    engine.pas_key = config.sim.pas_key;
    engine.cancel_queued_on_abandon = config.sim.cancel_queued_on_abandon;
    engine.horizon = Some(config.sim.horizon);
    run_simulation(&engine, &mut population).map_err(|source| ExperimentError::Engine { cell: name(), source })
}

/// Every seed of one (strategy, workload, resources) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Group {
    strategy: StrategyId,
    workload: WorkloadKind,
    resources: usize,
}

/// What a sweep produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub cells: usize,
    pub summary: Vec<SummaryRow>,
    pub histograms: Vec<HistogramRow>,
    pub request_files: Vec<PathBuf>,
}

impl ExperimentOutput {
    pub fn row(&self, strategy: StrategyId, workload: WorkloadKind, resources: usize) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.strategy == strategy && r.workload == workload && r.resources == resources)
    }
}

fn groups(config: &ExperimentConfig) -> Vec<Group> {
    let m = &config.matrix;
    let mut out = Vec::new();
    for &workload in &m.workloads {
        for &strategy in &m.strategies {
            for &resources in &m.resources {
                out.push(Group { strategy, workload, resources });
            }
        }
    }
    out
}

struct GroupResult {
    row: SummaryRow,
    metrics: RequestMetrics,
    files: Vec<PathBuf>,
}

fn run_group(
    config: &ExperimentConfig,
    group: Group,
    requests_dir: Option<&Path>,
    echo: &str,
) -> Result<GroupResult, ExperimentError> {
    let m = &config.matrix;
    let mut acc = RequestAccumulator::new(config.sim.patience_zero_cutoff, m.histogram_bins);
    let (mut over, mut l1, mut l0, mut abandoned) = (0.0, 0.0, 0.0, 0u64);
    let mut files = Vec::new();
    for &seed in &m.seeds {
        let cell = CellKey {
            strategy: group.strategy,
            workload: group.workload,
            resources: group.resources,
            seed,
        };
        let trace = run_cell(config, &cell)?;
        acc.extend_records(&trace.completions);
        if !trace.completions.is_empty() {
            let slow = trace.completions.iter().filter(|r| r.over_threshold).count();
            over += slow as f64 / trace.completions.len() as f64;
        }
        if let Some(state) = trace.final_happiness() {
            let (a, b) = happiness_norms(state, &trace.critical_levels).map_err(|source| ExperimentError::Model {
                cell: cell.file_stem(),
                source,
            })?;
            l1 += a;
            l0 += b as f64;
        }
        abandoned += trace.abandonments.len() as u64;
        if let Some(dir) = requests_dir {
            let path = dir.join(format!("{}.csv", cell.file_stem()));
            write_requests_csv(&path, &cell, echo, &trace.completions)?;
            files.push(path);
        }
    }
    let metrics = acc.finish();
    let n = m.seeds.len() as f64;
    let mut row = SummaryRow::from_metrics(group.strategy, group.workload, group.resources, m.seeds.len(), &metrics);
    row.over_threshold = Some(over / n);
    row.final_l1 = Some(l1 / n);
    row.final_l0 = Some(l0 / n);
    row.abandonments = Some(abandoned);
    Ok(GroupResult { row, metrics, files })
}

fn create_dir(path: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(path).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `summary.csv`, one histogram file per workload and the config echo.
fn write_aggregates(
    out: &Path,
    echo: &str,
    summary: &[SummaryRow],
    histograms: &[HistogramRow],
) -> Result<(), ExperimentError> {
    create_dir(&out.join("histograms"))?;
    write_summary_csv(&out.join("summary.csv"), echo, summary)?;
    let mut by_workload: BTreeMap<WorkloadKind, Vec<HistogramRow>> = BTreeMap::new();
    for h in histograms {
        by_workload.entry(h.workload).or_default().push(h.clone());
    }
    for (w, rows) in by_workload {
        write_histogram_csv(&out.join("histograms").join(format!("patience_{w}.csv")), echo, &rows)?;
    }
    write_text(&out.join("config.json"), &format!("{echo}\n"))
}

/// Runs every cell of the matrix. Cells of one combination run in seed order on
/// one worker; combinations run in parallel on `matrix.workers` threads. When
/// `out` is given, results are written beneath it.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput, ExperimentError> {
    config.validate()?;
    let echo = config.echo();
    let requests_dir = match out {
        Some(dir) if config.matrix.write_requests => {
            let d = dir.join("requests");
            create_dir(&d)?;
            Some(d)
        }
        Some(dir) => {
            create_dir(dir)?;
            None
        }
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.matrix.workers.max(1))
        .build()
        .map_err(|e| ExperimentError::Pool(e.to_string()))?;
    let groups = groups(config);
    let results: Vec<Result<GroupResult, ExperimentError>> = pool.install(|| {
        groups
            .par_iter()
            .map(|&g| run_group(config, g, requests_dir.as_deref(), &echo))
            .collect()
    });
    let mut summary = Vec::new();
    let mut histograms = Vec::new();
    let mut request_files = Vec::new();
    for r in results {
        let r = r?;
        histograms.extend(histogram_rows(r.row.workload, r.row.strategy, r.row.resources, &r.metrics));
        summary.push(r.row);
        request_files.extend(r.files);
    }
    if let Some(dir) = out {
        write_aggregates(dir, &echo, &summary, &histograms)?;
    }
    Ok(ExperimentOutput {
        cells: groups.len() * config.matrix.seeds.len(),
        summary,
        histograms,
        request_files,
    })
}

/// Rebuilds the summary and histograms from the per-request CSVs under
/// `out/requests`, writing them into `out`. Columns that need more than the
/// request rows are left empty.
pub fn report(out: &Path, bins: usize, cutoff: Option<f64>) -> Result<ExperimentOutput, ExperimentError> {
    let dir = out.join("requests");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|source| ExperimentError::Io { path: dir.display().to_string(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    if paths.is_empty() {
        return Err(ExperimentError::NoRequests(dir.display().to_string()));
    }
    paths.sort();
    let mut files = Vec::new();
    for p in &paths {
        files.push(read_requests_csv(p)?);
    }
    files.sort_by_key(|f| f.cell);
    let echo = files[0].config_echo.clone();
    let cutoff = match cutoff {
        Some(c) => c,
        None => ExperimentConfig::from_flat_json(&echo)
            .map(|c| c.sim.patience_zero_cutoff)
            .unwrap_or(0.5),
    };
    let mut grouped: BTreeMap<(WorkloadKind, StrategyId, usize), (usize, RequestAccumulator)> = BTreeMap::new();
    for f in &files {
        let entry = grouped
            .entry((f.cell.workload, f.cell.strategy, f.cell.resources))
            .or_insert_with(|| (0, RequestAccumulator::new(cutoff, bins)));
        entry.0 += 1;
        for r in &f.rows {
            entry.1.push(r.actual_rt, r.patience_index);
        }
    }
    // run-level columns are not in the request files; keep them from a previous summary
    let previous: BTreeMap<(WorkloadKind, StrategyId, usize), SummaryRow> = read_summary_csv(&out.join("summary.csv"))
        .map(|rows| rows.into_iter().map(|r| ((r.workload, r.strategy, r.resources), r)).collect())
        .unwrap_or_default();
    let mut summary = Vec::new();
    let mut histograms = Vec::new();
    for ((w, s, r), (seeds, acc)) in grouped {
        let m = acc.finish();
        histograms.extend(histogram_rows(w, s, r, &m));
        let mut row = SummaryRow::from_metrics(s, w, r, seeds, &m);
        if let Some(old) = previous.get(&(w, s, r)).filter(|old| old.seeds == seeds) {
            row.over_threshold = old.over_threshold;
            row.final_l1 = old.final_l1;
            row.final_l0 = old.final_l0;
            row.abandonments = old.abandonments;
        }
        summary.push(row);
    }
    write_aggregates(out, &echo, &summary, &histograms)?;
    Ok(ExperimentOutput {
        cells: files.len(),
        summary,
        histograms,
        request_files: paths,
    })
}
