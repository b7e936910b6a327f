//! Metrics over completed requests, and the CSV files they are exchanged in.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CompletionRecord, HappinessState, ModelError};
use crate::schedulers::StrategyId;
use crate::time::SimTime;
use crate::workloads::WorkloadKind;

pub const REQUEST_HEADER: [&str; 12] = [
    "task_id",
    "user_id",
    "arrival",
    "start",
    "completion",
    "duration",
    "expected_rt",
    "actual_rt",
    "patience_index",
    "strategy",
    "resources",
    "seed",
];

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error in {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalyticsError + '_ {
    move |source| AnalyticsError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> AnalyticsError + '_ {
    move |source| AnalyticsError::Csv { path: path.display().to_string(), source }
}

/// `(l1, l0)` of a happiness state. `l0` counts entries at or above their
/// critical level.
pub fn happiness_norms<T: SimTime>(
    state: &HappinessState<T>,
    critical: &[T],
) -> Result<(T, usize), ModelError> {
    if state.dim() != critical.len() {
        return Err(ModelError::DimensionMismatch {
            state: state.dim(),
            critical: critical.len(),
        });
    }
    let l0 = state
        .values
        .iter()
        .zip(critical)
        .filter(|(h, c)| *h >= *c)
        .count();
    Ok((state.l1(), l0))
}

/// Fraction of requests whose patience index is at or below `cutoff`.
pub fn pct_patience_to_zero<I: IntoIterator<Item = f64>>(patience: I, cutoff: f64) -> f64 {
    let (mut hit, mut n) = (0u64, 0u64);
    for p in patience {
        n += 1;
        if p <= cutoff {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Patience indexes below 1, with a histogram over `[0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatienceDistribution {
    pub values: Vec<f64>,
    pub histogram: Vec<u64>,
}

impl PatienceDistribution {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let n = self.histogram.len() as f64;
        (0..self.histogram.len())
            .map(|i| (i as f64 / n, (i + 1) as f64 / n))
            .collect()
    }
}

pub fn patience_distribution<I: IntoIterator<Item = f64>>(patience: I, bins: usize) -> PatienceDistribution {
    let bins = bins.max(1);
    let mut histogram = vec![0u64; bins];
    let mut values = Vec::new();
    for p in patience {
        if p < 1.0 {
            let b = ((p.max(0.0) * bins as f64) as usize).min(bins - 1);
            histogram[b] += 1;
            values.push(p);
        }
    }
    PatienceDistribution { values, histogram }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Metrics derived from per-request rows only, so they can be recomputed from
/// the exported CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub requests: u64,
    pub sub_one: u64,
    pub mean_patience_sub_one: Option<f64>,
    pub median_patience_sub_one: Option<f64>,
    pub pct_patience_to_zero: f64,
    pub cutoff: f64,
    pub mean_rt: Option<f64>,
    pub p50_rt: Option<f64>,
    pub p95_rt: Option<f64>,
    pub p99_rt: Option<f64>,
    pub histogram: Vec<u64>,
}

/// Accumulates requests in order; the order fixes the floating-point sums.
#[derive(Debug, Clone)]
pub struct RequestAccumulator {
    cutoff: f64,
    bins: usize,
    patience: Vec<f64>,
    rts: Vec<f64>,
}

impl RequestAccumulator {
    pub fn new(cutoff: f64, bins: usize) -> Self {
        Self { cutoff, bins, patience: Vec::new(), rts: Vec::new() }
    }

    pub fn push(&mut self, actual_rt: f64, patience_index: f64) {
        self.rts.push(actual_rt);
        self.patience.push(patience_index);
    }

    pub fn extend_records(&mut self, records: &[CompletionRecord<f64>]) {
        for r in records {
            self.push(r.response_time, r.patience_index);
        }
    }

    pub fn finish(self) -> RequestMetrics {
        let dist = patience_distribution(self.patience.iter().copied(), self.bins);
        let mut sub = dist.values.clone();
        sub.sort_by(f64::total_cmp);
        let mut rts = self.rts.clone();
        let mean_rt = (!rts.is_empty()).then(|| rts.iter().sum::<f64>() / rts.len() as f64);
        rts.sort_by(f64::total_cmp);
        RequestMetrics {
            requests: self.patience.len() as u64,
            sub_one: dist.count() as u64,
            mean_patience_sub_one: dist.mean(),
            median_patience_sub_one: percentile(&sub, 50.0),
            pct_patience_to_zero: pct_patience_to_zero(self.patience.iter().copied(), self.cutoff),
            cutoff: self.cutoff,
            mean_rt,
            p50_rt: percentile(&rts, 50.0),
            p95_rt: percentile(&rts, 95.0),
            p99_rt: percentile(&rts, 99.0),
            histogram: dist.histogram,
        }
    }
}

/// Identity of one simulation run in the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: StrategyId,
    pub workload: WorkloadKind,
    pub resources: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn file_stem(&self) -> String {
        format!("{}_{}_r{}_s{}", self.workload, self.strategy, self.resources, self.seed)
    }
}

/// One line of a per-request CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRow {
    pub task_id: u64,
    pub user_id: u32,
    pub arrival: f64,
    pub start: f64,
    pub completion: f64,
    pub duration: f64,
    pub expected_rt: f64,
    pub actual_rt: f64,
    pub patience_index: f64,
    pub strategy: StrategyId,
    pub resources: usize,
    pub seed: u64,
}

impl RequestRow {
    pub fn new(r: &CompletionRecord<f64>, cell: &CellKey) -> Self {
        Self {
            task_id: r.task_id.0,
            user_id: r.user.0,
            arrival: r.arrival,
            start: r.start,
            completion: r.completion,
            duration: r.duration,
            expected_rt: r.expected_rt,
            actual_rt: r.response_time,
            patience_index: r.patience_index,
            strategy: cell.strategy,
            resources: cell.resources,
            seed: cell.seed,
        }
    }
}

const CELL_MARK: &str = "# patsim";

fn cell_line(cell: &CellKey, config_echo: &str) -> String {
    format!(
        "{CELL_MARK} workload={} strategy={} resources={} seed={} config={config_echo}",
        cell.workload, cell.strategy, cell.resources, cell.seed
    )
}

fn parse_cell_line(line: &str) -> Option<(CellKey, String)> {
    let rest = line.strip_prefix(CELL_MARK)?.trim_start();
    let (fields, config) = rest.split_once(" config=")?;
    let mut workload = None;
    let mut strategy = None;
    let mut resources = None;
    let mut seed = None;
    for kv in fields.split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        match k {
            "workload" => workload = v.parse().ok(),
            "strategy" => strategy = v.parse().ok(),
            "resources" => resources = v.parse().ok(),
            "seed" => seed = v.parse().ok(),
            _ => {}
        }
    }
    Some((
        CellKey { strategy: strategy?, workload: workload?, resources: resources?, seed: seed? },
        config.to_string(),
    ))
}

/// Writes one cell's requests. The first line is a `#` comment carrying the
/// cell identity and the resolved configuration; the CSV header follows.
pub fn write_requests_csv(
    path: &Path,
    cell: &CellKey,
    config_echo: &str,
    records: &[CompletionRecord<f64>],
) -> Result<(), AnalyticsError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", cell_line(cell, config_echo)).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(RequestRow::new(r, cell)).map_err(csv_err(path))?;
    }
    if records.is_empty() {
        w.write_record(REQUEST_HEADER).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// A per-request CSV read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestFile {
    pub cell: CellKey,
    pub config_echo: String,
    pub rows: Vec<RequestRow>,
}

pub fn read_requests_csv(path: &Path) -> Result<RequestFile, AnalyticsError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path))?;
    let (cell, config_echo) = parse_cell_line(first.trim_end()).ok_or_else(|| AnalyticsError::Format {
        path: path.display().to_string(),
        reason: "missing `# patsim` cell line".into(),
    })?;
    let mut csv_reader = csv::Reader::from_reader(reader);
    let header: Vec<String> = csv_reader
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != REQUEST_HEADER {
        return Err(AnalyticsError::Format {
            path: path.display().to_string(),
            reason: format!("unexpected header {}", header.join(",")),
        });
    }
    let rows = csv_reader
        .deserialize()
        .collect::<Result<Vec<RequestRow>, _>>()
        .map_err(csv_err(path))?;
    Ok(RequestFile { cell, config_echo, rows })
}

/// One record of the summary file: all seeds of one
/// (strategy, workload, resources) combination, pooled per request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: StrategyId,
    pub workload: WorkloadKind,
    pub resources: usize,
    pub seeds: usize,
    pub requests: u64,
    pub sub_one: u64,
    pub mean_patience_sub_one: Option<f64>,
    pub median_patience_sub_one: Option<f64>,
    pub pct_patience_to_zero: f64,
    pub cutoff: f64,
    pub mean_rt: Option<f64>,
    pub p50_rt: Option<f64>,
    pub p95_rt: Option<f64>,
    pub p99_rt: Option<f64>,
    /// Mean over seeds of the share of requests slower than the user's threshold.
    pub over_threshold: Option<f64>,
    /// Happiness norms at the end of the run, averaged over seeds.
    pub final_l1: Option<f64>,
    pub final_l0: Option<f64>,
    pub abandonments: Option<u64>,
}

impl SummaryRow {
    pub fn from_metrics(strategy: StrategyId, workload: WorkloadKind, resources: usize, seeds: usize, m: &RequestMetrics) -> Self {
        Self {
            strategy,
            workload,
            resources,
            seeds,
            requests: m.requests,
            sub_one: m.sub_one,
            mean_patience_sub_one: m.mean_patience_sub_one,
            median_patience_sub_one: m.median_patience_sub_one,
            pct_patience_to_zero: m.pct_patience_to_zero,
            cutoff: m.cutoff,
            mean_rt: m.mean_rt,
            p50_rt: m.p50_rt,
            p95_rt: m.p95_rt,
            p99_rt: m.p99_rt,
            over_threshold: None,
            final_l1: None,
            final_l0: None,
            abandonments: None,
        }
    }
}

fn write_with_echo<S: Serialize>(path: &Path, config_echo: &str, rows: &[S]) -> Result<(), AnalyticsError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{CELL_MARK} config={config_echo}").map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, config_echo: &str, rows: &[SummaryRow]) -> Result<(), AnalyticsError> {
    write_with_echo(path, config_echo, rows)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>, AnalyticsError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(csv_err(path))?;
    reader
        .deserialize()
        .collect::<Result<Vec<SummaryRow>, _>>()
        .map_err(csv_err(path))
}

/// One bar of a plot-ready patience histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub workload: WorkloadKind,
    pub strategy: StrategyId,
    pub resources: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
    /// Share of all requests of the combination that fall in this bin.
    pub fraction: f64,
}

pub fn histogram_rows(
    workload: WorkloadKind,
    strategy: StrategyId,
    resources: usize,
    m: &RequestMetrics,
) -> Vec<HistogramRow> {
    let n = m.histogram.len() as f64;
    m.histogram
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramRow {
            workload,
            strategy,
            resources,
            bin_low: i as f64 / n,
            bin_high: (i + 1) as f64 / n,
            count,
            fraction: if m.requests == 0 { 0.0 } else { count as f64 / m.requests as f64 },
        })
        .collect()
}

pub fn write_histogram_csv(path: &Path, config_echo: &str, rows: &[HistogramRow]) -> Result<(), AnalyticsError> {
    write_with_echo(path, config_echo, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TaskId, UserId};

    fn record(expected: f64, actual: f64) -> CompletionRecord<f64> {
        CompletionRecord {
            task_id: TaskId(1),
            user: UserId(0),
            arrival: 0.0,
            start: actual - 10.0,
            completion: actual,
            duration: 10.0,
            response_time: actual,
            excess_delay: 0.0,
            expected_rt: expected,
            patience_index: expected / actual,
            over_threshold: false,
        }
    }

    #[test]
    fn norms_examples() {
        let c = vec![0.5; 3];
        assert_eq!(happiness_norms(&HappinessState::new(vec![1.0; 3]), &c).unwrap(), (3.0, 3));
        assert_eq!(happiness_norms(&HappinessState::new(vec![0.0; 3]), &c).unwrap(), (0.0, 0));
        let (l1, l0) = happiness_norms(&HappinessState::new(vec![1.0, 0.4]), &[0.5, 0.5]).unwrap();
        assert!((l1 - 1.4).abs() < 1e-12);
        assert_eq!(l0, 1);
        // masking keeps entries equal to c
        assert_eq!(happiness_norms(&HappinessState::new(vec![0.5]), &[0.5]).unwrap().1, 1);
        assert!(happiness_norms(&HappinessState::new(vec![1.0]), &c).is_err());
    }

    #[test]
    fn distribution_examples() {
        assert_eq!(patience_distribution([1.0, 1.0, 1.2], 10).count(), 0);
        let d = patience_distribution([0.5], 10);
        assert_eq!(d.values, vec![0.5]);
        assert_eq!(d.histogram[5], 1);
        let d = patience_distribution([patience_of(30.0, 60.0)], 4);
        assert_eq!(d.values, vec![0.5]);
    }

    fn patience_of(e: f64, a: f64) -> f64 {
        record(e, a).patience_index
    }

    #[test]
    fn pct_examples() {
        assert_eq!(pct_patience_to_zero([1.0, 1.5], 0.5), 0.0);
        assert_eq!(pct_patience_to_zero([0.1, 0.1], 0.5), 1.0);
        assert_eq!(pct_patience_to_zero([0.5, 0.9, 0.2, 2.0], 0.5), 0.5);
        assert_eq!(pct_patience_to_zero(std::iter::empty(), 0.5), 0.0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), Some(2.0));
        assert_eq!(percentile(&v, 100.0), Some(4.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn request_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let cell = CellKey {
            strategy: StrategyId::Pas,
            workload: WorkloadKind::Peaky,
            resources: 8,
            seed: 3,
        };
        let records = vec![record(12.0, 10.0), record(12.0, 31.7), record(0.1, 17.3)];
        write_requests_csv(&path, &cell, "{\"servers\":8}", &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), REQUEST_HEADER.join(","));
        let back = read_requests_csv(&path).unwrap();
        assert_eq!(back.cell, cell);
        assert_eq!(back.config_echo, "{\"servers\":8}");
        let mut a = RequestAccumulator::new(0.5, 10);
        a.extend_records(&records);
        let mut b = RequestAccumulator::new(0.5, 10);
        for r in &back.rows {
            b.push(r.actual_rt, r.patience_index);
        }
        assert_eq!(a.finish(), b.finish());
    }

    #[test]
    fn summary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.csv");
        let mut acc = RequestAccumulator::new(0.5, 5);
        acc.push(20.0, 0.3);
        acc.push(10.0, 1.2);
        let m = acc.finish();
        let mut row = SummaryRow::from_metrics(StrategyId::Fifo, WorkloadKind::Flat, 4, 1, &m);
        row.final_l0 = Some(60.0);
        write_summary_csv(&path, "{}", &[row.clone()]).unwrap();
        assert_eq!(read_summary_csv(&path).unwrap(), vec![row]);
    }
}
