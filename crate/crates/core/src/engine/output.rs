//! CSV artifacts of a run. Column layouts are listed in the README and are
//! part of the public contract.

use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{Metrics, Outcome};

use super::EngineError;

pub const SUMMARY_HEADER: &[&str] = &[
    "strategy",
    "seed",
    "submitted",
    "satisfied",
    "satisfaction",
    "goodput_per_s",
    "latency_goodput_per_s",
    "frequency_goodput_per_s",
    "completed",
    "timeouts",
    "offload_exceeded",
    "insufficient",
    "lost",
    "mean_offload",
    "p50_latency_ms",
    "p99_latency_ms",
    "horizon_ms",
    "sync_rounds",
    "sync_bytes",
    "placement_epochs",
];

pub const TIMESERIES_HEADER: &[&str] = &["second", "requests", "submitted", "satisfied", "offloads", "mean_offload"];
pub const UTILIZATION_HEADER: &[&str] = &["server", "gpu", "model", "busy_ms", "utilization"];
pub const OFFLOAD_HEADER: &[&str] = &["offload_count", "requests"];
pub const REQUESTS_HEADER: &[&str] = &[
    "id",
    "service",
    "category",
    "origin",
    "arrival_ms",
    "frame_count",
    "outcome",
    "offload_count",
    "hop_path",
    "completion_ms",
    "frames_done",
    "satisfied",
];

fn io_err(path: &Path, e: impl Into<std::io::Error>) -> EngineError {
    EngineError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> EngineError {
    io_err(path, std::io::Error::other(e))
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn summary_row(m: &Metrics) -> Vec<String> {
    use crate::model::{GpuClass, Sensitivity, TaskCategory};
    let cat_rate = |s: Sensitivity| {
        [GpuClass::SingleGpu, GpuClass::MultiGpu]
            .into_iter()
            .map(|g| m.category_goodput(TaskCategory { sensitivity: s, gpu_class: g }))
            .sum::<f64>()
    };
    let pct = |q| m.latency_percentile(q).map(|v| v.to_string()).unwrap_or_default();
    vec![
        m.strategy.clone(),
        m.seed.to_string(),
        m.submitted.to_string(),
        m.satisfied.to_string(),
        f(m.satisfaction()),
        f(m.goodput()),
        f(cat_rate(Sensitivity::Latency)),
        f(cat_rate(Sensitivity::Frequency)),
        m.outcome_count(Outcome::Completed).to_string(),
        m.outcome_count(Outcome::Timeout).to_string(),
        m.outcome_count(Outcome::OffloadExceeded).to_string(),
        m.outcome_count(Outcome::ResourceInsufficient).to_string(),
        m.outcome_count(Outcome::Lost).to_string(),
        f(m.mean_offload_count()),
        pct(0.5),
        pct(0.99),
        m.horizon_ms.to_string(),
        m.sync_rounds.to_string(),
        m.sync_bytes.to_string(),
        m.placement_epochs.to_string(),
    ]
}

/// Writes run_summary.csv, timeseries.csv, utilization.csv,
/// offload_histogram.csv and requests.csv into `dir`.
pub fn emit_metrics(m: &Metrics, dir: &Path) -> Result<Vec<PathBuf>, EngineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();

    let p = dir.join("run_summary.csv");
    write_rows(&p, SUMMARY_HEADER, vec![summary_row(m)])?;
    written.push(p);

    let p = dir.join("timeseries.csv");
    let rows = m
        .timeseries
        .iter()
        .enumerate()
        .map(|(sec, b)| {
            let mean = if b.requests == 0 { 0.0 } else { b.offloads as f64 / b.requests as f64 };
            vec![
                sec.to_string(),
                b.requests.to_string(),
                b.submitted.to_string(),
                b.satisfied.to_string(),
                b.offloads.to_string(),
                f(mean),
            ]
        })
        .collect();
    write_rows(&p, TIMESERIES_HEADER, rows)?;
    written.push(p);

    let p = dir.join("utilization.csv");
    let rows = m
        .gpu_usage
        .iter()
        .map(|u| {
            vec![
                u.gpu.server.0.to_string(),
                u.gpu.gpu.to_string(),
                u.model.clone(),
                f(u.weighted_busy_ms),
                f(m.gpu_utilization(u)),
            ]
        })
        .collect();
    write_rows(&p, UTILIZATION_HEADER, rows)?;
    written.push(p);

    let p = dir.join("offload_histogram.csv");
    let rows = m
        .offload_histogram
        .iter()
        .enumerate()
        .map(|(k, c)| vec![k.to_string(), c.to_string()])
        .collect();
    write_rows(&p, OFFLOAD_HEADER, rows)?;
    written.push(p);

    let p = dir.join("requests.csv");
    let rows = m
        .records
        .iter()
        .map(|r| {
            let path: Vec<String> = r.hop_path.iter().map(|s| s.0.to_string()).collect();
            vec![
                r.id.0.to_string(),
                r.service.0.to_string(),
                r.category.to_string(),
                r.origin.0.to_string(),
                r.arrival_ms.to_string(),
                r.frame_count.to_string(),
                r.outcome.as_str().to_string(),
                r.offload_count.to_string(),
                path.join(" "),
                r.completion_ms.map(|c| c.to_string()).unwrap_or_default(),
                r.frames_done.to_string(),
                r.satisfied.to_string(),
            ]
        })
        .collect();
    write_rows(&p, REQUESTS_HEADER, rows)?;
    written.push(p);
    Ok(written)
}

/// Goodput table: one row per strategy, one column per workload.
pub fn write_compare_table(
    path: &Path,
    workloads: &[String],
    rows: &[(String, Vec<f64>)],
) -> Result<(), EngineError> {
    let mut header = vec!["strategy"];
    header.extend(workloads.iter().map(|s| s.as_str()));
    let body = rows
        .iter()
        .map(|(name, vals)| {
            let mut r = vec![name.clone()];
            r.extend(vals.iter().map(|v| f(*v)));
            r
        })
        .collect();
    write_rows(path, &header, body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_metrics_write_header_only_series() {
        let dir = tempfile::tempdir().unwrap();
        emit_metrics(&Metrics::new("full", 0), dir.path()).unwrap();
        let ts = fs::read_to_string(dir.path().join("timeseries.csv")).unwrap();
        assert_eq!(ts, format!("{}\n", TIMESERIES_HEADER.join(",")));
        let summary = fs::read_to_string(dir.path().join("run_summary.csv")).unwrap();
        let mut lines = summary.lines();
        assert_eq!(lines.next().unwrap(), SUMMARY_HEADER.join(","));
        assert_eq!(lines.next().unwrap().split(',').count(), SUMMARY_HEADER.len());
    }

    #[test]
    fn io_errors_carry_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blocker");
        fs::write(&file, "x").unwrap();
        let err = emit_metrics(&Metrics::new("full", 0), &file.join("sub")).unwrap_err();
        assert!(err.to_string().contains("blocker"));
    }
}
