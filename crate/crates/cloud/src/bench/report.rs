//! CSV output: `summary.csv`, `latency_hist.csv`, `cpu_series.csv` and a
//! `plot.py` that renders the three trend figures from `summary.csv`.
//!
//! Each file holds rows for many runs keyed by `run`; emitting a run
//! replaces that run's earlier rows. Files are written to a temporary name
//! and renamed into place.

use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use super::MetricsReport;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const HISTOGRAM_CSV: &str = "latency_hist.csv";
pub const CPU_CSV: &str = "cpu_series.csv";
pub const PLOT_SCRIPT: &str = "plot.py";
pub const FIGURES: [&str; 3] = ["latency_vs_clients.png", "throughput_vs_clients.png", "cpu_vs_clients.png"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub series: String,
    pub mode: String,
    pub clients: u32,
    pub duration_s: f64,
    pub window_s: f64,
    pub issued: u64,
    pub success: u64,
    pub failure: u64,
    pub inflight_at_end: u64,
    pub window_success: u64,
    pub mean_latency_ms: Option<f64>,
    pub p50_latency_ms: Option<f64>,
    pub p99_latency_ms: Option<f64>,
    pub throughput: f64,
    pub raw_throughput: f64,
    pub mean_cpu: Option<f64>,
    pub max_outstanding: u64,
    pub connect_failures: u64,
    pub qos: u8,
    pub seed: u64,
}

impl SummaryRow {
    pub fn from_report(r: &MetricsReport) -> SummaryRow {
        let c = &r.config;
        let q = |p: f64| r.histogram.quantile(p).map(|us| us as f64 / 1000.0);
        SummaryRow {
            run: c.run_name(),
            series: c.series.clone(),
            mode: c.mode.as_str().to_string(),
            clients: c.clients,
            duration_s: c.duration.as_secs_f64(),
            window_s: c.window().as_secs_f64(),
            issued: r.issued,
            success: r.success,
            failure: r.failure,
            inflight_at_end: r.inflight_at_end,
            window_success: r.window_success,
            mean_latency_ms: r.mean_latency_ms(),
            p50_latency_ms: q(0.5),
            p99_latency_ms: q(0.99),
            throughput: r.throughput,
            raw_throughput: r.raw_throughput,
            mean_cpu: r.mean_cpu(),
            max_outstanding: r.max_outstanding,
            connect_failures: r.connect_failures,
            qos: c.qos,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub run: String,
    pub lo_us: u64,
    pub hi_us: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuRow {
    pub run: String,
    pub pid: u32,
    pub t_ms: u64,
    pub cpu_pct: Option<f64>,
    pub tombstone: bool,
}

/// A CSV row type: its header and the run it belongs to.
trait Row {
    const HEADERS: &'static [&'static str];
    fn run(&self) -> &str;
}

impl Row for SummaryRow {
    const HEADERS: &'static [&'static str] = &[
        "run", "series", "mode", "clients", "duration_s", "window_s", "issued", "success", "failure",
        "inflight_at_end", "window_success", "mean_latency_ms", "p50_latency_ms", "p99_latency_ms",
        "throughput", "raw_throughput", "mean_cpu", "max_outstanding", "connect_failures", "qos", "seed",
    ];
    fn run(&self) -> &str {
        &self.run
    }
}

impl Row for HistogramRow {
    const HEADERS: &'static [&'static str] = &["run", "lo_us", "hi_us", "count"];
    fn run(&self) -> &str {
        &self.run
    }
}

impl Row for CpuRow {
    const HEADERS: &'static [&'static str] = &["run", "pid", "t_ms", "cpu_pct", "tombstone"];
    fn run(&self) -> &str {
        &self.run
    }
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_path(path).map_err(io::Error::other)?;
    rd.deserialize().collect::<Result<Vec<T>, _>>().map_err(io::Error::other)
}

pub fn read_summary(dir: &Path) -> io::Result<Vec<SummaryRow>> {
    read_rows(&dir.join(SUMMARY_CSV))
}

fn staged<T: Serialize + DeserializeOwned + Row>(dir: &Path, name: &str, run: &str, new: Vec<T>) -> io::Result<(NamedTempFile, PathBuf)> {
    let path = dir.join(name);
    let mut rows: Vec<T> = read_rows(&path)?;
    rows.retain(|r| r.run() != run);
    rows.extend(new);
    let tmp = NamedTempFile::new_in(dir)?;
    // Header written explicitly so an empty file still names its columns.
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(tmp.as_file());
    wr.write_record(T::HEADERS)?;
    for r in &rows {
        wr.serialize(r).map_err(io::Error::other)?;
    }
    wr.flush()?;
    drop(wr);
    Ok((tmp, path))
}

/// Writes or updates all three CSVs and the plot script in `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let run = report.config.run_name();
    let hist = report
        .histogram
        .buckets()
        .map(|(lo_us, hi_us, count)| HistogramRow { run: run.clone(), lo_us, hi_us, count })
        .collect();
    let cpu = report
        .cpu
        .iter()
        .map(|s| CpuRow { run: run.clone(), pid: s.pid, t_ms: s.t_ms, cpu_pct: s.util, tombstone: s.util.is_none() })
        .collect();
    // Stage everything first so a failure leaves the directory untouched.
    let files = [
        staged(dir, SUMMARY_CSV, &run, vec![SummaryRow::from_report(report)])?,
        staged(dir, HISTOGRAM_CSV, &run, hist)?,
        staged(dir, CPU_CSV, &run, cpu)?,
    ];
    let mut script = NamedTempFile::new_in(dir)?;
    io::Write::write_all(&mut script, PLOT_PY.as_bytes())?;
    for (tmp, path) in files {
        tmp.persist(path).map_err(|e| e.error)?;
    }
    script.persist(dir.join(PLOT_SCRIPT)).map_err(|e| e.error)?;
    Ok(())
}

pub const PLOT_PY: &str = r#"#!/usr/bin/env python3
"""Render latency, throughput and CPU against client count from summary.csv.

usage: python3 plot.py [DIR]   (default: the directory holding this script)
"""
import csv
import os
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

FIGURES = [
    ("mean_latency_ms", "mean latency (ms)", "latency_vs_clients.png"),
    ("throughput", "throughput (ops/s)", "throughput_vs_clients.png"),
    ("mean_cpu", "CPU utilisation (% of one core)", "cpu_vs_clients.png"),
]


def main():
    here = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
    with open(os.path.join(here, "summary.csv"), newline="") as f:
        rows = list(csv.DictReader(f))
    series = defaultdict(list)
    for row in rows:
        series[row["series"]].append(row)
    for column, label, name in FIGURES:
        fig, ax = plt.subplots(figsize=(6, 4))
        for key in sorted(series):
            points = sorted(
                (int(r["clients"]), float(r[column])) for r in series[key] if r[column] != ""
            )
            if points:
                ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=key)
        ax.set_xlabel("clients")
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
        if series:
            ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(here, name), dpi=100)
        plt.close(fig)
        print(os.path.join(here, name))


if __name__ == "__main__":
    main()
"#;
