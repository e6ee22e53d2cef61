use std::time::Duration;

use iotcloud::bench::report::{
    emit_report, read_rows, read_summary, CpuRow, HistogramRow, SummaryRow, CPU_CSV, FIGURES, HISTOGRAM_CSV,
    PLOT_SCRIPT, SUMMARY_CSV,
};
use iotcloud::bench::{BenchConfig, BenchMode, CpuSample, MetricsReport};

fn sample_report(clients: u32) -> MetricsReport {
    let cfg = BenchConfig::new(BenchMode::Http, "127.0.0.1:1", clients).with_duration(Duration::from_secs(10));
    let mut r = MetricsReport::empty(cfg);
    r.issued = 1000 + u64::from(clients);
    r.success = 990;
    r.failure = 7 + u64::from(clients);
    r.inflight_at_end = 3;
    r.window_success = 900;
    for v in [120, 180, 2500, 2600, 40_000] {
        r.histogram.record(v);
    }
    r.throughput = 900.0 / 9.0 + f64::from(clients) / 3.0;
    r.raw_throughput = 99.0;
    r.max_outstanding = u64::from(clients);
    r.cpu = vec![
        CpuSample { pid: 42, t_ms: 500, util: Some(12.345678901) },
        CpuSample { pid: 42, t_ms: 1000, util: None },
    ];
    r
}

#[test]
fn empty_report_gives_header_only_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = MetricsReport::empty(BenchConfig::new(BenchMode::Mqtt, "x", 1));
    r.config.series = "empty".into();
    emit_report(&r, dir.path()).unwrap();
    let hist = std::fs::read_to_string(dir.path().join(HISTOGRAM_CSV)).unwrap();
    assert_eq!(hist, "run,lo_us,hi_us,count\n");
    let cpu = std::fs::read_to_string(dir.path().join(CPU_CSV)).unwrap();
    assert_eq!(cpu, "run,pid,t_ms,cpu_pct,tombstone\n");
    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0].mean_latency_ms, None);
}

#[test]
fn csv_reparse_equals_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let r = sample_report(50);
    emit_report(&r, dir.path()).unwrap();
    assert_eq!(read_summary(dir.path()).unwrap(), vec![SummaryRow::from_report(&r)]);
    let hist: Vec<HistogramRow> = read_rows(&dir.path().join(HISTOGRAM_CSV)).unwrap();
    let want: Vec<(u64, u64, u64)> = r.histogram.buckets().collect();
    assert_eq!(hist.iter().map(|h| (h.lo_us, h.hi_us, h.count)).collect::<Vec<_>>(), want);
    let cpu: Vec<CpuRow> = read_rows(&dir.path().join(CPU_CSV)).unwrap();
    assert_eq!(cpu.len(), 2);
    assert_eq!(cpu[0].cpu_pct, Some(12.345678901));
    assert!(cpu[1].tombstone && cpu[1].cpu_pct.is_none());
}

#[test]
fn merged_runs_and_plot_script() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&sample_report(50), dir.path()).unwrap();
    emit_report(&sample_report(100), dir.path()).unwrap();
    // Re-emitting a run replaces its rows.
    emit_report(&sample_report(100), dir.path()).unwrap();
    let rows = read_summary(dir.path()).unwrap();
    assert_eq!(rows.iter().map(|r| r.clients).collect::<Vec<_>>(), vec![50, 100]);

    let status = std::process::Command::new("python3")
        .arg(dir.path().join(PLOT_SCRIPT))
        .stdout(std::process::Stdio::null())
        .status();
    match status {
        Ok(s) if s.success() => {
            for f in FIGURES {
                assert!(dir.path().join(f).metadata().unwrap().len() > 0, "{f} missing");
            }
        }
        other => eprintln!("python3 with matplotlib unavailable ({other:?}); figures not checked"),
    }
}

#[test]
fn unwritable_output_fails_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("not-a-dir");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(emit_report(&sample_report(1), &blocker.join("out")).is_err());
    assert_eq!(std::fs::read(&blocker).unwrap(), b"x");

    // A corrupt existing summary aborts before anything is replaced.
    let out = dir.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join(SUMMARY_CSV), "run,clients\nbroken").unwrap();
    assert!(emit_report(&sample_report(1), &out).is_err());
    let mut names: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, vec![std::ffi::OsString::from(SUMMARY_CSV)]);
}
