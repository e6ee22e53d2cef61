use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use iotcloud::bench::sample_cpu;

fn spawn_spinner() -> std::process::Child {
    Command::new("sh").args(["-c", "while :; do :; done"]).stdout(Stdio::null()).spawn().unwrap()
}

/// CPU seconds of reaped children according to the kernel's accounting.
fn children_cpu_seconds() -> f64 {
    // SAFETY: getrusage only writes the struct we pass.
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    assert_eq!(unsafe { libc::getrusage(libc::RUSAGE_CHILDREN, &mut ru) }, 0);
    let tv = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 / 1e6;
    tv(ru.ru_utime) + tv(ru.ru_stime)
}

#[tokio::test(flavor = "current_thread")]
async fn busy_process_reads_near_full_core_and_matches_os_accounting() {
    let before = children_cpu_seconds();
    let mut child = spawn_spinner();
    let started = Instant::now();
    let samples = sample_cpu(vec![child.id()], Duration::from_millis(500), tokio::time::sleep(Duration::from_secs(10))).await;
    child.kill().unwrap();
    child.wait().unwrap();
    let wall = started.elapsed().as_secs_f64();
    let os_util = (children_cpu_seconds() - before) / wall * 100.0;

    let live: Vec<f64> = samples.iter().filter_map(|s| s.util).collect();
    assert!(live.len() >= 15, "{} samples", live.len());
    let mean = live.iter().sum::<f64>() / live.len() as f64;
    assert!(mean > 90.0, "busy loop measured at {mean:.1}%");
    assert!((mean - os_util).abs() <= 5.0, "sampled {mean:.1}% vs OS {os_util:.1}%");
}

#[tokio::test(flavor = "current_thread")]
async fn idle_process_and_tombstone() {
    let mut child = Command::new("sleep").arg("2").spawn().unwrap();
    let samples = sample_cpu(vec![child.id()], Duration::from_millis(200), tokio::time::sleep(Duration::from_secs(4))).await;
    child.wait().unwrap();
    let live: Vec<f64> = samples.iter().filter_map(|s| s.util).collect();
    assert!(!live.is_empty());
    assert!(live.iter().all(|u| *u < 5.0), "{live:?}");
    let last = samples.last().unwrap();
    assert_eq!(last.util, None, "series must end with a tombstone");
    assert_eq!(samples.iter().filter(|s| s.util.is_none()).count(), 1);
}
