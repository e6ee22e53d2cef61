//! Per-process CPU utilisation from `/proc/<pid>/stat`.
//!
//! Utilisation is CPU time over wall time, so one fully busy core reads
//! 100% and a process using two cores can read up to 200%.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuSample {
    pub pid: u32,
    /// Milliseconds since sampling started.
    pub t_ms: u64,
    /// `None` marks the point where the process vanished.
    pub util: Option<f64>,
}

/// utime + stime of a process, in seconds.
pub fn process_cpu_seconds(pid: u32) -> Option<f64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name may contain spaces; fields resume after the last ')'.
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // rest starts at field 3 (state); utime and stime are fields 14 and 15.
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    if fields.first() == Some(&"Z") {
        return None;
    }
    Some((utime + stime) as f64 / clock_ticks())
}

fn clock_ticks() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as f64
    } else {
        100.0
    }
}

/// Samples every pid each `interval` until `stop` resolves. A pid that
/// disappears gets one tombstone sample and is not sampled again.
pub async fn sample_cpu(pids: Vec<u32>, interval: Duration, stop: impl std::future::Future<Output = ()>) -> Vec<CpuSample> {
    let start = Instant::now();
    let mut last: Vec<Option<(Instant, f64)>> =
        pids.iter().map(|&p| process_cpu_seconds(p).map(|c| (Instant::now(), c))).collect();
    let mut out = Vec::new();
    for (i, &pid) in pids.iter().enumerate() {
        if last[i].is_none() {
            out.push(CpuSample { pid, t_ms: 0, util: None });
        }
    }
    let mut tick = tokio::time::interval(interval);
    tick.tick().await;
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => return out,
            _ = tick.tick() => {}
        }
        let now = Instant::now();
        let t_ms = now.duration_since(start).as_millis() as u64;
        for (i, &pid) in pids.iter().enumerate() {
            let Some((then, cpu_then)) = last[i] else { continue };
            match process_cpu_seconds(pid) {
                Some(cpu_now) => {
                    let wall = now.duration_since(then).as_secs_f64();
                    let util = if wall > 0.0 { (cpu_now - cpu_then) / wall * 100.0 } else { 0.0 };
                    out.push(CpuSample { pid, t_ms, util: Some(util.max(0.0)) });
                    last[i] = Some((now, cpu_now));
                }
                None => {
                    out.push(CpuSample { pid, t_ms, util: None });
                    last[i] = None;
                }
            }
        }
        if last.iter().all(Option::is_none) && !pids.is_empty() {
            stop.as_mut().await;
            return out;
        }
    }
}
