//! Child-process plumbing: spawning, signalling and resource sampling.

use std::fs::File;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Instant;

pub(crate) fn spawn(
    command_line: &str,
    env: &[(&str, &str)],
    log: &Path,
) -> std::io::Result<Child> {
    let argv = shlex::split(command_line)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "unparseable command line"))?;
    let out = File::create(log)?;
    let err = out.try_clone()?;
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        // Own process group, so signals reach whatever the program forks.
        .process_group(0);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.spawn()
}

pub(crate) fn signal_group(pid: u32, signal: libc::c_int) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(-(pid as libc::pid_t), signal);
    }
}

/// CPU and memory sampling from procfs.
pub(crate) struct ResourceSampler {
    last: Option<(Instant, u64)>,
}

impl ResourceSampler {
    pub(crate) fn new() -> Self {
        ResourceSampler { last: None }
    }

    /// Returns `(cpu_pct, rss_bytes)` since the previous sample.
    pub(crate) fn sample(&mut self, pid: u32) -> (f64, u64) {
        let ticks = cpu_ticks(pid);
        let rss = rss_bytes(pid).unwrap_or(0);
        let now = Instant::now();
        let pct = match (ticks, self.last) {
            (Some(t), Some((then, prev))) => {
                let secs = now.duration_since(then).as_secs_f64();
                if secs > 0.0 {
                    let hz = clock_ticks_per_sec();
                    (t.saturating_sub(prev)) as f64 / hz / secs * 100.0
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        if let Some(t) = ticks {
            self.last = Some((now, t));
        }
        (pct, rss)
    }
}

fn clock_ticks_per_sec() -> f64 {
    // SAFETY: sysconf is always safe to call.
    let hz = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if hz > 0 {
        hz as f64
    } else {
        100.0
    }
}

fn cpu_ticks(pid: u32) -> Option<u64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // Fields after the parenthesized command name; utime and stime are 14 and 15.
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    Some(utime + stime)
}

fn rss_bytes(pid: u32) -> Option<u64> {
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    // SAFETY: sysconf is always safe to call.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as u64;
    Some(pages * page)
}
