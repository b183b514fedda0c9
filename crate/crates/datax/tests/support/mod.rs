#![allow(dead_code)]

pub mod oracle;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use datax::{ControlPlane, PlatformOptions};
use datax_core::runner::InstanceState;

pub fn synth() -> &'static str {
    env!("CARGO_BIN_EXE_datax-synth")
}

/// Command line running the synthetic worker in `mode`.
pub fn synth_cmd(mode: &str) -> String {
    format!("{} {mode}", synth())
}

/// Polls `f` until it holds or `timeout` passes.
pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    loop {
        if f() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// A control plane over a scratch directory, torn down on drop.
pub struct Platform {
    pub cp: Arc<ControlPlane>,
    pub dir: tempfile::TempDir,
}

impl Platform {
    pub fn start(configure: impl FnOnce(&mut PlatformOptions)) -> Platform {
        let dir = tempfile::tempdir().expect("tempdir");
        let mut options = PlatformOptions::new(dir.path().join("work"));
        options.controller.stop_grace = Duration::from_millis(500);
        configure(&mut options);
        let cp = ControlPlane::start(options).expect("control plane starts");
        Platform { cp, dir }
    }

    pub fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    pub fn running(&self, workload: &str) -> usize {
        self.cp
            .instances()
            .iter()
            .filter(|i| i.workload == workload && i.state == InstanceState::Running)
            .count()
    }

    /// Every desired workload has exactly its replica count, all running.
    pub fn converged(&self) -> bool {
        let desired = self.cp.controller().desired();
        let instances = self.cp.instances();
        if instances.iter().any(|i| i.state != InstanceState::Running) {
            return false;
        }
        if instances.iter().any(|i| !desired.contains_key(&i.workload)) {
            return false;
        }
        desired
            .values()
            .all(|d| instances.iter().filter(|i| i.workload == d.workload).count() == d.replicas as usize)
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.cp.shutdown();
    }
}

/// Atomically drops a trigger file carrying `count` for a `source` worker.
pub fn pulse(trigger: &str, count: u64) {
    let staging = format!("{trigger}.staging");
    std::fs::write(&staging, count.to_string()).expect("write trigger");
    std::fs::rename(&staging, trigger).expect("publish trigger");
}

pub fn line_count(path: &str) -> usize {
    if !Path::new(path).exists() {
        return 0;
    }
    std::fs::read_to_string(path).map(|t| t.lines().count()).unwrap_or(0)
}
