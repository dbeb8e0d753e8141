//! Run manifests: every output directory gets exactly one, recording the
//! command, its effective configuration, seeds, code version, timestamps,
//! and produced files.

use csg_core::io::KvMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub struct Manifest {
    kv: KvMap,
    outputs: Vec<String>,
    started: u64,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Manifest {
    pub fn start(command: &str) -> Manifest {
        let mut kv = KvMap::new();
        kv.set("command", command);
        kv.set("version", env!("CARGO_PKG_VERSION"));
        kv.set("argv", std::env::args().collect::<Vec<_>>().join(" "));
        Manifest {
            kv,
            outputs: Vec::new(),
            started: now_unix(),
        }
    }

    /// Echoes an effective config block under a prefix.
    pub fn config(&mut self, prefix: &str, config: &KvMap) {
        for (k, v) in config.entries() {
            self.kv.set(&format!("{prefix}.{k}"), v);
        }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.kv.set(key, value);
    }

    pub fn output(&mut self, path: impl AsRef<Path>) {
        self.outputs.push(path.as_ref().display().to_string());
    }

    /// Writes `manifest.txt` into the run directory.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.kv.set("started_unix", self.started);
        self.kv.set("finished_unix", now_unix());
        for (i, o) in self.outputs.iter().enumerate() {
            self.kv.set(&format!("output_{i}"), o);
        }
        csg_core::io::atomic_write_str(dir.join("manifest.txt"), &self.kv.to_string())
    }
}
