//! On-disk layout under the working directory.
//!
//! ```text
//! versions/<n>/version.json, manifest.json
//! iterations/<n>/queue.json, report.json, rejects.json
//! ledger.ndjson
//! stats.csv, stats.json
//! simulation/...
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use refinery_core::triage::TriageReport;

pub struct Workdir {
    root: PathBuf,
}

fn numbered_children(dir: &Path) -> Vec<u32> {
    let mut out: Vec<u32> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str().and_then(|s| s.parse().ok()))
        .collect();
    out.sort_unstable();
    out
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn version_dir(&self, n: u32) -> PathBuf {
        self.root.join("versions").join(n.to_string())
    }

    pub fn version_file(&self, n: u32) -> PathBuf {
        self.version_dir(n).join("version.json")
    }

    pub fn iteration_dir(&self, n: u32) -> PathBuf {
        self.root.join("iterations").join(n.to_string())
    }

    pub fn queue_file(&self, n: u32) -> PathBuf {
        self.iteration_dir(n).join("queue.json")
    }

    pub fn report_file(&self, n: u32) -> PathBuf {
        self.iteration_dir(n).join("report.json")
    }

    pub fn ledger_file(&self) -> PathBuf {
        self.root.join("ledger.ndjson")
    }

    pub fn latest_version(&self) -> Option<u32> {
        numbered_children(&self.root.join("versions"))
            .into_iter()
            .filter(|n| self.version_file(*n).is_file())
            .max()
    }

    pub fn latest_iteration(&self) -> Option<u32> {
        numbered_children(&self.root.join("iterations"))
            .into_iter()
            .filter(|n| self.queue_file(*n).is_file())
            .max()
    }

    pub fn report_files(&self) -> Vec<PathBuf> {
        numbered_children(&self.root.join("iterations"))
            .into_iter()
            .map(|n| self.report_file(n))
            .filter(|p| p.is_file())
            .collect()
    }

    pub fn reports(&self) -> anyhow::Result<Vec<TriageReport>> {
        self.report_files()
            .iter()
            .map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?))
            .collect()
    }
}
