//! Run configuration: flags, then `REFINERY_*` environment variables (both
//! through clap), then a `key=value` file, then defaults.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use serde::Serialize;

use crate::Failure;

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// key=value configuration file
    #[arg(long, global = true, env = "REFINERY_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "REFINERY_DATASET_ROOT")]
    pub dataset_root: Option<PathBuf>,
    #[arg(long, global = true, env = "REFINERY_WORKDIR")]
    pub workdir: Option<PathBuf>,
    /// Triage IOU threshold; images strictly below are flagged
    #[arg(long, global = true, env = "REFINERY_THRESHOLD")]
    pub threshold: Option<f64>,
    #[arg(long, global = true, env = "REFINERY_WIDTH_SCALE")]
    pub width_scale: Option<f64>,
    #[arg(long, global = true, env = "REFINERY_IOU_MIN")]
    pub iou_min: Option<f64>,
    /// Degrees
    #[arg(long, global = true, env = "REFINERY_ANGLE_MAX")]
    pub angle_max: Option<f64>,
    #[arg(long, global = true, env = "REFINERY_PORT")]
    pub port: Option<u16>,
    #[arg(long, global = true, env = "REFINERY_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub workdir: PathBuf,
    pub threshold: f64,
    pub width_scale: f64,
    pub iou_min: f64,
    pub angle_max: f64,
    pub port: u16,
    pub seed: Option<u64>,
}

pub const KEYS: [&str; 8] = [
    "dataset_root",
    "workdir",
    "threshold",
    "width_scale",
    "iou_min",
    "angle_max",
    "port",
    "seed",
];

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<HashMap<String, String>, String> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(format!("line {}: unknown key {k}", i + 1));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn pick<T: FromStr>(flag: Option<T>, file: &HashMap<String, String>, key: &str) -> Result<Option<T>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    file.get(key)
        .map(|v| {
            v.parse::<T>()
                .map_err(|_| Failure::usage(format!("config: invalid value {v:?} for {key}")))
        })
        .transpose()
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self, Failure> {
        let file = match &o.config {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| Failure::io(anyhow::anyhow!("{}: {e}", p.display())))?;
                parse_config_file(&text).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
            }
            None => HashMap::new(),
        };
        let cfg = Self {
            dataset_root: pick(o.dataset_root.clone(), &file, "dataset_root")?,
            workdir: pick(o.workdir.clone(), &file, "workdir")?.unwrap_or_else(|| PathBuf::from("refinery-work")),
            threshold: pick(o.threshold, &file, "threshold")?.unwrap_or(refinery_core::triage::DEFAULT_THRESHOLD),
            width_scale: pick(o.width_scale, &file, "width_scale")?
                .unwrap_or(refinery_core::heatmap::DEFAULT_WIDTH_SCALE),
            iou_min: pick(o.iou_min, &file, "iou_min")?.unwrap_or(0.25),
            angle_max: pick(o.angle_max, &file, "angle_max")?.unwrap_or(30.0),
            port: pick(o.port, &file, "port")?.unwrap_or(8700),
            seed: pick(o.seed, &file, "seed")?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), Failure> {
        let bad = |what: String| Err(Failure::validation(anyhow::anyhow!(what)));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.iou_min) {
            return bad(format!("iou_min must lie in [0, 1], got {}", self.iou_min));
        }
        if self.width_scale.is_nan() || self.width_scale <= 0.0 {
            return bad(format!("width_scale must be positive, got {}", self.width_scale));
        }
        if !(0.0..=90.0).contains(&self.angle_max) {
            return bad(format!("angle_max must lie in [0, 90] degrees, got {}", self.angle_max));
        }
        if let Some(root) = &self.dataset_root {
            if self.workdir.starts_with(root) && absolute(&self.workdir) != absolute(root) {
                return bad("workdir must not lie inside the dataset root".into());
            }
        }
        Ok(())
    }

    pub fn dataset_root(&self) -> Result<&Path, Failure> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| Failure::usage("--dataset-root is required".into()))
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
