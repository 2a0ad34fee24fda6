//! Jacquard-convention grasp datasets and immutable dataset versions.
//!
//! On disk a scene is a pair `<id>_RGB.png` / `<id>_grasps.txt`; each grasp
//! line is `x;y;theta_degrees;opening;jaw_size`. In memory angles are
//! radians, canonicalized at parse time.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::geometry::{GeometryError, GraspPose};

pub const GRASPS_SUFFIX: &str = "_grasps.txt";
pub const RGB_SUFFIX: &str = "_RGB.png";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("malformed version file: {0}")]
    Format(String),
}

impl DatasetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        DatasetError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Original,
    PseudoLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspAnnotation {
    pub pose: GraspPose,
    pub source: AnnotationSource,
    /// Prediction the annotation was promoted from; set for pseudo-labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin_id: Option<String>,
}

impl GraspAnnotation {
    pub fn original(pose: GraspPose) -> Self {
        Self {
            pose,
            source: AnnotationSource::Original,
            origin_id: None,
        }
    }

    pub fn pseudo_label(pose: GraspPose, prediction_id: impl Into<String>) -> Self {
        Self {
            pose,
            source: AnnotationSource::PseudoLabel,
            origin_id: Some(prediction_id.into()),
        }
    }

    pub fn is_consistent(&self) -> bool {
        let provenance_ok = match self.source {
            AnnotationSource::Original => true,
            AnnotationSource::PseudoLabel => self.origin_id.is_some(),
        };
        provenance_ok && self.pose.validate().is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub rgb_path: PathBuf,
    pub annotations: Vec<GraspAnnotation>,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    pub fn poses(&self) -> Vec<GraspPose> {
        self.annotations.iter().map(|a| a.pose).collect()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < f64::from(self.width) && y < f64::from(self.height)
    }

    fn count(&self, source: AnnotationSource) -> usize {
        self.annotations.iter().filter(|a| a.source == source).count()
    }
}

/// An immutable snapshot of the dataset at one refinement iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetVersion {
    version_id: u32,
    parent: Option<u32>,
    /// Number of ledger events consumed to produce this version.
    created_from: u64,
    records: BTreeMap<String, ImageRecord>,
}

impl DatasetVersion {
    pub fn new(
        version_id: u32,
        parent: Option<u32>,
        created_from: u64,
        records: impl IntoIterator<Item = ImageRecord>,
    ) -> Result<Self, DatasetError> {
        let mut map = BTreeMap::new();
        for r in records {
            if map.contains_key(&r.image_id) {
                return Err(DatasetError::DuplicateImage(r.image_id));
            }
            map.insert(r.image_id.clone(), r);
        }
        Ok(Self {
            version_id,
            parent,
            created_from,
            records: map,
        })
    }

    /// Version 0: an original import with no parent.
    pub fn original(records: impl IntoIterator<Item = ImageRecord>) -> Result<Self, DatasetError> {
        Self::new(0, None, 0, records)
    }

    pub fn version_id(&self) -> u32 {
        self.version_id
    }

    pub fn parent(&self) -> Option<u32> {
        self.parent
    }

    pub fn created_from(&self) -> u64 {
        self.created_from
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.get(image_id)
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.records.contains_key(image_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn annotation_count(&self) -> usize {
        self.records.values().map(|r| r.annotations.len()).sum()
    }

    /// Copy of this version with identical grasp lines collapsed per record.
    pub fn deduplicated(&self) -> DatasetVersion {
        let mut out = self.clone();
        for rec in out.records.values_mut() {
            let mut seen = HashSet::new();
            rec.annotations.retain(|a| seen.insert(format_grasp_line(&a.pose)));
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::from_version(self)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string(self).map_err(|e| DatasetError::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| DatasetError::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Format(format!("{}: {e}", path.display())))
    }
}

/// Parses one `x;y;theta_degrees;opening;jaw_size` line. `line_no` is 1-based.
pub fn parse_grasp_line(line: &str, line_no: usize) -> Result<GraspPose, DatasetError> {
    let err = |message: String| DatasetError::Parse { line: line_no, message };
    let fields: Vec<&str> = line.trim().split(';').collect();
    if fields.len() != 5 {
        return Err(err(format!("expected 5 fields, found {}", fields.len())));
    }
    let mut v = [0.0f64; 5];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f
            .trim()
            .parse::<f64>()
            .map_err(|_| err(format!("non-numeric field {f:?}")))?;
    }
    GraspPose::new(v[0], v[1], v[2].to_radians(), v[3], v[4]).map_err(|e| match e {
        GeometryError::InvalidGrasp(m) => err(m),
        other => err(other.to_string()),
    })
}

/// Renders a pose in the on-disk line format (degrees, 6 decimals), no newline.
pub fn format_grasp_line(p: &GraspPose) -> String {
    // -0.000000 and 0.000000 must render the same for duplicate detection
    let fix = |v: f64| if v == 0.0 { 0.0 } else { v };
    format!(
        "{:.6};{:.6};{:.6};{:.6};{:.6}",
        fix(p.center_x),
        fix(p.center_y),
        fix(p.angle.to_degrees()),
        fix(p.opening),
        fix(p.jaw_size)
    )
}

fn render_grasp_file(rec: &ImageRecord) -> String {
    let mut s = String::new();
    for a in &rec.annotations {
        s.push_str(&format_grasp_line(&a.pose));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    EmptyDataset,
    MalformedLine,
    UnreadableFile,
    MissingImage,
    MissingGrasps,
    OutOfBounds,
    DuplicateGrasp,
    NoAnnotations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: DiagnosticKind, severity: Severity, message: impl Into<String>) -> Self {
        Self {
            kind,
            severity,
            image_id: None,
            file: None,
            line: None,
            message: message.into(),
        }
    }

    fn image(mut self, id: &str) -> Self {
        self.image_id = Some(id.to_string());
        self
    }

    fn at(mut self, file: &Path, line: Option<usize>) -> Self {
        self.file = Some(file.to_path_buf());
        self.line = line;
        self
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{sev}: {:?}", self.kind)?;
        if let Some(file) = &self.file {
            write!(f, " {}", file.display())?;
            if let Some(l) = self.line {
                write!(f, ":{l}")?;
            }
        } else if let Some(id) = &self.image_id {
            write!(f, " [{id}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone)]
pub struct LoadOutcome {
    pub version: DatasetVersion,
    pub diagnostics: Vec<Diagnostic>,
}

struct SceneFiles {
    grasps: Option<PathBuf>,
    rgb: Option<PathBuf>,
}

/// Loads a Jacquard-style tree as version 0.
///
/// Scenes are discovered recursively. Malformed grasp lines and incomplete
/// scenes are reported in the diagnostics, never dropped silently.
pub fn load_dataset(root: &Path) -> Result<LoadOutcome, DatasetError> {
    let meta = fs::metadata(root).map_err(|e| DatasetError::io(root, e))?;
    if !meta.is_dir() {
        return Err(DatasetError::io(
            root,
            io::Error::new(io::ErrorKind::NotADirectory, "not a directory"),
        ));
    }

    let mut scenes: BTreeMap<String, SceneFiles> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            DatasetError::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy();
        let (id, is_grasp) = if let Some(id) = name.strip_suffix(GRASPS_SUFFIX) {
            (id.to_string(), true)
        } else if let Some(id) = name.strip_suffix(RGB_SUFFIX) {
            (id.to_string(), false)
        } else {
            continue;
        };
        let slot = scenes.entry(id).or_insert(SceneFiles {
            grasps: None,
            rgb: None,
        });
        if is_grasp {
            slot.grasps = Some(entry.into_path());
        } else {
            slot.rgb = Some(entry.into_path());
        }
    }

    let results: Vec<(Option<ImageRecord>, Vec<Diagnostic>)> = scenes
        .into_par_iter()
        .map(|(id, files)| load_scene(&id, files))
        .collect();

    let mut diagnostics = Vec::new();
    let mut records = Vec::new();
    for (rec, diags) in results {
        diagnostics.extend(diags);
        records.extend(rec);
    }
    if records.is_empty() {
        diagnostics.push(Diagnostic::new(
            DiagnosticKind::EmptyDataset,
            Severity::Warning,
            format!("no scenes found under {}", root.display()),
        ));
    }
    let version = DatasetVersion::original(records)?;
    Ok(LoadOutcome { version, diagnostics })
}

fn load_scene(id: &str, files: SceneFiles) -> (Option<ImageRecord>, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    let (grasps, rgb) = match (files.grasps, files.rgb) {
        (Some(g), Some(r)) => (g, r),
        (Some(g), None) => {
            diags.push(
                Diagnostic::new(
                    DiagnosticKind::MissingImage,
                    Severity::Error,
                    format!("grasp file has no matching {id}{RGB_SUFFIX}"),
                )
                .image(id)
                .at(&g, None),
            );
            return (None, diags);
        }
        (None, Some(r)) => {
            diags.push(
                Diagnostic::new(
                    DiagnosticKind::MissingGrasps,
                    Severity::Error,
                    format!("image has no matching {id}{GRASPS_SUFFIX}"),
                )
                .image(id)
                .at(&r, None),
            );
            return (None, diags);
        }
        (None, None) => return (None, diags),
    };

    let text = match fs::read_to_string(&grasps) {
        Ok(t) => t,
        Err(e) => {
            diags.push(
                Diagnostic::new(DiagnosticKind::UnreadableFile, Severity::Error, e.to_string())
                    .image(id)
                    .at(&grasps, None),
            );
            return (None, diags);
        }
    };
    let (width, height) = match image::image_dimensions(&rgb) {
        Ok(d) => d,
        Err(e) => {
            diags.push(
                Diagnostic::new(DiagnosticKind::UnreadableFile, Severity::Error, e.to_string())
                    .image(id)
                    .at(&rgb, None),
            );
            return (None, diags);
        }
    };

    let mut annotations = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_grasp_line(line, i + 1) {
            Ok(pose) => annotations.push(GraspAnnotation::original(pose)),
            Err(e) => diags.push(
                Diagnostic::new(DiagnosticKind::MalformedLine, Severity::Error, e.to_string())
                    .image(id)
                    .at(&grasps, Some(i + 1)),
            ),
        }
    }
    let rec = ImageRecord {
        image_id: id.to_string(),
        rgb_path: rgb,
        annotations,
        width,
        height,
    };
    (Some(rec), diags)
}

/// Integrity checks on a version; an empty list means clean.
pub fn validate(version: &DatasetVersion) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for rec in version.records() {
        if rec.annotations.is_empty() {
            out.push(
                Diagnostic::new(DiagnosticKind::NoAnnotations, Severity::Warning, "record has no grasps")
                    .image(&rec.image_id),
            );
        }
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, a) in rec.annotations.iter().enumerate() {
            let p = &a.pose;
            if !rec.contains(p.center_x, p.center_y) {
                out.push(
                    Diagnostic::new(
                        DiagnosticKind::OutOfBounds,
                        Severity::Error,
                        format!(
                            "grasp {i} center ({}, {}) outside {}x{}",
                            p.center_x, p.center_y, rec.width, rec.height
                        ),
                    )
                    .image(&rec.image_id),
                );
            }
            let key = format_grasp_line(p);
            if let Some(first) = seen.get(&key) {
                out.push(
                    Diagnostic::new(
                        DiagnosticKind::DuplicateGrasp,
                        Severity::Warning,
                        format!("grasp {i} duplicates grasp {first} ({key})"),
                    )
                    .image(&rec.image_id),
                );
            } else {
                seen.insert(key, i);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub grasps_original: usize,
    pub grasps_pseudo: usize,
    pub file_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub images: usize,
    pub grasps_original: usize,
    pub grasps_pseudo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version_id: u32,
    pub parent: Option<u32>,
    pub entries: Vec<ManifestEntry>,
    pub totals: ManifestTotals,
    pub digest: String,
}

impl Manifest {
    pub fn from_version(version: &DatasetVersion) -> Self {
        // BTreeMap iteration keeps entries sorted by image_id
        let entries: Vec<ManifestEntry> = version
            .records()
            .map(|r| ManifestEntry {
                image_id: r.image_id.clone(),
                grasps_original: r.count(AnnotationSource::Original),
                grasps_pseudo: r.count(AnnotationSource::PseudoLabel),
                file_hash: sha256_hex(render_grasp_file(r).as_bytes()),
            })
            .collect();
        let totals = ManifestTotals {
            images: entries.len(),
            grasps_original: entries.iter().map(|e| e.grasps_original).sum(),
            grasps_pseudo: entries.iter().map(|e| e.grasps_pseudo).sum(),
        };
        let digest = Self::digest_of(&entries);
        Self {
            version_id: version.version_id(),
            parent: version.parent(),
            entries,
            totals,
            digest,
        }
    }

    fn digest_of(entries: &[ManifestEntry]) -> String {
        let mut h = Sha256::new();
        for e in entries {
            h.update(
                format!(
                    "{}\t{}\t{}\t{}\n",
                    e.image_id, e.grasps_original, e.grasps_pseudo, e.file_hash
                )
                .as_bytes(),
            );
        }
        hex::encode(h.finalize())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes grasp files, links or copies images, and emits `manifest.json`.
pub fn write_dataset(version: &DatasetVersion, out: &Path) -> Result<Manifest, DatasetError> {
    fs::create_dir_all(out).map_err(|e| DatasetError::io(out, e))?;
    for rec in version.records() {
        let gpath = out.join(format!("{}{GRASPS_SUFFIX}", rec.image_id));
        fs::write(&gpath, render_grasp_file(rec)).map_err(|e| DatasetError::io(&gpath, e))?;
        if rec.rgb_path.is_file() {
            let dst = out.join(format!("{}{RGB_SUFFIX}", rec.image_id));
            if dst.exists() {
                fs::remove_file(&dst).map_err(|e| DatasetError::io(&dst, e))?;
            }
            if fs::hard_link(&rec.rgb_path, &dst).is_err() {
                fs::copy(&rec.rgb_path, &dst).map_err(|e| DatasetError::io(&dst, e))?;
            }
        }
    }
    let manifest = version.manifest();
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_json_pretty()).map_err(|e| DatasetError::io(&mpath, e))?;
    Ok(manifest)
}
