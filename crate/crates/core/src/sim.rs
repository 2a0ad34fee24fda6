//! Desk-scale closed-loop refinement on a synthetic corpus.
//!
//! Each scene hides a complete set of grasp labels grouped into orientation
//! clusters. What gets published is either complete, missing one cluster, or
//! replaced with implausible boxes. An oracle predictor samples from the hidden
//! labels and a scripted operator judges candidates against them, so the
//! refinement loop can run end to end without a trained model or a human.

use std::f64::consts::FRAC_PI_2;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetVersion, GraspAnnotation, ImageRecord};
use crate::geometry::{iou, max_iou, GraspPose};
use crate::ledger::{self, decide, EventPayload, Ledger, LedgerError, ReviewDecision, Verdict};
use crate::triage::{
    run_triage, triage_stats, Lease, Prediction, PredictionSet, QueueStatus, ReviewQueueItem, StatsSeries,
    TriageConfig, TriageError, TriageReport,
};

pub const SCENE_SIZE: u32 = 300;
pub const SCRIPTED_OPERATOR: &str = "scripted-operator";
/// IOU at which the scripted operator accepts a candidate as a valid grasp.
pub const OPERATOR_VALID_IOU: f64 = 0.25;
/// Angular noise (radians) per pixel of noise level.
pub const ANGLE_NOISE_PER_PIXEL: f64 = 0.02;

const INTRA_CLUSTER_MIN_IOU: f64 = 0.5;
const CROSS_CLUSTER_MAX_IOU: f64 = 0.1;
const CORRUPT_MAX_IOU: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid corpus parameters: {0}")]
    Parameters(String),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    LabelsDropped,
    LabelsCorrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image_id: String,
    pub complete_labels: Vec<GraspPose>,
    /// Orientation cluster of each complete label.
    pub cluster_of: Vec<usize>,
    pub published_labels: Vec<GraspPose>,
    pub corruption: Corruption,
}

impl SyntheticScene {
    pub fn cluster_count(&self) -> usize {
        self.cluster_of.iter().max().map_or(0, |m| m + 1)
    }

    /// Complete labels absent from the published set.
    pub fn dropped_labels(&self) -> Vec<GraspPose> {
        match self.corruption {
            Corruption::LabelsDropped => self
                .complete_labels
                .iter()
                .filter(|l| !self.published_labels.contains(l))
                .copied()
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// Stable 64-bit seed from a base seed and labels.
fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn in_scene(p: &GraspPose) -> bool {
    let s = f64::from(SCENE_SIZE);
    p.center_x >= 0.0 && p.center_y >= 0.0 && p.center_x < s && p.center_y < s
}

fn complete_labels(rng: &mut impl Rng) -> (Vec<GraspPose>, Vec<usize>) {
    let jitter = Normal::new(0.0, 1.5).expect("valid sigma");
    loop {
        let cx = rng.random_range(90.0..210.0);
        let cy = rng.random_range(90.0..210.0);
        let base = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
        let sep: f64 = rng.random_range(15.0..30.0);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut labels = Vec::new();
        let mut cluster_of = Vec::new();
        for k in 0..2usize {
            let sign = if k == 0 { -1.0 } else { 1.0 };
            let kx = cx + sign * sep * dir.cos();
            let ky = cy + sign * sep * dir.sin();
            let angle = base + k as f64 * FRAC_PI_2 + rng.random_range(-10f64..10.0).to_radians();
            let opening = rng.random_range(40.0..70.0);
            let jaw = rng.random_range(12.0..18.0);
            for _ in 0..rng.random_range(2..=4) {
                let pose = GraspPose::new(
                    kx + jitter.sample(rng),
                    ky + jitter.sample(rng),
                    angle + rng.random_range(-4f64..4.0).to_radians(),
                    opening + rng.random_range(-3.0..3.0),
                    jaw + rng.random_range(-1.0..1.0),
                )
                .expect("positive extents");
                labels.push(pose);
                cluster_of.push(k);
            }
        }
        if labels_well_formed(&labels, &cluster_of) {
            return (labels, cluster_of);
        }
    }
}

fn labels_well_formed(labels: &[GraspPose], cluster_of: &[usize]) -> bool {
    if !labels.iter().all(in_scene) {
        return false;
    }
    let rects: Vec<_> = labels.iter().map(GraspPose::rectangle).collect();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let v = iou(&rects[i], &rects[j]);
            let same = cluster_of[i] == cluster_of[j];
            if (same && v < INTRA_CLUSTER_MIN_IOU) || (!same && v >= CROSS_CLUSTER_MAX_IOU) {
                return false;
            }
        }
    }
    true
}

fn corrupted_labels(rng: &mut impl Rng, complete: &[GraspPose]) -> Vec<GraspPose> {
    let n = rng.random_range(2..=4);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let cand = GraspPose::new(
            rng.random_range(20.0..280.0),
            rng.random_range(20.0..280.0),
            rng.random_range(-FRAC_PI_2..FRAC_PI_2),
            rng.random_range(40.0..70.0),
            rng.random_range(12.0..18.0),
        )
        .expect("positive extents");
        let worst = complete
            .iter()
            .map(|c| iou(&cand.rectangle(), &c.rectangle()))
            .fold(0.0, f64::max);
        if worst < CORRUPT_MAX_IOU {
            out.push(cand);
        }
    }
    out
}

/// Deterministic synthetic corpus. `round(n·drop)` scenes lose one orientation
/// cluster and `round(n·corrupt)` get implausible published labels.
pub fn generate_corpus(
    n_scenes: usize,
    drop_fraction: f64,
    corrupt_fraction: f64,
    seed: u64,
) -> Result<Vec<SyntheticScene>, SimError> {
    let in_unit = |f: f64| (0.0..=1.0).contains(&f);
    if !in_unit(drop_fraction) || !in_unit(corrupt_fraction) || drop_fraction + corrupt_fraction > 1.0 {
        return Err(SimError::Parameters(format!(
            "fractions must lie in [0, 1] and sum to at most 1 (drop {drop_fraction}, corrupt {corrupt_fraction})"
        )));
    }
    let n_drop = (n_scenes as f64 * drop_fraction).round() as usize;
    let n_corrupt = ((n_scenes as f64 * corrupt_fraction).round() as usize).min(n_scenes - n_drop.min(n_scenes));
    let n_drop = n_drop.min(n_scenes);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<Corruption> = std::iter::repeat_n(Corruption::LabelsDropped, n_drop)
        .chain(std::iter::repeat_n(Corruption::LabelsCorrupted, n_corrupt))
        .chain(std::iter::repeat_n(Corruption::None, n_scenes - n_drop - n_corrupt))
        .collect();
    kinds.shuffle(&mut rng);

    let width = n_scenes.saturating_sub(1).to_string().len().max(4);
    let scenes = kinds
        .into_iter()
        .enumerate()
        .map(|(i, corruption)| {
            let (complete, cluster_of) = complete_labels(&mut rng);
            let published = match corruption {
                Corruption::None => complete.clone(),
                Corruption::LabelsDropped => {
                    let k = rng.random_range(0..2);
                    complete
                        .iter()
                        .zip(&cluster_of)
                        .filter(|(_, c)| **c != k)
                        .map(|(l, _)| *l)
                        .collect()
                }
                Corruption::LabelsCorrupted => corrupted_labels(&mut rng, &complete),
            };
            SyntheticScene {
                image_id: format!("scene_{i:0width$}"),
                complete_labels: complete,
                cluster_of,
                published_labels: published,
                corruption,
            }
        })
        .collect();
    Ok(scenes)
}

/// Oracle prediction for the first round; see [`oracle_predict_round`].
pub fn oracle_predict(scene: &SyntheticScene, noise_level: f64, seed: u64) -> Vec<Prediction> {
    oracle_predict_round(scene, noise_level, seed, 0)
}

/// One prediction sampled from the hidden labels, Gaussian-perturbed.
///
/// Across rounds the oracle visits the scene's clusters in a seeded random
/// order (round `r` samples cluster `order[r mod K]`); the label within the
/// cluster and the noise are drawn afresh each round. Confidence is
/// `exp(-perturbation)`, so 1.0 at zero noise.
pub fn oracle_predict_round(scene: &SyntheticScene, noise_level: f64, seed: u64, round: u32) -> Vec<Prediction> {
    let k = scene.cluster_count();
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        &["order", &scene.image_id],
    )));
    let cluster = order[round as usize % k];

    let round_tag = round.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["round", &round_tag, &scene.image_id]));
    let members: Vec<&GraspPose> = scene
        .complete_labels
        .iter()
        .zip(&scene.cluster_of)
        .filter(|(_, c)| **c == cluster)
        .map(|(l, _)| l)
        .collect();
    let base = **members.choose(&mut rng).expect("clusters are non-empty");

    let sigma = noise_level.max(0.0);
    let mut draw = |scale: f64| -> f64 {
        if sigma == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sigma * scale).expect("finite sigma").sample(&mut rng)
        }
    };
    let (dx, dy, dt, dw) = (draw(1.0), draw(1.0), draw(ANGLE_NOISE_PER_PIXEL), draw(1.0));
    let limit = f64::from(SCENE_SIZE) - 1e-6;
    let pose = GraspPose::new(
        (base.center_x + dx).clamp(0.0, limit),
        (base.center_y + dy).clamp(0.0, limit),
        base.angle + dt,
        (base.opening + dw).max(1.0),
        base.jaw_size,
    )
    .expect("clamped pose is valid");
    let perturbation = dx.hypot(dy) / 10.0 + dt.abs() / 0.2 + dw.abs() / 10.0;
    vec![Prediction {
        pose,
        confidence: (-perturbation).exp(),
        prediction_id: format!("oracle-r{round}-{}", scene.image_id),
    }]
}

fn sim_clock(iteration: u32, item_id: u64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
        + Duration::hours(i64::from(iteration))
        + Duration::seconds(item_id as i64)
}

/// Judges a queue item against the scene's hidden labels.
pub fn scripted_operator(item: &ReviewQueueItem, scene: &SyntheticScene) -> ReviewDecision {
    let valid_candidate = item
        .candidate
        .as_ref()
        .is_some_and(|c| max_iou(&c.pose, &scene.complete_labels).is_ok_and(|(v, _)| v >= OPERATOR_VALID_IOU));
    let verdict = match scene.corruption {
        Corruption::LabelsCorrupted => Verdict::FnAnnotationError,
        Corruption::LabelsDropped if valid_candidate => Verdict::FnMissingLabel,
        _ => Verdict::TrueNegative,
    };
    ReviewDecision {
        image_id: item.image_id.clone(),
        verdict,
        candidate: item.candidate.clone(),
        operator_id: SCRIPTED_OPERATOR.into(),
        decided_at: sim_clock(item.iteration, item.item_id),
        iteration: item.iteration,
    }
}

/// Version 0 of a corpus: published labels as original annotations.
pub fn corpus_version(corpus: &[SyntheticScene]) -> DatasetVersion {
    DatasetVersion::original(corpus.iter().map(|s| {
        ImageRecord {
            image_id: s.image_id.clone(),
            rgb_path: format!("{}_RGB.png", s.image_id).into(),
            annotations: s
                .published_labels
                .iter()
                .copied()
                .map(GraspAnnotation::original)
                .collect(),
            width: SCENE_SIZE,
            height: SCENE_SIZE,
        }
    }))
    .expect("scene ids are unique")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub iterations: u32,
    pub noise_level: f64,
    pub seed: u64,
    pub threshold: f64,
}

impl LoopConfig {
    pub fn new(iterations: u32, noise_level: f64, seed: u64) -> Self {
        Self {
            iterations,
            noise_level,
            seed,
            threshold: crate::triage::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub dropped_labels: usize,
    pub recovered_labels: usize,
    pub coverage: f64,
    pub corrupted_scenes: usize,
    pub corrupted_removed: usize,
    /// Scenes removed although their published labels were sound.
    pub wrongly_removed: usize,
}

/// How much hidden truth a version has recovered: each dropped label counts
/// when some label of the same image overlaps it at IOU ≥ `iou_min`.
pub fn recovery(corpus: &[SyntheticScene], version: &DatasetVersion, iou_min: f64) -> Recovery {
    let mut r = Recovery {
        dropped_labels: 0,
        recovered_labels: 0,
        coverage: 1.0,
        corrupted_scenes: 0,
        corrupted_removed: 0,
        wrongly_removed: 0,
    };
    for scene in corpus {
        let rec = version.get(&scene.image_id);
        match scene.corruption {
            Corruption::LabelsCorrupted => {
                r.corrupted_scenes += 1;
                if rec.is_none() {
                    r.corrupted_removed += 1;
                }
            }
            _ if rec.is_none() => r.wrongly_removed += 1,
            _ => {}
        }
        for lost in scene.dropped_labels() {
            r.dropped_labels += 1;
            let found = rec.is_some_and(|rec| max_iou(&lost, &rec.poses()).is_ok_and(|(v, _)| v >= iou_min));
            if found {
                r.recovered_labels += 1;
            }
        }
    }
    if r.dropped_labels > 0 {
        r.coverage = r.recovered_labels as f64 / r.dropped_labels as f64;
    }
    r
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub stats: StatsSeries,
    pub reports: Vec<TriageReport>,
    pub final_version: DatasetVersion,
    pub ledger: Ledger,
    /// Per iteration, the corruption class of every flagged scene.
    pub flagged_kinds: Vec<Vec<Corruption>>,
}

/// Predict → triage → review → apply, `iterations` times.
pub fn run_closed_loop(corpus: &[SyntheticScene], cfg: &LoopConfig) -> Result<LoopOutcome, SimError> {
    if cfg.iterations == 0 {
        return Err(SimError::Parameters("iterations must be at least 1".into()));
    }
    let scenes: std::collections::HashMap<&str, &SyntheticScene> =
        corpus.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let triage_cfg = TriageConfig {
        threshold: cfg.threshold,
        top_k: 1,
    };
    let mut version = corpus_version(corpus);
    let mut ledger = Ledger::new();
    let mut reports: Vec<TriageReport> = Vec::new();
    let mut flagged_kinds = Vec::new();

    for iteration in 1..=cfg.iterations {
        let live: Vec<&SyntheticScene> = version.records().map(|r| scenes[r.image_id.as_str()]).collect();
        let predicted: Vec<(String, Vec<Prediction>)> = live
            .par_iter()
            .map(|s| {
                (
                    s.image_id.clone(),
                    oracle_predict_round(s, cfg.noise_level, cfg.seed, iteration - 1),
                )
            })
            .collect();
        let mut preds = PredictionSet::new("oracle", iteration);
        preds.entries.extend(predicted);

        let (report, queue) = run_triage(&version, &preds, &triage_cfg)?;
        let report = report.with_history(&reports);
        let mut kinds = Vec::with_capacity(queue.len());
        for mut item in queue {
            let scene = scenes[item.image_id.as_str()];
            kinds.push(scene.corruption);
            let decision = scripted_operator(&item, scene);
            item.status = QueueStatus::Leased;
            item.lease = Some(Lease {
                operator_id: SCRIPTED_OPERATOR.into(),
                expiry: decision.decided_at + Duration::minutes(10),
            });
            let payload = decide(&mut item, &decision, decision.decided_at, None)?;
            ledger.append(payload)?;
        }
        ledger.append(EventPayload::IterationBoundary { iteration })?;
        version = ledger::replay(&version, ledger.events(), iteration)?;
        reports.push(report);
        flagged_kinds.push(kinds);
    }

    let stats = triage_stats(&reports, &ledger::all_summaries(ledger.events()));
    Ok(LoopOutcome {
        stats,
        reports,
        final_version: version,
        ledger,
        flagged_kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_counts() {
        let c = generate_corpus(200, 0.3, 0.05, 7).unwrap();
        let count = |k| c.iter().filter(|s| s.corruption == k).count();
        assert_eq!(count(Corruption::LabelsDropped), 60);
        assert_eq!(count(Corruption::LabelsCorrupted), 10);
        assert_eq!(count(Corruption::None), 130);
    }

    #[test]
    fn corpus_is_seed_deterministic() {
        assert_eq!(
            generate_corpus(20, 0.3, 0.1, 3).unwrap(),
            generate_corpus(20, 0.3, 0.1, 3).unwrap()
        );
        assert_ne!(
            generate_corpus(20, 0.3, 0.1, 3).unwrap(),
            generate_corpus(20, 0.3, 0.1, 4).unwrap()
        );
    }

    #[test]
    fn empty_corpus_and_bad_fractions() {
        assert!(generate_corpus(0, 0.3, 0.1, 1).unwrap().is_empty());
        assert!(generate_corpus(10, 0.8, 0.3, 1).is_err());
        assert!(generate_corpus(10, -0.1, 0.0, 1).is_err());
    }

    #[test]
    fn dropped_scenes_keep_a_strict_subset() {
        for s in generate_corpus(50, 1.0, 0.0, 11).unwrap() {
            assert!(!s.complete_labels.is_empty());
            assert!(!s.published_labels.is_empty());
            assert!(s.published_labels.len() < s.complete_labels.len());
            assert!(s.published_labels.iter().all(|p| s.complete_labels.contains(p)));
        }
    }

    #[test]
    fn zero_noise_prediction_is_a_hidden_label() {
        for s in generate_corpus(20, 0.5, 0.2, 5).unwrap() {
            let p = &oracle_predict(&s, 0.0, 9)[0];
            assert_eq!(p.confidence, 1.0);
            let (v, _) = max_iou(&p.pose, &s.complete_labels).unwrap();
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_visits_every_cluster() {
        let s = &generate_corpus(1, 0.0, 0.0, 2).unwrap()[0];
        let k = s.cluster_count();
        let mut seen = std::collections::HashSet::new();
        for r in 0..k as u32 {
            let p = oracle_predict_round(s, 0.0, 1, r)[0].pose;
            let idx = s.complete_labels.iter().position(|l| *l == p).unwrap();
            seen.insert(s.cluster_of[idx]);
        }
        assert_eq!(seen.len(), k);
    }

    #[test]
    fn loop_rejects_zero_iterations() {
        let c = generate_corpus(5, 0.2, 0.0, 1).unwrap();
        assert!(run_closed_loop(&c, &LoopConfig::new(0, 0.0, 1)).is_err());
    }

    #[test]
    fn single_iteration_writes_one_boundary() {
        let c = generate_corpus(30, 0.3, 0.1, 1).unwrap();
        let out = run_closed_loop(&c, &LoopConfig::new(1, 0.0, 1)).unwrap();
        let boundaries = out
            .ledger
            .events()
            .iter()
            .filter(|e| matches!(e.payload, EventPayload::IterationBoundary { .. }))
            .count();
        assert_eq!(boundaries, 1);
        assert_eq!(out.stats.rows.len(), 1);
    }
}
