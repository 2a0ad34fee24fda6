//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinery_core::ledger::DecisionMeta;
use refinery_core::{ledger::RemovalReason, DatasetVersion};
use refinery_core::{EventPayload, GraspAnnotation, GraspPose, ImageRecord, Ledger, Verdict};

/// Point-in-rectangle by projection onto the grasp axes.
pub fn inside(g: &GraspPose, x: f64, y: f64) -> bool {
    let (s, c) = g.angle.sin_cos();
    let dx = x - g.center_x;
    let dy = y - g.center_y;
    (dx * c + dy * s).abs() <= g.opening / 2.0 && (-dx * s + dy * c).abs() <= g.jaw_size / 2.0
}

fn bounds(g: &GraspPose) -> (f64, f64, f64, f64) {
    let r = (g.opening / 2.0).hypot(g.jaw_size / 2.0);
    (g.center_x - r, g.center_y - r, g.center_x + r, g.center_y + r)
}

/// Monte Carlo IOU: uniform samples over the joint bounding box.
pub fn monte_carlo_iou(a: &GraspPose, b: &GraspPose, samples: usize, rng: &mut impl Rng) -> f64 {
    let (ax0, ay0, ax1, ay1) = bounds(a);
    let (bx0, by0, bx1, by1) = bounds(b);
    let (x0, y0, x1, y1) = (ax0.min(bx0), ay0.min(by0), ax1.max(bx1), ay1.max(by1));
    let (mut in_a, mut in_b, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let x = rng.random_range(x0..x1);
        let y = rng.random_range(y0..y1);
        let (pa, pb) = (inside(a, x, y), inside(b, x, y));
        in_a += pa as usize;
        in_b += pb as usize;
        both += (pa && pb) as usize;
    }
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

pub fn random_pose(rng: &mut impl Rng, field: f64) -> GraspPose {
    GraspPose::new(
        rng.random_range(0.0..field),
        rng.random_range(0.0..field),
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.random_range(5.0..120.0),
        rng.random_range(3.0..60.0),
    )
    .unwrap()
}

/// Random pair whose rectangles usually overlap, so the oracle sees more
/// than the trivial zero case.
pub fn random_pair(rng: &mut impl Rng, field: f64) -> (GraspPose, GraspPose) {
    let a = random_pose(rng, field);
    let mut b = random_pose(rng, field);
    if rng.random_bool(0.7) {
        b.center_x = (a.center_x + rng.random_range(-30.0..30.0)).clamp(0.0, field);
        b.center_y = (a.center_y + rng.random_range(-30.0..30.0)).clamp(0.0, field);
    }
    (a, b)
}

/// Two axis-aligned `w × h` grasps shifted along x so that their IOU is
/// `(w - d) / (w + d)` with `d = w (1 - t) / (1 + t)`.
pub fn shifted_pair(target_iou: f64, w: f64, h: f64) -> (GraspPose, GraspPose) {
    let d = w * (1.0 - target_iou) / (1.0 + target_iou);
    (
        GraspPose::new(100.0, 100.0, 0.0, w, h).unwrap(),
        GraspPose::new(100.0 + d, 100.0, 0.0, w, h).unwrap(),
    )
}

/// Scenes of the dataset fixture and their grasp line counts.
pub const FIXTURE_SCENES: [(&str, usize); 3] = [("a_scene", 5), ("b_scene", 2), ("c_scene", 7)];

/// Writes a small Jacquard-style tree with real PNG files.
pub fn write_fixture(root: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (id, n) in FIXTURE_SCENES {
        let img = image::RgbImage::from_pixel(64, 48, image::Rgb([120, 80, 40]));
        img.save(root.join(format!("{id}_RGB.png"))).unwrap();
        let mut text = String::new();
        for _ in 0..n {
            text.push_str(&format!(
                "{:.4};{:.4};{:.4};{:.4};{:.4}\n",
                rng.random_range(1.0..63.0),
                rng.random_range(1.0..47.0),
                rng.random_range(-89.0..89.0),
                rng.random_range(5.0..40.0),
                rng.random_range(2.0..15.0),
            ));
        }
        std::fs::write(root.join(format!("{id}_grasps.txt")), text).unwrap();
    }
}

pub fn synthetic_version(n_images: usize, seed: u64) -> DatasetVersion {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DatasetVersion::original((0..n_images).map(|i| {
        ImageRecord {
            image_id: format!("img{i:03}"),
            rgb_path: format!("img{i:03}_RGB.png").into(),
            annotations: (0..rng.random_range(1..5))
                .map(|_| GraspAnnotation::original(random_pose(&mut rng, 300.0)))
                .collect(),
            width: 300,
            height: 300,
        }
    }))
    .unwrap()
}

/// Seeded ledger of exactly `n_events` events against `base`, closing an
/// iteration every 40 decisions and always ending on a boundary.
pub fn seeded_ledger(base: &DatasetVersion, n_events: usize, seed: u64) -> Ledger {
    assert!(n_events >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: Vec<String> = base.records().map(|r| r.image_id.clone()).collect();
    let mut ledger = Ledger::new();
    let mut iteration = 1u32;
    let mut in_iteration = 0;
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 8, 0, 0).unwrap();
    while ledger.len() + 1 < n_events {
        if in_iteration == 40 {
            ledger.append(EventPayload::IterationBoundary { iteration }).unwrap();
            iteration += 1;
            in_iteration = 0;
            continue;
        }
        let seq = ledger.len();
        let idx = rng.random_range(0..live.len());
        let image_id = live[idx].clone();
        let mut roll = rng.random_range(0..10);
        if live.len() <= 1 && roll == 0 {
            roll = 1;
        }
        let verdict = match roll {
            0 => Verdict::FnAnnotationError,
            1..=5 => Verdict::FnMissingLabel,
            _ => Verdict::TrueNegative,
        };
        let decision = DecisionMeta {
            item_id: seq as u64 + 1,
            iteration,
            verdict,
            operator_id: format!("op{}", rng.random_range(0..4)),
            decided_at: t0 + chrono::Duration::seconds(seq as i64),
            token: None,
        };
        let payload = match verdict {
            Verdict::FnAnnotationError => {
                live.swap_remove(idx);
                EventPayload::RemoveImage {
                    image_id,
                    reason: RemovalReason::AnnotationError,
                    decision,
                }
            }
            Verdict::FnMissingLabel => EventPayload::AddGrasp {
                annotation: GraspAnnotation::pseudo_label(random_pose(&mut rng, 300.0), format!("p{seq}")),
                image_id,
                decision,
            },
            Verdict::TrueNegative => EventPayload::NoOp { image_id, decision },
        };
        ledger.append(payload).unwrap();
        in_iteration += 1;
    }
    ledger.append(EventPayload::IterationBoundary { iteration }).unwrap();
    ledger
}
