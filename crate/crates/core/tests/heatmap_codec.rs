use std::f64::consts::PI;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refinery_core::heatmap::{
    center_region, decode, encode, load_heatmaps, loss, recover_angle, save_heatmaps, width_quantum, DecodeConfig,
    DEFAULT_WIDTH_SCALE,
};
use refinery_core::{angle_distance, GraspPose, HeatmapSet};

fn random_grasp(rng: &mut impl Rng, h: usize, w: usize) -> GraspPose {
    GraspPose::new(
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
        rng.random_range(-PI..PI),
        rng.random_range(3.0..DEFAULT_WIDTH_SCALE),
        rng.random_range(2.0..30.0),
    )
    .unwrap()
}

#[test]
fn single_grasp_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let q = width_quantum(DEFAULT_WIDTH_SCALE);
    for _ in 0..200 {
        let (h, w) = (rng.random_range(20..120), rng.random_range(20..120));
        let g = random_grasp(&mut rng, h, w);
        let maps = encode(&[g], (h, w), DEFAULT_WIDTH_SCALE).unwrap();
        let out = decode(&maps, &DecodeConfig::new(1, DEFAULT_WIDTH_SCALE, g.jaw_size));
        assert_eq!(out.len(), 1);
        let d = out[0];
        assert!(
            angle_distance(d.pose.angle, g.angle) <= 1e-6,
            "{} vs {}",
            d.pose.angle,
            g.angle
        );
        assert!(center_region(&g, h, w).contains(&(d.row, d.col)));
        assert!(
            (d.pose.opening - g.opening).abs() <= q,
            "{} vs {}",
            d.pose.opening,
            g.opening
        );
    }
}

#[test]
fn wider_than_scale_saturates() {
    let g = GraspPose::new(10.0, 10.0, 0.0, 400.0, 8.0).unwrap();
    let maps = encode(&[g], (20, 20), 150.0).unwrap();
    let d = decode(&maps, &DecodeConfig::new(1, 150.0, 8.0))[0];
    assert!((d.pose.opening - 150.0).abs() < 1e-9);
}

#[test]
fn two_separated_grasps_decode_in_order() {
    let a = GraspPose::new(10.0, 10.0, 0.3, 30.0, 8.0).unwrap();
    let b = GraspPose::new(60.0, 40.0, -1.0, 45.0, 8.0).unwrap();
    let mut maps = encode(&[a, b], (64, 80), 150.0).unwrap();
    for cell in center_region(&b, 64, 80) {
        maps.quality[cell] = 0.8;
    }
    let out = decode(&maps, &DecodeConfig::new(5, 150.0, 8.0));
    assert_eq!(out.len(), 2);
    assert!(angle_distance(out[0].pose.angle, a.angle) < 1e-6);
    assert!(angle_distance(out[1].pose.angle, b.angle) < 1e-6);
}

#[test]
fn below_floor_is_not_a_peak() {
    let mut maps = HeatmapSet::zeros(8, 8);
    maps.quality[(4, 4)] = 0.05;
    maps.cos2[(4, 4)] = 1.0;
    assert!(decode(&maps, &DecodeConfig::new(3, 150.0, 10.0)).is_empty());
}

#[test]
fn recover_angle_ignores_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let theta: f64 = rng.random_range(-PI / 2.0..PI / 2.0);
        let (s, c) = (2.0 * theta).sin_cos();
        let k: f64 = 10f64.powf(rng.random_range(-6.0..6.0));
        let a = recover_angle(c, s).unwrap();
        let b = recover_angle(k * c, k * s).unwrap();
        assert!(angle_distance(a, b) <= 1e-9);
        assert!(angle_distance(a, theta) <= 1e-9);
    }
}

/// Plain per-cell sum, independent of the library's reduction.
fn naive_mse(a: &Array2<f32>, b: &Array2<f32>) -> f64 {
    let mut total = 0.0;
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            let d = f64::from(a[(r, c)]) - f64::from(b[(r, c)]);
            total += d * d;
        }
    }
    total / a.len() as f64
}

fn random_maps(rng: &mut impl Rng, h: usize, w: usize) -> HeatmapSet {
    let mut m = HeatmapSet::zeros(h, w);
    for plane in [&mut m.quality, &mut m.cos2, &mut m.sin2, &mut m.width] {
        plane.mapv_inplace(|_| rng.random_range(-1.0f32..1.0));
    }
    m
}

#[test]
fn loss_terms_sum_to_overall() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let (p, t) = (random_maps(&mut rng, h, w), random_maps(&mut rng, h, w));
        let l = loss(&p, &t).unwrap();
        assert_eq!(l.l_overall, l.l_center + l.l_cos + l.l_sin + l.l_width);
        assert!((l.l_center - naive_mse(&p.quality, &t.quality)).abs() < 1e-12);
        assert!((l.l_width - naive_mse(&p.width, &t.width)).abs() < 1e-12);
        assert!(l.l_overall > 0.0);
        assert_eq!(loss(&p, &p).unwrap().l_overall, 0.0);
    }
}

#[test]
fn two_by_two_fixture() {
    let mut p = HeatmapSet::zeros(2, 2);
    let t = HeatmapSet::zeros(2, 2);
    p.quality[(0, 0)] = 1.0; // 1/4
    p.cos2[(0, 1)] = 0.5; // 0.25/4
    p.sin2[(1, 0)] = -2.0; // 4/4
    p.width[(1, 1)] = 0.25; // 0.0625/4
    let l = loss(&p, &t).unwrap();
    assert!((l.l_center - 0.25).abs() < 1e-12);
    assert!((l.l_cos - 0.0625).abs() < 1e-12);
    assert!((l.l_sin - 1.0).abs() < 1e-12);
    assert!((l.l_width - 0.015625).abs() < 1e-12);
    assert!((l.l_overall - 1.328125).abs() < 1e-12);
}

#[test]
fn file_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps.bin");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let maps = random_maps(&mut rng, 7, 11);
    save_heatmaps(&path, &maps, 120.0).unwrap();
    let (back, ws) = load_heatmaps(&path).unwrap();
    assert_eq!(ws, 120.0);
    assert_eq!(back, maps);
}

#[test]
fn mismatched_shapes_are_rejected() {
    assert!(loss(&HeatmapSet::zeros(2, 2), &HeatmapSet::zeros(2, 3)).is_err());
}

proptest! {
    #[test]
    fn encoded_planes_stay_in_range(x in 0.0..50.0f64, y in 0.0..40.0f64, t in -PI..PI, o in 1.0..400.0f64, j in 1.0..30.0f64) {
        let g = GraspPose::new(x, y, t, o, j).unwrap();
        let m = encode(&[g], (40, 50), 150.0).unwrap();
        prop_assert!(m.quality.iter().all(|v| *v == 0.0 || *v == 1.0));
        prop_assert!(m.width.iter().all(|v| (0.0..=1.0).contains(v)));
        for (c, s) in m.cos2.iter().zip(m.sin2.iter()) {
            prop_assert!(((c * c + s * s) - 1.0).abs() < 1e-5 || (*c == 0.0 && *s == 0.0));
        }
    }
}
