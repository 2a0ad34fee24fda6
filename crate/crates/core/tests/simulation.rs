use refinery_core::sim::{
    generate_corpus, oracle_predict, oracle_predict_round, recovery, run_closed_loop, scripted_operator, Corruption,
    LoopConfig,
};
use refinery_core::triage::{Candidate, QueueStatus, ReviewQueueItem};
use refinery_core::{iou, max_iou, GraspPose, Verdict};

fn item(scene_id: &str, candidate: Option<GraspPose>) -> ReviewQueueItem {
    ReviewQueueItem {
        item_id: 1,
        iteration: 1,
        image_id: scene_id.into(),
        candidate: candidate.map(|pose| Candidate {
            pose,
            prediction_id: "c".into(),
        }),
        best_iou: Some(0.0),
        gt_snapshot: Vec::new(),
        status: QueueStatus::Pending,
        lease: None,
    }
}

#[test]
fn corrupted_labels_miss_every_hidden_label() {
    for s in generate_corpus(100, 0.0, 0.5, 12).unwrap() {
        if s.corruption != Corruption::LabelsCorrupted {
            continue;
        }
        for p in &s.published_labels {
            for c in &s.complete_labels {
                assert!(iou(&p.rectangle(), &c.rectangle()) < 0.2);
            }
        }
    }
}

#[test]
fn dropped_cluster_prediction_is_a_false_negative() {
    let corpus = generate_corpus(40, 1.0, 0.0, 21).unwrap();
    let mut seen = 0;
    for s in &corpus {
        for round in 0..2 {
            let p = oracle_predict_round(s, 0.0, 3, round)[0].pose;
            let (vs_published, _) = max_iou(&p, &s.published_labels).unwrap();
            let (vs_complete, _) = max_iou(&p, &s.complete_labels).unwrap();
            assert!((vs_complete - 1.0).abs() < 1e-9);
            if vs_published < 0.2 {
                seen += 1;
                let d = scripted_operator(&item(&s.image_id, Some(p)), s);
                assert_eq!(d.verdict, Verdict::FnMissingLabel);
            }
        }
    }
    // two rounds visit both clusters, so every scene shows its gap once
    assert_eq!(seen, corpus.len());
}

#[test]
fn operator_verdicts_follow_the_hidden_truth() {
    let corpus = generate_corpus(30, 0.4, 0.2, 8).unwrap();
    let far = GraspPose::new(1.0, 1.0, 0.0, 5.0, 2.0).unwrap();
    for s in &corpus {
        let with_far = scripted_operator(&item(&s.image_id, Some(far)), s).verdict;
        let without = scripted_operator(&item(&s.image_id, None), s).verdict;
        match s.corruption {
            Corruption::LabelsCorrupted => {
                assert_eq!(with_far, Verdict::FnAnnotationError);
                assert_eq!(without, Verdict::FnAnnotationError);
            }
            _ => {
                assert_eq!(with_far, Verdict::TrueNegative);
                assert_eq!(without, Verdict::TrueNegative);
            }
        }
    }
}

#[test]
fn more_noise_means_worse_predictions() {
    let corpus = generate_corpus(100, 0.0, 0.0, 31).unwrap();
    let mean_iou = |noise: f64| {
        let total: f64 = corpus
            .iter()
            .map(|s| {
                max_iou(&oracle_predict(s, noise, 5)[0].pose, &s.complete_labels)
                    .unwrap()
                    .0
            })
            .sum();
        total / corpus.len() as f64
    };
    let levels = [0.0, 1.0, 3.0, 6.0, 12.0];
    let means: Vec<f64> = levels.iter().map(|&n| mean_iou(n)).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
    let conf = |noise: f64| oracle_predict(&corpus[0], noise, 5)[0].confidence;
    assert_eq!(conf(0.0), 1.0);
    assert!(conf(8.0) < 1.0);
}

#[test]
fn without_corruption_every_flag_is_a_dropped_scene() {
    let corpus = generate_corpus(120, 0.3, 0.0, 17).unwrap();
    let out = run_closed_loop(&corpus, &LoopConfig::new(3, 0.0, 17)).unwrap();
    for kinds in &out.flagged_kinds {
        assert!(kinds.iter().all(|k| *k == Corruption::LabelsDropped));
    }
    assert!(out.stats.rows.iter().all(|r| r.tn_count == 0));
}

#[test]
fn loop_is_byte_deterministic() {
    let corpus = generate_corpus(60, 0.3, 0.05, 2).unwrap();
    let a = run_closed_loop(&corpus, &LoopConfig::new(3, 1.5, 9)).unwrap();
    let b = run_closed_loop(&corpus, &LoopConfig::new(3, 1.5, 9)).unwrap();
    assert_eq!(a.ledger.to_ndjson(), b.ledger.to_ndjson());
    assert_eq!(a.final_version.manifest().digest, b.final_version.manifest().digest);
    assert_eq!(a.stats.to_csv(), b.stats.to_csv());
}

#[test]
fn recovery_and_removal_at_zero_noise() {
    let corpus = generate_corpus(200, 0.3, 0.05, 7).unwrap();
    let out = run_closed_loop(&corpus, &LoopConfig::new(5, 0.0, 7)).unwrap();
    let r = recovery(&corpus, &out.final_version, 0.25);
    assert_eq!(r.corrupted_scenes, 10);
    assert_eq!(r.corrupted_removed, 10);
    assert_eq!(r.wrongly_removed, 0);
    assert!(r.coverage >= 0.95, "{r:?}");
    assert_eq!(out.stats.rows.len(), 5);
    assert!(out
        .stats
        .rows
        .iter()
        .all(|row| row.fn_proportion.is_none_or(|p| (0.0..=1.0).contains(&p))));
}

#[test]
fn noise_produces_true_negatives() {
    let corpus = generate_corpus(150, 0.3, 0.05, 4).unwrap();
    let out = run_closed_loop(&corpus, &LoopConfig::new(3, 12.0, 4)).unwrap();
    let tn: usize = out.stats.rows.iter().map(|r| r.tn_count).sum();
    let fns: usize = out.stats.rows.iter().map(|r| r.fn_count).sum();
    assert!(tn > 0 && fns > 0, "tn {tn} fn {fns}");
}
