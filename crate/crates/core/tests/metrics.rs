mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use obbtext_core::codec::canonical_cmp;
use obbtext_core::geometry::iou;
use obbtext_core::metrics::{
    evaluate, f1_scores, map_nc, match_class, sweep_thresholds, Interpolation, MatchLabel, MetricsError,
};
use obbtext_core::{Detection, EvalConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_force_ap, detector_fixture, rotated_rect, DetectorModel, Fixture};

fn small_model() -> DetectorModel {
    DetectorModel {
        n_images: 12,
        n_classes: 4,
        objects_per_image: 3..9,
        fps_per_image: 3,
        duplicate_rate: 0.15,
        confusion_rate: 0.1,
        ..DetectorModel::default()
    }
}

/// Fixture with a few ground truths marked difficult.
fn fixture(seed: u64) -> Fixture {
    let mut f = detector_fixture(&small_model(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff);
    for g in &mut f.gts {
        g.difficult = rng.random_bool(0.1);
    }
    f
}

fn strip(preds: &[Detection]) -> Vec<Detection> {
    preds
        .iter()
        .cloned()
        .map(|mut d| {
            d.confidence = None;
            d
        })
        .collect()
}

/// Per-class labels from a single pass over all predictions in descending
/// `score` order (ties by canonical order), matching each against every
/// same-image, same-class ground truth.
fn naive_labels(
    preds: &[Detection],
    gts: &[Detection],
    score: impl Fn(&Detection) -> f64,
    thr: f64,
) -> BTreeMap<String, (Vec<MatchLabel>, usize)> {
    let mut out: BTreeMap<String, (Vec<MatchLabel>, usize)> = BTreeMap::new();
    for g in gts {
        let e = out.entry(g.category.clone()).or_default();
        e.1 += usize::from(!g.difficult);
    }
    let mut order: Vec<&Detection> = preds.iter().collect();
    order.sort_by(|a, b| canonical_cmp(a, b));
    order.sort_by(|a, b| score(b).total_cmp(&score(a)));
    let mut used = vec![false; gts.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.image_id != p.image_id || g.category != p.category || (used[j] && !g.difficult) {
                continue;
            }
            let v = iou(&p.quad, &g.quad);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        let label = match best {
            Some((j, v)) if v >= thr => {
                if gts[j].difficult {
                    MatchLabel::Ignored
                } else {
                    used[j] = true;
                    MatchLabel::Tp
                }
            }
            _ => MatchLabel::Fp,
        };
        out.entry(p.category.clone()).or_default().0.push(label);
    }
    out
}

fn serial(config: &EvalConfig) -> EvalConfig {
    EvalConfig {
        parallel: false,
        ..config.clone()
    }
}

#[test]
fn constant_run_matches_naive_evaluation() {
    for interpolation in [Interpolation::Voc11, Interpolation::AllPoints] {
        for seed in 0..5 {
            let f = fixture(seed);
            let config = EvalConfig {
                interpolation,
                ..EvalConfig::default()
            };
            let report = map_nc(&f.preds, &f.gts, &config).unwrap();
            let constant = report.runs.last().unwrap();
            let naive = naive_labels(&f.preds, &f.gts, |_| 1.0, 0.5);
            let expected: BTreeMap<String, f64> = naive
                .iter()
                .filter_map(|(k, (labels, n))| brute_force_ap(labels, *n, interpolation).map(|ap| (k.clone(), ap)))
                .collect();
            assert_eq!(
                constant.per_class_ap.keys().collect::<Vec<_>>(),
                expected.keys().collect::<Vec<_>>()
            );
            for (k, ap) in &expected {
                assert_abs_diff_eq!(constant.per_class_ap[k], *ap, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn f1_counts_match_naive_evaluation() {
    for seed in 0..5 {
        let f = fixture(seed);
        let report = f1_scores(&f.preds, &f.gts, 0.5);
        let naive = naive_labels(&f.preds, &f.gts, |d| d.confidence.unwrap(), 0.5);
        for (k, (labels, n)) in naive {
            let c = report.per_class[&k].counts;
            let count = |l| labels.iter().filter(|x| **x == l).count();
            assert_eq!(
                (c.tp, c.fp, c.ignored, c.n_gt),
                (
                    count(MatchLabel::Tp),
                    count(MatchLabel::Fp),
                    count(MatchLabel::Ignored),
                    n
                )
            );
            assert_eq!(c.fn_, n - c.tp);
            let (p, r) = (c.tp as f64 / (c.tp + c.fp).max(1) as f64, c.tp as f64 / n.max(1) as f64);
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            assert_abs_diff_eq!(report.per_class[&k].f1, f1, epsilon = 1e-12);
        }
    }
}

#[test]
fn match_class_agrees_with_naive_matcher() {
    let f = fixture(11);
    let image = &f.gts[0].image_id;
    let cat = &f.gts[0].category;
    let gts: Vec<Detection> = f
        .gts
        .iter()
        .filter(|g| &g.image_id == image && &g.category == cat)
        .cloned()
        .collect();
    let mut preds: Vec<Detection> = f
        .preds
        .iter()
        .filter(|p| &p.image_id == image && &p.category == cat)
        .cloned()
        .collect();
    preds.sort_by(canonical_cmp);
    preds.sort_by(|a, b| b.confidence.unwrap().total_cmp(&a.confidence.unwrap()));
    let got = match_class(&preds, &gts, 0.5);
    let naive = naive_labels(&preds, &gts, |d| d.confidence.unwrap(), 0.5);
    assert_eq!(got.labels, naive[cat].0);
    assert_eq!(
        got.gt_matched.iter().filter(|m| **m).count(),
        got.labels.iter().filter(|l| **l == MatchLabel::Tp).count()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn input_order_does_not_matter(seed in 0u64..1000) {
        let f = fixture(seed);
        let config = EvalConfig::default();
        let base = evaluate(&f.preds, &f.gts, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut preds, mut gts) = (f.preds.clone(), f.gts.clone());
        preds.shuffle(&mut rng);
        gts.shuffle(&mut rng);
        prop_assert_eq!(evaluate(&preds, &gts, &config).unwrap(), base);
    }

    #[test]
    fn duplicates_never_help(seed in 0u64..1000) {
        let f = fixture(seed);
        let preds = strip(&f.preds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dup = preds.clone();
        dup.extend(preds.iter().filter(|_| rng.random_bool(0.3)).cloned());
        for interpolation in [Interpolation::Voc11, Interpolation::AllPoints] {
            let config = EvalConfig { interpolation, ..EvalConfig::default() };
            let a = map_nc(&preds, &f.gts, &config).unwrap();
            let b = map_nc(&dup, &f.gts, &config).unwrap();
            prop_assert!(b.constant_value().unwrap() <= a.constant_value().unwrap() + 1e-12);
        }
        let (a, b) = (f1_scores(&preds, &f.gts, 0.5), f1_scores(&dup, &f.gts, 0.5));
        for (k, c) in &a.per_class {
            prop_assert!(b.per_class[k].f1 <= c.f1 + 1e-12);
        }
    }

    #[test]
    fn sweep_point_equals_filtered_evaluation(seed in 0u64..1000, idx in 0usize..19) {
        let f = fixture(seed);
        let config = EvalConfig { n_random_runs: 4, ..EvalConfig::default() };
        let sweep = sweep_thresholds(&f.preds, &f.gts, &config).unwrap();
        let point = sweep.points[idx];
        let kept: Vec<Detection> = f.preds.iter().filter(|p| p.confidence.unwrap() >= point.threshold).cloned().collect();
        let direct = evaluate(&kept, &f.gts, &config).unwrap();
        prop_assert_eq!(point.n_predictions, kept.len());
        prop_assert_eq!(point.map_nc_mean.to_bits(), direct.map_nc_mean.to_bits());
        prop_assert_eq!(point.map_nc_std.to_bits(), direct.map_nc_std.to_bits());
        prop_assert_eq!(point.mf1.to_bits(), direct.mf1.to_bits());
    }
}

#[test]
fn best_points_dominate_the_curve() {
    let f = fixture(3);
    let sweep = sweep_thresholds(&f.preds, &f.gts, &EvalConfig::default()).unwrap();
    let (bm, bf) = (sweep.best_map_nc.unwrap(), sweep.best_mf1.unwrap());
    for p in &sweep.points {
        assert!(bm.value >= p.map_nc_mean && bf.value >= p.mf1);
    }
    assert!(sweep
        .points
        .iter()
        .any(|p| p.threshold == bm.threshold && p.map_nc_mean == bm.value));
    assert!(sweep
        .points
        .iter()
        .any(|p| p.threshold == bf.threshold && p.mf1 == bf.value));
}

#[test]
fn parallel_and_serial_agree() {
    let f = fixture(5);
    let config = EvalConfig::default();
    assert_eq!(
        evaluate(&f.preds, &f.gts, &config).unwrap(),
        evaluate(&f.preds, &f.gts, &serial(&config)).unwrap()
    );
    assert_eq!(
        sweep_thresholds(&f.preds, &f.gts, &config).unwrap(),
        sweep_thresholds(&f.preds, &f.gts, &serial(&config)).unwrap()
    );
}

#[test]
fn seeds_drive_random_runs_only() {
    let f = fixture(8);
    let preds = strip(&f.preds);
    let a = map_nc(&preds, &f.gts, &EvalConfig::default()).unwrap();
    let b = map_nc(
        &preds,
        &f.gts,
        &EvalConfig {
            base_seed: 99,
            ..EvalConfig::default()
        },
    )
    .unwrap();
    assert_eq!(a, map_nc(&preds, &f.gts, &EvalConfig::default()).unwrap());
    assert_ne!(a.random_stats(), b.random_stats());
    assert_eq!(
        a.constant_value().unwrap().to_bits(),
        b.constant_value().unwrap().to_bits()
    );
    assert_eq!(a.runs.len(), 11);
    assert_eq!(
        b.runs.iter().filter_map(|r| r.seed).collect::<Vec<_>>(),
        (99..109).collect::<Vec<_>>()
    );
}

#[test]
fn confidences_are_ignored_by_map_nc() {
    let f = fixture(9);
    let config = EvalConfig::default();
    assert_eq!(
        map_nc(&f.preds, &f.gts, &config).unwrap(),
        map_nc(&strip(&f.preds), &f.gts, &config).unwrap()
    );
}

#[test]
fn perfect_and_empty_predictions() {
    let f = fixture(2);
    let gts: Vec<Detection> = f.gts.iter().cloned().map(|g| g.with_difficult(false)).collect();
    let report = evaluate(&gts, &gts, &EvalConfig::default()).unwrap();
    assert_eq!((report.map_nc_mean, report.map_nc_std, report.mf1), (1.0, 0.0, 1.0));
    let report = evaluate(&[], &gts, &EvalConfig::default()).unwrap();
    assert_eq!((report.map_nc_mean, report.mf1), (0.0, 0.0));
}

#[test]
fn iou_threshold_is_inclusive() {
    let gt = Detection::new("a", "plane", rotated_rect(50.0, 50.0, 100.0, 100.0, 0.0));
    let pred = Detection::new("a", "plane", rotated_rect(100.0, 50.0, 100.0, 100.0, 0.0));
    let at = |thr: f64| f1_scores(std::slice::from_ref(&pred), std::slice::from_ref(&gt), thr).mf1;
    let overlap = iou(&pred.quad, &gt.quad);
    assert_eq!(at(overlap), 1.0);
    assert_eq!(at(overlap + 1e-9), 0.0);
}

#[test]
fn difficult_ground_truth_neither_rewards_nor_penalizes() {
    let hard = Detection::new("a", "ship", rotated_rect(50.0, 50.0, 40.0, 20.0, 0.3)).with_difficult(true);
    let easy = Detection::new("a", "ship", rotated_rect(300.0, 300.0, 40.0, 20.0, 0.0));
    let gts = [hard.clone(), easy.clone()];
    let report = evaluate(&[hard.clone(), hard, easy], &gts, &EvalConfig::default()).unwrap();
    let c = report.counts["ship"];
    assert_eq!((c.tp, c.fp, c.ignored, c.n_gt), (1, 0, 2, 1));
    assert_eq!(report.map_nc_mean, 1.0);
}

#[test]
fn unmatched_classes_score_zero() {
    let gt = Detection::new("a", "plane", rotated_rect(50.0, 50.0, 40.0, 20.0, 0.0));
    let stray = Detection::new("a", "ship", rotated_rect(300.0, 300.0, 40.0, 20.0, 0.0));
    let report = evaluate(&[gt.clone(), stray], &[gt], &EvalConfig::default()).unwrap();
    assert_eq!(report.per_class_ap["plane"], 1.0);
    assert_eq!(report.per_class_ap["ship"], 0.0);
    assert_eq!(report.map_nc_mean, 0.5);
}

#[test]
fn invalid_configs_and_unscored_sweeps_fail() {
    let f = fixture(1);
    for bad in [
        EvalConfig {
            iou_threshold: 0.0,
            ..EvalConfig::default()
        },
        EvalConfig {
            n_random_runs: 0,
            ..EvalConfig::default()
        },
        EvalConfig {
            sweep_grid: vec![0.5, 0.2],
            ..EvalConfig::default()
        },
    ] {
        assert!(matches!(
            sweep_thresholds(&f.preds, &f.gts, &bad),
            Err(MetricsError::InvalidConfig(_))
        ));
    }
    assert!(matches!(
        sweep_thresholds(&strip(&f.preds), &f.gts, &EvalConfig::default()),
        Err(MetricsError::MissingConfidence(n)) if n == f.preds.len()
    ));
}
