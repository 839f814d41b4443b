use std::collections::BTreeSet;

use ceph_landmark::codec::{Frame, LandmarkSet, Point, PointStatus};
use ceph_landmark::dataset::{CephDataset, Item, Split};
use ceph_landmark::eval::{
    crossval, fold_partition, mre_std, radial_errors, sdr, write_summary_csv, EvalReport, SDR_THRESHOLDS,
};
use ceph_landmark::Tensor;
use proptest::prelude::*;

fn set(pts: &[(f64, f64)]) -> LandmarkSet {
    LandmarkSet::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect(), Frame::Raw)
}

#[test]
fn three_four_five_at_tenth_millimetre() {
    let e = radial_errors(&set(&[(3.0, 4.0)]), &set(&[(0.0, 0.0)]), 0.1).unwrap();
    assert_eq!(e, vec![Some(0.5)]);
}

#[test]
fn sdr_hand_case() {
    let errs = [1.0, 2.2, 2.9, 3.5].map(Some);
    assert_eq!(sdr(&errs, &SDR_THRESHOLDS).unwrap(), vec![25.0, 50.0, 75.0, 100.0]);
    let errs = [1.0, 2.0, 2.7, 3.9].map(Some);
    assert_eq!(sdr(&errs, &SDR_THRESHOLDS).unwrap(), vec![50.0, 50.0, 75.0, 100.0]);
    let errs = [Some(1.0), Some(2.5), Some(2.6), Some(4.0)];
    assert_eq!(sdr(&errs, &SDR_THRESHOLDS).unwrap(), vec![25.0, 50.0, 75.0, 100.0]);
}

#[test]
fn population_std() {
    let (m, s) = mre_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(m, 2.5);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    assert!(mre_std(&[]).is_err());
}

#[test]
fn invalid_predictions_fail_every_threshold() {
    let mut pred = set(&[(0.0, 0.0), (9.0, 9.0)]);
    pred.set_status(1, PointStatus::Invalid);
    let gt = set(&[(0.0, 0.0), (9.0, 9.0)]);
    let r = EvalReport::evaluate([("a", &pred, &gt)], 0.1, &SDR_THRESHOLDS).unwrap();
    assert_eq!(r.invalid, 1);
    assert_eq!(r.mre, 0.0);
    assert_eq!(r.sdr, vec![50.0; 4]);
    let other = LandmarkSet::new(vec![Point::default(); 2], Frame::Original);
    assert!(radial_errors(&other, &gt, 0.1).is_err());
}

#[test]
fn summary_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let gt = set(&[(0.0, 0.0)]);
    let r = EvalReport::evaluate([("a", &set(&[(3.0, 4.0)]), &gt)], 1.0, &SDR_THRESHOLDS).unwrap();
    let path = dir.path().join("s.csv");
    write_summary_csv(&path, &[("full", &r)]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "run,mre_mm,std_mm,sdr_2.0mm,sdr_2.5mm,sdr_3.0mm,sdr_4.0mm,invalid,count");
    assert_eq!(lines.next().unwrap(), "full,5,0,0,0,0,0,0,1");
}

#[test]
fn crossval_tests_every_id_once() {
    let items: Vec<Item> = (1..=400)
        .map(|i| Item {
            id: format!("{i:03}"),
            image: Tensor::zeros(&[1, 2, 2]),
            annotations: vec![set(&[(i as f64, 0.0)])],
            split: Split::Train,
            frame: Frame::Raw,
            out_of_crop: vec![],
        })
        .collect();
    let ds = CephDataset { items, pixel_spacing: 0.1, num_landmarks: 1 };
    let mut train_sizes = Vec::new();
    let report = crossval(
        &ds,
        4,
        17,
        &SDR_THRESHOLDS,
        |f, train| {
            train_sizes.push(train.len());
            Ok(f)
        },
        |_, it| Ok(it.annotations[0].translate(1.0, 0.0, Frame::Raw)),
    )
    .unwrap();
    assert_eq!(train_sizes, vec![300; 4]);
    let mut seen = BTreeSet::new();
    for fold in &report.folds {
        assert_eq!(fold.len(), 100);
        for id in fold {
            assert!(seen.insert(id.clone()), "{id} tested twice");
        }
    }
    assert_eq!(seen.len(), 400);
    assert_eq!(report.pooled.errors.len(), 400);
    assert!((report.pooled.mre - 0.1).abs() < 1e-12);
    assert_eq!(fold_partition(400, 4, 17).unwrap(), fold_partition(400, 4, 17).unwrap());
    assert_ne!(fold_partition(400, 4, 17).unwrap(), fold_partition(400, 4, 18).unwrap());
}

proptest! {
    #[test]
    fn sdr_is_monotone(errs in prop::collection::vec(prop::option::weighted(0.9, 0.0f64..8.0), 1..60)) {
        let t = [0.5, 1.0, 2.0, 2.5, 3.0, 4.0, 6.0];
        let s = sdr(&errs, &t).unwrap();
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.iter().all(|&v| (0.0..=100.0).contains(&v)));
    }
}
