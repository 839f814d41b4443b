//! Radial error, MRE and SDR metrics, k-fold cross-validation and CSV reports.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{LandmarkSet, Point};
use crate::dataset::{CephDataset, GroundTruth, Item};
use crate::error::{invalid, Error, Result};

pub const SDR_THRESHOLDS: [f64; 4] = [2.0, 2.5, 3.0, 4.0];

/// Per-landmark radial errors in millimetres; `None` where the prediction is
/// invalid.
pub fn radial_errors(pred: &LandmarkSet, gt: &LandmarkSet, spacing: f64) -> Result<Vec<Option<f64>>> {
    if pred.frame() != gt.frame() {
        return Err(Error::FrameMismatch { expected: gt.frame(), found: pred.frame() });
    }
    if pred.len() != gt.len() {
        return Err(invalid(format!("prediction has {} landmarks, ground truth {}", pred.len(), gt.len())));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(invalid(format!("pixel spacing must be positive, got {spacing}")));
    }
    (0..gt.len())
        .map(|i| {
            if !gt.is_valid(i) {
                return Err(invalid(format!("ground-truth landmark {i} is missing")));
            }
            Ok(pred.is_valid(i).then(|| spacing * pred.point(i).distance(gt.point(i))))
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mre_std(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(invalid("no valid radial errors to summarise"));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Percentage of landmarks with error `<= t` for each threshold; invalid
/// detections count as failures.
pub fn sdr(errors: &[Option<f64>], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(invalid("no radial errors to score"));
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = errors.iter().filter(|e| e.is_some_and(|v| v <= t)).count();
            100.0 * hits as f64 / errors.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkError {
    pub item_id: String,
    pub landmark: usize,
    pub error_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub errors: Vec<LandmarkError>,
    pub mre: f64,
    pub std: f64,
    pub thresholds: Vec<f64>,
    pub sdr: Vec<f64>,
    pub invalid: usize,
}

impl EvalReport {
    pub fn from_errors(errors: Vec<LandmarkError>, thresholds: &[f64]) -> Result<Self> {
        let all: Vec<Option<f64>> = errors.iter().map(|e| e.error_mm).collect();
        let valid: Vec<f64> = all.iter().flatten().copied().collect();
        let (mre, std) = if valid.is_empty() { (f64::NAN, f64::NAN) } else { mre_std(&valid)? };
        let sdr = sdr(&all, thresholds)?;
        Ok(Self { invalid: all.len() - valid.len(), errors, mre, std, thresholds: thresholds.to_vec(), sdr })
    }

    /// Scores `(item id, prediction, ground truth)` triples.
    pub fn evaluate<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a LandmarkSet, &'a LandmarkSet)>,
        spacing: f64,
        thresholds: &[f64],
    ) -> Result<Self> {
        let mut errors = Vec::new();
        for (id, pred, gt) in pairs {
            for (landmark, e) in radial_errors(pred, gt, spacing)?.into_iter().enumerate() {
                errors.push(LandmarkError { item_id: id.to_string(), landmark, error_mm: e });
            }
        }
        Self::from_errors(errors, thresholds)
    }

    /// SDR at threshold `t`, if `t` is one of the report's thresholds.
    pub fn sdr_at(&self, t: f64) -> Option<f64> {
        self.thresholds.iter().position(|&x| x == t).map(|i| self.sdr[i])
    }
}

fn summary_header(thresholds: &[f64]) -> Vec<String> {
    let mut h = vec!["run".to_string(), "mre_mm".into(), "std_mm".into()];
    h.extend(thresholds.iter().map(|t| format!("sdr_{t:.1}mm")));
    h.extend(["invalid".to_string(), "count".into()]);
    h
}

/// One row per labelled report: MRE, Std and the SDR columns.
pub fn write_summary_csv(path: &Path, rows: &[(&str, &EvalReport)]) -> Result<()> {
    let thresholds = rows.first().map_or(SDR_THRESHOLDS.to_vec(), |(_, r)| r.thresholds.clone());
    if rows.iter().any(|(_, r)| r.thresholds != thresholds) {
        return Err(invalid("summary rows use different SDR thresholds"));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(summary_header(&thresholds))?;
    for (label, r) in rows {
        let mut rec = vec![label.to_string(), r.mre.to_string(), r.std.to_string()];
        rec.extend(r.sdr.iter().map(|s| s.to_string()));
        rec.extend([r.invalid.to_string(), r.errors.len().to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Long-form per-landmark errors; invalid detections have an empty error.
pub fn write_errors_csv(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item_id", "landmark", "radial_error_mm"])?;
    for e in &report.errors {
        let v = e.error_mm.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([e.item_id.as_str(), &e.landmark.to_string(), &v])?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded shuffle of `0..n` cut into `folds` contiguous near-equal parts;
/// the first `n % folds` folds hold one extra item.
pub fn fold_partition(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || folds > n {
        return Err(invalid(format!("cannot split {n} items into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValReport {
    pub seed: u64,
    /// Item ids tested in each fold.
    pub folds: Vec<Vec<String>>,
    pub fold_reports: Vec<EvalReport>,
    pub pooled: EvalReport,
}

/// K-fold cross-validation scored against the senior annotation. `train`
/// receives the fold index and its training subset; `predict` must return
/// landmarks in the frame of the item's annotations.
pub fn crossval<M>(
    ds: &CephDataset,
    folds: usize,
    seed: u64,
    thresholds: &[f64],
    mut train: impl FnMut(usize, &CephDataset) -> Result<M>,
    mut predict: impl FnMut(&M, &Item) -> Result<LandmarkSet>,
) -> Result<CrossValReport> {
    let parts = fold_partition(ds.len(), folds, seed)?;
    let mut fold_ids = Vec::with_capacity(folds);
    let mut reports = Vec::with_capacity(folds);
    let mut pooled = Vec::new();
    for (f, test) in parts.iter().enumerate() {
        let mut in_test = vec![false; ds.len()];
        test.iter().for_each(|&i| in_test[i] = true);
        let train_set = CephDataset {
            items: ds.items.iter().zip(&in_test).filter(|(_, &t)| !t).map(|(it, _)| it.clone()).collect(),
            pixel_spacing: ds.pixel_spacing,
            num_landmarks: ds.num_landmarks,
        };
        let model = train(f, &train_set)?;
        let mut scored = Vec::with_capacity(test.len());
        for &i in test {
            let it = &ds.items[i];
            scored.push((it.id.clone(), predict(&model, it)?, it.ground_truth(GroundTruth::Senior)?));
        }
        let report = EvalReport::evaluate(scored.iter().map(|(id, p, g)| (id.as_str(), p, g)), ds.pixel_spacing, thresholds)?;
        pooled.extend(report.errors.iter().cloned());
        fold_ids.push(test.iter().map(|&i| ds.items[i].id.clone()).collect());
        reports.push(report);
    }
    Ok(CrossValReport {
        seed,
        folds: fold_ids,
        fold_reports: reports,
        pooled: EvalReport::from_errors(pooled, thresholds)?,
    })
}

/// Distance helper for callers holding bare points.
pub fn radial_error(pred: Point, gt: Point, spacing: f64) -> f64 {
    spacing * pred.distance(gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Frame;

    #[test]
    fn three_four_five() {
        let p = LandmarkSet::new(vec![Point::new(10.0, 10.0)], Frame::Raw);
        let g = LandmarkSet::new(vec![Point::new(13.0, 14.0)], Frame::Raw);
        assert_eq!(radial_errors(&p, &g, 0.1).unwrap(), vec![Some(0.5)]);
        assert_eq!(radial_errors(&g, &g, 0.1).unwrap(), vec![Some(0.0)]);
        let o = LandmarkSet::new(vec![Point::new(13.0, 14.0)], Frame::Original);
        assert!(matches!(radial_errors(&o, &g, 0.1), Err(Error::FrameMismatch { .. })));
    }

    #[test]
    fn summary_examples() {
        assert_eq!(mre_std(&[1.0, 2.0, 3.0]).unwrap().0, 2.0);
        assert_eq!(mre_std(&[4.5]).unwrap(), (4.5, 0.0));
        assert!(mre_std(&[]).is_err());
        let e = [Some(1.0), Some(2.1), Some(3.5), Some(0.4)];
        assert_eq!(sdr(&e, &SDR_THRESHOLDS).unwrap(), vec![50.0, 75.0, 75.0, 100.0]);
        assert_eq!(sdr(&[Some(2.0)], &[2.0]).unwrap(), vec![100.0]);
        assert_eq!(sdr(&[None, Some(0.0)], &[2.0]).unwrap(), vec![50.0]);
    }

    #[test]
    fn partition_remainder_goes_first() {
        let p = fold_partition(10, 4, 3).unwrap();
        assert_eq!(p.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(fold_partition(3, 4, 0).is_err());
    }
}
