//! Dataset items, the crop/scale preprocessing protocol, patch sampling and
//! a synthetic generator.

mod io;
pub mod resample;
mod sampler;
pub mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use io::{
    load_isbi, parse_landmark_file, read_image, write_image_png, write_landmark_file, DatasetLayout,
    ManifestRow,
};
pub use sampler::{sample_patch, PatchSample};
pub use synth::{synth_generate, synth_scenes, write_dataset, Scene, SynthConfig};

use crate::codec::{expect_frame, rescale_landmarks, Frame, LandmarkSet, Point, PointStatus};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test1,
    Test2,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test1 => "test1",
            Split::Test2 => "test2",
        })
    }
}

impl FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test1" => Ok(Split::Test1),
            "test2" => Ok(Split::Test2),
            _ => Err(invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// Challenge split by numeric image id: 1-150 train, 151-300 test1, 301-400 test2.
pub fn isbi_split(id: &str) -> Split {
    match id.trim_start_matches('0').parse::<u32>() {
        Ok(n) if n > 300 => Split::Test2,
        Ok(n) if n > 150 => Split::Test1,
        _ => Split::Train,
    }
}

/// Which annotation set serves as ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruth {
    /// Mean of all annotators (challenge protocol).
    #[default]
    Average,
    /// First annotator set, the senior doctor in the default layout
    /// (cross-validation protocol).
    Senior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    /// `[1, H, W]` grayscale in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<LandmarkSet>,
    pub split: Split,
    pub frame: Frame,
    /// Landmarks that fell outside the crop during preprocessing.
    pub out_of_crop: Vec<usize>,
}

impl Item {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn ground_truth(&self, mode: GroundTruth) -> Result<LandmarkSet> {
        match mode {
            GroundTruth::Senior => self
                .annotations
                .first()
                .cloned()
                .ok_or_else(|| invalid(format!("item {} has no annotations", self.id))),
            GroundTruth::Average => average_annotations(&self.annotations),
        }
    }
}

/// Pointwise mean of annotation sets; a point is valid only if every set has it.
pub fn average_annotations(sets: &[LandmarkSet]) -> Result<LandmarkSet> {
    let first = sets.first().ok_or_else(|| invalid("no annotation sets to average"))?;
    if sets.iter().any(|s| s.len() != first.len() || s.frame() != first.frame()) {
        return Err(invalid("annotation sets disagree on landmark count or frame"));
    }
    let n = sets.len() as f64;
    let mut points = Vec::with_capacity(first.len());
    let mut status = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let (mut sx, mut sy) = (0.0, 0.0);
        for s in sets {
            sx += s.point(i).x;
            sy += s.point(i).y;
        }
        points.push(Point::new(sx / n, sy / n));
        let ok = sets.iter().all(|s| s.is_valid(i));
        status.push(if ok { PointStatus::Valid } else { PointStatus::Invalid });
    }
    LandmarkSet::with_status(points, status, first.frame())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CephDataset {
    pub items: Vec<Item>,
    /// Millimetres per pixel in the original frame.
    pub pixel_spacing: f64,
    pub num_landmarks: usize,
}

impl CephDataset {
    /// Checks the dataset invariants: one resolution, at least one annotation
    /// set per item with the right landmark count.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.items.first() else {
            return Ok(());
        };
        let dims = (first.height(), first.width());
        for it in &self.items {
            if (it.height(), it.width()) != dims {
                return Err(invalid(format!(
                    "item {} is {}x{}, dataset resolution is {}x{}",
                    it.id,
                    it.height(),
                    it.width(),
                    dims.0,
                    dims.1
                )));
            }
            if it.annotations.is_empty() {
                return Err(invalid(format!("item {} has no annotations", it.id)));
            }
            if it.annotations.iter().any(|a| a.len() != self.num_landmarks) {
                return Err(invalid(format!("item {} does not have {} landmarks", it.id, self.num_landmarks)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> CephDataset {
        self.filter(|it| it.split == split)
    }

    pub fn filter(&self, keep: impl Fn(&Item) -> bool) -> CephDataset {
        CephDataset {
            items: self.items.iter().filter(|it| keep(it)).cloned().collect(),
            pixel_spacing: self.pixel_spacing,
            num_landmarks: self.num_landmarks,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Crop and scale constants of the preprocessing protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSpec {
    /// Rows removed from the top of the raw image.
    pub crop_top: usize,
    pub global_scale: f64,
    pub local_scale: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self { crop_top: 465, global_scale: 0.15, local_scale: 0.5 }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("global_scale", self.global_scale), ("local_scale", self.local_scale)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("preprocess.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Removes the top `crop_top` rows, keeping a square of side `width`, and
/// shifts landmark y coordinates accordingly. Landmarks leaving the crop are
/// recorded in [`Item::out_of_crop`] and keep their (off-canvas) coordinates.
pub fn preprocess(item: &Item, spec: &PreprocessSpec) -> Result<Item> {
    expect_frame(Frame::Raw, item.frame)?;
    let (h, w) = (item.height(), item.width());
    if h < spec.crop_top + w {
        return Err(invalid(format!(
            "item {}: {h}x{w} image cannot yield a {w}x{w} square after removing {} rows",
            item.id, spec.crop_top
        )));
    }
    let image = item.image.crop_chw(spec.crop_top, 0, w, w)?;
    let dy = -(spec.crop_top as f64);
    let annotations: Vec<LandmarkSet> =
        item.annotations.iter().map(|a| a.translate(0.0, dy, Frame::Original)).collect();
    let mut out_of_crop = Vec::new();
    for i in 0..item.annotations.first().map_or(0, |a| a.len()) {
        if annotations.iter().any(|a| {
            let p = a.point(i);
            p.y < 0.0 || p.y > (w - 1) as f64 || p.x < 0.0 || p.x > (w - 1) as f64
        }) {
            out_of_crop.push(i);
        }
    }
    Ok(Item {
        id: item.id.clone(),
        image,
        annotations,
        split: item.split,
        frame: Frame::Original,
        out_of_crop,
    })
}

/// Resamples the image by area averaging to `round(dim * factor)` and scales
/// the coordinates by `factor`.
pub fn scale_item(item: &Item, factor: f64, target: Frame) -> Result<Item> {
    expect_frame(Frame::Original, item.frame)?;
    if !matches!(target, Frame::GlobalScaled | Frame::LocalScaled) {
        return Err(invalid(format!("cannot scale into frame {target}")));
    }
    let (h, w) = (resample::scaled_dim(item.height(), factor), resample::scaled_dim(item.width(), factor));
    let image = resample::resize_area(&item.image, h, w)?;
    let annotations = item
        .annotations
        .iter()
        .map(|a| rescale_landmarks(a, factor, target))
        .collect::<Result<_>>()?;
    Ok(Item {
        id: item.id.clone(),
        image,
        annotations,
        split: item.split,
        frame: target,
        out_of_crop: item.out_of_crop.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_item(h: usize, w: usize, pts: &[(f64, f64)]) -> Item {
        let l = LandmarkSet::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect(), Frame::Raw);
        Item {
            id: "001".into(),
            image: Tensor::from_fn(&[1, h, w], |i| (i % 7) as f32 / 7.0),
            annotations: vec![l],
            split: Split::Train,
            frame: Frame::Raw,
            out_of_crop: vec![],
        }
    }

    #[test]
    fn crop_shifts_y_and_flags_outside() {
        let it = raw_item(2400, 1935, &[(1000.0, 1465.0), (1000.0, 400.0)]);
        let p = preprocess(&it, &PreprocessSpec::default()).unwrap();
        assert_eq!(p.image.shape(), &[1, 1935, 1935]);
        assert_eq!(p.annotations[0].point(0), Point::new(1000.0, 1000.0));
        assert_eq!(p.annotations[0].point(1), Point::new(1000.0, -65.0));
        assert_eq!(p.out_of_crop, vec![1]);
        // row 465 of the raw image is row 0 of the crop
        assert_eq!(p.image.at(&[0, 0, 5]), it.image.at(&[0, 465, 5]));
    }

    #[test]
    fn stages_reject_reapplication() {
        let it = raw_item(40, 30, &[(3.0, 20.0)]);
        let spec = PreprocessSpec { crop_top: 10, ..Default::default() };
        let p = preprocess(&it, &spec).unwrap();
        assert!(preprocess(&p, &spec).is_err());
        let s = scale_item(&p, 0.5, Frame::LocalScaled).unwrap();
        assert_eq!(s.image.shape(), &[1, 15, 15]);
        assert_eq!(s.annotations[0].point(0), Point::new(1.5, 5.0));
        assert!(scale_item(&s, 0.5, Frame::LocalScaled).is_err());
    }

    #[test]
    fn averaging_examples() {
        let a = LandmarkSet::new(vec![Point::new(100.0, 200.0)], Frame::Raw);
        let b = LandmarkSet::new(vec![Point::new(110.0, 210.0)], Frame::Raw);
        let m = average_annotations(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.point(0), Point::new(105.0, 205.0));
        assert_eq!(average_annotations(&[b, a]).unwrap(), m);
    }

    #[test]
    fn challenge_split_ranges() {
        assert_eq!(isbi_split("001"), Split::Train);
        assert_eq!(isbi_split("150"), Split::Train);
        assert_eq!(isbi_split("151"), Split::Test1);
        assert_eq!(isbi_split("300"), Split::Test1);
        assert_eq!(isbi_split("301"), Split::Test2);
        assert_eq!(isbi_split("400"), Split::Test2);
    }
}
