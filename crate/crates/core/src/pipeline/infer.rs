use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::regions::{merge_patches, propose_regions, PatchPrediction};
use super::{predict_padded, StageConfig};
use crate::codec::{decode_coarse, decode_fine, expect_frame, rescale_landmarks, Frame, HeatmapStack, LandmarkSet, Point, PointStatus};
use crate::dataset::resample::{resize_area, scaled_dim};
use crate::dataset::{Item, PreprocessSpec};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::unet::UNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferMode {
    /// Coarse detection, five expansive patches per landmark, merge, refine.
    #[default]
    Full,
    /// Coarse argmax only, rescaled to the original frame.
    Stage1,
    /// One centred patch per landmark.
    NoExpand,
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferMode::Full => "full",
            InferMode::Stage1 => "stage1",
            InferMode::NoExpand => "no-expand",
        })
    }
}

impl FromStr for InferMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(InferMode::Full),
            "stage1" => Ok(InferMode::Stage1),
            "no-expand" => Ok(InferMode::NoExpand),
            _ => Err(invalid(format!("unknown inference mode `{s}` (full, stage1, no-expand)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferOptions {
    pub mode: InferMode,
    /// Merge every channel of every patch instead of the anchor channel only.
    pub merge_all_channels: bool,
    /// Keep the global and merged heatmaps in the result.
    pub keep_heatmaps: bool,
}

#[derive(Clone, Debug)]
pub struct Inference<T> {
    /// Final landmarks in the raw (uncropped) frame.
    pub landmarks: LandmarkSet,
    /// Coarse detections in the global frame.
    pub coarse: LandmarkSet,
    pub global_heatmaps: Option<HeatmapStack<T>>,
    pub merged_heatmaps: Option<HeatmapStack<T>>,
    pub warnings: Vec<String>,
}

fn to_raw(l: &LandmarkSet, factor: f64, spec: &PreprocessSpec) -> Result<LandmarkSet> {
    let orig = rescale_landmarks(l, 1.0 / factor, Frame::Original)?;
    Ok(orig.translate(0.0, spec.crop_top as f64, Frame::Raw))
}

/// Runs the detector on one cropped (original-frame) item.
pub fn infer<T: Scalar>(
    item: &Item,
    global: &UNet<T>,
    local: &UNet<T>,
    global_cfg: &StageConfig,
    local_cfg: &StageConfig,
    spec: &PreprocessSpec,
    opts: &InferOptions,
) -> Result<Inference<T>> {
    expect_frame(Frame::Original, item.frame)?;
    let (h, w) = (item.height(), item.width());
    let (gs, ls) = (global_cfg.scale_factor, local_cfg.scale_factor);
    let k = global.config().out_channels - 1;
    if local.config().out_channels != k + 1 {
        return Err(invalid("global and local models disagree on the landmark count"));
    }
    let mut warnings = Vec::new();

    let g_img = resize_area(&item.image, scaled_dim(h, gs), scaled_dim(w, gs))?.cast::<T>();
    let h_g = predict_padded(global, &g_img, Frame::GlobalScaled)?;
    let coarse = decode_coarse(&h_g)?;
    let keep = |s: HeatmapStack<T>| if opts.keep_heatmaps { Some(s) } else { None };

    if opts.mode == InferMode::Stage1 {
        return Ok(Inference {
            landmarks: to_raw(&coarse, gs, spec)?,
            coarse,
            global_heatmaps: keep(h_g),
            merged_heatmaps: None,
            warnings,
        });
    }

    let (lh, lw) = (scaled_dim(h, ls), scaled_dim(w, ls));
    let l_img = resize_area(&item.image, lh, lw)?.cast::<T>();
    let mut guide = rescale_landmarks(&coarse, ls / gs, Frame::LocalScaled)?;
    let center = Point::new((lw - 1) as f64 / 2.0, (lh - 1) as f64 / 2.0);
    let mut fallback = vec![false; k];
    for (i, status) in coarse.status().iter().enumerate() {
        match status {
            PointStatus::Invalid => {
                warnings.push(format!("item {}: landmark {i} has no coarse detection; searching the image centre", item.id));
                fallback[i] = true;
            }
            PointStatus::LowConfidence => {
                warnings.push(format!("item {}: landmark {i} coarse heatmap is flat", item.id));
            }
            PointStatus::Valid => {}
        }
    }
    if fallback.iter().any(|&f| f) {
        let pts = guide.points().iter().zip(&fallback).map(|(&p, &f)| if f { center } else { p }).collect();
        guide = LandmarkSet::new(pts, Frame::LocalScaled);
    }
    let p = local_cfg.infer_patch;
    let regions = match opts.mode {
        InferMode::Full => propose_regions(&guide, p, local_cfg.expand_epsilon, lh, lw)?
            .into_iter()
            .map(|r| r.to_vec())
            .collect::<Vec<_>>(),
        _ => propose_regions(&guide, p, 1.0, lh, lw)?.into_iter().map(|r| vec![r[4]]).collect(),
    };

    let mut cache: BTreeMap<(usize, usize), HeatmapStack<T>> = BTreeMap::new();
    let mut patches = Vec::with_capacity(regions.len() * 5);
    for (anchor, rs) in regions.iter().enumerate() {
        for &r in rs {
            let key = (r.top, r.left);
            if let Entry::Vacant(slot) = cache.entry(key) {
                let crop = l_img.crop_chw(r.top, r.left, r.side, r.side)?;
                slot.insert(predict_padded(local, &crop, Frame::PatchLocal)?);
            }
            patches.push(PatchPrediction { stack: cache[&key].clone(), region: r, anchor });
        }
    }
    let h_m = merge_patches(&patches, lh, lw, k, opts.merge_all_channels)?;
    let mut fine = decode_fine(&h_m)?;
    for (i, &f) in fallback.iter().enumerate() {
        if f && fine.is_valid(i) {
            fine.set_status(i, PointStatus::LowConfidence);
        }
    }
    Ok(Inference {
        landmarks: to_raw(&fine, ls, spec)?,
        coarse,
        global_heatmaps: keep(h_g),
        merged_heatmaps: keep(h_m),
        warnings,
    })
}
