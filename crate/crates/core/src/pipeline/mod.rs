//! The two-stage detector: global and local training, attention-guided
//! proposal regions, expansive patch inference and merging.

mod infer;
mod regions;
mod train;

use serde::{Deserialize, Serialize};

pub use infer::{infer, InferMode, InferOptions, Inference};
pub use regions::{
    centered_layout, expanded_side, expansive_layout, merge_patches, propose_regions, PatchPrediction, Region,
};
pub use train::{train_global, train_local, EpochStats, TrainedStage};

use crate::autodiff::{Graph, Var};
use crate::codec::{Frame, HeatmapStack};
use crate::dataset::resample::reflect_pad;
use crate::dataset::{preprocess, scale_item, CephDataset, PreprocessSpec};
use crate::error::{invalid, Result};
use crate::loss::LossConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::{BoundParams, UNet, UNetConfig};

/// Hyper-parameters of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Resampling factor from the cropped original frame.
    pub scale_factor: f64,
    /// Gaussian support diameter in this stage's frame, pixels.
    pub distribution_width: f64,
    /// Training patch side; 0 trains on whole images.
    pub train_patch: usize,
    /// Inference patch side (local stage).
    pub infer_patch: usize,
    pub expand_epsilon: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Patches drawn per local epoch; 0 draws one per training item.
    pub samples_per_epoch: usize,
    pub unet: UNetConfig,
    pub loss: LossConfig,
}

impl StageConfig {
    pub fn global() -> Self {
        Self {
            scale_factor: 0.15,
            distribution_width: 40.0,
            train_patch: 0,
            infer_patch: 0,
            expand_epsilon: 1.8,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 1,
            samples_per_epoch: 0,
            unet: UNetConfig::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn local() -> Self {
        Self {
            scale_factor: 0.5,
            distribution_width: 30.0,
            train_patch: 100,
            infer_patch: 150,
            ..Self::global()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor > 0.0 && self.scale_factor.is_finite()) {
            return Err(invalid(format!("scale_factor must be positive, got {}", self.scale_factor)));
        }
        if !(self.distribution_width > 0.0 && self.distribution_width.is_finite()) {
            return Err(invalid(format!("distribution_width must be positive, got {}", self.distribution_width)));
        }
        if !(self.expand_epsilon > 1.0 && self.expand_epsilon < 2.0) {
            return Err(invalid(format!("expand_epsilon must lie in (1, 2), got {}", self.expand_epsilon)));
        }
        if self.train_patch > 0 && self.infer_patch < self.train_patch {
            return Err(invalid(format!(
                "infer_patch ({}) must be at least train_patch ({})",
                self.infer_patch, self.train_patch
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.unet.validate()?;
        self.loss.validate()
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::global()
    }
}

/// Crops every raw item and rescales it into `frame` by `factor`.
pub fn prepare_dataset(ds: &CephDataset, spec: &PreprocessSpec, factor: f64, frame: Frame) -> Result<CephDataset> {
    let items = ds
        .items
        .iter()
        .map(|it| {
            let cropped = if it.frame == Frame::Raw { preprocess(it, spec)? } else { it.clone() };
            scale_item(&cropped, factor, frame)
        })
        .collect::<Result<_>>()?;
    Ok(CephDataset { items, pixel_spacing: ds.pixel_spacing, num_landmarks: ds.num_landmarks })
}

/// Records a forward pass on `image` reflect-padded to the network's size
/// multiple; the output is cropped back to the input size.
pub fn forward_padded<T: Scalar>(
    model: &UNet<T>,
    graph: &mut Graph<T>,
    bound: &BoundParams,
    image: &Tensor<T>,
) -> Result<Var> {
    let (_, h, w) = image.chw()?;
    let m = model.config().size_multiple();
    let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
    if ph == 0 && pw == 0 {
        let x = graph.constant(image.clone());
        return model.forward(graph, bound, x);
    }
    let x = graph.constant(reflect_pad(image, ph, pw)?);
    let y = model.forward(graph, bound, x)?;
    graph.crop2d(y, 0, 0, h, w)
}

/// Gradient-free prediction on an arbitrary-size image.
pub fn predict_padded<T: Scalar>(model: &UNet<T>, image: &Tensor<T>, frame: Frame) -> Result<HeatmapStack<T>> {
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let y = forward_padded(model, &mut g, &bound, image)?;
    HeatmapStack::new(g.value(y).clone(), frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_constants() {
        let g = StageConfig::global();
        let l = StageConfig::local();
        assert_eq!((g.scale_factor, g.distribution_width), (0.15, 40.0));
        assert_eq!((l.scale_factor, l.distribution_width), (0.5, 30.0));
        assert_eq!((l.train_patch, l.infer_patch, l.expand_epsilon), (100, 150, 1.8));
        assert!(g.validate().is_ok() && l.validate().is_ok());
        assert!(StageConfig { expand_epsilon: 2.0, ..l }.validate().is_err());
        assert!(StageConfig { infer_patch: 90, ..l }.validate().is_err());
    }

    #[test]
    fn padded_prediction_keeps_size() {
        let m = UNet::<f64>::new(UNetConfig::desk(3), 1).unwrap();
        let img = Tensor::from_fn(&[1, 10, 13], |i| (i % 5) as f64 / 5.0);
        let p = predict_padded(&m, &img, Frame::GlobalScaled).unwrap();
        assert_eq!(p.channels.shape(), &[3, 10, 13]);
        let s: f64 = (0..3).map(|c| p.channel(c)[17]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
