use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_padded, StageConfig};
use crate::autodiff::{AdamConfig, Graph, OptimizerState};
use crate::codec::{encode_heatmaps, expect_frame, Frame, HeatmapSpec, HeatmapStack};
use crate::dataset::{sample_patch, CephDataset, GroundTruth};
use crate::error::{invalid, Result};
use crate::loss::{heatmap_loss, LossConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::unet::UNet;

const DATA_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedStage<T> {
    pub model: UNet<T>,
    pub optimizer: OptimizerState<T>,
    pub log: Vec<EpochStats>,
}

fn check_dataset(ds: &CephDataset, frame: Frame, cfg: &StageConfig) -> Result<()> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    for it in &ds.items {
        expect_frame(frame, it.frame)?;
    }
    if cfg.unet.out_channels != ds.num_landmarks + 1 {
        return Err(invalid(format!(
            "unet.out_channels is {} but the dataset has {} landmarks (need K+1)",
            cfg.unet.out_channels, ds.num_landmarks
        )));
    }
    Ok(())
}

/// One optimiser step on a batch; returns the batch loss.
fn train_step<T: Scalar>(
    model: &mut UNet<T>,
    opt: &mut OptimizerState<T>,
    batch: &[(Tensor<T>, HeatmapStack<T>)],
    loss: &LossConfig,
) -> Result<f64> {
    model.zero_grads();
    let mut total = 0.0;
    for (image, target) in batch {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let y = forward_padded(model, &mut g, &bound, image)?;
        let l = heatmap_loss(&mut g, y, target, loss, batch.len())?;
        total += g.value(l).data()[0].to_f64_lossy();
        g.backward(l)?;
        model.accumulate_grads(&g, &bound)?;
    }
    opt.step(model.params_mut())?;
    Ok(total)
}

fn init<T: Scalar>(cfg: &StageConfig, seed: u64) -> Result<(UNet<T>, OptimizerState<T>, ChaCha8Rng)> {
    let model = UNet::new(cfg.unet, seed)?;
    let opt = OptimizerState::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() });
    Ok((model, opt, ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM)))
}

/// Trains the global u-net on whole images in the global frame. Each epoch
/// visits the items once in a seeded random order.
pub fn train_global<T: Scalar>(
    ds: &CephDataset,
    cfg: &StageConfig,
    seed: u64,
    truth: GroundTruth,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainedStage<T>> {
    check_dataset(ds, Frame::GlobalScaled, cfg)?;
    let (mut model, mut opt, mut rng) = init::<T>(cfg, seed)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = cfg.loss.at_epoch(epoch);
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let it = &ds.items[i];
                    let spec = HeatmapSpec::new(it.height(), it.width(), ds.num_landmarks, cfg.distribution_width, Frame::GlobalScaled)?;
                    let target = encode_heatmaps(&it.ground_truth(truth)?, &spec)?;
                    Ok((it.image.cast::<T>(), target))
                })
                .collect::<Result<Vec<_>>>()?;
            sum += train_step(&mut model, &mut opt, &batch, &loss)?;
            steps += 1;
        }
        let stats = EpochStats { epoch, mean_loss: sum / steps as f64, steps };
        progress(&stats);
        log.push(stats);
    }
    Ok(TrainedStage { model, optimizer: opt, log })
}

/// Trains the local u-net on random patches around landmarks in the local
/// frame. Each draw picks an item, then an anchor landmark, uniformly.
pub fn train_local<T: Scalar>(
    ds: &CephDataset,
    cfg: &StageConfig,
    seed: u64,
    truth: GroundTruth,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<TrainedStage<T>> {
    check_dataset(ds, Frame::LocalScaled, cfg)?;
    let p = cfg.train_patch;
    if p == 0 {
        return Err(invalid("local training needs a positive train_patch"));
    }
    if let Some(it) = ds.items.iter().find(|it| p > it.height() || p > it.width()) {
        return Err(invalid(format!("patch size {p} exceeds the {}x{} image {}", it.height(), it.width(), it.id)));
    }
    let truths = ds.items.iter().map(|it| it.ground_truth(truth)).collect::<Result<Vec<_>>>()?;
    let specs = ds
        .items
        .iter()
        .map(|it| HeatmapSpec::new(it.height(), it.width(), ds.num_landmarks, cfg.distribution_width, Frame::LocalScaled))
        .collect::<Result<Vec<_>>>()?;
    let (mut model, mut opt, mut rng) = init::<T>(cfg, seed)?;
    let per_epoch = if cfg.samples_per_epoch == 0 { ds.len() } else { cfg.samples_per_epoch };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = cfg.loss.at_epoch(epoch);
        let (mut sum, mut steps, mut drawn) = (0.0, 0, 0);
        while drawn < per_epoch {
            let n = cfg.batch_size.min(per_epoch - drawn);
            let mut batch = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.gen_range(0..ds.len());
                let s = sample_patch::<T, _>(&ds.items[i], &truths[i], &specs[i], p, &mut rng)?;
                batch.push((s.image, s.target));
            }
            sum += train_step(&mut model, &mut opt, &batch, &loss)?;
            steps += 1;
            drawn += n;
        }
        let stats = EpochStats { epoch, mean_loss: sum / steps as f64, steps };
        progress(&stats);
        log.push(stats);
    }
    Ok(TrainedStage { model, optimizer: opt, log })
}
