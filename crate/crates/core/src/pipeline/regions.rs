//! Proposal regions around coarse detections and the patch merge.

use crate::codec::{expect_frame, Frame, HeatmapStack, LandmarkSet, Point};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Square window of side `side` with top-left pixel `(left, top)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub left: usize,
    pub top: usize,
    pub side: usize,
    pub frame: Frame,
}

impl Region {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.left && x < self.left + self.side && y >= self.top && y < self.top + self.side
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.side <= height && self.left + self.side <= width
    }
}

/// Side of the expanded square, `round(epsilon * patch)`.
pub fn expanded_side(patch: usize, epsilon: f64) -> usize {
    (epsilon * patch as f64 + 0.5).floor() as usize
}

/// Unclipped top-left corners `(x, y)` of the five patches: the four corners
/// of the `round(epsilon * patch)` square centred on `center`, then the
/// centred patch.
pub fn expansive_layout(center: Point, patch: usize, epsilon: f64) -> [(i64, i64); 5] {
    let s = expanded_side(patch, epsilon) as i64;
    let p = patch as i64;
    let tl = |c: f64| (c - s as f64 / 2.0 + 0.5).floor() as i64;
    let (x0, y0) = (tl(center.x), tl(center.y));
    let far = s - p;
    let mid = far.div_euclid(2);
    [(x0, y0), (x0 + far, y0), (x0, y0 + far), (x0 + far, y0 + far), (x0 + mid, y0 + mid)]
}

/// Single centred patch (the no-expansion ablation).
pub fn centered_layout(center: Point, patch: usize) -> (i64, i64) {
    expansive_layout(center, patch, 1.0)[4]
}

fn shift_inward(corner: (i64, i64), patch: usize, height: usize, width: usize, frame: Frame) -> Region {
    let x = corner.0.clamp(0, (width - patch) as i64) as usize;
    let y = corner.1.clamp(0, (height - patch) as i64) as usize;
    Region { left: x, top: y, side: patch, frame }
}

/// Five regions per landmark; regions crossing the canvas edge are shifted
/// inward so every region lies fully on the `height x width` canvas.
pub fn propose_regions(
    coarse: &LandmarkSet,
    patch: usize,
    epsilon: f64,
    height: usize,
    width: usize,
) -> Result<Vec<[Region; 5]>> {
    expect_frame(Frame::LocalScaled, coarse.frame())?;
    if !(1.0..2.0).contains(&epsilon) {
        return Err(invalid(format!("expand epsilon must lie in [1, 2), got {epsilon}")));
    }
    if patch == 0 || patch > height || patch > width {
        return Err(invalid(format!("patch size {patch} does not fit a {height}x{width} canvas")));
    }
    Ok(coarse
        .points()
        .iter()
        .map(|&c| expansive_layout(c, patch, epsilon).map(|tl| shift_inward(tl, patch, height, width, Frame::LocalScaled)))
        .collect())
}

/// One local-stage prediction placed on the canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction<T> {
    pub stack: HeatmapStack<T>,
    pub region: Region,
    /// Landmark whose proposal produced this patch.
    pub anchor: usize,
}

/// Averages patch predictions onto a `height x width` canvas. Each pixel of
/// a channel is the mean over the patches writing it; pixels no patch writes
/// are 0. With `all_channels` unset a patch writes only its anchor channel
/// and the background channel.
pub fn merge_patches<T: Scalar>(
    patches: &[PatchPrediction<T>],
    height: usize,
    width: usize,
    num_landmarks: usize,
    all_channels: bool,
) -> Result<HeatmapStack<T>> {
    let c = num_landmarks + 1;
    let plane = height * width;
    let mut sum = vec![0.0f64; c * plane];
    let mut count = vec![0u32; c * plane];
    for p in patches {
        let r = p.region;
        if !r.fits(height, width) {
            return Err(invalid(format!("region {r:?} lies outside the {height}x{width} canvas")));
        }
        let shape = p.stack.channels.shape();
        if shape != [c, r.side, r.side] {
            return Err(Error::ShapeMismatch { op: "merge_patches", lhs: shape.to_vec(), rhs: vec![c, r.side, r.side] });
        }
        if p.anchor >= num_landmarks {
            return Err(invalid(format!("anchor {} out of range for {num_landmarks} landmarks", p.anchor)));
        }
        let channels: Vec<usize> = if all_channels { (0..c).collect() } else { vec![p.anchor, num_landmarks] };
        for ch in channels {
            let src = p.stack.channel(ch);
            for i in 0..r.side {
                let row = ch * plane + (r.top + i) * width + r.left;
                for j in 0..r.side {
                    sum[row + j] += src[i * r.side + j].to_f64_lossy();
                    count[row + j] += 1;
                }
            }
        }
    }
    let data = sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 0 { T::zero() } else { T::of(s / n as f64) })
        .collect();
    HeatmapStack::new(Tensor::new(&[c, height, width], data)?, Frame::LocalScaled)
}
