use rand::Rng;

use super::Item;
use crate::codec::{encode_heatmaps_window, expect_frame, HeatmapSpec, HeatmapStack, LandmarkSet, Window};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample<T> {
    /// `[1, P, P]`.
    pub image: Tensor<T>,
    pub target: HeatmapStack<T>,
    pub anchor: usize,
    pub window: Window,
}

/// Offsets in `[0, limit]` that keep pixel `a` strictly inside a span of
/// `p` pixels, i.e. `start < a < start + p - 1`. Falls back to the clamped
/// range when the anchor sits on the canvas edge.
fn offset_range(a: i64, p: usize, limit: usize) -> (usize, usize) {
    let lo = (a - p as i64 + 2).max(0);
    let hi = (a - 1).min(limit as i64);
    if lo <= hi {
        (lo as usize, hi as usize)
    } else {
        let c = (a - p as i64 / 2).clamp(0, limit as i64) as usize;
        (c, c)
    }
}

/// Draws one training patch: an anchor landmark uniformly among the valid,
/// on-canvas ones, then a `patch x patch` window uniformly among positions
/// keeping the anchor strictly inside. The target is the same window of the
/// full-canvas heatmap stack.
pub fn sample_patch<T: Scalar, R: Rng + ?Sized>(
    item: &Item,
    truth: &LandmarkSet,
    spec: &HeatmapSpec,
    patch: usize,
    rng: &mut R,
) -> Result<PatchSample<T>> {
    expect_frame(item.frame, truth.frame())?;
    let (h, w) = (item.height(), item.width());
    if (spec.height, spec.width) != (h, w) {
        return Err(invalid(format!("heatmap canvas {}x{} differs from image {h}x{w}", spec.height, spec.width)));
    }
    if patch < 3 || patch > h || patch > w {
        return Err(invalid(format!("patch size {patch} does not fit a {h}x{w} image")));
    }
    let candidates: Vec<usize> = (0..truth.len()).filter(|&i| truth.is_valid(i) && truth.on_canvas(i, h, w)).collect();
    if candidates.is_empty() {
        return Err(invalid(format!("item {} has no valid landmark to anchor a patch", item.id)));
    }
    let anchor = candidates[rng.gen_range(0..candidates.len())];
    let (ax, ay) = truth.point(anchor).rasterize();
    let (x_lo, x_hi) = offset_range(ax, patch, w - patch);
    let (y_lo, y_hi) = offset_range(ay, patch, h - patch);
    let left = rng.gen_range(x_lo..=x_hi);
    let top = rng.gen_range(y_lo..=y_hi);
    let window = Window { top, left, height: patch, width: patch };
    let image = item.image.crop_chw(top, left, patch, patch)?.cast::<T>();
    let target = encode_heatmaps_window(truth, spec, window)?;
    Ok(PatchSample { image, target, anchor, window })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offset_range_keeps_anchor_strictly_inside() {
        for a in 0..50i64 {
            let (lo, hi) = offset_range(a, 10, 40);
            for s in lo..=hi {
                if a >= 1 && a <= 48 {
                    assert!((s as i64) < a && a < s as i64 + 9, "a={a} s={s}");
                }
                assert!(s <= 40);
            }
        }
    }
}
