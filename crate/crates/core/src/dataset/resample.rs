//! Area-average resampling and padding of single-channel images.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `round(dim * factor)` with halves rounded up.
pub fn scaled_dim(dim: usize, factor: f64) -> usize {
    ((dim as f64 * factor) + 0.5).floor().max(1.0) as usize
}

/// Weights mapping `n_in` source samples onto `n_out` output samples, each
/// output covering an equal-length source interval. Row `o` lists
/// `(source index, weight)` pairs whose weights sum to 1.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let step = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * step, (o + 1) as f64 * step);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            let mut w: Vec<(usize, f64)> = (first..last)
                .map(|i| (i, (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0)))
                .filter(|&(_, v)| v > 0.0)
                .collect();
            let total: f64 = w.iter().map(|&(_, v)| v).sum();
            w.iter_mut().for_each(|(_, v)| *v /= total);
            w
        })
        .collect()
}

/// Resamples a `[C, H, W]` image to `[C, out_h, out_w]` by area averaging.
pub fn resize_area<T: Scalar>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0f64; out_h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        rows.iter_mut().for_each(|v| *v = 0.0);
        for (oy, ws) in wy.iter().enumerate() {
            let dst = &mut rows[oy * w..(oy + 1) * w];
            for &(iy, wt) in ws {
                for (d, &s) in dst.iter_mut().zip(&plane[iy * w..(iy + 1) * w]) {
                    *d += wt * s.to_f64_lossy();
                }
            }
        }
        for oy in 0..out_h {
            let row = &rows[oy * w..(oy + 1) * w];
            for ws in &wx {
                let v: f64 = ws.iter().map(|&(ix, wt)| wt * row[ix]).sum();
                out.push(T::of(v));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Reflect-pads a `[C, H, W]` tensor on the bottom and right edges
/// (mirroring without repeating the edge sample).
pub fn reflect_pad<T: Scalar>(image: &Tensor<T>, pad_bottom: usize, pad_right: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.chw()?;
    if pad_bottom >= h.max(2) || pad_right >= w.max(2) {
        return Err(invalid(format!("reflect padding ({pad_bottom}, {pad_right}) too large for {h}x{w}")));
    }
    let mirror = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let (oh, ow) = (h + pad_bottom, w + pad_right);
    let src = image.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &src[(ch * h + mirror(y, h)) * w..(ch * h + mirror(y, h) + 1) * w];
            for x in 0..ow {
                out.push(row[mirror(x, w)]);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}
