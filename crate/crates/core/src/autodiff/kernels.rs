//! Raw forward/adjoint kernels on flat row-major buffers.
//!
//! Reductions always run in a fixed index order so results are bitwise
//! reproducible for identical inputs.

use crate::scalar::Scalar;

/// Geometry of a 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `input[c_in, h, w]` into `[c_in*k*k, out_h*out_w]` with zero padding.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return input.to_vec();
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_w = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * cols_w];
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        // contiguous span of valid x positions
                        let x_lo = (pad - kx as isize).max(0) as usize;
                        let x_hi = ((g.w as isize + pad - kx as isize).min(ow as isize)).max(0) as usize;
                        if x_lo < x_hi {
                            let sx = (x_lo as isize + kx as isize - pad) as usize;
                            dst_row[x_lo..x_hi].copy_from_slice(&src_row[sx..sx + (x_hi - x_lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols_w = oh * ow;
    let mut out = vec![T::zero(); g.c_in * g.h * g.w];
    let pad = g.padding as isize;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * cols_w..(row + 1) * cols_w];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[m, n] += a[m, k] * b[k, n]`
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[k, m]^T * b[k, n]`
pub fn gemm_at_b_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators (fixed summation order).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
pub fn gemm_a_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Cross-correlation forward. Returns the output and the unfolded input
/// (kept for the kernel adjoint).
pub fn conv2d_forward<T: Scalar>(
    input: &[T],
    kernels: &[T],
    bias: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let cols = im2col(input, g);
    let l = g.out_h() * g.out_w();
    let mut out = Vec::with_capacity(g.c_out * l);
    for &b in bias.iter().take(g.c_out) {
        out.extend(std::iter::repeat_n(b, l));
    }
    gemm_acc(kernels, &cols, &mut out, g.c_out, g.patch_len(), l);
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    kernels: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let l = g.out_h() * g.out_w();
    let pl = g.patch_len();
    let bias = (0..g.c_out)
        .map(|c| grad_out[c * l..(c + 1) * l].iter().copied().sum())
        .collect();
    let mut dk = vec![T::zero(); g.c_out * pl];
    gemm_a_bt_acc(grad_out, cols, &mut dk, g.c_out, l, pl);
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); pl * l];
        gemm_at_b_acc(kernels, grad_out, &mut dcols, pl, g.c_out, l);
        col2im(&dcols, g)
    });
    ConvGrads {
        input,
        kernels: dk,
        bias,
    }
}

/// Non-overlapping `k x k` max pooling. Returns values and the flat input
/// index of each window's maximum (first occurrence in row-major order).
pub fn maxpool_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * k * w + ox * k;
                let mut best = input[best_i];
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn upsample_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            let src = &input[(ch * h + oy / k) * w..(ch * h + oy / k + 1) * w];
            for ox in 0..ow {
                out.push(src[ox / k]);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h * k, w * k);
    let mut g = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let dst = (ch * h + oy / k) * w;
            let src = &grad_out[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, &v) in src.iter().enumerate() {
                g[dst + ox / k] += v;
            }
        }
    }
    g
}

/// Softmax across the channel axis of a `[C, H, W]` buffer, max-subtracted.
pub fn softmax_channels<T: Scalar>(input: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * hw];
    for p in 0..hw {
        let mut m = input[p];
        for ch in 1..c {
            m = m.max(input[ch * hw + p]);
        }
        let mut s = T::zero();
        for ch in 0..c {
            let e = (input[ch * hw + p] - m).exp();
            out[ch * hw + p] = e;
            s += e;
        }
        for ch in 0..c {
            out[ch * hw + p] /= s;
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(y: &[T], dy: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); c * hw];
    for p in 0..hw {
        let mut s = T::zero();
        for ch in 0..c {
            s += y[ch * hw + p] * dy[ch * hw + p];
        }
        for ch in 0..c {
            let i = ch * hw + p;
            dx[i] = y[i] * (dy[i] - s);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut out, m, k, n);
        // a^T stored as [k, m]
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut out2 = vec![0.0; m * n];
        gemm_at_b_acc(&at, &b, &mut out2, m, k, n);
        // b^T stored as [n, k]
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut out3 = vec![0.0; m * n];
        gemm_a_bt_acc(&a, &bt, &mut out3, m, k, n);
        for i in 0..m * n {
            assert!((out[i] - naive[i]).abs() < 1e-12);
            assert!((out2[i] - naive[i]).abs() < 1e-12);
            assert!((out3[i] - naive[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { c_in: 2, h: 5, w: 6, c_out: 1, k: 3, stride: 2, padding: 1 };
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.7).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let back = col2im(&y, &g);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
