//! Eagerly recorded computation graph with a single reverse pass.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernels: usize,
        bias: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        k: usize,
    },
    Softmax {
        input: usize,
    },
    Relu {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Crop {
        input: usize,
        top: usize,
        left: usize,
    },
    Add {
        lhs: usize,
        rhs: usize,
    },
    Mul {
        lhs: usize,
        rhs: usize,
    },
    /// `scale * x + shift` with constant tensors.
    Affine {
        input: usize,
        scale: Vec<T>,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Log {
        input: usize,
    },
    Exp {
        input: usize,
    },
    Pow {
        input: usize,
        exponent: T,
    },
    Clamp {
        input: usize,
        lo: T,
        hi: T,
    },
    Sum {
        input: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of applied primitives. Nodes are appended as operations
/// run, so every node's inputs precede it.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure(op))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::Graph("variable belongs to a different graph (detached)".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a copy of `t` as a leaf; its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let mut v = t.clone();
        v.clear_grad();
        self.push(v, Op::Leaf, rg)
    }

    /// Records `t` as a constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        t.clear_grad();
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the last backward loss with respect to `v`, if `v` is a
    /// leaf that requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, ki, bi) = (self.idx(input)?, self.idx(kernels)?, self.idx(bias)?);
        let xs = self.nodes[xi].value.shape().to_vec();
        let ks = self.nodes[ki].value.shape().to_vec();
        let bs = self.nodes[bi].value.shape().to_vec();
        let [c_in, h, w] = xs[..] else {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        };
        let [c_out, kc, k, k2] = ks[..] else {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        };
        if kc != c_in || k != k2 {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ks });
        }
        if bs != [c_out] {
            return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: ks, rhs: bs });
        }
        if stride == 0 {
            return Err(invalid("conv2d stride must be positive"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::ShapeMismatch { op: "conv2d (kernel larger than padded input)", lhs: xs, rhs: ks });
        }
        let geom = ConvGeom { c_in, h, w, c_out, k, stride, padding };
        let (out, cols) = kernels::conv2d_forward(
            self.nodes[xi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[bi].value.data(),
            &geom,
        );
        check_finite(&out, "conv2d")?;
        let rg = self.rg(xi) || self.rg(ki) || self.rg(bi);
        let value = Tensor::new(&[c_out, geom.out_h(), geom.out_w()], out)?;
        // cols are only needed for the kernel adjoint
        let cols = if self.rg(ki) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { input: xi, kernels: ki, bias: bi, geom, cols }, rg))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let xi = self.idx(input)?;
        let (c, h, w) = self.nodes[xi].value.chw()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(invalid(format!("maxpool2d: {h}x{w} is not divisible by window {k}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.nodes[xi].value.data(), c, h, w, k);
        let value = Tensor::new(&[c, h / k, w / k], out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::MaxPool { input: xi, argmax }, rg))
    }

    pub fn upsample2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let xi = self.idx(input)?;
        let (c, h, w) = self.nodes[xi].value.chw()?;
        if k == 0 {
            return Err(invalid("upsample2d factor must be positive"));
        }
        let out = kernels::upsample_forward(self.nodes[xi].value.data(), c, h, w, k);
        let value = Tensor::new(&[c, h * k, w * k], out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Upsample { input: xi, k }, rg))
    }

    pub fn channel_softmax(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let (c, h, w) = self.nodes[xi].value.chw()?;
        if c < 2 {
            return Err(invalid("channel_softmax needs at least 2 channels"));
        }
        check_finite(self.nodes[xi].value.data(), "channel_softmax")?;
        let out = kernels::softmax_channels(self.nodes[xi].value.data(), c, h * w);
        check_finite(&out, "channel_softmax")?;
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Softmax { input: xi }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let out = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Relu { input: xi }, rg))
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(invalid("concat_channels needs at least one input"));
        }
        let idx: Vec<usize> = inputs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let (_, h, w) = self.nodes[idx[0]].value.chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let (c, hi, wi) = self.nodes[i].value.chw()?;
            if (hi, wi) != (h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.nodes[idx[0]].value.shape().to_vec(),
                    rhs: self.nodes[i].value.shape().to_vec(),
                });
            }
            c_total += c;
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let value = Tensor::new(&[c_total, h, w], data)?;
        Ok(self.push(value, Op::Concat { inputs: idx }, rg))
    }

    /// Spatial crop of a `[C, H, W]` tensor.
    pub fn crop2d(&mut self, input: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let xi = self.idx(input)?;
        let value = self.nodes[xi].value.crop_chw(top, left, height, width)?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Crop { input: xi, top, left }, rg))
    }

    fn same_shape(&self, a: usize, b: usize, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.idx(lhs)?, self.idx(rhs)?);
        self.same_shape(a, b, "add")?;
        let out = self.nodes[a].value.data().iter().zip(self.nodes[b].value.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.nodes[a].value.shape(), out)?;
        check_finite(value.data(), "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { lhs: a, rhs: b }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (self.idx(lhs)?, self.idx(rhs)?);
        self.same_shape(a, b, "mul")?;
        let out = self.nodes[a].value.data().iter().zip(self.nodes[b].value.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.nodes[a].value.shape(), out)?;
        check_finite(value.data(), "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { lhs: a, rhs: b }, rg))
    }

    /// Elementwise `scale * x + shift` with constant `scale` and `shift`.
    pub fn affine(&mut self, input: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        if scale.len() != x.len() || shift.len() != x.len() {
            return Err(Error::ShapeMismatch { op: "affine", lhs: x.shape().to_vec(), rhs: vec![scale.len(), shift.len()] });
        }
        let out = x.data().iter().zip(scale).zip(shift).map(|((&v, &s), &t)| s * v + t).collect();
        let value = Tensor::new(x.shape(), out)?;
        check_finite(value.data(), "affine")?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Affine { input: xi, scale: scale.to_vec() }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * factor).collect())?;
        check_finite(value.data(), "scale")?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Scale { input: xi, factor }, rg))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v.ln()).collect())?;
        check_finite(value.data(), "log")?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Log { input: xi }, rg))
    }

    pub fn exp(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v.exp()).collect())?;
        check_finite(value.data(), "exp")?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Exp { input: xi }, rg))
    }

    /// Elementwise `x^exponent` for a constant exponent.
    pub fn powf(&mut self, input: Var, exponent: T) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v.powf(exponent)).collect())?;
        check_finite(value.data(), "powf")?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Pow { input: xi, exponent }, rg))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through only strictly inside.
    pub fn clamp(&mut self, input: Var, lo: T, hi: T) -> Result<Var> {
        let xi = self.idx(input)?;
        let x = &self.nodes[xi].value;
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(lo).min(hi)).collect())?;
        let rg = self.rg(xi);
        Ok(self.push(value, Op::Clamp { input: xi, lo, hi }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.idx(input)?;
        let s = self.nodes[xi].value.sum();
        check_finite(&[s], "sum")?;
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input: xi }, rg))
    }

    /// Replays the record in reverse from a scalar `loss`, leaving
    /// `dloss/dleaf` available through [`Graph::grad`] for every leaf that
    /// requires gradients. A record supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        if self.backward_done {
            return Err(Error::Graph("backward already ran on this record".into()));
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::Graph("loss does not depend on any parameter requiring gradients (detached graph)".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);

        for i in (0..=li).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(gy);
                continue;
            }
            let contributions = self.adjoint(i, &gy)?;
            for (j, g) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (g, n) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                check_finite(g, "backward")?;
                debug_assert!(matches!(n.op, Op::Leaf));
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs.
    fn adjoint(&self, i: usize, gy: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { input, kernels, bias, geom, cols } => {
                let need_input = self.rg(*input);
                let cols_local;
                let cols_ref = if cols.is_empty() {
                    cols_local = kernels::im2col(self.nodes[*input].value.data(), geom);
                    &cols_local
                } else {
                    cols
                };
                let g = kernels::conv2d_backward(gy, cols_ref, self.nodes[*kernels].value.data(), geom, need_input);
                let mut v = vec![(*kernels, g.kernels), (*bias, g.bias)];
                if let Some(gi) = g.input {
                    v.push((*input, gi));
                }
                v
            }
            Op::MaxPool { input, argmax } => {
                let mut g = vec![T::zero(); self.nodes[*input].value.len()];
                for (&a, &d) in argmax.iter().zip(gy) {
                    g[a] += d;
                }
                vec![(*input, g)]
            }
            Op::Upsample { input, k } => {
                let (c, h, w) = self.nodes[*input].value.chw()?;
                vec![(*input, kernels::upsample_backward(gy, c, h, w, *k))]
            }
            Op::Softmax { input } => {
                let (c, h, w) = node.value.chw()?;
                vec![(*input, kernels::softmax_channels_backward(y, gy, c, h * w))]
            }
            Op::Relu { input } => {
                let g = y.iter().zip(gy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
                vec![(*input, g)]
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for &j in inputs {
                    let n = self.nodes[j].value.len();
                    v.push((j, gy[offset..offset + n].to_vec()));
                    offset += n;
                }
                v
            }
            Op::Crop { input, top, left } => {
                let (c, h, w) = self.nodes[*input].value.chw()?;
                let (_, ch, cw) = node.value.chw()?;
                let mut g = vec![T::zero(); c * h * w];
                for ci in 0..c {
                    for yy in 0..ch {
                        let dst = (ci * h + top + yy) * w + left;
                        let src = (ci * ch + yy) * cw;
                        g[dst..dst + cw].copy_from_slice(&gy[src..src + cw]);
                    }
                }
                vec![(*input, g)]
            }
            Op::Add { lhs, rhs } => vec![(*lhs, gy.to_vec()), (*rhs, gy.to_vec())],
            Op::Mul { lhs, rhs } => {
                let a = self.nodes[*lhs].value.data();
                let b = self.nodes[*rhs].value.data();
                vec![
                    (*lhs, gy.iter().zip(b).map(|(&d, &bv)| d * bv).collect()),
                    (*rhs, gy.iter().zip(a).map(|(&d, &av)| d * av).collect()),
                ]
            }
            Op::Affine { input, scale } => {
                vec![(*input, gy.iter().zip(scale).map(|(&d, &s)| d * s).collect())]
            }
            Op::Scale { input, factor } => vec![(*input, gy.iter().map(|&d| d * *factor).collect())],
            Op::Log { input } => {
                let x = self.nodes[*input].value.data();
                vec![(*input, gy.iter().zip(x).map(|(&d, &v)| d / v).collect())]
            }
            Op::Exp { input } => vec![(*input, gy.iter().zip(y).map(|(&d, &v)| d * v).collect())],
            Op::Pow { input, exponent } => {
                let x = self.nodes[*input].value.data();
                let p = *exponent;
                let g = gy
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| {
                        if p == T::zero() {
                            T::zero()
                        } else {
                            d * p * v.powf(p - T::one())
                        }
                    })
                    .collect();
                vec![(*input, g)]
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.nodes[*input].value.data();
                let g = gy
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > *lo && v < *hi { d } else { T::zero() })
                    .collect();
                vec![(*input, g)]
            }
            Op::Sum { input } => vec![(*input, vec![gy[0]; self.nodes[*input].value.len()])],
        };
        Ok(out)
    }
}
