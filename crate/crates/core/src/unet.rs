//! Shared encoder-decoder backbone for both stages.
//!
//! Level `l` (0-based) works with `base_channels * 2^l` channels:
//!
//! ```text
//! enc{l}: conv(k) -> relu -> conv(k) -> relu -> maxpool(2)     l = 0..depth
//! mid:    conv(k) -> relu -> conv(k) -> relu                   base * 2^depth channels
//! dec{l}: upsample(2) -> concat(skip l) -> conv(k) -> relu -> conv(k) -> relu
//! head:   conv(1x1) to K+1 channels -> channel softmax
//! ```
//!
//! All k x k convolutions use stride 1 and `k / 2` zero padding, so the
//! output has the input's spatial size.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Graph, OptimizerState, Var};
use crate::codec::{Frame, HeatmapStack};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { depth: 4, base_channels: 16, kernel_size: 3, in_channels: 1, out_channels: 20 }
    }
}

impl UNetConfig {
    /// Small configuration used by tests and the desk-scale experiments.
    pub fn desk(out_channels: usize) -> Self {
        Self { depth: 2, base_channels: 4, kernel_size: 3, in_channels: 1, out_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(invalid("unet channel counts must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(invalid(format!("unet.kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.out_channels < 2 {
            return Err(invalid("unet.out_channels must be K+1 >= 2"));
        }
        if self.depth > 8 {
            return Err(invalid("unet.depth above 8 is not supported"));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One convolution of the architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}

/// Convolution list in parameter order.
pub fn layer_specs(config: &UNetConfig) -> Vec<LayerSpec> {
    let k = config.kernel_size;
    let spec = |name: String, c_in, c_out, kernel| LayerSpec { name, c_in, c_out, kernel };
    let mut layers = Vec::new();
    let mut c_prev = config.in_channels;
    for l in 0..config.depth {
        let c = config.channels_at(l);
        layers.push(spec(format!("enc{l}.conv1"), c_prev, c, k));
        layers.push(spec(format!("enc{l}.conv2"), c, c, k));
        c_prev = c;
    }
    let cm = config.channels_at(config.depth);
    layers.push(spec("mid.conv1".into(), c_prev, cm, k));
    layers.push(spec("mid.conv2".into(), cm, cm, k));
    c_prev = cm;
    for l in (0..config.depth).rev() {
        let c = config.channels_at(l);
        layers.push(spec(format!("dec{l}.conv1"), c_prev + c, c, k));
        layers.push(spec(format!("dec{l}.conv2"), c, c, k));
        c_prev = c;
    }
    layers.push(spec("head".into(), c_prev, config.out_channels, 1));
    layers
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    /// `(name, tensor)` in [`layer_specs`] order, weight before bias.
    params: Vec<(String, Tensor<T>)>,
}

/// Parameter leaves recorded in one graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl<T: Scalar> UNet<T> {
    /// Seeded fan-in-scaled uniform initialisation; biases start at zero.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in layer_specs(&config) {
            let fan_in = (layer.c_in * layer.kernel * layer.kernel) as f64;
            // He-uniform for rectified layers; the head starts small so the
            // initial softmax is close to uniform
            let bound = if layer.name == "head" {
                0.1 * (1.0 / fan_in).sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            let shape = [layer.c_out, layer.c_in, layer.kernel, layer.kernel];
            let w = Tensor::from_fn(&shape, |_| T::of(rng.gen_range(-bound..bound))).with_requires_grad(true);
            let b = Tensor::zeros(&[layer.c_out]).with_requires_grad(true);
            params.push((format!("{}.weight", layer.name), w));
            params.push((format!("{}.bias", layer.name), b));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|(_, t)| graph.leaf(t)).collect() }
    }

    /// Binds the parameters as constants (no gradient tracking).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|(_, t)| graph.constant(t.clone())).collect() }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[c, h, w] = shape else {
            return Err(invalid(format!("unet input must be [C,H,W], got {shape:?}")));
        };
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch { op: "unet input channels", lhs: shape.to_vec(), rhs: vec![self.config.in_channels] });
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
            return Err(invalid(format!(
                "unet input {h}x{w} is not divisible by {m} (depth {}); pad to {ph}x{pw}",
                self.config.depth
            )));
        }
        Ok(())
    }

    /// Records the forward pass and returns the `[K+1, H, W]` probability node.
    pub fn forward(&self, graph: &mut Graph<T>, bound: &BoundParams, image: Var) -> Result<Var> {
        self.check_input(graph.value(image).shape())?;
        let pad = self.config.kernel_size / 2;
        let mut p = bound.vars.iter().copied();
        let mut conv_relu = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let (w, b) = (p.next().unwrap(), p.next().unwrap());
            let y = g.conv2d(x, w, b, 1, pad)?;
            g.relu(y)
        };
        let mut x = image;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv_relu(graph, x)?;
            x = conv_relu(graph, x)?;
            skips.push(x);
            x = graph.maxpool2d(x, 2)?;
        }
        x = conv_relu(graph, x)?;
        x = conv_relu(graph, x)?;
        for skip in skips.into_iter().rev() {
            let up = graph.upsample2d(x, 2)?;
            x = graph.concat_channels(&[up, skip])?;
            x = conv_relu(graph, x)?;
            x = conv_relu(graph, x)?;
        }
        let (w, b) = (bound.vars[bound.vars.len() - 2], bound.vars[bound.vars.len() - 1]);
        let logits = graph.conv2d(x, w, b, 1, 0)?;
        graph.channel_softmax(logits)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Tensor<T>, frame: Frame) -> Result<HeatmapStack<T>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &bound, x)?;
        HeatmapStack::new(g.value(y).clone(), frame)
    }

    /// Adds the graph's parameter gradients into the parameters' gradient slots.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &BoundParams) -> Result<()> {
        for ((name, t), &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = graph.grad(v).ok_or_else(|| Error::MissingGradient(name.clone()))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|(_, t)| t.clear_grad());
    }

    pub fn to_checkpoint(&self, optimizer: Option<&OptimizerState<T>>, extra_meta: &[(String, String)]) -> Checkpoint<T> {
        let c = &self.config;
        let mut meta = vec![
            ("unet.depth".to_string(), c.depth.to_string()),
            ("unet.base_channels".to_string(), c.base_channels.to_string()),
            ("unet.kernel_size".to_string(), c.kernel_size.to_string()),
            ("unet.in_channels".to_string(), c.in_channels.to_string()),
            ("unet.out_channels".to_string(), c.out_channels.to_string()),
        ];
        meta.extend_from_slice(extra_meta);
        let tensors = self
            .params
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.clear_grad();
                (n.clone(), t)
            })
            .collect();
        Checkpoint { meta, tensors, optimizer: optimizer.cloned() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let field = |key: &str| -> Result<usize> {
            ckpt.meta_value(key)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint field `{key}` is not an integer")))
        };
        let config = UNetConfig {
            depth: field("unet.depth")?,
            base_channels: field("unet.base_channels")?,
            kernel_size: field("unet.kernel_size")?,
            in_channels: field("unet.in_channels")?,
            out_channels: field("unet.out_channels")?,
        };
        let mut model = Self::new(config, 0)?;
        if model.params.len() != ckpt.tensors.len() {
            return Err(Error::Format("checkpoint tensor count does not match its unet config".into()));
        }
        for ((name, t), (cname, ct)) in model.params.iter_mut().zip(&ckpt.tensors) {
            if name != cname || t.shape() != ct.shape() {
                return Err(Error::Format(format!("checkpoint tensor `{cname}` does not match `{name}`")));
            }
            *t = ct.clone().with_requires_grad(true);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, optimizer: Option<&OptimizerState<T>>, extra_meta: &[(String, String)]) -> Result<()> {
        self.to_checkpoint(optimizer, extra_meta).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint<T>)> {
        let ckpt = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = UNet::<f32>::new(UNetConfig::desk(20), 7).unwrap();
        let b = UNet::<f32>::new(UNetConfig::desk(20), 7).unwrap();
        let c = UNet::<f32>::new(UNetConfig::desk(20), 8).unwrap();
        assert_eq!(a.to_checkpoint(None, &[]).to_bytes(), b.to_checkpoint(None, &[]).to_bytes());
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shape_and_softmax() {
        let m = UNet::<f64>::new(UNetConfig::desk(20), 1).unwrap();
        let img = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37 % 101) as f64) / 101.0);
        let out = m.predict(&img, Frame::GlobalScaled).unwrap();
        assert_eq!(out.channels.shape(), &[20, 16, 16]);
        for p in 0..256 {
            let s: f64 = (0..20).map(|c| out.channels.data()[c * 256 + p]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn indivisible_input_names_padding() {
        let m = UNet::<f32>::new(UNetConfig::desk(3), 1).unwrap();
        let err = m.predict(&Tensor::zeros(&[1, 18, 16]), Frame::GlobalScaled).unwrap_err();
        assert!(err.to_string().contains("pad to 20x16"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_reproduces_output() {
        let m = UNet::<f32>::new(UNetConfig::desk(4), 3).unwrap();
        let ckpt = m.to_checkpoint(None, &[("stage".into(), "global".into())]);
        let back = UNet::<f32>::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        let img = Tensor::from_fn(&[1, 8, 8], |i| (i as f32 * 0.1).sin());
        assert_eq!(
            m.predict(&img, Frame::LocalScaled).unwrap(),
            back.predict(&img, Frame::LocalScaled).unwrap()
        );
    }
}
