//! Combined cross-entropy + focal heatmap regression loss.
//!
//! ```text
//! L = -(1/N) * sum( bce_w * H * log(P) + focal_w * alpha_t * (1 - P_t)^gamma * log(P_t) )
//! P_t = P      where H > gate
//!     = 1 - P  otherwise
//! ```
//!
//! The sum runs over every channel and pixel of every batch item; `P` is
//! clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the logarithms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::HeatmapStack;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha_t: f64,
    pub gamma: f64,
    pub target_gate: f64,
    pub bce_weight: f64,
    pub focal_weight: f64,
    /// Adds the `(1 - H) * log(1 - P)` half of binary cross-entropy.
    pub full_bce: bool,
    /// Linearly ramps the focal weight from 0 over this many epochs; 0 disables.
    pub focal_ramp_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_t: 0.25,
            gamma: 2.0,
            target_gate: 0.01,
            bce_weight: 0.5,
            focal_weight: 0.5,
            full_bce: false,
            focal_ramp_epochs: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("loss.gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha_t > 0.0 && self.alpha_t <= 1.0) {
            return Err(invalid(format!("loss.alpha_t must lie in (0, 1], got {}", self.alpha_t)));
        }
        if !(self.target_gate > 0.0 && self.target_gate < 1.0) {
            return Err(invalid(format!("loss.target_gate must lie in (0, 1), got {}", self.target_gate)));
        }
        if !(self.bce_weight >= 0.0 && self.focal_weight >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Effective configuration for a (0-based) epoch under the optional ramp.
    pub fn at_epoch(&self, epoch: usize) -> Self {
        let mut c = *self;
        if self.focal_ramp_epochs > 0 {
            let f = (epoch as f64 / self.focal_ramp_epochs as f64).min(1.0);
            c.focal_weight *= f;
        }
        c
    }
}

/// Records the loss of `predicted` (a `[K+1, H, W]` probability node) against
/// `target` and returns the scalar loss node.
pub fn heatmap_loss<T: Scalar>(
    graph: &mut Graph<T>,
    predicted: Var,
    target: &HeatmapStack<T>,
    config: &LossConfig,
    batch_size: usize,
) -> Result<Var> {
    config.validate()?;
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let ps = graph.value(predicted).shape().to_vec();
    if ps != target.channels.shape() {
        return Err(Error::ShapeMismatch { op: "heatmap_loss", lhs: ps, rhs: target.channels.shape().to_vec() });
    }
    let h = target.channels.data();
    let n = h.len();
    let (zero, one) = (T::zero(), T::one());
    let gate = T::of(config.target_gate);
    let eps = T::of(PROB_CLAMP);

    let p = graph.clamp(predicted, eps, one - eps)?;
    let log_p = graph.log(p)?;
    let bce_w = T::of(config.bce_weight);
    let zeros = vec![zero; n];
    let bce_scale: Vec<T> = h.iter().map(|&v| bce_w * v).collect();
    let mut total = graph.affine(log_p, &bce_scale, &zeros)?;
    if config.full_bce {
        let q = graph.affine(p, &vec![-one; n], &vec![one; n])?;
        let log_q = graph.log(q)?;
        let neg_scale: Vec<T> = h.iter().map(|&v| bce_w * (one - v)).collect();
        let neg = graph.affine(log_q, &neg_scale, &zeros)?;
        total = graph.add(total, neg)?;
    }

    // P_t = m * P + (1 - m) * (1 - P) = (2m - 1) * P + (1 - m)
    let (mut ht_scale, mut ht_shift) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for &v in h {
        if v > gate {
            ht_scale.push(one);
            ht_shift.push(zero);
        } else {
            ht_scale.push(-one);
            ht_shift.push(one);
        }
    }
    let p_t = graph.affine(p, &ht_scale, &ht_shift)?;
    let one_minus = graph.affine(p_t, &vec![-one; n], &vec![one; n])?;
    let modulator = graph.powf(one_minus, T::of(config.gamma))?;
    let log_pt = graph.log(p_t)?;
    let focal = graph.mul(modulator, log_pt)?;
    let focal = graph.scale(focal, T::of(config.focal_weight * config.alpha_t))?;
    total = graph.add(total, focal)?;

    let s = graph.sum(total)?;
    graph.scale(s, T::of(-1.0 / batch_size as f64))
}

/// Loss value without gradient tracking.
pub fn heatmap_loss_value<T: Scalar>(
    predicted: &HeatmapStack<T>,
    target: &HeatmapStack<T>,
    config: &LossConfig,
    batch_size: usize,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(predicted.channels.clone());
    let l = heatmap_loss(&mut g, p, target, config, batch_size)?;
    Ok(g.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Frame;
    use crate::tensor::Tensor;

    fn stack(c: usize, h: usize, w: usize, data: Vec<f64>) -> HeatmapStack<f64> {
        HeatmapStack::new(Tensor::new(&[c, h, w], data).unwrap(), Frame::PatchLocal).unwrap()
    }

    fn single(h: f64, p: f64) -> f64 {
        heatmap_loss_value(&stack(1, 1, 1, vec![p]), &stack(1, 1, 1, vec![h]), &LossConfig::default(), 1).unwrap()
    }

    #[test]
    fn perfect_target_pixel_has_zero_loss() {
        // P clamps to 1 - 1e-7, leaving only rounding-level residue
        assert!(single(1.0, 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_evaluated_values() {
        // H = 1, P = 0.5: 0.5*ln2 + 0.5*0.25*0.25*ln2
        assert!((single(1.0, 0.5) - 0.368235).abs() < 1e-6);
        // H = 0, P = 0.1: -0.5*0.25*0.01*ln(0.9)
        assert!((single(0.0, 0.1) - 1.317e-4).abs() < 1e-7);
    }

    #[test]
    fn gate_switches_at_threshold() {
        // At H = 0.01 the pixel is background: P_t = 1 - P.
        let h = 0.01;
        let p = 0.3;
        let at_gate = single(h, p);
        let bg = -(0.5 * h * p.ln() + 0.5 * 0.25 * p.powi(2) * (1.0 - p).ln());
        assert!((at_gate - bg).abs() < 1e-12);
        let h2 = 0.0100001;
        let above = single(h2, p);
        let fg = -(0.5 * h2 * p.ln() + 0.5 * 0.25 * (1.0 - p).powi(2) * p.ln());
        assert!((above - fg).abs() < 1e-12);
    }

    #[test]
    fn monotone_toward_one_at_target() {
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let l = single(1.0, i as f64 / 100.0);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = stack(2, 1, 1, vec![0.5, 0.5]);
        let b = stack(1, 1, 2, vec![0.5, 0.5]);
        assert!(heatmap_loss_value(&a, &b, &LossConfig::default(), 1).is_err());
        assert!(heatmap_loss_value(&a, &a, &LossConfig::default(), 0).is_err());
        let bad = LossConfig { gamma: -1.0, ..Default::default() };
        assert!(heatmap_loss_value(&a, &a, &bad, 1).is_err());
        let bad = LossConfig { alpha_t: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn focal_ramp_is_off_by_default() {
        let c = LossConfig::default();
        assert_eq!(c.at_epoch(0), c);
        let r = LossConfig { focal_ramp_epochs: 10, ..c };
        assert_eq!(r.at_epoch(0).focal_weight, 0.0);
        assert_eq!(r.at_epoch(5).focal_weight, 0.25);
        assert_eq!(r.at_epoch(50).focal_weight, 0.5);
    }
}
