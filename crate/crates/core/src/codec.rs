//! Landmark coordinates <-> multi-channel Gaussian heatmaps.
//!
//! A stack for K landmarks has K+1 channels: one truncated circular Gaussian
//! per landmark plus a shared background channel holding `1 - sum` (clamped
//! at zero), so every unclamped pixel is a probability distribution over
//! channels.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Coordinate frame a landmark set or heatmap lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Frame {
    /// Uncropped source image.
    Raw,
    /// Cropped square at full resolution.
    Original,
    /// Cropped image scaled by the global-stage factor.
    GlobalScaled,
    /// Cropped image scaled by the local-stage factor.
    LocalScaled,
    /// Window cut out of another frame.
    PatchLocal,
}

impl Frame {
    pub fn tag(self) -> u8 {
        match self {
            Frame::Raw => 0,
            Frame::Original => 1,
            Frame::GlobalScaled => 2,
            Frame::LocalScaled => 3,
            Frame::PatchLocal => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Frame::Raw,
            1 => Frame::Original,
            2 => Frame::GlobalScaled,
            3 => Frame::LocalScaled,
            4 => Frame::PatchLocal,
            t => return Err(Error::Format(format!("unknown frame tag {t}"))),
        })
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Frame::Raw => "raw",
            Frame::Original => "original",
            Frame::GlobalScaled => "global-scaled",
            Frame::LocalScaled => "local-scaled",
            Frame::PatchLocal => "patch-local",
        })
    }
}

pub(crate) fn expect_frame(expected: Frame, found: Frame) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::FrameMismatch { expected, found })
    }
}

/// Sub-pixel location; pixel `(i, j)` has its center at `x = j, y = i`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Nearest pixel, rounding halves up.
    pub fn rasterize(self) -> (i64, i64) {
        ((self.x + 0.5).floor() as i64, (self.y + 0.5).floor() as i64)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointStatus {
    Valid,
    /// Decoded from a flat channel; the coordinate carries no information.
    LowConfidence,
    /// No detection (empty channel, off-canvas annotation, ...).
    Invalid,
}

/// Ordered landmark coordinates in one frame. The order is the dataset's
/// canonical landmark order and is never permuted.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
    status: Vec<PointStatus>,
    frame: Frame,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, frame: Frame) -> Self {
        let status = vec![PointStatus::Valid; points.len()];
        Self { points, status, frame }
    }

    pub fn with_status(points: Vec<Point>, status: Vec<PointStatus>, frame: Frame) -> Result<Self> {
        if points.len() != status.len() {
            return Err(invalid("landmark status list length differs from point count"));
        }
        Ok(Self { points, status, frame })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Point {
        self.points[i]
    }

    pub fn status(&self) -> &[PointStatus] {
        &self.status
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.status[i] != PointStatus::Invalid
    }

    pub fn set_status(&mut self, i: usize, s: PointStatus) {
        self.status[i] = s;
    }

    /// True when the rasterized point lies on an `height x width` canvas.
    pub fn on_canvas(&self, i: usize, height: usize, width: usize) -> bool {
        let (x, y) = self.points[i].rasterize();
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height
    }

    /// Applies `f` to every coordinate and relabels the frame.
    pub fn map(&self, frame: Frame, f: impl Fn(Point) -> Point) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
            status: self.status.clone(),
            frame,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64, frame: Frame) -> Self {
        self.map(frame, |p| Point::new(p.x + dx, p.y + dy))
    }
}

/// Multiplies every coordinate by `factor` and relabels the frame.
pub fn rescale_landmarks(landmarks: &LandmarkSet, factor: f64, target_frame: Frame) -> Result<LandmarkSet> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(invalid(format!("rescale factor must be positive, got {factor}")));
    }
    Ok(landmarks.map(target_frame, |p| Point::new(p.x * factor, p.y * factor)))
}

/// Canvas and target-shape description for one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeatmapSpec {
    pub height: usize,
    pub width: usize,
    pub num_landmarks: usize,
    /// Diameter of the circular support, in pixels.
    pub distribution_width: f64,
    pub sigma: f64,
    pub frame: Frame,
}

impl HeatmapSpec {
    /// Spec with `sigma = distribution_width / 6`, so the support edge sits at 3 sigma.
    pub fn new(height: usize, width: usize, num_landmarks: usize, distribution_width: f64, frame: Frame) -> Result<Self> {
        Self::with_sigma(height, width, num_landmarks, distribution_width, distribution_width / 6.0, frame)
    }

    pub fn with_sigma(
        height: usize,
        width: usize,
        num_landmarks: usize,
        distribution_width: f64,
        sigma: f64,
        frame: Frame,
    ) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if !(distribution_width > 0.0 && distribution_width.is_finite()) {
            return Err(invalid(format!("distribution width must be positive, got {distribution_width}")));
        }
        if height == 0 || width == 0 || num_landmarks == 0 {
            return Err(invalid("heatmap canvas and landmark count must be positive"));
        }
        Ok(Self { height, width, num_landmarks, distribution_width, sigma, frame })
    }

    pub fn channels(&self) -> usize {
        self.num_landmarks + 1
    }

    /// Correlation between the two axes; always zero (circular distributions).
    pub fn correlation_rho(&self) -> f64 {
        0.0
    }

    fn support_radius_sq(&self) -> f64 {
        let r = self.distribution_width / 2.0;
        r * r
    }

    /// Peak normaliser: the value the raw Gaussian takes at the pixel nearest
    /// to `center`, so that pixel reads exactly 1 when it is on the canvas.
    fn peak(&self, center: Point) -> f64 {
        let (px, py) = center.rasterize();
        let on = px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height;
        if !on {
            return 1.0;
        }
        let d2 = (px as f64 - center.x).powi(2) + (py as f64 - center.y).powi(2);
        if d2 > self.support_radius_sq() {
            1.0
        } else {
            (-d2 / (2.0 * self.sigma * self.sigma)).exp()
        }
    }
}

/// Rectangular window of a canvas (rows `top..top+height`, columns `left..left+width`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn full(spec: &HeatmapSpec) -> Self {
        Self { top: 0, left: 0, height: spec.height, width: spec.width }
    }
}

fn gaussian_into<T: Scalar>(center: Point, spec: &HeatmapSpec, win: Window, out: &mut [T]) {
    let r2 = spec.support_radius_sq();
    let two_s2 = 2.0 * spec.sigma * spec.sigma;
    let peak = spec.peak(center);
    for i in 0..win.height {
        let dy2 = ((win.top + i) as f64 - center.y).powi(2);
        if dy2 > r2 {
            continue;
        }
        for j in 0..win.width {
            let d2 = dy2 + ((win.left + j) as f64 - center.x).powi(2);
            if d2 <= r2 {
                out[i * win.width + j] = T::of((-d2 / two_s2).exp() / peak);
            }
        }
    }
}

/// One landmark channel on the full canvas of `spec`.
pub fn gaussian_channel<T: Scalar>(center: Point, spec: &HeatmapSpec) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); spec.height * spec.width];
    gaussian_into(center, spec, Window::full(spec), &mut out);
    Tensor::new(&[spec.height, spec.width], out)
}

/// Probability stack in a named frame.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack<T> {
    pub channels: Tensor<T>,
    pub frame: Frame,
}

impl<T: Scalar> HeatmapStack<T> {
    pub fn new(channels: Tensor<T>, frame: Frame) -> Result<Self> {
        channels.chw()?;
        Ok(Self { channels, frame })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[2]
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_channels() - 1
    }

    pub fn channel(&self, c: usize) -> &[T] {
        self.channels.channel(c).expect("channel index in range")
    }
}

/// Encodes landmarks into a full-canvas (K+1)-channel stack.
pub fn encode_heatmaps<T: Scalar>(landmarks: &LandmarkSet, spec: &HeatmapSpec) -> Result<HeatmapStack<T>> {
    expect_frame(spec.frame, landmarks.frame())?;
    let stack = encode_window(landmarks, spec, Window::full(spec))?;
    Ok(HeatmapStack { channels: stack, frame: spec.frame })
}

/// Encodes only `window` of the full-canvas stack; equal to cropping the
/// output of [`encode_heatmaps`] but without materialising the full canvas.
pub fn encode_heatmaps_window<T: Scalar>(
    landmarks: &LandmarkSet,
    spec: &HeatmapSpec,
    window: Window,
) -> Result<HeatmapStack<T>> {
    expect_frame(spec.frame, landmarks.frame())?;
    if window.top + window.height > spec.height || window.left + window.width > spec.width {
        return Err(invalid(format!("window {window:?} exceeds {}x{} canvas", spec.height, spec.width)));
    }
    Ok(HeatmapStack { channels: encode_window(landmarks, spec, window)?, frame: Frame::PatchLocal })
}

fn encode_window<T: Scalar>(landmarks: &LandmarkSet, spec: &HeatmapSpec, win: Window) -> Result<Tensor<T>> {
    if landmarks.len() != spec.num_landmarks {
        return Err(invalid(format!(
            "expected {} landmarks, got {}",
            spec.num_landmarks,
            landmarks.len()
        )));
    }
    let plane = win.height * win.width;
    let k = spec.num_landmarks;
    let mut data = vec![T::zero(); (k + 1) * plane];
    for (i, &p) in landmarks.points().iter().enumerate() {
        if landmarks.is_valid(i) {
            gaussian_into(p, spec, win, &mut data[i * plane..(i + 1) * plane]);
        }
    }
    let (fg, bg) = data.split_at_mut(k * plane);
    for (px, b) in bg.iter_mut().enumerate() {
        let s: T = (0..k).map(|c| fg[c * plane + px]).sum();
        *b = (T::one() - s).max(T::zero());
    }
    Tensor::new(&[k + 1, win.height, win.width], data)
}

/// Max minus mean below this marks a channel as flat.
pub const FLAT_TOLERANCE: f64 = 1e-6;

/// Argmax decode of the landmark channels (background ignored). Ties go to
/// the first occurrence in row-major order.
pub fn decode_coarse<T: Scalar>(stack: &HeatmapStack<T>) -> Result<LandmarkSet> {
    let k = stack.num_landmarks();
    let w = stack.width();
    let mut points = Vec::with_capacity(k);
    let mut status = Vec::with_capacity(k);
    for c in 0..k {
        let ch = stack.channel(c);
        let mut best = 0;
        let mut best_v = ch[0];
        let mut sum = 0.0;
        for (i, &v) in ch.iter().enumerate() {
            sum += v.to_f64_lossy();
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let max = best_v.to_f64_lossy();
        let mean = sum / ch.len() as f64;
        let s = if !max.is_finite() || ch.iter().all(|&v| v == T::zero()) {
            PointStatus::Invalid
        } else if max - mean < FLAT_TOLERANCE {
            PointStatus::LowConfidence
        } else {
            PointStatus::Valid
        };
        points.push(Point::new((best % w) as f64, (best / w) as f64));
        status.push(s);
    }
    LandmarkSet::with_status(points, status, stack.frame)
}

/// Threshold applied after per-channel max-normalisation.
pub const FINE_THRESHOLD: f64 = 0.5;

/// Per landmark channel: divide by the channel maximum, drop values below
/// [`FINE_THRESHOLD`], return the unweighted centroid of what remains.
pub fn decode_fine<T: Scalar>(stack: &HeatmapStack<T>) -> Result<LandmarkSet> {
    let k = stack.num_landmarks();
    let w = stack.width();
    let mut points = Vec::with_capacity(k);
    let mut status = Vec::with_capacity(k);
    for c in 0..k {
        let ch = stack.channel(c);
        let max = ch.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        if !(max > T::zero() && max.is_finite()) {
            points.push(Point::default());
            status.push(PointStatus::Invalid);
            continue;
        }
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
        for (i, &v) in ch.iter().enumerate() {
            if (v / max).to_f64_lossy() >= FINE_THRESHOLD {
                sx += (i % w) as f64;
                sy += (i / w) as f64;
                n += 1;
            }
        }
        points.push(Point::new(sx / n as f64, sy / n as f64));
        status.push(PointStatus::Valid);
    }
    LandmarkSet::with_status(points, status, stack.frame)
}

const DUMP_MAGIC: &[u8; 8] = b"CEPHHMAP";
const DUMP_VERSION: u32 = 1;

/// Writes a stack as: magic, version u32, channels u32, height u32, width
/// u32, frame tag u8, then row-major little-endian f32 values.
pub fn write_heatmap_dump<T: Scalar>(stack: &HeatmapStack<T>, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(25 + stack.channels.len() * 4);
    buf.extend_from_slice(DUMP_MAGIC);
    buf.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    for d in [stack.num_channels(), stack.height(), stack.width()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(stack.frame.tag());
    for &v in stack.channels.data() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_heatmap_dump(mut input: impl Read) -> Result<HeatmapStack<f32>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 25 || &buf[..8] != DUMP_MAGIC {
        return Err(Error::Format("not a heatmap dump".into()));
    }
    let word = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if word(8) != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported heatmap dump version {}", word(8))));
    }
    let (c, h, w) = (word(12) as usize, word(16) as usize, word(20) as usize);
    let frame = Frame::from_tag(buf[24])?;
    let body = &buf[25..];
    if body.len() != c * h * w * 4 {
        return Err(Error::Format("heatmap dump size does not match its header".into()));
    }
    let data = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    HeatmapStack::new(Tensor::new(&[c, h, w], data)?, frame)
}

pub fn save_heatmap_dump<T: Scalar>(stack: &HeatmapStack<T>, path: &Path) -> Result<()> {
    write_heatmap_dump(stack, std::io::BufWriter::new(std::fs::File::create(path)?))
}
