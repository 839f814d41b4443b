//! Procedural cephalogram stand-ins.
//!
//! Each image shows a filled ellipse over a shaded background, a faint ridge
//! and Gaussian noise. Landmark 0 is the topmost point of the ellipse; every
//! landmark `k` carries a bright square marker with one corner exactly on the
//! landmark, extending into quadrant `k mod 4`. Landmarks `k >= 1` sit at 0.6
//! of the ellipse axes, at angle `-pi/2 + 2 pi k / K` plus jitter. The global
//! layout is readable at low resolution while the exact corner needs full
//! resolution.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{sha256_hex, write_image_png, write_landmark_file, write_manifest, DatasetLayout, ManifestRow};
use super::{CephDataset, Item, Split};
use crate::codec::{Frame, LandmarkSet, Point};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub canvas: usize,
    pub num_landmarks: usize,
    /// Minimum pairwise landmark distance, in pixels.
    pub min_separation: f64,
    pub noise_sigma: f64,
    /// Leading fraction of items tagged `train`; the rest are `test1`.
    pub train_fraction: f64,
    pub pixel_spacing: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            count: 200,
            canvas: 256,
            num_landmarks: 5,
            min_separation: 24.0,
            noise_sigma: 0.03,
            train_fraction: 0.75,
            pixel_spacing: 1.0,
        }
    }
}

const SUPERSAMPLE: usize = 4;
const BACKGROUND: f64 = 0.15;
const ELLIPSE_GAIN: f64 = 0.35;
const MARKER_GAIN: f64 = 0.4;
const RIDGE_GAIN: f64 = 0.1;

/// Geometry of one synthetic image.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub cx: f64,
    pub cy: f64,
    /// Horizontal semi-axis.
    pub a: f64,
    /// Vertical semi-axis.
    pub b: f64,
    pub marker: f64,
    pub landmarks: Vec<Point>,
    /// Ridge as a line `nx * x + ny * y = d` with half-width `ridge_w`.
    pub ridge: (f64, f64, f64),
    pub ridge_w: f64,
    pub gradient: (f64, f64),
}

fn quadrant(k: usize) -> (f64, f64) {
    [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)][k % 4]
}

impl Scene {
    fn draw<R: Rng>(rng: &mut R, c: f64, k: usize, min_sep: f64) -> Result<Self> {
        for _ in 0..1000 {
            let cx = c * (0.5 + rng.gen_range(-0.04..0.04));
            let cy = c * (0.54 + rng.gen_range(-0.04..0.04));
            let a = c * rng.gen_range(0.28..0.34);
            let b = c * rng.gen_range(0.26..0.32);
            let marker = 0.07 * c;
            let mut landmarks = vec![Point::new(cx, cy - b)];
            for i in 1..k {
                let t = -PI / 2.0 + 2.0 * PI * i as f64 / k as f64 + rng.gen_range(-0.12..0.12);
                let r = 0.6 + rng.gen_range(-0.06..0.06);
                landmarks.push(Point::new(cx + r * a * t.cos(), cy + r * b * t.sin()));
            }
            let margin = marker + 2.0;
            let on_canvas = landmarks.iter().all(|p| p.x >= margin && p.y >= margin && p.x <= c - 1.0 - margin && p.y <= c - 1.0 - margin);
            let separated = landmarks
                .iter()
                .enumerate()
                .all(|(i, p)| landmarks[i + 1..].iter().all(|q| p.distance(*q) >= min_sep));
            if on_canvas && separated {
                let th = rng.gen_range(0.0..PI);
                let (nx, ny) = (th.cos(), th.sin());
                let d = nx * cx + ny * cy + rng.gen_range(-0.3..0.3) * c;
                return Ok(Self {
                    cx,
                    cy,
                    a,
                    b,
                    marker,
                    landmarks,
                    ridge: (nx, ny, d),
                    ridge_w: 0.012 * c,
                    gradient: (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
                });
            }
        }
        Err(invalid(format!("cannot place {k} landmarks {min_sep} px apart on a {c} px canvas")))
    }

    /// Noise-free intensity at continuous position `(x, y)`.
    pub fn intensity(&self, x: f64, y: f64, canvas: f64) -> f64 {
        let mut v = BACKGROUND + self.gradient.0 * (x / canvas - 0.5) + self.gradient.1 * (y / canvas - 0.5);
        let e = ((x - self.cx) / self.a).powi(2) + ((y - self.cy) / self.b).powi(2);
        if e <= 1.0 {
            v += ELLIPSE_GAIN;
        }
        let (nx, ny, d) = self.ridge;
        if (nx * x + ny * y - d).abs() <= self.ridge_w {
            v += RIDGE_GAIN;
        }
        for (k, p) in self.landmarks.iter().enumerate() {
            let (sx, sy) = quadrant(k);
            let (u, w) = ((x - p.x) * sx, (y - p.y) * sy);
            if (0.0..self.marker).contains(&u) && (0.0..self.marker).contains(&w) {
                v += MARKER_GAIN;
            }
        }
        v
    }

    /// Supersampled rendering; pixel `(i, j)` covers `[j - 0.5, j + 0.5] x [i - 0.5, i + 0.5]`.
    pub fn render(&self, canvas: usize) -> Vec<f64> {
        let c = canvas as f64;
        let s = SUPERSAMPLE as f64;
        let mut out = Vec::with_capacity(canvas * canvas);
        for i in 0..canvas {
            for j in 0..canvas {
                let mut acc = 0.0;
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let y = i as f64 - 0.5 + (si as f64 + 0.5) / s;
                        let x = j as f64 - 0.5 + (sj as f64 + 0.5) / s;
                        acc += self.intensity(x, y, c);
                    }
                }
                out.push(acc / (s * s));
            }
        }
        out
    }
}

/// Draws the scene list for a configuration; item `i` of
/// [`synth_generate`] renders `scenes[i]`.
pub fn synth_scenes(config: &SynthConfig) -> Result<Vec<Scene>> {
    if config.canvas < 128 {
        return Err(invalid(format!("synthetic canvas must be at least 128 px, got {}", config.canvas)));
    }
    if config.num_landmarks == 0 {
        return Err(invalid("synthetic datasets need at least one landmark"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.count).map(|_| Scene::draw(&mut rng, config.canvas as f64, config.num_landmarks, config.min_separation)).collect()
}

/// Generates a square synthetic dataset in the raw frame (crop offset 0).
pub fn synth_generate(config: &SynthConfig) -> Result<CephDataset> {
    let scenes = synth_scenes(config)?;
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x006e_6f69_7365);
    let n_train = (config.count as f64 * config.train_fraction).round() as usize;
    let mut items = Vec::with_capacity(config.count);
    for (i, scene) in scenes.iter().enumerate() {
        let px: Vec<f32> = scene
            .render(config.canvas)
            .into_iter()
            .map(|v| {
                let n = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).clamp(0.0, 1.0) as f32
            })
            .collect();
        let image = Tensor::new(&[1, config.canvas, config.canvas], px)?;
        let l = LandmarkSet::new(scene.landmarks.clone(), Frame::Raw);
        items.push(Item {
            id: format!("{:03}", i + 1),
            image,
            annotations: vec![l.clone(), l],
            split: if i < n_train { Split::Train } else { Split::Test1 },
            frame: Frame::Raw,
            out_of_crop: vec![],
        });
    }
    let ds = CephDataset { items, pixel_spacing: config.pixel_spacing, num_landmarks: config.num_landmarks };
    ds.validate()?;
    Ok(ds)
}

/// Writes a raw-frame dataset in `layout` under `root` together with its
/// checksum manifest; returns the manifest rows.
pub fn write_dataset(ds: &CephDataset, root: &Path, layout: &DatasetLayout) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::with_capacity(ds.items.len());
    for it in &ds.items {
        if it.frame != Frame::Raw {
            return Err(invalid(format!("item {} is not in the raw frame", it.id)));
        }
        let rel = format!("{}/{}.png", layout.image_dir, it.id);
        let path = root.join(&rel);
        write_image_png(&path, &it.image)?;
        for (dir, ann) in layout.annotator_dirs.iter().zip(&it.annotations) {
            write_landmark_file(&root.join(dir).join(format!("{}.txt", it.id)), ann)?;
        }
        rows.push(ManifestRow { id: it.id.clone(), split: it.split, image: rel, sha256: sha256_hex(&std::fs::read(&path)?) });
    }
    write_manifest(&root.join(&layout.manifest), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { count: 4, canvas: 128, ..Default::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.items[0].image, c.items[0].image);
    }

    #[test]
    fn rejects_tiny_canvas() {
        assert!(synth_generate(&SynthConfig { canvas: 64, ..small() }).is_err());
    }
}
