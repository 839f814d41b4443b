//! On-disk dataset layout: grayscale images, per-image "x,y" annotation text
//! files per annotator, and an optional checksum manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use super::{isbi_split, CephDataset, Item, Split};
use crate::codec::{Frame, LandmarkSet, Point, PointStatus};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Directory layout of a dataset root. Annotator directories are listed in
/// priority order; the first one is treated as the senior annotator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetLayout {
    pub image_dir: String,
    pub annotator_dirs: Vec<String>,
    pub manifest: String,
    pub num_landmarks: usize,
    pub pixel_spacing: f64,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self {
            image_dir: "RawImage".into(),
            annotator_dirs: vec!["AnnotationsByMD/400_senior".into(), "AnnotationsByMD/400_junior".into()],
            manifest: "manifest.csv".into(),
            num_landmarks: 19,
            pixel_spacing: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    /// Image path relative to the dataset root.
    pub image: String,
    pub sha256: String,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Parses one annotation file: the first `num_landmarks` lines are `x,y`
/// pairs, anything after them is ignored. `nan,nan` marks a missing point.
pub fn parse_landmark_file(path: &Path, num_landmarks: usize, frame: Frame) -> Result<LandmarkSet> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::with_capacity(num_landmarks);
    let mut status = Vec::with_capacity(num_landmarks);
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    for (n, line) in text.lines().enumerate().take(num_landmarks) {
        let line = line.trim();
        let (xs, ys) = line
            .split_once(',')
            .ok_or_else(|| err(n + 1, format!("expected `x,y`, found `{line}`")))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| err(n + 1, format!("bad coordinate `{}`: {e}", s.trim())));
        let (x, y) = (parse(xs)?, parse(ys)?);
        if x.is_nan() || y.is_nan() {
            points.push(Point::new(0.0, 0.0));
            status.push(PointStatus::Invalid);
        } else if x.is_finite() && y.is_finite() {
            points.push(Point::new(x, y));
            status.push(PointStatus::Valid);
        } else {
            return Err(err(n + 1, format!("non-finite coordinate `{line}`")));
        }
    }
    if points.len() < num_landmarks {
        return Err(err(points.len() + 1, format!("expected {num_landmarks} landmark lines, found {}", points.len())));
    }
    LandmarkSet::with_status(points, status, frame)
}

/// Writes landmarks in the annotation layout; invalid points become `nan,nan`.
pub fn write_landmark_file(path: &Path, landmarks: &LandmarkSet) -> Result<()> {
    let mut out = String::new();
    for (i, p) in landmarks.points().iter().enumerate() {
        if landmarks.is_valid(i) {
            out.push_str(&format!("{},{}\n", p.x, p.y));
        } else {
            out.push_str("nan,nan\n");
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a grayscale image as `[1, H, W]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Tensor::new(&[1, h as usize, w as usize], img.into_raw())
}

/// Writes a `[1, H, W]` image in `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_image_png(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(invalid(format!("expected a single-channel image, got {c} channels")));
    }
    let px: Vec<u16> = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, px).ok_or_else(|| invalid("image buffer size"))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    buf.save(path)?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub(crate) fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a dataset root in the challenge layout. Images are found recursively
/// under `layout.image_dir` (bmp or png) and keyed by file stem; each
/// annotator directory must hold `<id>.txt` for every image. Annotator
/// directories that do not exist at all are skipped. Splits come from the
/// manifest when present (its checksums are verified), otherwise from the
/// challenge id ranges.
pub fn load_isbi(root: &Path, layout: &DatasetLayout) -> Result<CephDataset> {
    let image_root = root.join(&layout.image_dir);
    if !image_root.is_dir() {
        return Err(invalid(format!("image directory {} not found", image_root.display())));
    }
    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in WalkDir::new(&image_root).sort_by_file_name() {
        let entry = entry.map_err(|e| invalid(format!("walking {}: {e}", image_root.display())))?;
        let p = entry.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("bmp" | "png")) {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if let Some(prev) = images.insert(id.clone(), p.to_path_buf()) {
                return Err(invalid(format!("duplicate image id {id}: {} and {}", prev.display(), p.display())));
            }
        }
    }
    if images.is_empty() {
        return Err(invalid(format!("no images under {}", image_root.display())));
    }
    let annotators: Vec<PathBuf> =
        layout.annotator_dirs.iter().map(|d| root.join(d)).filter(|d| d.is_dir()).collect();
    if annotators.is_empty() {
        return Err(invalid(format!("none of the annotator directories {:?} exist", layout.annotator_dirs)));
    }
    let manifest_path = root.join(&layout.manifest);
    let manifest: Option<BTreeMap<String, ManifestRow>> = if manifest_path.is_file() {
        Some(read_manifest(&manifest_path)?.into_iter().map(|r| (r.id.clone(), r)).collect())
    } else {
        None
    };

    let mut items = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let bytes = fs::read(path)?;
        let split = match &manifest {
            Some(m) => {
                let row = m.get(id).ok_or_else(|| invalid(format!("image {id} missing from manifest")))?;
                let digest = sha256_hex(&bytes);
                if digest != row.sha256 {
                    return Err(invalid(format!("checksum mismatch for {}", path.display())));
                }
                row.split
            }
            None => isbi_split(id),
        };
        let img = image::load_from_memory(&bytes)?.to_luma32f();
        let (w, h) = img.dimensions();
        let image = Tensor::new(&[1, h as usize, w as usize], img.into_raw())?;
        let mut annotations = Vec::with_capacity(annotators.len());
        for dir in &annotators {
            let f = dir.join(format!("{id}.txt"));
            if !f.is_file() {
                return Err(invalid(format!("item {id}: annotation file {} is missing", f.display())));
            }
            annotations.push(parse_landmark_file(&f, layout.num_landmarks, Frame::Raw)?);
        }
        items.push(Item { id: id.clone(), image, annotations, split, frame: Frame::Raw, out_of_crop: vec![] });
    }
    let ds = CephDataset { items, pixel_spacing: layout.pixel_spacing, num_landmarks: layout.num_landmarks };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_challenge_lines() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("001.txt");
        fs::write(&f, "1234,987\n 10.5, 20\nnan,nan\n1\n2\n").unwrap();
        let l = parse_landmark_file(&f, 3, Frame::Raw).unwrap();
        assert_eq!(l.point(0), Point::new(1234.0, 987.0));
        assert_eq!(l.point(1), Point::new(10.5, 20.0));
        assert!(!l.is_valid(2));
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("002.txt");
        fs::write(&f, "1,2\n3;4\n").unwrap();
        let e = parse_landmark_file(&f, 2, Frame::Raw).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("002.txt:2"), "{msg}");
        let short = parse_landmark_file(&f, 5, Frame::Raw);
        assert!(short.is_err());
    }

    #[test]
    fn landmark_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a/b.txt");
        let mut l = LandmarkSet::new(vec![Point::new(0.1, 2.0), Point::new(1e-3, 7.25)], Frame::Raw);
        l.set_status(1, PointStatus::Invalid);
        write_landmark_file(&f, &l).unwrap();
        let back = parse_landmark_file(&f, 2, Frame::Raw).unwrap();
        assert_eq!(back.point(0), l.point(0));
        assert!(!back.is_valid(1));
    }

    #[test]
    fn png_round_trip_is_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.png");
        let img = Tensor::from_fn(&[1, 5, 7], |i| i as f32 / 34.0);
        write_image_png(&f, &img).unwrap();
        let back = read_image(&f).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
