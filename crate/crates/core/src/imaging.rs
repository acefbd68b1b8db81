//! Image and value types shared by every stage of the pipeline, the canvas
//! normalization applied to radiographs and projections, and the on-disk
//! container and manifest formats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Intensity unit carried by an [`Image2D`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityUnit {
    XrayRelative,
    /// mg/cm³ × mm.
    DensityLineIntegral,
    /// Dataset-affine mapped into [-1, 1].
    Normalized,
}

impl IntensityUnit {
    pub fn code(self) -> u16 {
        match self {
            IntensityUnit::XrayRelative => 0,
            IntensityUnit::DensityLineIntegral => 1,
            IntensityUnit::Normalized => 2,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(IntensityUnit::XrayRelative),
            1 => Some(IntensityUnit::DensityLineIntegral),
            2 => Some(IntensityUnit::Normalized),
            _ => None,
        }
    }
}

/// Single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
    unit: IntensityUnit,
}

impl Image2D {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, unit: IntensityUnit) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {}×{} = {}",
                pixels.len(),
                width,
                height,
                width * height
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel at index {i}")));
        }
        if unit == IntensityUnit::Normalized {
            if let Some(i) = pixels.iter().position(|p| !(-1.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!(
                    "normalized pixel {} at index {i} outside [-1, 1]",
                    pixels[i]
                )));
            }
        }
        Ok(Image2D { width, height, pixels, unit })
    }

    pub fn filled(width: usize, height: usize, value: f32, unit: IntensityUnit) -> Result<Self> {
        Image2D::new(width, height, vec![value; width * height], unit)
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        unit: IntensityUnit,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image2D::new(width, height, pixels, unit)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn max(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.pixels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Bilinear sample at continuous pixel coordinates, clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let xmax = (self.width - 1) as f64;
        let ymax = (self.height - 1) as f64;
        let x = x.clamp(0.0, xmax);
        let y = y.clamp(0.0, ymax);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p = |xx: usize, yy: usize| self.get(xx, yy) as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStage {
    /// Target is the whole pelvis + femur projection.
    Stage1Bones,
    /// Target is the proximal femur region projection.
    Stage2Proximal,
}

/// Registered (x-ray, target projection) pair.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub id: String,
    pub xray: Image2D,
    pub target: Image2D,
    pub stage: PairStage,
    pub side: Side,
}

impl ImagePair {
    pub fn new(
        id: impl Into<String>,
        xray: Image2D,
        target: Image2D,
        stage: PairStage,
        side: Side,
    ) -> Result<Self> {
        if !xray.same_shape(&target) {
            return Err(Error::invalid(format!(
                "pair x-ray is {}×{} but target is {}×{}",
                xray.width(),
                xray.height(),
                target.width(),
                target.height()
            )));
        }
        Ok(ImagePair { id: id.into(), xray, target, stage, side })
    }
}

/// Ordinary least-squares line `y = slope·x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
    /// Residual standard error, `sqrt(SSR / (n - 2))`; zero when n == 2.
    pub residual_se: f64,
    pub n: usize,
}

impl LinearModel {
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::invalid(format!(
                "fit needs paired samples, got {} x and {} y",
                xs.len(),
                ys.len()
            )));
        }
        let n = xs.len();
        if n < 2 {
            return Err(Error::SingularFit(format!("{n} sample(s); at least 2 required")));
        }
        let nf = n as f64;
        let mx = xs.iter().sum::<f64>() / nf;
        let my = ys.iter().sum::<f64>() / nf;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        if sxx == 0.0 {
            return Err(Error::SingularFit("all regressor values are identical".into()));
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        let ssr: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| {
                let r = y - (slope * x + intercept);
                r * r
            })
            .sum();
        let residual_se = if n > 2 { (ssr / (nf - 2.0)).sqrt() } else { 0.0 };
        Ok(LinearModel { slope, intercept, residual_se, n })
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Affine map from raw intensity to the network's [-1, 1] range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Normalization {
    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !offset.is_finite() {
            return Err(Error::invalid(format!("normalization scale must be > 0, got {scale}")));
        }
        Ok(Normalization { scale, offset })
    }
}

/// `clamp((x − offset) / scale, −1, 1)`.
pub fn to_normalized(image: &Image2D, scale: f64, offset: f64) -> Result<Image2D> {
    Normalization::new(scale, offset)?;
    let pixels = image
        .pixels
        .iter()
        .map(|&p| ((p as f64 - offset) / scale).clamp(-1.0, 1.0) as f32)
        .collect();
    Image2D::new(image.width, image.height, pixels, IntensityUnit::Normalized)
}

/// Inverse of [`to_normalized`]; `unit` names the raw unit being restored.
pub fn from_normalized(image: &Image2D, scale: f64, offset: f64, unit: IntensityUnit) -> Result<Image2D> {
    Normalization::new(scale, offset)?;
    if image.unit != IntensityUnit::Normalized {
        return Err(Error::invalid("from_normalized expects a NORMALIZED image"));
    }
    let pixels = image
        .pixels
        .iter()
        .map(|&p| (p as f64 * scale + offset) as f32)
        .collect();
    Image2D::new(image.width, image.height, pixels, unit)
}

/// Splits the image at its horizontal center, keeps the requested half and
/// resamples it onto a `canvas_w × canvas_h` canvas.
///
/// The half is scaled by the larger of the two per-axis factors so every
/// canvas pixel is covered, centered, then cropped. Odd widths give the extra
/// column to the left half.
pub fn normalize_to_canvas(image: &Image2D, side: Side, canvas_w: usize, canvas_h: usize) -> Result<Image2D> {
    if canvas_w == 0 || canvas_h == 0 {
        return Err(Error::invalid(format!("canvas must be non-empty, got {canvas_w}×{canvas_h}")));
    }
    if image.width < 2 || image.height == 0 {
        return Err(Error::invalid(format!(
            "image of {}×{} cannot be split in half",
            image.width, image.height
        )));
    }
    let left_w = image.width.div_ceil(2);
    let (x0, half_w) = match side {
        Side::Left => (0, left_w),
        Side::Right => (left_w, image.width - left_w),
    };
    let half_h = image.height;

    let scale = f64::max(canvas_w as f64 / half_w as f64, canvas_h as f64 / half_h as f64);
    let crop_x = (half_w as f64 * scale - canvas_w as f64) / 2.0;
    let crop_y = (half_h as f64 * scale - canvas_h as f64) / 2.0;

    let identity = scale == 1.0 && crop_x == 0.0 && crop_y == 0.0;
    let mut pixels = Vec::with_capacity(canvas_w * canvas_h);
    for j in 0..canvas_h {
        for i in 0..canvas_w {
            let v = if identity {
                image.get(x0 + i, j)
            } else {
                let sx = (i as f64 + 0.5 + crop_x) / scale - 0.5;
                let sy = (j as f64 + 0.5 + crop_y) / scale - 0.5;
                sample_half(image, x0, half_w, sx, sy) as f32
            };
            pixels.push(v);
        }
    }
    Image2D::new(canvas_w, canvas_h, pixels, image.unit)
}

fn sample_half(image: &Image2D, x0: usize, half_w: usize, sx: f64, sy: f64) -> f64 {
    let sx = sx.clamp(0.0, (half_w - 1) as f64);
    let sy = sy.clamp(0.0, (image.height - 1) as f64);
    let ix = sx.floor() as usize;
    let iy = sy.floor() as usize;
    let ix1 = (ix + 1).min(half_w - 1);
    let iy1 = (iy + 1).min(image.height - 1);
    let fx = sx - ix as f64;
    let fy = sy - iy as f64;
    let p = |x: usize, y: usize| image.get(x0 + x, y) as f64;
    let top = p(ix, iy) * (1.0 - fx) + p(ix1, iy) * fx;
    let bottom = p(ix, iy1) * (1.0 - fx) + p(ix1, iy1) * fx;
    top * (1.0 - fy) + bottom * fy
}

const IMAGE_MAGIC: &[u8; 4] = b"BDR2";
const IMAGE_VERSION: u16 = 1;
const IMAGE_HEADER_LEN: usize = 16;

pub fn encode_image(image: &Image2D) -> Vec<u8> {
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + image.pixels.len() * 4);
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    out.extend_from_slice(&image.unit.code().to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    for p in &image.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Image2D> {
    let fmt = |field: &'static str, message: String| Error::Format { field, message };
    if bytes.len() < IMAGE_HEADER_LEN {
        return Err(fmt("header", format!("{} bytes, header needs {IMAGE_HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..4] != IMAGE_MAGIC {
        return Err(fmt("magic", format!("expected \"BDR2\", found {:?}", &bytes[0..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != IMAGE_VERSION {
        return Err(fmt("version", format!("unsupported version {version}")));
    }
    let unit = IntensityUnit::from_code(u16_at(6))
        .ok_or_else(|| fmt("unit", format!("unknown unit code {}", u16_at(6))))?;
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fmt("width", format!("{width}×{height} overflows")))?;
    let payload = &bytes[IMAGE_HEADER_LEN..];
    if payload.len() < expected {
        return Err(fmt(
            "payload",
            format!("truncated: {} bytes for {width}×{height} pixels (need {expected})", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(fmt(
            "payload",
            format!("dimension mismatch: {} bytes for {width}×{height} pixels (need {expected})", payload.len()),
        ));
    }
    let pixels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if pixels.iter().any(|p| !p.is_finite()) {
        return Err(fmt("payload", "non-finite pixel value".into()));
    }
    Image2D::new(width, height, pixels, unit).map_err(|e| fmt("unit", e.to_string()))
}

pub fn write_image(image: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub side: Side,
    pub xray_path: String,
    pub target_stage1_path: String,
    pub target_stage2_path: String,
    /// g/cm².
    pub true_dxa_bmd: f64,
    /// mg/cm³.
    pub true_qct_bmd: f64,
    pub split: Split,
}

/// Constants of the synthetic areal-BMD model
/// `dxa = a_known · pf_average(t) + b_known + noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BmdGroundTruth {
    pub a_known: f64,
    pub b_known: f64,
    pub noise_sd: f64,
    pub threshold_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub canvas: Canvas,
    pub entries: Vec<ManifestEntry>,
    /// Target (projection) intensity → NORMALIZED.
    pub normalization: Normalization,
    /// X-ray intensity → NORMALIZED.
    pub xray_normalization: Normalization,
    pub bmd_ground_truth: BmdGroundTruth,
    /// Phantom-insert calibration fitted while synthesizing the volumes.
    pub intensity_calibration: LinearModel,
    pub config_hash: String,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn validate(&self, root: Option<&Path>) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        Normalization::new(self.normalization.scale, self.normalization.offset)?;
        Normalization::new(self.xray_normalization.scale, self.xray_normalization.offset)?;
        if let Some(root) = root {
            for e in &self.entries {
                for p in [&e.xray_path, &e.target_stage1_path, &e.target_stage2_path] {
                    let full = root.join(p);
                    if !full.is_file() {
                        return Err(Error::invalid(format!(
                            "entry `{}` references missing file {}",
                            e.id,
                            full.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate(path.parent())?;
        Ok(manifest)
    }
}

/// Loads pairs from a manifest on disk and records which ids were read.
#[derive(Debug)]
pub struct DatasetReader {
    pub manifest: DatasetManifest,
    root: PathBuf,
    access_log: std::sync::Mutex<Vec<String>>,
}

impl DatasetReader {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(DatasetReader { manifest, root, access_log: Default::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Reads an entry's x-ray and the requested target, both normalized to the
    /// manifest canvas but still in raw units.
    pub fn load_pair(&self, entry: &ManifestEntry, stage: PairStage) -> Result<ImagePair> {
        self.access_log.lock().unwrap().push(entry.id.clone());
        let canvas = self.manifest.canvas;
        let xray = read_image(self.root.join(&entry.xray_path))?;
        let target_path = match stage {
            PairStage::Stage1Bones => &entry.target_stage1_path,
            PairStage::Stage2Proximal => &entry.target_stage2_path,
        };
        let target = read_image(self.root.join(target_path))?;
        let xray = normalize_to_canvas(&xray, entry.side, canvas.width, canvas.height)?;
        let target = normalize_to_canvas(&target, entry.side, canvas.width, canvas.height)?;
        ImagePair::new(entry.id.clone(), xray, target, stage, entry.side)
    }

    pub fn load_split(&self, split: Split, stage: PairStage) -> Result<Vec<(ManifestEntry, ImagePair)>> {
        self.manifest
            .entries_in(split)
            .map(|e| Ok((e.clone(), self.load_pair(e, stage)?)))
            .collect()
    }

    /// Ids read so far, in access order.
    pub fn accessed_ids(&self) -> Vec<String> {
        self.access_log.lock().unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image2D {
        Image2D::from_fn(w, h, IntensityUnit::XrayRelative, |x, y| (x + 1000 * y) as f32).unwrap()
    }

    #[test]
    fn image_rejects_non_finite_and_out_of_range() {
        assert!(Image2D::new(2, 1, vec![0.0, f32::NAN], IntensityUnit::XrayRelative).is_err());
        assert!(Image2D::new(2, 1, vec![0.0, 1.5], IntensityUnit::Normalized).is_err());
        assert!(Image2D::new(2, 2, vec![0.0; 3], IntensityUnit::XrayRelative).is_err());
    }

    #[test]
    fn canvas_split_identity_scale() {
        let img = ramp(512, 512);
        let out = normalize_to_canvas(&img, Side::Left, 256, 512).unwrap();
        assert_eq!((out.width(), out.height()), (256, 512));
        for y in 0..512 {
            for x in 0..256 {
                assert_eq!(out.get(x, y), img.get(x, y));
            }
        }
        let right = normalize_to_canvas(&img, Side::Right, 256, 512).unwrap();
        assert_eq!(right.get(0, 0), img.get(256, 0));
        assert_eq!(right.get(255, 511), img.get(511, 511));
    }

    #[test]
    fn canvas_fit_and_crop_matches_hand_computed_map() {
        // Right half of 600×500 is 300×500; cover scale = max(256/300, 512/500) = 1.024.
        // Resized half is 307.2×512, so 25.6 px are cropped on each side horizontally.
        let img = Image2D::from_fn(600, 500, IntensityUnit::XrayRelative, |x, _| x as f32).unwrap();
        let out = normalize_to_canvas(&img, Side::Right, 256, 512).unwrap();
        assert_eq!((out.width(), out.height()), (256, 512));
        // Source column for output column i: (i + 0.5 + 25.6)/1.024 - 0.5, offset by 300.
        let expect = |i: f64| 300.0 + (i + 0.5 + 25.6) / 1.024 - 0.5;
        assert!((out.get(0, 0) as f64 - expect(0.0)).abs() < 1e-3);
        assert!((out.get(0, 0) as f64 - 324.98828125).abs() < 1e-3);
        assert!((out.get(255, 0) as f64 - expect(255.0)).abs() < 1e-3);
        assert!((out.get(255, 0) as f64 - 574.01171875).abs() < 1e-3);

        let imgy = Image2D::from_fn(600, 500, IntensityUnit::XrayRelative, |_, y| y as f32).unwrap();
        let outy = normalize_to_canvas(&imgy, Side::Right, 256, 512).unwrap();
        // Row 0 maps to source -0.0117 (clamped to 0); row 511 maps to 499.0117 (clamped to 499).
        assert_eq!(outy.get(0, 0), 0.0);
        assert_eq!(outy.get(0, 511), 499.0);
        let mid = (255.0 + 0.5) / 1.024 - 0.5;
        assert!((outy.get(100, 255) as f64 - mid).abs() < 1e-3);
    }

    #[test]
    fn canvas_odd_width_extra_column_goes_left() {
        let img = ramp(5, 2);
        let left = normalize_to_canvas(&img, Side::Left, 3, 2).unwrap();
        let right = normalize_to_canvas(&img, Side::Right, 2, 2).unwrap();
        assert_eq!(left.pixels(), &[0.0, 1.0, 2.0, 1000.0, 1001.0, 1002.0]);
        assert_eq!(right.pixels(), &[3.0, 4.0, 1003.0, 1004.0]);
    }

    #[test]
    fn canvas_degenerate_inputs() {
        let img = ramp(4, 4);
        assert!(matches!(normalize_to_canvas(&img, Side::Left, 0, 512), Err(Error::InvalidArgument(_))));
        assert!(matches!(normalize_to_canvas(&img, Side::Left, 2, 0), Err(Error::InvalidArgument(_))));
        let thin = ramp(1, 4);
        assert!(normalize_to_canvas(&thin, Side::Left, 2, 2).is_err());
    }

    #[test]
    fn normalization_edges() {
        let img = Image2D::filled(3, 2, 250.0, IntensityUnit::DensityLineIntegral).unwrap();
        let n = to_normalized(&img, 100.0, 250.0).unwrap();
        assert!(n.pixels().iter().all(|&p| p == 0.0));
        let img = Image2D::filled(3, 2, 350.0, IntensityUnit::DensityLineIntegral).unwrap();
        let n = to_normalized(&img, 100.0, 250.0).unwrap();
        assert!(n.pixels().iter().all(|&p| p == 1.0));
        assert!(to_normalized(&img, 0.0, 0.0).is_err());
        assert!(to_normalized(&img, -1.0, 0.0).is_err());
        let clamped = to_normalized(&img, 10.0, 0.0).unwrap();
        assert!(clamped.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn container_round_trip_and_errors() {
        let img = Image2D::new(3, 2, vec![1.0, -2.5, 3.25, 0.0, 1e-30, 7e20], IntensityUnit::XrayRelative).unwrap();
        let bytes = encode_image(&img);
        assert_eq!(&bytes[0..4], b"BDR2");
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(decode_image(&bytes).unwrap(), img);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        match decode_image(&bad) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("expected magic error, got {other:?}"),
        }
        match decode_image(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { field, message }) => {
                assert_eq!(field, "payload");
                assert!(message.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(decode_image(&extra), Err(Error::Format { field: "payload", .. })));
        let mut unit = bytes;
        unit[6] = 9;
        assert!(matches!(decode_image(&unit), Err(Error::Format { field: "unit", .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bdr");
        let img = ramp(3, 2);
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);
        assert!(matches!(read_image(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn linear_fit_exact_and_singular() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 10.0).collect();
        let m = LinearModel::fit(&xs, &ys).unwrap();
        assert!((m.slope - 2.0).abs() < 1e-12);
        assert!((m.intercept - 10.0).abs() < 1e-12);
        assert!(m.residual_se.abs() < 1e-12);
        assert!(matches!(LinearModel::fit(&[1.0], &[2.0]), Err(Error::SingularFit(_))));
        assert!(matches!(LinearModel::fit(&[1.0, 1.0], &[2.0, 3.0]), Err(Error::SingularFit(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_round_trip(values in proptest::collection::vec(-1.0f64..1.0, 12),
                                     scale in 1.0f64..5000.0, offset in -2000.0f64..2000.0) {
                let raw: Vec<f32> = values.iter().map(|v| (offset + v * scale) as f32).collect();
                let img = Image2D::new(4, 3, raw.clone(), IntensityUnit::DensityLineIntegral).unwrap();
                let back = from_normalized(&to_normalized(&img, scale, offset).unwrap(), scale, offset,
                                           IntensityUnit::DensityLineIntegral).unwrap();
                for (a, b) in raw.iter().zip(back.pixels()) {
                    let tol = 1e-6 * (scale + offset.abs());
                    prop_assert!(((*a as f64) - (*b as f64)).abs() <= tol, "{} vs {}", a, b);
                }
            }

            #[test]
            fn container_bit_exact(bits in proptest::collection::vec(any::<u32>(), 6)) {
                let px: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).map(|f| if f.is_finite() { f } else { 0.0 }).collect();
                let img = Image2D::new(2, 3, px, IntensityUnit::XrayRelative).unwrap();
                let back = decode_image(&encode_image(&img)).unwrap();
                for (a, b) in img.pixels().iter().zip(back.pixels()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
