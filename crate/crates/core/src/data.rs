//! Samples, masks, manifests and the on-disk sample format.
//!
//! A sample lives in its own directory:
//!
//! - `meta.json`: `height`, `width`, `row_mm`, `col_mm`, `vendor`, `subject_id`,
//!   `phase`, `has_mask` (plus `provenance` for factor-augmented samples)
//! - `image.f32`: row-major little-endian `f32`, `height * width` values
//! - `mask.u8`: optional, row-major `u8`, `height * width` values
//!
//! A dataset is described by a `manifest.json` with a `vendors` array and a
//! `records` array whose URIs are relative to the manifest's directory.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["BG", "LV", "MYO", "RV"];
pub const DEFAULT_TARGET: usize = 224;
pub const MIN_IMAGE_DIM: usize = 16;

/// Fill value for padded image pixels: the bottom of the normalized range.
pub const IMAGE_PAD_VALUE: f32 = -1.0;

const NORM_EPS: f64 = 1e-8;
const CLIP_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    ED,
    ES,
    #[serde(rename = "other")]
    Other,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::ED => "ED",
            Phase::ES => "ES",
            Phase::Other => "other",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ED" => Ok(Phase::ED),
            "ES" => Ok(Phase::ES),
            "other" => Ok(Phase::Other),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub pixels: Array2<f32>,
    /// (row, col) spacing in millimetres.
    pub spacing_mm: (f64, f64),
    pub vendor: String,
    pub subject_id: String,
    pub phase: Phase,
}

impl Image2D {
    pub fn new(
        pixels: Array2<f32>,
        spacing_mm: (f64, f64),
        vendor: impl Into<String>,
        subject_id: impl Into<String>,
        phase: Phase,
    ) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < MIN_IMAGE_DIM || w < MIN_IMAGE_DIM {
            return Err(Error::InvalidImage(format!(
                "{h}x{w} is smaller than {MIN_IMAGE_DIM}x{MIN_IMAGE_DIM}"
            )));
        }
        if !(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0) {
            return Err(Error::InvalidImage(format!(
                "spacing {spacing_mm:?} must be positive"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels"));
        }
        Ok(Self {
            pixels,
            spacing_mm,
            vendor: vendor.into(),
            subject_id: subject_id.into(),
            phase,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Physical area of one pixel in mm².
    pub fn pixel_area(&self) -> f64 {
        self.spacing_mm.0 * self.spacing_mm.1
    }

    pub(crate) fn with_pixels(&self, pixels: Array2<f32>, spacing_mm: (f64, f64)) -> Self {
        Self {
            pixels,
            spacing_mm,
            vendor: self.vendor.clone(),
            subject_id: self.subject_id.clone(),
            phase: self.phase,
        }
    }
}

/// Segmentation labels: 0 = BG, 1 = LV, 2 = MYO, 3 = RV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub labels: Array2<u8>,
}

impl SegMask {
    pub fn new(labels: Array2<u8>) -> Result<Self> {
        if let Some(&value) = labels.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel { value });
        }
        Ok(Self { labels })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Sorted set of labels present.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; NUM_CLASSES];
        for &v in self.labels.iter() {
            seen[v as usize] = true;
        }
        (0..NUM_CLASSES as u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&v| v == class).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image2D,
    pub mask: Option<SegMask>,
}

impl Sample {
    pub fn new(image: Image2D, mask: Option<SegMask>) -> Result<Self> {
        if let Some(m) = &mask {
            check_dims(&image, m)?;
        }
        Ok(Self { image, mask })
    }

    pub fn labeled(&self) -> bool {
        self.mask.is_some()
    }
}

fn check_dims(image: &Image2D, mask: &SegMask) -> Result<()> {
    let (image_h, image_w) = image.pixels.dim();
    let (mask_h, mask_w) = mask.dim();
    if (image_h, image_w) != (mask_h, mask_w) {
        return Err(Error::DimensionMismatch {
            image_h,
            image_w,
            mask_h,
            mask_w,
        });
    }
    Ok(())
}

/// Origin of a factor-augmented sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub anatomy_vendor: String,
    pub anatomy_source: String,
    pub modality_vendor: String,
    pub modality_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_uri: Option<String>,
    pub vendor: String,
    pub spacing_mm: [f64; 2],
    pub subject_id: String,
    pub phase: Phase,
    #[serde(default)]
    pub slice_index: u32,
    #[serde(default)]
    pub labeled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl SampleRecord {
    pub fn pixel_area(&self) -> f64 {
        self.spacing_mm[0] * self.spacing_mm[1]
    }

    /// Stable human-readable key, e.g. `A003/ES/1`.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.subject_id, self.phase.as_str(), self.slice_index)
    }

    fn order(&self, other: &Self) -> Ordering {
        self.subject_id
            .cmp(&other.subject_id)
            .then(self.phase.cmp(&other.phase))
            .then(self.slice_index.cmp(&other.slice_index))
            .then(self.image_uri.cmp(&other.image_uri))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub vendors: Vec<String>,
    /// Vendors kept out of training by default (evaluation-only domains).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub held_out_vendors: Vec<String>,
    pub records: Vec<SampleRecord>,
    /// Directory the record URIs are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, vendors: Vec<String>, mut records: Vec<SampleRecord>) -> Self {
        records.sort_by(SampleRecord::order);
        Self {
            vendors,
            held_out_vendors: Vec::new(),
            records,
            root: root.into(),
        }
    }

    pub fn resolve(&self, uri: &str) -> PathBuf {
        self.root.join(uri)
    }

    pub fn labeled_count(&self) -> usize {
        self.records.iter().filter(|r| r.labeled).count()
    }

    /// Manifest restricted to records matching `keep`, sharing the same root.
    pub fn filter(&self, keep: impl Fn(&SampleRecord) -> bool) -> Self {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let vendors = self
            .vendors
            .iter()
            .filter(|v| records.iter().any(|r| &r.vendor == *v))
            .cloned()
            .collect();
        Self {
            vendors,
            held_out_vendors: self.held_out_vendors.clone(),
            records,
            root: self.root.clone(),
        }
    }

    /// Drops records from held-out vendors.
    pub fn without_held_out(&self) -> Self {
        let mut m = self.filter(|r| !self.held_out_vendors.contains(&r.vendor));
        m.held_out_vendors.clear();
        m
    }

    pub fn read_sample(&self, index: usize) -> Result<Sample> {
        read_sample(&self.root, &self.records[index])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, json + "\n").at(path)
    }
}

/// Loads and validates `manifest.json`. Records come back sorted by
/// subject id, then phase, then slice index.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).at(path)?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
    manifest.root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let explicit_labeled: Vec<Option<bool>> = raw["records"]
        .as_array()
        .map(|a| a.iter().map(|r| r.get("labeled").and_then(|v| v.as_bool())).collect())
        .unwrap_or_default();

    for (index, record) in manifest.records.iter_mut().enumerate() {
        let has_mask = record.mask_uri.is_some();
        if let Some(Some(flag)) = explicit_labeled.get(index) {
            if *flag != has_mask {
                return Err(Error::MalformedRecord {
                    index,
                    reason: format!("labeled={flag} but mask_uri present={has_mask}"),
                });
            }
        }
        record.labeled = has_mask;
        if !manifest.vendors.contains(&record.vendor) {
            return Err(Error::MalformedRecord {
                index,
                reason: format!("vendor {:?} not declared", record.vendor),
            });
        }
        if !(record.spacing_mm[0] > 0.0 && record.spacing_mm[1] > 0.0) {
            return Err(Error::MalformedRecord {
                index,
                reason: format!("spacing {:?} must be positive", record.spacing_mm),
            });
        }
        for uri in std::iter::once(&record.image_uri).chain(record.mask_uri.iter()) {
            if !manifest.root.join(uri).is_file() {
                return Err(Error::DanglingUri {
                    index,
                    uri: uri.clone(),
                });
            }
        }
    }
    for v in &manifest.held_out_vendors {
        if !manifest.vendors.contains(v) {
            return Err(Error::Config(format!("held-out vendor {v:?} not declared")));
        }
    }
    manifest.records.sort_by(SampleRecord::order);
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    height: usize,
    width: usize,
    row_mm: f64,
    col_mm: f64,
    vendor: String,
    subject_id: String,
    phase: Phase,
    has_mask: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

pub const META_FILE: &str = "meta.json";
pub const IMAGE_FILE: &str = "image.f32";
pub const MASK_FILE: &str = "mask.u8";

/// Writes a sample directory and returns the record describing it, with
/// URIs relative to `root`.
pub fn write_sample(
    root: &Path,
    rel_dir: &str,
    sample: &Sample,
    slice_index: u32,
    provenance: Option<Provenance>,
) -> Result<SampleRecord> {
    let dir = root.join(rel_dir);
    fs::create_dir_all(&dir).at(&dir)?;
    let img = &sample.image;
    let (height, width) = img.pixels.dim();
    let meta = Meta {
        height,
        width,
        row_mm: img.spacing_mm.0,
        col_mm: img.spacing_mm.1,
        vendor: img.vendor.clone(),
        subject_id: img.subject_id.clone(),
        phase: img.phase,
        has_mask: sample.mask.is_some(),
        provenance: provenance.clone(),
    };
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, json + "\n").at(&meta_path)?;

    let mut bytes = Vec::with_capacity(height * width * 4);
    for v in img.pixels.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let image_path = dir.join(IMAGE_FILE);
    fs::write(&image_path, bytes).at(&image_path)?;

    let mask_uri = match &sample.mask {
        Some(mask) => {
            let mask_path = dir.join(MASK_FILE);
            let bytes: Vec<u8> = mask.labels.iter().copied().collect();
            fs::write(&mask_path, bytes).at(&mask_path)?;
            Some(format!("{rel_dir}/{MASK_FILE}"))
        }
        None => None,
    };
    Ok(SampleRecord {
        image_uri: format!("{rel_dir}/{IMAGE_FILE}"),
        labeled: mask_uri.is_some(),
        mask_uri,
        vendor: img.vendor.clone(),
        spacing_mm: [img.spacing_mm.0, img.spacing_mm.1],
        subject_id: img.subject_id.clone(),
        phase: img.phase,
        slice_index,
        provenance,
    })
}

/// Reads the sample a record points at. `root` is the manifest directory.
pub fn read_sample(root: &Path, record: &SampleRecord) -> Result<Sample> {
    let image_path = root.join(&record.image_uri);
    let dir = image_path.parent().unwrap_or(root);
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).at(&meta_path)?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::CorruptHeader {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    let n = meta.height * meta.width;

    let bytes = fs::read(&image_path).at(&image_path)?;
    if bytes.len() != n * 4 {
        return Err(Error::CorruptHeader {
            path: image_path,
            reason: format!(
                "header says {}x{} ({} bytes) but file has {} bytes",
                meta.height,
                meta.width,
                n * 4,
                bytes.len()
            ),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let pixels = Array2::from_shape_vec((meta.height, meta.width), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let image = Image2D::new(
        pixels,
        (meta.row_mm, meta.col_mm),
        meta.vendor,
        meta.subject_id,
        meta.phase,
    )?;

    let mask = match &record.mask_uri {
        Some(uri) => {
            let mask_path = root.join(uri);
            let bytes = fs::read(&mask_path).at(&mask_path)?;
            if bytes.len() != n {
                let (mask_h, mask_w) = if bytes.len() % meta.width == 0 {
                    (bytes.len() / meta.width, meta.width)
                } else {
                    (bytes.len(), 1)
                };
                return Err(Error::DimensionMismatch {
                    image_h: meta.height,
                    image_w: meta.width,
                    mask_h,
                    mask_w,
                });
            }
            let labels = Array2::from_shape_vec((meta.height, meta.width), bytes)
                .map_err(|e| Error::Shape(e.to_string()))?;
            Some(SegMask::new(labels)?)
        }
        None => None,
    };
    Sample::new(image, mask)
}

/// Per-image z-score with population standard deviation. Constant images
/// map to zeros.
pub fn zscore(pixels: &Array2<f32>) -> Result<Array2<f64>> {
    if pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image pixels"));
    }
    let n = pixels.len() as f64;
    let mean = pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = pixels
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(Array2::zeros(pixels.dim()));
    }
    Ok(pixels.mapv(|v| (v as f64 - mean) / (std + NORM_EPS)))
}

/// z-score, clip to ±3σ, then map linearly onto [-1, 1].
pub fn normalize_pixels(pixels: &Array2<f32>) -> Result<Array2<f32>> {
    let z = zscore(pixels)?;
    Ok(z.mapv(|v| (v.clamp(-CLIP_SIGMA, CLIP_SIGMA) / CLIP_SIGMA) as f32))
}

pub fn normalize_intensity(image: &Image2D) -> Result<Image2D> {
    let pixels = normalize_pixels(&image.pixels)?;
    Ok(image.with_pixels(pixels, image.spacing_mm))
}

/// Output index `o` reads input index `o + shift`.
fn axis_shift(dim: usize, target: usize) -> isize {
    if dim >= target {
        ((dim - target) / 2) as isize
    } else {
        -(((target - dim) / 2) as isize)
    }
}

fn crop_or_pad<T: Copy>(src: &Array2<T>, target: usize, fill: T) -> Array2<T> {
    let (h, w) = src.dim();
    let (sr, sc) = (axis_shift(h, target), axis_shift(w, target));
    Array2::from_shape_fn((target, target), |(r, c)| {
        let (y, x) = (r as isize + sr, c as isize + sc);
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            src[[y as usize, x as usize]]
        } else {
            fill
        }
    })
}

/// Center crop (offset `floor((dim - target) / 2)`) or symmetric pad
/// (floor before, ceil after) to `target × target`. The mask follows the
/// image exactly; padding is `-1` for the image and background for the mask.
pub fn center_crop_or_pad(sample: &Sample, target: usize) -> Sample {
    let image = sample.image.with_pixels(
        crop_or_pad(&sample.image.pixels, target, IMAGE_PAD_VALUE),
        sample.image.spacing_mm,
    );
    let mask = sample.mask.as_ref().map(|m| SegMask {
        labels: crop_or_pad(&m.labels, target, 0),
    });
    Sample { image, mask }
}

/// Normalization followed by the 224×224 crop: the deterministic
/// preprocessing every model input goes through.
pub fn preprocess(sample: &Sample, target: usize) -> Result<Sample> {
    let normalized = Sample {
        image: normalize_intensity(&sample.image)?,
        mask: sample.mask.clone(),
    };
    Ok(center_crop_or_pad(&normalized, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn image(pixels: Array2<f32>) -> Image2D {
        Image2D {
            pixels,
            spacing_mm: (1.0, 1.0),
            vendor: "A".into(),
            subject_id: "A000".into(),
            phase: Phase::ED,
        }
    }

    #[test]
    fn normalize_three_values() {
        let out = normalize_pixels(&array![[2.0f32, 4.0, 6.0]]).unwrap();
        let expect = [-0.408248, 0.0, 0.408248];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-5, "{o} vs {e}");
        }
        let z = zscore(&array![[2.0f32, 4.0, 6.0]]).unwrap();
        assert!((z[[0, 0]] + 1.2247449).abs() < 1e-6);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let out = normalize_pixels(&Array2::from_elem((20, 20), 3.5f32)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_nan() {
        let mut p = Array2::zeros((16, 16));
        p[[3, 3]] = f32::NAN;
        assert!(matches!(normalize_pixels(&p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn normalize_moments_independent_pass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = Array2::from_shape_fn((40, 50), |_| rng.random_range(-5.0f32..20.0));
        let z = zscore(&p).unwrap();
        let n = z.len() as f64;
        let mean: f64 = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
        let out = normalize_pixels(&p).unwrap();
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_300_keeps_center() {
        let p = Array2::from_shape_fn((300, 300), |(r, c)| (r * 1000 + c) as f32);
        let s = Sample { image: image(p), mask: None };
        let out = center_crop_or_pad(&s, 224);
        assert_eq!(out.image.pixels.dim(), (224, 224));
        assert_eq!(out.image.pixels[[0, 0]], 38_038.0);
        assert_eq!(out.image.pixels[[223, 223]], 261_261.0);
    }

    #[test]
    fn crop_224_is_identity() {
        let p = Array2::from_shape_fn((224, 224), |(r, c)| (r + 3 * c) as f32);
        let m = SegMask::new(Array2::from_shape_fn((224, 224), |(r, _)| (r % 4) as u8)).unwrap();
        let s = Sample { image: image(p), mask: Some(m) };
        assert_eq!(center_crop_or_pad(&s, 224), s);
    }

    #[test]
    fn pad_rows_crop_cols() {
        let p = Array2::from_shape_fn((200, 240), |(r, c)| (r * 1000 + c) as f32 / 1e6);
        let m = SegMask::new(Array2::from_elem((200, 240), 2u8)).unwrap();
        let s = Sample { image: image(p.clone()), mask: Some(m) };
        let out = center_crop_or_pad(&s, 224);
        let mask = out.mask.unwrap().labels;
        // Oracle: every output pixel checked against the expected source.
        for r in 0..224 {
            for c in 0..224 {
                let inside = (12..212).contains(&r);
                if inside {
                    assert_eq!(out.image.pixels[[r, c]], p[[r - 12, c + 8]]);
                    assert_eq!(mask[[r, c]], 2);
                } else {
                    assert_eq!(out.image.pixels[[r, c]], -1.0);
                    assert_eq!(mask[[r, c]], 0);
                }
            }
        }
    }

    #[test]
    fn invalid_label_rejected() {
        let mut l = Array2::zeros((16, 16));
        l[[0, 0]] = 4u8;
        assert!(matches!(SegMask::new(l), Err(Error::InvalidLabel { value: 4 })));
    }

    proptest! {
        #[test]
        fn crop_or_pad_always_target(h in 16usize..320, w in 16usize..320, target in 16usize..256) {
            let p = Array2::from_elem((h, w), 0.5f32);
            let l = Array2::from_shape_fn((h, w), |(r, c)| if (r + c) % 7 == 0 { 3u8 } else { 1 });
            let s = Sample { image: image(p), mask: Some(SegMask { labels: l }) };
            let out = center_crop_or_pad(&s, target);
            prop_assert_eq!(out.image.pixels.dim(), (target, target));
            let before = s.mask.unwrap().label_set();
            for v in out.mask.unwrap().label_set() {
                prop_assert!(v == 0 || before.contains(&v));
            }
        }

        #[test]
        fn normalized_range(vals in proptest::collection::vec(-1e3f32..1e3, 16 * 16)) {
            let p = Array2::from_shape_vec((16, 16), vals).unwrap();
            let out = normalize_pixels(&p).unwrap();
            prop_assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
