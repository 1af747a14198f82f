//! Resolution augmentation: resample each sample to a pixel area drawn
//! uniformly from a fixed range, then crop/pad to a fixed canvas.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{center_crop_or_pad, DatasetManifest, Sample, SegMask, DEFAULT_TARGET};
use crate::error::{Error, Result};

pub const MIN_ZOOM_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RAConfig {
    /// mm² per pixel
    pub area_lo: f64,
    pub area_hi: f64,
    pub target_size: usize,
}

impl Default for RAConfig {
    fn default() -> Self {
        Self {
            area_lo: 0.954,
            area_hi: 2.692,
            target_size: DEFAULT_TARGET,
        }
    }
}

impl RAConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.area_lo > 0.0 && self.area_lo <= self.area_hi) {
            return Err(Error::Config(format!(
                "RA area range {}..{} invalid",
                self.area_lo, self.area_hi
            )));
        }
        Ok(())
    }

    /// Maps a unit variate onto the area range.
    pub fn area_at(&self, u: f64) -> f64 {
        self.area_lo + u * (self.area_hi - self.area_lo)
    }
}

/// Uniform draw over `[area_lo, area_hi]`, uniform in area (not in linear spacing).
pub fn sample_target_area(rng: &mut impl Rng, cfg: &RAConfig) -> f64 {
    let u: f64 = rng.random();
    cfg.area_at(u)
}

fn bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|c| coord(c, sx, w)).collect();
    let mut out = Array2::zeros((out_h, out_w));
    for r in 0..out_h {
        let (y0, y1, fy) = coord(r, sy, h);
        for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = src[[y0, x0]] as f64 * (1.0 - fx) + src[[y0, x1]] as f64 * fx;
            let bottom = src[[y1, x0]] as f64 * (1.0 - fx) + src[[y1, x1]] as f64 * fx;
            out[[r, c]] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    out
}

fn nearest<T: Copy + Default>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let idx = |o: usize, scale: f64, n: usize| (((o as f64 + 0.5) * scale) as usize).min(n - 1);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| src[[idx(r, sy, h), idx(c, sx, w)]])
}

/// Zooms by `f = sqrt(area0 / target_area)`: bilinear for the image,
/// nearest-neighbour for the mask. New spacing is `spacing / f`.
pub fn resample_to_area(sample: &Sample, target_area: f64) -> Result<Sample> {
    if !(target_area > 0.0 && target_area.is_finite()) {
        return Err(Error::Config(format!("target area {target_area} must be positive")));
    }
    let img = &sample.image;
    let (row_mm, col_mm) = img.spacing_mm;
    if !(row_mm > 0.0 && col_mm > 0.0) {
        return Err(Error::InvalidImage(format!("spacing {:?} must be positive", img.spacing_mm)));
    }
    let f = (row_mm * col_mm / target_area).sqrt();
    let (h, w) = img.pixels.dim();
    let zoom = |n: usize| ((n as f64 * f).round() as usize).max(1);
    let (height, width) = (zoom(h), zoom(w));
    if height < MIN_ZOOM_DIM || width < MIN_ZOOM_DIM {
        return Err(Error::DegenerateZoom { height, width });
    }
    let pixels = if (height, width) == (h, w) {
        img.pixels.clone()
    } else {
        bilinear(&img.pixels, height, width)
    };
    let mask = sample.mask.as_ref().map(|m| SegMask {
        labels: nearest(&m.labels, height, width),
    });
    Ok(Sample {
        image: img.with_pixels(pixels, (row_mm / f, col_mm / f)),
        mask,
    })
}

/// Draw a target area, resample, then crop/pad to `cfg.target_size`.
pub fn apply_ra(sample: &Sample, rng: &mut impl Rng, cfg: &RAConfig) -> Result<Sample> {
    cfg.validate()?;
    let area = sample_target_area(rng, cfg);
    let zoomed = resample_to_area(sample, area)?;
    Ok(center_crop_or_pad(&zoomed, cfg.target_size))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub vendor: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResolutionHistogram {
    pub rows: Vec<HistogramRow>,
}

impl ResolutionHistogram {
    pub fn counts(&self, vendor: &str) -> Vec<usize> {
        self.rows.iter().filter(|r| r.vendor == vendor).map(|r| r.count).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("vendor,bin_lo,bin_hi,count\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.vendor, r.bin_lo, r.bin_hi, r.count);
        }
        s
    }
}

/// Per-vendor counts of records per pixel-area bin. Bins are half-open
/// except the last; areas outside the edges land in the nearest end bin so
/// every record is counted.
pub fn resolution_histogram(
    manifest: &DatasetManifest,
    bin_edges: &[f64],
) -> Result<ResolutionHistogram> {
    if manifest.records.is_empty() {
        return Err(Error::Config("histogram of an empty manifest".into()));
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("bin edges must be at least two increasing values".into()));
    }
    let nbins = bin_edges.len() - 1;
    let bin_of = |area: f64| {
        bin_edges[1..nbins]
            .iter()
            .position(|&edge| area < edge)
            .unwrap_or(nbins - 1)
    };
    let mut rows = Vec::new();
    for vendor in &manifest.vendors {
        let mut counts = vec![0usize; nbins];
        for r in manifest.records.iter().filter(|r| &r.vendor == vendor) {
            counts[bin_of(r.pixel_area())] += 1;
        }
        for (i, count) in counts.into_iter().enumerate() {
            rows.push(HistogramRow {
                vendor: vendor.clone(),
                bin_lo: bin_edges[i],
                bin_hi: bin_edges[i + 1],
                count,
            });
        }
    }
    Ok(ResolutionHistogram { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Image2D, Phase, SampleRecord};
    use proptest::prelude::*;

    fn sample(h: usize, w: usize, spacing: f64, mask: Option<Array2<u8>>) -> Sample {
        Sample {
            image: Image2D {
                pixels: Array2::from_shape_fn((h, w), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 11.0),
                spacing_mm: (spacing, spacing),
                vendor: "A".into(),
                subject_id: "A000".into(),
                phase: Phase::ED,
            },
            mask: mask.map(|labels| SegMask { labels }),
        }
    }

    #[test]
    fn area_endpoints_and_midpoint() {
        let cfg = RAConfig::default();
        assert_eq!(cfg.area_at(0.0), 0.954);
        assert!((cfg.area_at(1.0) - 2.692).abs() < 1e-12);
        assert!((cfg.area_at(0.5) - 1.823).abs() < 1e-12);
    }

    #[test]
    fn zoom_300_to_200() {
        let out = resample_to_area(&sample(300, 300, 1.0, None), 2.25).unwrap();
        assert_eq!(out.image.pixels.dim(), (200, 200));
        assert!((out.image.spacing_mm.0 - 1.5).abs() < 1e-12);
        assert!((out.image.spacing_mm.1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn identity_area_keeps_geometry() {
        let s = sample(64, 80, 1.3, None);
        let out = resample_to_area(&s, 1.3 * 1.3).unwrap();
        assert_eq!(out.image.pixels, s.image.pixels);
        assert!((out.image.spacing_mm.0 - 1.3).abs() < 1e-12);
    }

    #[test]
    fn degenerate_zoom_rejected() {
        let err = resample_to_area(&sample(20, 20, 1.0, None), 100.0).unwrap_err();
        assert!(matches!(err, Error::DegenerateZoom { .. }));
    }

    #[test]
    fn disk_area_scales_with_zoom() {
        let n = 200;
        let disk = Array2::from_shape_fn((n, n), |(r, c)| {
            let (y, x) = (r as f64 + 0.5 - 100.0, c as f64 + 0.5 - 100.0);
            u8::from(y * y + x * x <= 60.0 * 60.0)
        });
        let before = disk.iter().filter(|&&v| v == 1).count() as f64;
        // f = 0.5 means the pixel area grows four-fold.
        let out = resample_to_area(&sample(n, n, 1.0, Some(disk)), 4.0).unwrap();
        let m = out.mask.unwrap();
        assert!(m.label_set().iter().all(|v| *v <= 1));
        let after = m.count(1) as f64;
        assert!((after - 0.25 * before).abs() <= 0.15 * 0.25 * before, "{after} vs {before}");
    }

    #[test]
    fn histogram_single_record() {
        let rec = SampleRecord {
            image_uri: "x".into(),
            mask_uri: None,
            vendor: "A".into(),
            spacing_mm: [1.2, 1.0],
            subject_id: "A0".into(),
            phase: Phase::ED,
            slice_index: 0,
            labeled: false,
            provenance: None,
        };
        let mut b = rec.clone();
        b.vendor = "B".into();
        b.spacing_mm = [1.9, 1.0];
        let m = DatasetManifest::new(".", vec!["A".into(), "B".into(), "C".into()], vec![rec, b]);
        let h = resolution_histogram(&m, &[1.0, 1.5, 2.0]).unwrap();
        assert_eq!(h.counts("A"), vec![1, 0]);
        assert_eq!(h.counts("B"), vec![0, 1]);
        assert_eq!(h.counts("C"), vec![0, 0]);
        assert!(h.to_csv().starts_with("vendor,bin_lo,bin_hi,count\nA,1,1.5,1\n"));
    }

    proptest! {
        #[test]
        fn ra_output_contract(h in 100usize..300, w in 100usize..300, sp in 0.8f64..1.8, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mask = Array2::from_shape_fn((h, w), |(r, c)| ((r / 9 + c / 13) % 3) as u8);
            let s = sample(h, w, sp, Some(mask));
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = RAConfig::default();
            let out = apply_ra(&s, &mut rng, &cfg).unwrap();
            prop_assert_eq!(out.image.pixels.dim(), (224, 224));
            let area = out.image.pixel_area();
            prop_assert!(area >= cfg.area_lo - 1e-9 && area <= cfg.area_hi + 1e-9);
            let before = s.mask.unwrap().label_set();
            for v in out.mask.unwrap().label_set() {
                prop_assert!(v == 0 || before.contains(&v));
            }
        }

        #[test]
        fn round_trip_dims_within_one(h in 32usize..200, w in 32usize..200, area in 0.5f64..3.0) {
            let s = sample(h, w, 1.1, None);
            let there = resample_to_area(&s, area).unwrap();
            let back = resample_to_area(&there, 1.1 * 1.1).unwrap();
            let (bh, bw) = back.image.pixels.dim();
            prop_assert!((bh as i64 - h as i64).abs() <= 1);
            prop_assert!((bw as i64 - w as i64).abs() <= 1);
        }
    }
}
