//! Mask prediction and per-vendor, per-class Dice reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;

use crate::data::{preprocess, DatasetManifest, Image2D, SegMask, CLASS_NAMES, DEFAULT_TARGET, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{image_batch, to_vec_f64};

const EVAL_BATCH: usize = 4;

/// `2|P∩G| / (|P| + |G|)` for one class; 1.0 when both are empty.
pub fn dice_coefficient(pred: &Array2<u8>, gt: &Array2<u8>, class_id: u8) -> Result<f64> {
    if pred.dim() != gt.dim() {
        let (image_h, image_w) = pred.dim();
        let (mask_h, mask_w) = gt.dim();
        return Err(Error::DimensionMismatch {
            image_h,
            image_w,
            mask_h,
            mask_w,
        });
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (ia, ib) = (a == class_id, b == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Mean Dice over LV, MYO and RV.
pub fn mean_foreground_dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    let mut sum = 0.0;
    for c in 1..NUM_CLASSES as u8 {
        sum += dice_coefficient(pred, gt, c)?;
    }
    Ok(sum / (NUM_CLASSES - 1) as f64)
}

/// Per-pixel argmax over a `(4, H, W)` row-major probability buffer; ties
/// go to the lowest class index.
pub fn argmax_classes(probs: &[f64], h: usize, w: usize) -> Array2<u8> {
    let hw = h * w;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let p = r * w + c;
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if probs[k * hw + p] > probs[best * hw + p] {
                best = k;
            }
        }
        best as u8
    })
}

/// Masks for a batch of preprocessed images, in inference mode.
pub fn predict_masks(model: &Model, images: &[&Image2D]) -> Result<Vec<SegMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let pixels: Vec<_> = chunk.iter().map(|i| &i.pixels).collect();
        let x = image_batch(&pixels, model.dtype())?;
        let probs = model.predict_probs(&x, false)?;
        let (b, _, h, w) = probs.dims4()?;
        let flat = to_vec_f64(&probs)?;
        let per = NUM_CLASSES * h * w;
        for i in 0..b {
            out.push(SegMask {
                labels: argmax_classes(&flat[i * per..(i + 1) * per], h, w),
            });
        }
    }
    Ok(out)
}

pub fn predict_mask(model: &Model, image: &Image2D) -> Result<SegMask> {
    Ok(predict_masks(model, &[image])?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub vendor: String,
    /// 1 = LV, 2 = MYO, 3 = RV
    pub class_id: u8,
    pub dice: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Per-slice foreground Dice, keyed by vendor, for range checks.
    pub per_sample: BTreeMap<String, Vec<[f64; 3]>>,
}

impl EvalReport {
    pub fn dice(&self, vendor: &str, class_id: u8) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.vendor == vendor && r.class_id == class_id)
            .map(|r| r.dice)
    }

    /// Mean over the three foreground classes for one vendor.
    pub fn vendor_mean(&self, vendor: &str) -> Option<f64> {
        let v: Vec<f64> = (1..NUM_CLASSES as u8).filter_map(|c| self.dice(vendor, c)).collect();
        (v.len() == NUM_CLASSES - 1).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean over several vendors' foreground means, weighted by slice count.
    pub fn pooled_mean(&self, vendors: &[&str]) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for v in vendors {
            let samples = self.per_sample.get(*v)?;
            for s in samples {
                sum += s.iter().sum::<f64>() / 3.0;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn vendors(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.vendor.clone()).collect();
        v.dedup();
        v
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,vendor,class,dice,n\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{}",
                r.model, r.vendor, CLASS_NAMES[r.class_id as usize], r.dice, r.n
            );
        }
        s
    }

    pub fn merge(reports: &[EvalReport]) -> EvalReport {
        let mut out = EvalReport::default();
        for r in reports {
            out.rows.extend(r.rows.iter().cloned());
        }
        out
    }
}

/// Table with one row per model and LV/MYO/RV columns per vendor.
pub fn format_table(report: &EvalReport) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut vendors: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !vendors.contains(&r.vendor.as_str()) {
            vendors.push(&r.vendor);
        }
    }
    let name_w = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
    let mut s = String::new();
    let _ = write!(s, "{:name_w$} ", "Model");
    for v in &vendors {
        let _ = write!(s, "| {:^20} ", format!("Vendor {v}"));
    }
    s.push('\n');
    let _ = write!(s, "{:name_w$} ", "");
    for _ in &vendors {
        let _ = write!(s, "| {:>6} {:>6} {:>6} ", "LV", "MYO", "RV");
    }
    s.push('\n');
    for m in &models {
        let _ = write!(s, "{m:name_w$} ");
        for v in &vendors {
            s.push_str("| ");
            for c in 1..NUM_CLASSES as u8 {
                let d = report
                    .rows
                    .iter()
                    .find(|r| r.model == *m && r.vendor == *v && r.class_id == c)
                    .map(|r| format!("{:.3}", r.dice))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(s, "{d:>6} ");
            }
        }
        s.push('\n');
    }
    s
}

/// Preprocesses (normalize + crop, no augmentation) and scores every record.
/// Dice is averaged uniformly over slices within each vendor.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, model_name: &str) -> Result<EvalReport> {
    if let Some((index, r)) = manifest.records.iter().enumerate().find(|(_, r)| r.mask_uri.is_none()) {
        return Err(Error::MissingMask {
            index,
            subject_id: r.subject_id.clone(),
        });
    }
    let mut per_sample: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    let indices: Vec<usize> = (0..manifest.records.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let samples = chunk
            .iter()
            .map(|&i| preprocess(&manifest.read_sample(i)?, DEFAULT_TARGET))
            .collect::<Result<Vec<_>>>()?;
        let images: Vec<&Image2D> = samples.iter().map(|s| &s.image).collect();
        let preds = predict_masks(model, &images)?;
        for (s, pred) in samples.iter().zip(preds) {
            let gt = &s.mask.as_ref().expect("checked above").labels;
            let mut d = [0.0; 3];
            for (k, c) in (1..NUM_CLASSES as u8).enumerate() {
                d[k] = dice_coefficient(&pred.labels, gt, c)?;
            }
            per_sample.entry(s.image.vendor.clone()).or_default().push(d);
        }
    }
    let mut rows = Vec::new();
    for vendor in &manifest.vendors {
        let Some(samples) = per_sample.get(vendor) else { continue };
        for (k, c) in (1..NUM_CLASSES as u8).enumerate() {
            rows.push(EvalRow {
                model: model_name.to_string(),
                vendor: vendor.clone(),
                class_id: c,
                dice: samples.iter().map(|d| d[k]).sum::<f64>() / samples.len() as f64,
                n: samples.len(),
            });
        }
    }
    Ok(EvalReport { rows, per_sample })
}
