//! Synthetic multi-vendor cardiac phantoms.
//!
//! Each slice is a torso with two lungs and a heart made of concentric
//! ellipses: an LV blood pool inside a myocardial ring, with an RV crescent
//! abutting the ring. Vendors differ in pixel spacing and in an intensity
//! transfer curve (`bias + base^gamma + noise`).

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    write_sample, DatasetManifest, Image2D, Phase, Sample, SampleRecord, SegMask,
};
use crate::error::{Error, IoContext, Result};

/// Minimum pixel count per foreground class in every generated mask.
pub const MIN_CLASS_PIXELS: usize = 30;

const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VendorProfile {
    pub tag: String,
    /// Pixel-area interval in mm².
    pub spacing_range_mm2: (f64, f64),
    pub intensity_gamma: f64,
    pub intensity_bias: f64,
    pub noise_sigma: f64,
    pub labeled: bool,
    /// Evaluation-only domain: masks are written but training skips it.
    #[serde(default)]
    pub held_out: bool,
}

impl VendorProfile {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.spacing_range_mm2;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "vendor {}: spacing range {lo}..{hi} invalid",
                self.tag
            )));
        }
        if !(self.intensity_gamma > 0.0) {
            return Err(Error::Config(format!("vendor {}: gamma must be > 0", self.tag)));
        }
        if !(self.noise_sigma >= 0.0) || !self.intensity_bias.is_finite() {
            return Err(Error::Config(format!("vendor {}: bad noise/bias", self.tag)));
        }
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return Err(Error::Config(format!("vendor tag {:?} invalid", self.tag)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub vendor_profiles: Vec<VendorProfile>,
    pub subjects_per_vendor: usize,
    pub slices_per_subject: usize,
    /// Fresh subjects per vendor for the evaluation split (masks for all vendors).
    pub eval_subjects_per_vendor: usize,
    pub canvas_size: usize,
    pub seed: u64,
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vendor_profiles.is_empty() {
            return Err(Error::Config("no vendor profiles".into()));
        }
        if self.subjects_per_vendor == 0 || self.slices_per_subject == 0 {
            return Err(Error::Config("zero subjects or slices per vendor".into()));
        }
        if self.canvas_size < 64 {
            return Err(Error::Config("canvas must be at least 64 pixels".into()));
        }
        for (i, p) in self.vendor_profiles.iter().enumerate() {
            p.validate()?;
            if self.vendor_profiles[..i].iter().any(|q| q.tag == p.tag) {
                return Err(Error::Config(format!("duplicate vendor {}", p.tag)));
            }
        }
        Ok(())
    }

    pub fn supports_semi_supervised(&self) -> bool {
        let train = || self.vendor_profiles.iter().filter(|p| !p.held_out);
        train().any(|p| p.labeled) && train().any(|p| !p.labeled)
    }
}

/// Four vendors mirroring a 2-labeled / 1-unlabeled / 1-unseen split: A and B
/// labeled at fine resolution, C unlabeled at coarse resolution, D held out
/// at an intermediate, shifted resolution.
pub fn default_desk_config() -> PhantomConfig {
    let vendor = |tag: &str, range, gamma, bias, noise, labeled, held_out| VendorProfile {
        tag: tag.into(),
        spacing_range_mm2: range,
        intensity_gamma: gamma,
        intensity_bias: bias,
        noise_sigma: noise,
        labeled,
        held_out,
    };
    PhantomConfig {
        vendor_profiles: vec![
            vendor("A", (1.0, 1.3), 1.0, 0.0, 0.03, true, false),
            vendor("B", (1.1, 1.5), 1.5, 0.1, 0.04, true, false),
            vendor("C", (2.0, 2.4), 0.5, 0.3, 0.05, false, false),
            vendor("D", (1.7, 2.1), 0.8, -0.05, 0.04, true, true),
        ],
        subjects_per_vendor: 20,
        slices_per_subject: 3,
        eval_subjects_per_vendor: 10,
        canvas_size: 256,
        seed: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// One rendered slice. `sample.mask` is always present in memory;
/// `mask_on_disk` says whether the written dataset exposes it.
#[derive(Debug, Clone)]
pub struct PhantomSlice {
    pub sample: Sample,
    pub slice_index: u32,
    pub split: Split,
    pub mask_on_disk: bool,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    /// Semi-axis along the rotated first axis.
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dy * c + dx * s;
        let v = -dy * s + dx * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn scaled(&self, k: f64) -> Self {
        Self { a: self.a * k, b: self.b * k, ..*self }
    }

    fn grown(&self, t: f64) -> Self {
        Self { a: self.a + t, b: self.b + t, ..*self }
    }
}

/// Per-subject anatomy in millimetres, relative to the canvas centre.
#[derive(Debug, Clone)]
struct Anatomy {
    body: Ellipse,
    lungs: [Ellipse; 2],
    lv: Ellipse,
    myo_thickness: f64,
    rv: Ellipse,
}

impl Anatomy {
    fn draw(rng: &mut impl Rng) -> Self {
        let body = Ellipse {
            cy: rng.random_range(-5.0..5.0),
            cx: rng.random_range(-5.0..5.0),
            a: rng.random_range(95.0..115.0),
            b: rng.random_range(130.0..150.0),
            theta: rng.random_range(-0.1..0.1),
        };
        let lung = |side: f64, rng: &mut dyn rand::RngCore| Ellipse {
            cy: rng.random_range(-15.0..5.0),
            cx: side * rng.random_range(65.0..80.0),
            a: rng.random_range(50.0..65.0),
            b: rng.random_range(30.0..40.0),
            theta: rng.random_range(-0.2..0.2),
        };
        let lungs = [lung(-1.0, rng), lung(1.0, rng)];
        let a = rng.random_range(15.0..21.0);
        let lv = Ellipse {
            cy: rng.random_range(-8.0..8.0),
            cx: rng.random_range(-8.0..8.0),
            a,
            b: a * rng.random_range(0.8..1.0),
            theta: rng.random_range(0.0..PI),
        };
        let myo_thickness = rng.random_range(6.0..9.0);
        let outer = lv.a.max(lv.b) + myo_thickness;
        // RV sits on the image-left side of the LV.
        let phi = PI + rng.random_range(-0.4..0.4);
        let d = outer * rng.random_range(0.9..1.1);
        let rv = Ellipse {
            cy: lv.cy + d * phi.sin(),
            cx: lv.cx + d * phi.cos(),
            a: outer * rng.random_range(1.2..1.5),
            b: outer * rng.random_range(0.8..1.0),
            theta: phi + PI / 2.0,
        };
        Self {
            body,
            lungs,
            lv,
            myo_thickness,
            rv,
        }
    }

    /// Cardiac phase changes cavity size and wall thickness.
    fn at_phase(&self, phase: Phase, rng: &mut impl Rng) -> Self {
        let (cavity, wall, rv) = match phase {
            Phase::ED => (1.0, 1.0, 1.0),
            Phase::ES => (0.78, 1.25, 0.85),
            Phase::Other => (0.9, 1.1, 0.92),
        };
        let jitter = rng.random_range(0.95..1.05);
        let mut out = self.clone();
        out.lv = self.lv.scaled(cavity * jitter);
        out.myo_thickness = self.myo_thickness * wall;
        out.rv = self.rv.scaled(rv * jitter);
        out
    }
}

// Base tissue levels before the vendor transfer curve.
const AIR: f64 = 0.0;
const BODY: f64 = 0.35;
const LUNG: f64 = 0.08;
const MYO: f64 = 0.22;
const LV_BLOOD: f64 = 0.92;
const RV_BLOOD: f64 = 0.85;

fn rasterize(anatomy: &Anatomy, size: usize, spacing: f64) -> (Array2<u8>, Array2<f64>) {
    let half = size as f64 / 2.0;
    let myo_outer = anatomy.lv.grown(anatomy.myo_thickness);
    let mut labels = Array2::zeros((size, size));
    let mut base = Array2::from_elem((size, size), AIR);
    for r in 0..size {
        for c in 0..size {
            let y = (r as f64 + 0.5 - half) * spacing;
            let x = (c as f64 + 0.5 - half) * spacing;
            let (label, level) = if anatomy.lv.contains(y, x) {
                (1, LV_BLOOD)
            } else if myo_outer.contains(y, x) {
                (2, MYO)
            } else if anatomy.rv.contains(y, x) {
                (3, RV_BLOOD)
            } else if anatomy.lungs.iter().any(|l| l.contains(y, x)) {
                (0, LUNG)
            } else if anatomy.body.contains(y, x) {
                (0, BODY)
            } else {
                (0, AIR)
            };
            labels[[r, c]] = label;
            base[[r, c]] = level;
        }
    }
    (labels, base)
}

fn mask_ok(labels: &Array2<u8>) -> bool {
    let mut counts = [0usize; 4];
    for &v in labels.iter() {
        counts[v as usize] += 1;
    }
    counts[1..].iter().all(|&n| n >= MIN_CLASS_PIXELS) && lv_enclosed(labels)
}

/// True when no LV pixel is 4-connected to the image border through non-MYO
/// pixels, i.e. the myocardium is a closed ring around the blood pool.
pub fn lv_enclosed(labels: &Array2<u8>) -> bool {
    let (h, w) = labels.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && labels[[r, c]] != 2 {
                seen[[r, c]] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        if labels[[r, c]] == 1 {
            return false;
        }
        let neighbours = [
            (r.wrapping_sub(1), c),
            (r + 1, c),
            (r, c.wrapping_sub(1)),
            (r, c + 1),
        ];
        for (nr, nc) in neighbours {
            if nr < h && nc < w && !seen[[nr, nc]] && labels[[nr, nc]] != 2 {
                seen[[nr, nc]] = true;
                stack.push((nr, nc));
            }
        }
    }
    true
}

fn render(base: &Array2<f64>, profile: &VendorProfile, rng: &mut impl Rng) -> Array2<f32> {
    let noise = Normal::new(0.0, profile.noise_sigma.max(0.0)).expect("finite sigma");
    base.mapv(|b| {
        let n = if profile.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        (profile.intensity_bias + b.powf(profile.intensity_gamma) + n) as f32
    })
}

const PHASES: [Phase; 3] = [Phase::ED, Phase::ES, Phase::Other];

fn subject_id(tag: &str, split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("{tag}{index:03}"),
        Split::Eval => format!("{tag}E{index:03}"),
    }
}

/// Renders every slice of the dataset in memory. Pure function of `config`.
pub fn synthesize(config: &PhantomConfig) -> Result<Vec<PhantomSlice>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.canvas_size;
    let mut out = Vec::new();
    for split in [Split::Train, Split::Eval] {
        let subjects = match split {
            Split::Train => config.subjects_per_vendor,
            Split::Eval => config.eval_subjects_per_vendor,
        };
        for profile in &config.vendor_profiles {
            let mask_on_disk = match split {
                Split::Train => profile.labeled,
                Split::Eval => true,
            };
            for s in 0..subjects {
                let id = subject_id(&profile.tag, split, s);
                let (lo, hi) = profile.spacing_range_mm2;
                for slice in 0..config.slices_per_subject {
                    let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    let spacing = area.sqrt();
                    let phase = PHASES[slice % PHASES.len()];
                    let mut drawn = None;
                    for _ in 0..MAX_REDRAWS {
                        let anatomy = Anatomy::draw(&mut rng).at_phase(phase, &mut rng);
                        let (labels, base) = rasterize(&anatomy, size, spacing);
                        if mask_ok(&labels) {
                            drawn = Some((labels, base));
                            break;
                        }
                    }
                    let (labels, base) = drawn.ok_or_else(|| {
                        Error::Config(format!(
                            "vendor {}: could not draw a valid anatomy at spacing {spacing:.3}",
                            profile.tag
                        ))
                    })?;
                    let pixels = render(&base, profile, &mut rng);
                    let image = Image2D::new(
                        pixels,
                        (spacing, spacing),
                        profile.tag.clone(),
                        id.clone(),
                        phase,
                    )?;
                    out.push(PhantomSlice {
                        sample: Sample::new(image, Some(SegMask::new(labels)?))?,
                        slice_index: slice as u32,
                        split,
                        mask_on_disk,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    /// Training pool; held-out vendors are listed in `held_out_vendors`.
    pub train: DatasetManifest,
    /// Fresh subjects for every vendor, all with masks.
    pub eval: DatasetManifest,
}

pub const TRAIN_MANIFEST: &str = "manifest.json";
pub const EVAL_DIR: &str = "eval";

/// Writes `out/manifest.json` (training pool) and `out/eval/manifest.json`.
pub fn generate_phantom_dataset(config: &PhantomConfig, out: &Path) -> Result<PhantomDataset> {
    let slices = synthesize(config)?;
    let eval_root = out.join(EVAL_DIR);
    fs::create_dir_all(&eval_root).at(&eval_root)?;
    let mut train_records: Vec<SampleRecord> = Vec::new();
    let mut eval_records: Vec<SampleRecord> = Vec::new();
    for s in &slices {
        let root = match s.split {
            Split::Train => out,
            Split::Eval => eval_root.as_path(),
        };
        let img = &s.sample.image;
        let rel = format!("{}/{}_s{}", img.vendor, img.subject_id, s.slice_index);
        let on_disk = Sample {
            image: img.clone(),
            mask: s.sample.mask.clone().filter(|_| s.mask_on_disk),
        };
        let record = write_sample(root, &rel, &on_disk, s.slice_index, None)?;
        match s.split {
            Split::Train => train_records.push(record),
            Split::Eval => eval_records.push(record),
        }
    }
    let vendors: Vec<String> = config.vendor_profiles.iter().map(|p| p.tag.clone()).collect();
    let mut train = DatasetManifest::new(out, vendors.clone(), train_records);
    train.held_out_vendors = config
        .vendor_profiles
        .iter()
        .filter(|p| p.held_out)
        .map(|p| p.tag.clone())
        .collect();
    train.save(&out.join(TRAIN_MANIFEST))?;
    let eval = DatasetManifest::new(&eval_root, vendors, eval_records);
    eval.save(&eval_root.join(TRAIN_MANIFEST))?;
    Ok(PhantomDataset { train, eval })
}
