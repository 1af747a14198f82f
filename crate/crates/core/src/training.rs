//! Optimization loop: labeled/unlabeled batching, the weighted objective,
//! plateau learning-rate schedule and best-validation retention.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    center_crop_or_pad, load_manifest, normalize_intensity, preprocess, DatasetManifest, Image2D, Sample, SampleRecord,
};
use crate::error::{Error, IoContext, Result};
use crate::eval::{mean_foreground_dice, predict_masks};
use crate::losses::{
    dice_loss, focal_loss, latent_regression_loss, rec_loss, sample_modality_prior, total_loss, FocalParams,
    LossTerms, LossWeights,
};
use crate::model::{ArchDescriptor, Model, ModelKind};
use crate::nn::one_hot;
use crate::resolution::{apply_ra, RAConfig};

/// Epoch count used for desk-scale runs.
pub const DESK_EPOCHS: usize = 15;
/// Minimum validation gain that counts as an improvement for the plateau rule.
pub const PLATEAU_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Labeled data only.
    FS,
    /// Labeled and unlabeled batches, alternating.
    SS,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FS" => Ok(Self::FS),
            "SS" => Ok(Self::SS),
            _ => Err(Error::Config(format!("unknown training mode {s:?} (FS or SS)"))),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SDNET" => Ok(Self::SdNet),
            "UNET" | "U-NET" => Ok(Self::UNet),
            _ => Err(Error::Config(format!("unknown model {s:?} (SDNET or UNET)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub model: ModelKind,
    pub use_ra: bool,
    pub fa_dataset: Option<PathBuf>,
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub labeled_weights: LossWeights,
    pub unlabeled_weights: LossWeights,
    pub focal: FocalParams,
    /// Fraction of labeled subjects held back for validation.
    pub validation_fraction: f64,
    /// Train on vendors the manifest marks as held out.
    pub include_held_out: bool,
    pub ra: RAConfig,
    /// Overrides the default architecture for `model`.
    pub arch: Option<ArchDescriptor>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::FS,
            model: ModelKind::SdNet,
            use_ra: false,
            fa_dataset: None,
            lr0: 0.001,
            batch_size: 4,
            epochs: 50,
            plateau_patience: 2,
            plateau_factor: 0.1,
            seed: 0,
            labeled_weights: LossWeights::LABELED,
            unlabeled_weights: LossWeights::UNLABELED,
            focal: FocalParams::default(),
            validation_fraction: 0.1,
            include_held_out: false,
            ra: RAConfig::default(),
            arch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return bad("batch_size, epochs and plateau_patience must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must lie in [0, 1), got {}", self.validation_fraction));
        }
        if self.mode == TrainMode::SS && self.model == ModelKind::UNet {
            return bad("the U-Net baseline has no reconstruction path and cannot train semi-supervised".into());
        }
        if let Some(a) = &self.arch {
            if a.kind != self.model {
                return bad(format!("arch kind {:?} does not match model {:?}", a.kind, self.model));
            }
        }
        self.labeled_weights.validate()?;
        self.unlabeled_weights.validate()?;
        self.ra.validate()
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        self.arch.clone().unwrap_or_else(|| ArchDescriptor::for_kind(self.model))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }
}

/// A named training configuration from the ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    /// Command-line key, e.g. `fs-sdnet-ra`.
    pub key: &'static str,
    /// Display name, e.g. `FS SDNet+RA`.
    pub name: &'static str,
    pub config: TrainConfig,
    /// The preset only makes sense with a factor-augmented dataset.
    pub needs_fa: bool,
}

/// The five ablation models, in table order.
pub fn ablation_presets() -> Vec<Preset> {
    let sdnet = |mode, use_ra| TrainConfig {
        mode,
        use_ra,
        ..TrainConfig::default()
    };
    vec![
        Preset {
            key: "unet-ra",
            name: "U-Net+RA",
            config: TrainConfig {
                model: ModelKind::UNet,
                use_ra: true,
                labeled_weights: LossWeights::SEGMENTATION_ONLY,
                ..TrainConfig::default()
            },
            needs_fa: false,
        },
        Preset {
            key: "fs-sdnet",
            name: "FS SDNet",
            config: sdnet(TrainMode::FS, false),
            needs_fa: false,
        },
        Preset {
            key: "fs-sdnet-ra",
            name: "FS SDNet+RA",
            config: sdnet(TrainMode::FS, true),
            needs_fa: false,
        },
        Preset {
            key: "ss-sdnet-ra",
            name: "SS SDNet+RA",
            config: sdnet(TrainMode::SS, true),
            needs_fa: false,
        },
        Preset {
            key: "ss-sdnet-ra-fa",
            name: "SS SDNet+RA+FA",
            config: sdnet(TrainMode::SS, true),
            needs_fa: true,
        },
    ]
}

pub fn preset(key: &str) -> Result<Preset> {
    ablation_presets()
        .into_iter()
        .find(|p| p.key == key || p.name == key)
        .ok_or_else(|| {
            let keys: Vec<_> = ablation_presets().iter().map(|p| p.key).collect();
            Error::Config(format!("unknown preset {key:?}; expected one of {}", keys.join(", ")))
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Labeled,
    Unlabeled,
}

/// One mini-batch as indices into its pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub kind: BatchKind,
    pub indices: Vec<usize>,
}

/// Deterministic per-epoch batch order over a labeled and an unlabeled pool.
#[derive(Debug)]
pub struct BatchScheduler {
    mode: TrainMode,
    labeled: usize,
    unlabeled: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchScheduler {
    pub fn new(mode: TrainMode, labeled: usize, unlabeled: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if labeled == 0 {
            return Err(Error::EmptyPool("labeled"));
        }
        if mode == TrainMode::SS && unlabeled == 0 {
            return Err(Error::EmptyPool("unlabeled"));
        }
        Ok(Self {
            mode,
            labeled,
            unlabeled,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn shuffled_batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        let l = self.labeled.div_ceil(self.batch_size);
        match self.mode {
            TrainMode::FS => l,
            TrainMode::SS => 2 * l.min(self.unlabeled.div_ceil(self.batch_size)),
        }
    }

    /// Batches for the next epoch. FS yields every labeled batch; SS
    /// alternates L, U, L, U, … for `2·min` batches.
    pub fn next_epoch(&mut self) -> Vec<Batch> {
        let labeled = self.shuffled_batches(self.labeled);
        let wrap = |kind| move |indices| Batch { kind, indices };
        match self.mode {
            TrainMode::FS => labeled.into_iter().map(wrap(BatchKind::Labeled)).collect(),
            TrainMode::SS => {
                let unlabeled = self.shuffled_batches(self.unlabeled);
                labeled
                    .into_iter()
                    .zip(unlabeled)
                    .flat_map(|(l, u)| {
                        [
                            Batch { kind: BatchKind::Labeled, indices: l },
                            Batch { kind: BatchKind::Unlabeled, indices: u },
                        ]
                    })
                    .collect()
            }
        }
    }
}

/// Reduce-on-plateau rule: after `patience` epochs without an improvement
/// larger than [`PLATEAU_TOLERANCE`], multiply the rate by `factor`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr: lr0,
            factor,
            patience,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation score; returns the rate for the next epoch.
    pub fn observe(&mut self, val: f64) -> f64 {
        if val > self.best + PLATEAU_TOLERANCE {
            self.best = val;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Batch means; `None` when the term never appeared in the epoch.
    pub rec: Option<f64>,
    pub zrec: Option<f64>,
    pub dice: Option<f64>,
    pub focal: Option<f64>,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub checkpoint: Option<PathBuf>,
}

pub const LOG_HEADER: &str = "epoch,lr,rec,zrec,dice,focal,val_dice";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{},{},{:.9}",
                e.epoch,
                e.lr,
                opt(e.rec),
                opt(e.zrec),
                opt(e.dice),
                opt(e.focal),
                e.val_dice
            );
        }
        s
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }
}

/// A preloaded training example. FA-generated samples are already
/// preprocessed and skip RA.
#[derive(Debug, Clone)]
struct PoolItem {
    sample: Sample,
    generated: bool,
}

/// Splits labeled subjects into train/validation sets.
/// Returns the validation subject ids.
pub fn validation_subjects(manifest: &DatasetManifest, fraction: f64, seed: u64) -> BTreeSet<String> {
    let subjects: BTreeSet<&str> = manifest
        .records
        .iter()
        .filter(|r| r.labeled && r.provenance.is_none())
        .map(|r| r.subject_id.as_str())
        .collect();
    let mut subjects: Vec<&str> = subjects.into_iter().collect();
    if fraction <= 0.0 || subjects.len() < 2 {
        return BTreeSet::new();
    }
    let n_val = ((subjects.len() as f64 * fraction).round() as usize).clamp(1, subjects.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    subjects.shuffle(&mut rng);
    subjects[..n_val].iter().map(|s| s.to_string()).collect()
}

fn load_items(manifest: &DatasetManifest, keep: impl Fn(usize) -> bool, target: usize) -> Result<Vec<PoolItem>> {
    let mut out = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        let raw = manifest.read_sample(i)?;
        let generated = r.provenance.is_some();
        let sample = if generated {
            center_crop_or_pad(&raw, target)
        } else {
            Sample {
                image: normalize_intensity(&raw.image)?,
                mask: raw.mask,
            }
        };
        out.push(PoolItem { sample, generated });
    }
    Ok(out)
}

/// Training pools and validation set assembled from a manifest.
#[derive(Debug)]
pub struct TrainingData {
    labeled: Vec<PoolItem>,
    unlabeled: Vec<PoolItem>,
    validation: Vec<Sample>,
}

impl TrainingData {
    pub fn prepare(config: &TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        let target = config.ra.target_size;
        let base = if config.include_held_out {
            manifest.clone()
        } else {
            manifest.without_held_out()
        };
        let val_subjects = validation_subjects(&base, config.validation_fraction, config.seed);
        let is_val = |r: &SampleRecord| r.provenance.is_none() && val_subjects.contains(&r.subject_id);
        let mut labeled = load_items(&base, |i| base.records[i].labeled && !is_val(&base.records[i]), target)?;
        let mut unlabeled = if config.mode == TrainMode::SS {
            load_items(&base, |i| !base.records[i].labeled, target)?
        } else {
            Vec::new()
        };
        let mut validation = Vec::new();
        for (i, r) in base.records.iter().enumerate() {
            if is_val(r) {
                validation.push(preprocess(&base.read_sample(i)?, target)?);
            }
        }
        if let Some(path) = &config.fa_dataset {
            let fa = load_manifest(path)?;
            labeled.extend(load_items(&fa, |i| fa.records[i].labeled, target)?);
            if config.mode == TrainMode::SS {
                unlabeled.extend(load_items(&fa, |i| !fa.records[i].labeled, target)?);
            }
        }
        if labeled.is_empty() {
            return Err(Error::NoLabeledData);
        }
        if config.mode == TrainMode::SS && unlabeled.is_empty() {
            return Err(Error::EmptyPool("unlabeled"));
        }
        if validation.is_empty() {
            validation = labeled
                .iter()
                .filter(|p| !p.generated)
                .map(|p| center_crop_or_pad(&p.sample, target))
                .collect();
        }
        Ok(Self {
            labeled,
            unlabeled,
            validation,
        })
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn validation(&self) -> &[Sample] {
        &self.validation
    }
}

/// Mean foreground Dice over preprocessed samples with masks.
pub fn validation_dice(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::NoLabeledData);
    }
    let images: Vec<&Image2D> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_masks(model, &images)?;
    let mut sum = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s.mask.as_ref().ok_or(Error::NoLabeledData)?;
        sum += mean_foreground_dice(&p.labels, &gt.labels)?;
    }
    Ok(sum / samples.len() as f64)
}

/// Per-batch loss computation and gradient.
pub struct StepOutput {
    pub terms: [Option<f64>; 4],
    pub grads: GradStore,
}

/// Forward and backward pass for one batch, without the optimizer update.
pub fn compute_step(
    model: &Model,
    config: &TrainConfig,
    batch: &[Sample],
    kind: BatchKind,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let images: Vec<_> = batch.iter().map(|s| &s.image.pixels).collect();
    let x = crate::nn::image_batch(&images, model.dtype())?;
    let target = || -> Result<Tensor> {
        let masks = batch
            .iter()
            .map(|s| s.mask.as_ref().map(|m| &m.labels).ok_or(Error::NoLabeledData))
            .collect::<Result<Vec<_>>>()?;
        one_hot(&masks, model.descriptor().num_classes, model.dtype())
    };
    let (terms, weights) = match (model.kind(), kind) {
        (ModelKind::UNet, BatchKind::Labeled) => {
            let probs = model.predict_probs(&x, true)?;
            let y = target()?;
            let terms = LossTerms {
                rec: None,
                zrec: None,
                dice: Some(dice_loss(&probs, &y)?),
                focal: Some(focal_loss(&probs, &y, config.focal)?),
            };
            (terms, config.labeled_weights)
        }
        (ModelKind::UNet, BatchKind::Unlabeled) => {
            return Err(Error::Config("the U-Net baseline cannot use unlabeled batches".into()));
        }
        (ModelKind::SdNet, kind) => {
            let anatomy = model.anatomy_encode(&x, true)?;
            let z = model.modality_encode(&x)?;
            let recon = model.decode(&anatomy.binary, &z)?;
            let z_prior = sample_modality_prior(rng, batch.len(), model.descriptor().modality_dim, model.dtype())?;
            let mut terms = LossTerms {
                rec: Some(rec_loss(&x, &recon)?),
                zrec: Some(latent_regression_loss(model, &anatomy.binary, &z_prior)?),
                dice: None,
                focal: None,
            };
            let weights = if kind == BatchKind::Labeled {
                // The segmentor only enters the graph on labeled batches.
                let probs = model.segment(&anatomy.binary, true)?;
                let y = target()?;
                terms.dice = Some(dice_loss(&probs, &y)?);
                terms.focal = Some(focal_loss(&probs, &y, config.focal)?);
                config.labeled_weights
            } else {
                config.unlabeled_weights
            };
            (terms, weights)
        }
    };
    let values = terms.values()?;
    let total = total_loss(&terms, &weights)?;
    let grads = total.backward()?;
    Ok(StepOutput { terms: values, grads })
}

/// A trained model with its log. The model holds the best-validation
/// parameters.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

impl TrainOutcome {
    /// Writes `model.safetensors`, `train_log.csv` and `config.toml`
    /// under `out`; returns the checkpoint fingerprint.
    pub fn save(&mut self, out: &Path, config: &TrainConfig) -> Result<String> {
        std::fs::create_dir_all(out).at(out)?;
        let ckpt = out.join("model.safetensors");
        let fp = self.model.save(&ckpt)?;
        self.log.checkpoint = Some(ckpt);
        let log_path = out.join("train_log.csv");
        std::fs::write(&log_path, self.log.to_csv()).at(&log_path)?;
        let cfg_path = out.join("config.toml");
        std::fs::write(&cfg_path, config.to_toml()?).at(&cfg_path)?;
        Ok(fp)
    }
}

fn augment(item: &PoolItem, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if config.use_ra && !item.generated {
        apply_ra(&item.sample, rng, &config.ra)
    } else {
        Ok(center_crop_or_pad(&item.sample, config.ra.target_size))
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains from a manifest according to `config`.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    config.validate()?;
    let data = TrainingData::prepare(config, manifest)?;
    train_on(config, &data, |_| {})
}

/// Trains on prepared data; `on_epoch` sees each epoch's log row.
pub fn train_on(config: &TrainConfig, data: &TrainingData, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.descriptor(), config.seed)?;
    let mut opt = AdamW::new(
        model.store().params().values().cloned().collect(),
        ParamsAdamW {
            lr: config.lr0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut scheduler = BatchScheduler::new(
        config.mode,
        data.labeled.len(),
        data.unlabeled.len(),
        config.batch_size,
        config.seed,
    )?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(2);
    let mut plateau = PlateauScheduler::new(config.lr0, config.plateau_factor, config.plateau_patience);
    let mut log = TrainLog {
        best_val_dice: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best = None;

    for epoch in 1..=config.epochs {
        let lr = plateau.lr();
        opt.set_learning_rate(lr);
        let mut sums: [Vec<f64>; 4] = Default::default();
        for (step, batch) in scheduler.next_epoch().into_iter().enumerate() {
            let pool = match batch.kind {
                BatchKind::Labeled => &data.labeled,
                BatchKind::Unlabeled => &data.unlabeled,
            };
            let result = (|| -> Result<_> {
                let samples = batch
                    .indices
                    .iter()
                    .map(|&i| augment(&pool[i], config, &mut aug_rng))
                    .collect::<Result<Vec<_>>>()?;
                let out = compute_step(&model, config, &samples, batch.kind, &mut aug_rng)?;
                opt.step(&out.grads)?;
                Ok(out.terms)
            })();
            let terms = result.map_err(|e| Error::Diverged {
                epoch,
                step,
                source: Box::new(e),
            })?;
            for (acc, t) in sums.iter_mut().zip(terms) {
                acc.extend(t);
            }
        }
        let val_dice = validation_dice(&model, &data.validation)?;
        let row = EpochLog {
            epoch,
            lr,
            rec: mean(&sums[0]),
            zrec: mean(&sums[1]),
            dice: mean(&sums[2]),
            focal: mean(&sums[3]),
            val_dice,
        };
        on_epoch(&row);
        log.epochs.push(row);
        if val_dice > log.best_val_dice {
            log.best_val_dice = val_dice;
            log.best_epoch = epoch;
            best = Some(model.snapshot()?);
        }
        plateau.observe(val_dice);
    }
    if let Some(snapshot) = best {
        model.restore(&snapshot)?;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fs_batches_keep_short_tail() {
        let mut s = BatchScheduler::new(TrainMode::FS, 10, 0, 4, 0).unwrap();
        let e = s.next_epoch();
        assert_eq!(e.len(), 3);
        assert_eq!(s.batches_per_epoch(), 3);
        let mut all: Vec<usize> = e.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(e.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), [4, 4, 2]);
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn ss_alternates() {
        let mut s = BatchScheduler::new(TrainMode::SS, 8, 8, 4, 0).unwrap();
        let kinds: Vec<_> = s.next_epoch().iter().map(|b| b.kind).collect();
        use BatchKind::*;
        assert_eq!(kinds, [Labeled, Unlabeled, Labeled, Unlabeled]);
        let mut s = BatchScheduler::new(TrainMode::SS, 20, 6, 4, 0).unwrap();
        assert_eq!(s.next_epoch().len(), 4);
    }

    #[test]
    fn scheduler_seeded() {
        let a = BatchScheduler::new(TrainMode::SS, 13, 9, 4, 5).unwrap().next_epoch();
        let b = BatchScheduler::new(TrainMode::SS, 13, 9, 4, 5).unwrap().next_epoch();
        let c = BatchScheduler::new(TrainMode::SS, 13, 9, 4, 6).unwrap().next_epoch();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empty_pools_rejected() {
        assert!(matches!(
            BatchScheduler::new(TrainMode::SS, 4, 0, 4, 0),
            Err(Error::EmptyPool("unlabeled"))
        ));
        assert!(matches!(
            BatchScheduler::new(TrainMode::FS, 0, 3, 4, 0),
            Err(Error::EmptyPool("labeled"))
        ));
    }

    #[test]
    fn plateau_rule() {
        let mut p = PlateauScheduler::new(1e-3, 0.1, 2);
        let vals = [0.5, 0.6, 0.6, 0.60005, 0.7, 0.65, 0.64, 0.63];
        let lrs: Vec<f64> = vals.iter().map(|&v| p.observe(v)).collect();
        let expect = [1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-5, 1e-5];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
    }

    #[test]
    fn presets_match_table() {
        let p = ablation_presets();
        let names: Vec<_> = p.iter().map(|p| p.name).collect();
        assert_eq!(names, ["U-Net+RA", "FS SDNet", "FS SDNet+RA", "SS SDNet+RA", "SS SDNet+RA+FA"]);
        let fs = preset("fs-sdnet").unwrap();
        assert!(!fs.config.use_ra && fs.config.mode == TrainMode::FS);
        assert!(preset("SS SDNet+RA+FA").unwrap().needs_fa);
        assert_eq!(preset("unet-ra").unwrap().config.labeled_weights, LossWeights::SEGMENTATION_ONLY);
        for p in &p {
            p.config.validate().unwrap();
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() },
            TrainConfig { mode: TrainMode::SS, model: ModelKind::UNet, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = TrainConfig {
            mode: TrainMode::SS,
            use_ra: true,
            epochs: 3,
            fa_dataset: Some("fa/manifest.json".into()),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 7\nuse_ra = true\n").unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.lr0, 0.001);
        assert!(TrainConfig::from_toml("epoch = 7").is_err());
    }

    #[test]
    fn log_csv_blank_for_absent_terms() {
        let log = TrainLog {
            epochs: vec![EpochLog {
                epoch: 1,
                lr: 1e-3,
                rec: Some(0.5),
                zrec: Some(0.25),
                dice: None,
                focal: None,
                val_dice: 0.0,
            }],
            ..TrainLog::default()
        };
        let csv = log.to_csv();
        assert_eq!(csv.lines().next().unwrap(), LOG_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,1e-3,0.500000000,0.250000000,,,0.000000000");
    }
}
