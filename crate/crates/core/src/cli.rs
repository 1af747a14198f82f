//! `sdaug` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{load_manifest, write_sample, DatasetManifest};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate, format_table, EvalReport};
use crate::factor::{extract_factors, generate_fa_dataset, FactorBank};
use crate::model::Model;
use crate::phantom::{default_desk_config, generate_phantom_dataset, PhantomConfig, EVAL_DIR, TRAIN_MANIFEST};
use crate::resolution::{apply_ra, resolution_histogram, RAConfig};
use crate::training::{ablation_presets, preset, train_on, TrainConfig, TrainingData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sdaug", version, about = "Disentangled cardiac segmentation with resolution and factor augmentation")]
pub struct Cli {
    /// Worker threads for tensor ops (sets RAYON_NUM_THREADS).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-vendor phantom dataset.
    Phantom(PhantomArgs),
    /// Per-vendor pixel-area histogram as CSV.
    Hist(HistArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Offline augmentation.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Factor bank operations.
    #[command(subcommand)]
    Factors(FactorsCommand),
    /// Per-vendor Dice of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate all five ablation presets.
    Ablation(AblationArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML phantom config; defaults to the desk-scale four-vendor setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub subjects_per_vendor: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Lower edge in mm² (default: smallest pixel area in the manifest).
    #[arg(long)]
    pub lo: Option<f64>,
    /// Upper edge in mm² (default: largest pixel area in the manifest).
    #[arg(long)]
    pub hi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of unet-ra, fs-sdnet, fs-sdnet-ra, ss-sdnet-ra, ss-sdnet-ra-fa.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML training config, applied over the preset and under flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub fa_dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AugmentCommand {
    /// Write resolution-augmented copies of a dataset.
    Ra(AugmentRaArgs),
    /// Decode cross-vendor factor pairs into a new dataset.
    Fa(AugmentFaArgs),
}

#[derive(Debug, Args)]
pub struct AugmentRaArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Augmented copies per record.
    #[arg(long, default_value_t = 1)]
    pub copies: usize,
}

#[derive(Debug, Args)]
pub struct AugmentFaArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force the modality vendor to equal the anatomy vendor.
    #[arg(long)]
    pub same_vendor_control: bool,
}

#[derive(Debug, Subcommand)]
pub enum FactorsCommand {
    /// Encode a dataset into a factor bank.
    Extract(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Row label in the report.
    #[arg(long, default_value = "model")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Training manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Evaluation manifest (default: `eval/manifest.json` next to the training manifest).
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Generated FA samples (default: size of the training manifest).
    #[arg(long)]
    pub fa_samples: Option<usize>,
}

/// Distinguishes bad invocations from failures while running.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Phantom(a) => phantom(a),
        Command::Hist(a) => hist(a),
        Command::Train(a) => train_cmd(a),
        Command::Augment(AugmentCommand::Ra(a)) => augment_ra(a),
        Command::Augment(AugmentCommand::Fa(a)) => augment_fa(a),
        Command::Factors(FactorsCommand::Extract(a)) => extract(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablation(a) => ablation(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    fs::write(path, text).at(path)
}

fn phantom(a: PhantomArgs) -> CliResult<()> {
    let mut config: PhantomConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).at(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => default_desk_config(),
    };
    config.seed = a.seed;
    if let Some(n) = a.subjects_per_vendor {
        config.subjects_per_vendor = n;
    }
    let ds = generate_phantom_dataset(&config, &a.out)?;
    eprintln!(
        "wrote {} training and {} evaluation slices to {}",
        ds.train.records.len(),
        ds.eval.records.len(),
        a.out.display()
    );
    Ok(())
}

fn hist(a: HistArgs) -> CliResult<()> {
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be at least 1".into()));
    }
    let m = load_manifest(&a.manifest)?;
    let areas = m.records.iter().map(|r| r.pixel_area());
    let lo = a.lo.unwrap_or_else(|| areas.clone().fold(f64::INFINITY, f64::min));
    let mut hi = a.hi.unwrap_or_else(|| areas.fold(f64::NEG_INFINITY, f64::max));
    if hi <= lo {
        hi = lo + 1e-6;
    }
    let edges: Vec<f64> = (0..=a.bins).map(|i| lo + (hi - lo) * i as f64 / a.bins as f64).collect();
    let h = resolution_histogram(&m, &edges)?;
    write_text(&a.out, &h.to_csv())?;
    Ok(())
}

/// Preset, then config file, then explicit flags.
fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let base = match &a.preset {
        Some(key) => preset(key).map_err(|e| Failure::Usage(e.to_string()))?.config,
        None => TrainConfig::default(),
    };
    let mut config = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).at(path)?;
            merge_toml(&base, &text)?
        }
        None => base,
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(p) = &a.fa_dataset {
        config.fa_dataset = Some(p.clone());
    }
    if let (Some(key), None) = (&a.preset, &config.fa_dataset) {
        if preset(key).map(|p| p.needs_fa).unwrap_or(false) {
            return Err(Failure::Usage(format!("preset {key} needs --fa-dataset")));
        }
    }
    config.validate()?;
    Ok(config)
}

/// Overlays the keys present in `text` onto `base`.
pub fn merge_toml(base: &TrainConfig, text: &str) -> Result<TrainConfig> {
    let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
    let mut merged: toml::Table = toml::from_str(&base.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
    overlay_table(&mut merged, overlay);
    TrainConfig::from_toml(&toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?)
}

fn overlay_table(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay_table(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn run_training(config: &TrainConfig, manifest: &DatasetManifest, out: &Path) -> Result<(Model, String)> {
    let data = TrainingData::prepare(config, manifest)?;
    eprintln!(
        "training on {} labeled / {} unlabeled, validating on {}",
        data.labeled_len(),
        data.unlabeled_len(),
        data.validation().len()
    );
    let mut outcome = train_on(config, &data, |e| {
        eprintln!("epoch {:>3}  lr {:.0e}  val dice {:.4}", e.epoch, e.lr, e.val_dice)
    })?;
    let fp = outcome.save(out, config)?;
    Ok((outcome.model, fp))
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let config = resolve_train_config(&a)?;
    let manifest = load_manifest(&a.manifest)?;
    run_training(&config, &manifest, &a.out)?;
    Ok(())
}

fn augment_ra(a: AugmentRaArgs) -> CliResult<()> {
    if a.copies == 0 {
        return Err(Failure::Usage("--copies must be at least 1".into()));
    }
    let m = load_manifest(&a.manifest)?;
    let cfg = RAConfig::default();
    let mut records = Vec::new();
    for (i, r) in m.records.iter().enumerate() {
        let sample = m.read_sample(i)?;
        for c in 0..a.copies {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            rng.set_stream((i * a.copies + c) as u64);
            let out = apply_ra(&sample, &mut rng, &cfg)?;
            let rel = format!("ra/{}/{}_s{}_{}_c{c}", r.vendor, r.subject_id, r.slice_index, r.phase.as_str());
            records.push(write_sample(&a.out, &rel, &out, r.slice_index, None)?);
        }
    }
    let mut out = DatasetManifest::new(&a.out, m.vendors.clone(), records);
    out.held_out_vendors = m.held_out_vendors.clone();
    out.save(&a.out.join(TRAIN_MANIFEST))?;
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult<()> {
    let (model, fp) = Model::load(&a.ckpt)?;
    let m = load_manifest(&a.manifest)?;
    let bank = extract_factors(&model, &fp, &m)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    bank.save(&a.out)?;
    eprintln!("{} anatomy / {} modality entries", bank.anatomy_count(), bank.modality_count());
    Ok(())
}

fn augment_fa(a: AugmentFaArgs) -> CliResult<()> {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let bank = FactorBank::load(&a.bank)?;
    let (model, fp) = Model::load(&a.ckpt)?;
    let m = generate_fa_dataset(&bank, &model, &fp, a.n, a.seed, a.same_vendor_control, &a.out)?;
    eprintln!("wrote {} samples ({} labeled)", m.records.len(), m.labeled_count());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let m = load_manifest(&a.manifest)?;
    let (model, _) = Model::load(&a.ckpt)?;
    let report = evaluate(&model, &m, &a.name)?;
    write_text(&a.report, &report.to_csv())?;
    println!("{}", format_table(&report));
    Ok(())
}

fn ablation(a: AblationArgs) -> CliResult<()> {
    let manifest = load_manifest(&a.manifest)?;
    let eval_path = a
        .eval_manifest
        .clone()
        .unwrap_or_else(|| manifest.root.join(EVAL_DIR).join(TRAIN_MANIFEST));
    let eval_manifest = load_manifest(&eval_path)?;
    let mut reports = Vec::new();
    let mut extractor: Option<(Model, String)> = None;
    for p in ablation_presets() {
        let mut config = p.config.clone();
        config.seed = a.seed;
        if let Some(e) = a.epochs {
            config.epochs = e;
        }
        let run_dir = a.out.join(p.key);
        if p.needs_fa {
            let (model, fp) = extractor
                .as_ref()
                .ok_or_else(|| Error::Config("FA preset needs a semi-supervised extractor run first".into()))?;
            let bank = extract_factors(model, fp, &manifest.without_held_out())?;
            bank.save(&a.out.join("factors.sdfb"))?;
            let n = a.fa_samples.unwrap_or(manifest.records.len());
            let fa_dir = a.out.join("fa");
            generate_fa_dataset(&bank, model, fp, n, a.seed, false, &fa_dir)?;
            config.fa_dataset = Some(fa_dir.join(TRAIN_MANIFEST));
        }
        eprintln!("== {}", p.name);
        let (model, fp) = run_training(&config, &manifest, &run_dir)?;
        let r = evaluate(&model, &eval_manifest, p.name)?;
        write_text(&run_dir.join("eval.csv"), &r.to_csv())?;
        reports.push(r);
        if p.key == "ss-sdnet-ra" {
            extractor = Some((model, fp));
        }
    }
    let report = EvalReport::merge(&reports);
    write_text(&a.out.join("report.csv"), &report.to_csv())?;
    let table = format_table(&report);
    write_text(&a.out.join("report.txt"), &table)?;
    println!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["sdaug", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["sdaug", "phantom", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["sdaug", "--help"]), EXIT_OK);
    }

    #[test]
    fn config_merges_under_flags() {
        let a = TrainArgs {
            manifest: "m.json".into(),
            out: "o".into(),
            preset: Some("fs-sdnet-ra".into()),
            config: None,
            seed: Some(9),
            epochs: Some(3),
            fa_dataset: None,
        };
        let base = resolve_train_config(&a).unwrap();
        assert!(base.use_ra);
        assert_eq!((base.seed, base.epochs), (9, 3));

        let merged = merge_toml(&base, "epochs = 7\nlr0 = 0.01\n[ra]\narea_hi = 2.0\n").unwrap();
        assert_eq!(merged.epochs, 7);
        assert_eq!(merged.lr0, 0.01);
        assert_eq!(merged.ra.area_hi, 2.0);
        assert_eq!(merged.ra.area_lo, base.ra.area_lo);
        assert!(merged.use_ra);
        assert!(merge_toml(&base, "no_such_key = 1").is_err());
    }

    #[test]
    fn fa_preset_requires_dataset() {
        let a = TrainArgs {
            manifest: "m.json".into(),
            out: "o".into(),
            preset: Some("ss-sdnet-ra-fa".into()),
            config: None,
            seed: None,
            epochs: None,
            fa_dataset: None,
        };
        assert!(matches!(resolve_train_config(&a), Err(Failure::Usage(_))));
    }
}
