//! Python module `sdaug_py`: phantom generation, training, evaluation and
//! factor augmentation over the on-disk dataset layout.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sdaug::eval::evaluate;
use sdaug::factor::{extract_factors, generate_fa_dataset, FactorBank};
use sdaug::phantom::{default_desk_config, generate_phantom_dataset};
use sdaug::resolution::resolution_histogram;
use sdaug::training::{preset, train, TrainConfig};
use sdaug::{load_manifest, Error, Model};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Writes the default four-vendor phantom; returns (train, eval) record counts.
#[pyfunction]
#[pyo3(signature = (out, seed=0, subjects_per_vendor=None))]
fn generate_phantom(out: PathBuf, seed: u64, subjects_per_vendor: Option<usize>) -> PyResult<(usize, usize)> {
    let mut config = default_desk_config();
    config.seed = seed;
    if let Some(n) = subjects_per_vendor {
        config.subjects_per_vendor = n;
    }
    let d = generate_phantom_dataset(&config, &out).map_err(err)?;
    Ok((d.train.records.len(), d.eval.records.len()))
}

/// Rows of (vendor, bin_lo, bin_hi, count) over equal-width area bins.
#[pyfunction]
#[pyo3(signature = (manifest, bins=10, lo=0.5, hi=3.0))]
fn histogram(manifest: PathBuf, bins: usize, lo: f64, hi: f64) -> PyResult<Vec<(String, f64, f64, usize)>> {
    if bins == 0 || !(lo < hi) {
        return Err(PyValueError::new_err("need bins >= 1 and lo < hi"));
    }
    let m = load_manifest(&manifest).map_err(err)?;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let h = resolution_histogram(&m, &edges).map_err(err)?;
    Ok(h.rows.into_iter().map(|r| (r.vendor, r.bin_lo, r.bin_hi, r.count)).collect())
}

/// Trains a preset and writes the checkpoint, log and config under `out`.
/// Returns the per-epoch validation Dice.
#[pyfunction]
#[pyo3(signature = (manifest, out, preset_key, seed=0, epochs=None, fa_dataset=None))]
fn train_preset(
    manifest: PathBuf,
    out: PathBuf,
    preset_key: &str,
    seed: u64,
    epochs: Option<usize>,
    fa_dataset: Option<PathBuf>,
) -> PyResult<Vec<f64>> {
    let p = preset(preset_key).map_err(err)?;
    let config = TrainConfig {
        seed,
        epochs: epochs.unwrap_or(p.config.epochs),
        fa_dataset,
        ..p.config
    };
    let m = load_manifest(&manifest).map_err(err)?;
    let mut outcome = train(&config, &m).map_err(err)?;
    outcome.save(&out, &config).map_err(err)?;
    Ok(outcome.log.epochs.iter().map(|e| e.val_dice).collect())
}

/// Mean foreground Dice per vendor as {vendor: [LV, MYO, RV]}.
#[pyfunction]
fn evaluate_checkpoint(ckpt: PathBuf, manifest: PathBuf) -> PyResult<BTreeMap<String, [f64; 3]>> {
    let (model, _) = Model::load(&ckpt).map_err(err)?;
    let m = load_manifest(&manifest).map_err(err)?;
    let report = evaluate(&model, &m, "model").map_err(err)?;
    let mut out = BTreeMap::new();
    for v in report.vendors() {
        let d = |c| report.dice(&v, c).unwrap_or(f64::NAN);
        out.insert(v.clone(), [d(1), d(2), d(3)]);
    }
    Ok(out)
}

/// Extracts a factor bank; returns (anatomy, modality) entry counts.
#[pyfunction]
fn extract_bank(ckpt: PathBuf, manifest: PathBuf, out: PathBuf) -> PyResult<(usize, usize)> {
    let (model, fp) = Model::load(&ckpt).map_err(err)?;
    let m = load_manifest(&manifest).map_err(err)?;
    let bank = extract_factors(&model, &fp, &m).map_err(err)?;
    bank.save(&out).map_err(err)?;
    Ok((bank.anatomy_count(), bank.modality_count()))
}

/// Generates `n` factor-augmented samples; returns the labeled count.
#[pyfunction]
#[pyo3(signature = (bank, ckpt, out, n, seed=0, same_vendor_control=false))]
fn generate_fa(bank: PathBuf, ckpt: PathBuf, out: PathBuf, n: usize, seed: u64, same_vendor_control: bool) -> PyResult<usize> {
    let bank = FactorBank::load(&bank).map_err(err)?;
    let (model, fp) = Model::load(&ckpt).map_err(err)?;
    let m = generate_fa_dataset(&bank, &model, &fp, n, seed, same_vendor_control, &out).map_err(err)?;
    Ok(m.labeled_count())
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    sdaug::cli::run(std::iter::once("sdaug".to_string()).chain(args))
}

#[pymodule]
fn sdaug_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(histogram, m)?)?;
    m.add_function(wrap_pyfunction!(train_preset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(extract_bank, m)?)?;
    m.add_function(wrap_pyfunction!(generate_fa, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
