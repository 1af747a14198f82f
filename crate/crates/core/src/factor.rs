//! Factor-based augmentation: per-vendor banks of anatomy and modality
//! factors, cross-vendor mixing and decoding into new labeled or unlabeled
//! samples.
//!
//! Bank file layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 4    | magic `SDFB`                              |
//! | 4      | 4    | u32 format version                        |
//! | 8      | 8    | u64 header length `L`                     |
//! | 16     | L    | JSON header ([`BankHeader`])              |
//! | 16+L   | ...  | payload; header offsets are relative here |
//!
//! Anatomy bits are packed MSB-first in `channels × H × W` order, masks
//! are one byte per pixel, modality vectors are f32.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    preprocess, write_sample, DatasetManifest, Image2D, Phase, Provenance, Sample, SampleRecord, SegMask,
    DEFAULT_TARGET,
};
use crate::error::{Error, IoContext, Result};
use crate::model::{AnatomyFactor, Model, ModalityFactor};
use crate::nn::image_batch;

pub const BANK_MAGIC: &[u8; 4] = b"SDFB";
pub const BANK_VERSION: u32 = 1;
const EXTRACT_BATCH: usize = 4;
const DECODE_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct AnatomyEntry {
    pub anatomy: AnatomyFactor,
    /// `SampleRecord::key` of the source.
    pub source_record: String,
    pub labeled: bool,
    pub mask_uri: Option<String>,
    /// Source mask after preprocessing, aligned with the factor.
    pub mask: Option<SegMask>,
    pub spacing_mm: [f64; 2],
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEntry {
    pub z: ModalityFactor,
    pub source_record: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VendorFactors {
    pub vendor: String,
    pub anatomy: Vec<AnatomyEntry>,
    pub modality: Vec<ModalityEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorBank {
    /// Fingerprint of the checkpoint that produced the factors.
    pub fingerprint: String,
    pub vendors: Vec<VendorFactors>,
}

impl FactorBank {
    pub fn anatomy_count(&self) -> usize {
        self.vendors.iter().map(|v| v.anatomy.len()).sum()
    }

    pub fn modality_count(&self) -> usize {
        self.vendors.iter().map(|v| v.modality.len()).sum()
    }

    /// Fraction of labeled entries within each vendor, averaged over
    /// vendors with anatomy entries. Equals the expected labeled fraction
    /// of generated samples under two-stage sampling.
    pub fn expected_labeled_fraction(&self) -> f64 {
        let with: Vec<&VendorFactors> = self.vendors.iter().filter(|v| !v.anatomy.is_empty()).collect();
        if with.is_empty() {
            return 0.0;
        }
        with.iter()
            .map(|v| v.anatomy.iter().filter(|e| e.labeled).count() as f64 / v.anatomy.len() as f64)
            .sum::<f64>()
            / with.len() as f64
    }

    fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.fingerprint != fingerprint {
            return Err(Error::CheckpointMismatch(format!(
                "bank was extracted with checkpoint {} but {} was given",
                short(&self.fingerprint),
                short(fingerprint)
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (channels, height, width, z_dim) = self.dims()?;
        let mut payload = Vec::new();
        let mut vendors = Vec::new();
        for v in &self.vendors {
            let mut anatomy = Vec::new();
            for e in &v.anatomy {
                if e.anatomy.channels.dim() != (channels, height, width) {
                    return Err(Error::Shape("anatomy factors differ in shape".into()));
                }
                let bits_offset = payload.len() as u64;
                payload.extend(pack_bits(e.anatomy.channels.iter().copied()));
                let mask_offset = match &e.mask {
                    Some(m) => {
                        if m.dim() != (height, width) {
                            return Err(Error::Shape("mask does not match factor size".into()));
                        }
                        let off = payload.len() as u64;
                        payload.extend(m.labels.iter().copied());
                        Some(off)
                    }
                    None => None,
                };
                anatomy.push(AnatomyHeader {
                    source_record: e.source_record.clone(),
                    labeled: e.labeled,
                    mask_uri: e.mask_uri.clone(),
                    spacing_mm: e.spacing_mm,
                    phase: e.phase,
                    bits_offset,
                    mask_offset,
                });
            }
            let mut modality = Vec::new();
            for e in &v.modality {
                if e.z.z.len() != z_dim {
                    return Err(Error::Shape("modality factors differ in length".into()));
                }
                let z_offset = payload.len() as u64;
                for x in &e.z.z {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
                modality.push(ModalityHeader {
                    source_record: e.source_record.clone(),
                    z_offset,
                });
            }
            vendors.push(VendorHeader {
                vendor: v.vendor.clone(),
                anatomy,
                modality,
            });
        }
        let header = BankHeader {
            fingerprint: self.fingerprint.clone(),
            channels,
            height,
            width,
            z_dim,
            payload_len: payload.len() as u64,
            vendors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::CorruptBank(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptBank(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != BANK_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BANK_VERSION {
            return Err(Error::CorruptBank(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header overruns file"))?;
        let header: BankHeader =
            serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| Error::CorruptBank(e.to_string()))?;
        let payload = &bytes[payload_start..];
        if payload.len() as u64 != header.payload_len {
            return Err(corrupt("payload length mismatch"));
        }
        let slice = |off: u64, len: usize| -> Result<&[u8]> {
            let off = off as usize;
            off.checked_add(len)
                .filter(|&e| e <= payload.len())
                .map(|e| &payload[off..e])
                .ok_or_else(|| corrupt("offset out of range"))
        };
        let (c, h, w) = (header.channels, header.height, header.width);
        let n_bits = c * h * w;
        let mut vendors = Vec::new();
        for v in header.vendors {
            let mut anatomy = Vec::new();
            for a in v.anatomy {
                let bits = unpack_bits(slice(a.bits_offset, n_bits.div_ceil(8))?, n_bits);
                let channels = Array3::from_shape_vec((c, h, w), bits).map_err(|e| Error::CorruptBank(e.to_string()))?;
                let mask = match a.mask_offset {
                    Some(off) => {
                        let labels = Array2::from_shape_vec((h, w), slice(off, h * w)?.to_vec())
                            .map_err(|e| Error::CorruptBank(e.to_string()))?;
                        Some(SegMask::new(labels)?)
                    }
                    None => None,
                };
                if a.labeled != mask.is_some() {
                    return Err(corrupt("labeled flag disagrees with stored mask"));
                }
                anatomy.push(AnatomyEntry {
                    anatomy: AnatomyFactor::from_binary(channels),
                    source_record: a.source_record,
                    labeled: a.labeled,
                    mask_uri: a.mask_uri,
                    mask,
                    spacing_mm: a.spacing_mm,
                    phase: a.phase,
                });
            }
            let mut modality = Vec::new();
            for m in v.modality {
                let z = slice(m.z_offset, header.z_dim * 4)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                modality.push(ModalityEntry {
                    z: ModalityFactor { z },
                    source_record: m.source_record,
                });
            }
            vendors.push(VendorFactors {
                vendor: v.vendor,
                anatomy,
                modality,
            });
        }
        Ok(Self {
            fingerprint: header.fingerprint,
            vendors,
        })
    }

    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let a = self
            .vendors
            .iter()
            .flat_map(|v| v.anatomy.first())
            .next()
            .map(|e| e.anatomy.channels.dim())
            .unwrap_or((0, 0, 0));
        let z = self
            .vendors
            .iter()
            .flat_map(|v| v.modality.first())
            .next()
            .map(|e| e.z.z.len())
            .unwrap_or(0);
        Ok((a.0, a.1, a.2, z))
    }
}

fn short(fp: &str) -> &str {
    &fp[..fp.len().min(12)]
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BankHeader {
    pub fingerprint: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub z_dim: usize,
    pub payload_len: u64,
    pub vendors: Vec<VendorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct VendorHeader {
    pub vendor: String,
    pub anatomy: Vec<AnatomyHeader>,
    pub modality: Vec<ModalityHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnatomyHeader {
    pub source_record: String,
    pub labeled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_uri: Option<String>,
    pub spacing_mm: [f64; 2],
    pub phase: Phase,
    pub bits_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_offset: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModalityHeader {
    pub source_record: String,
    pub z_offset: u64,
}

fn pack_bits(bits: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b != 0 {
            *out.last_mut().unwrap() |= 0x80 >> (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
}

/// Encodes every record of `manifest` in inference mode and groups the
/// factors by vendor (manifest vendor order). `fingerprint` identifies the
/// checkpoint `model` was loaded from.
pub fn extract_factors(model: &Model, fingerprint: &str, manifest: &DatasetManifest) -> Result<FactorBank> {
    let mut vendors: Vec<VendorFactors> = manifest
        .vendors
        .iter()
        .map(|v| VendorFactors {
            vendor: v.clone(),
            ..Default::default()
        })
        .collect();
    let indices: Vec<usize> = (0..manifest.records.len()).collect();
    for chunk in indices.chunks(EXTRACT_BATCH) {
        let samples = chunk
            .iter()
            .map(|&i| preprocess(&manifest.read_sample(i)?, DEFAULT_TARGET))
            .collect::<Result<Vec<_>>>()?;
        let pixels: Vec<&Array2<f32>> = samples.iter().map(|s| &s.image.pixels).collect();
        let x = image_batch(&pixels, model.dtype())?;
        let a = model.anatomy_encode(&x, false)?;
        let z = model.modality_encode(&x)?;
        for (k, (&i, sample)) in chunk.iter().zip(samples).enumerate() {
            let r = &manifest.records[i];
            let slot = vendors
                .iter_mut()
                .find(|v| v.vendor == r.vendor)
                .ok_or_else(|| Error::MalformedRecord {
                    index: i,
                    reason: format!("vendor {:?} not declared", r.vendor),
                })?;
            slot.anatomy.push(AnatomyEntry {
                anatomy: AnatomyFactor::from_tensors(&a.binary.get(k)?, &a.soft.get(k)?)?,
                source_record: r.key(),
                labeled: r.labeled,
                mask_uri: r.mask_uri.clone(),
                mask: sample.mask,
                spacing_mm: r.spacing_mm,
                phase: r.phase,
            });
            slot.modality.push(ModalityEntry {
                z: ModalityFactor::from_tensor(&z.get(k)?)?,
                source_record: r.key(),
            });
        }
    }
    Ok(FactorBank {
        fingerprint: fingerprint.to_string(),
        vendors,
    })
}

/// Indices of one anatomy/modality pairing drawn from a bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaDraw {
    pub anatomy_vendor: usize,
    pub anatomy_entry: usize,
    pub modality_vendor: usize,
    pub modality_entry: usize,
}

/// Vendor-uniform then entry-uniform draw, independently for anatomy and
/// modality. With `same_vendor` the modality comes from the anatomy's vendor.
pub fn draw_pair(bank: &FactorBank, rng: &mut impl Rng, same_vendor: bool) -> Result<FaDraw> {
    let a_vendors: Vec<usize> = (0..bank.vendors.len())
        .filter(|&v| !bank.vendors[v].anatomy.is_empty())
        .collect();
    let m_vendors: Vec<usize> = (0..bank.vendors.len())
        .filter(|&v| !bank.vendors[v].modality.is_empty())
        .collect();
    if a_vendors.is_empty() {
        return Err(Error::EmptyBank("no anatomy entries"));
    }
    if m_vendors.is_empty() {
        return Err(Error::EmptyBank("no modality entries"));
    }
    let anatomy_vendor = a_vendors[rng.random_range(0..a_vendors.len())];
    let anatomy_entry = rng.random_range(0..bank.vendors[anatomy_vendor].anatomy.len());
    let modality_vendor = if same_vendor {
        if bank.vendors[anatomy_vendor].modality.is_empty() {
            return Err(Error::EmptyBank("anatomy vendor has no modality entries"));
        }
        anatomy_vendor
    } else {
        m_vendors[rng.random_range(0..m_vendors.len())]
    };
    let modality_entry = rng.random_range(0..bank.vendors[modality_vendor].modality.len());
    Ok(FaDraw {
        anatomy_vendor,
        anatomy_entry,
        modality_vendor,
        modality_entry,
    })
}

fn provenance(bank: &FactorBank, d: &FaDraw) -> Provenance {
    let av = &bank.vendors[d.anatomy_vendor];
    let mv = &bank.vendors[d.modality_vendor];
    Provenance {
        anatomy_vendor: av.vendor.clone(),
        anatomy_source: av.anatomy[d.anatomy_entry].source_record.clone(),
        modality_vendor: mv.vendor.clone(),
        modality_source: mv.modality[d.modality_entry].source_record.clone(),
    }
}

/// Vendor tag of a generated record, e.g. `A+C`.
pub fn pair_tag(p: &Provenance) -> String {
    format!("{}+{}", p.anatomy_vendor, p.modality_vendor)
}

fn assemble(bank: &FactorBank, d: &FaDraw, pixels: Array2<f32>, subject_id: String) -> Result<(Sample, Provenance)> {
    let prov = provenance(bank, d);
    let e = &bank.vendors[d.anatomy_vendor].anatomy[d.anatomy_entry];
    let image = Image2D::new(
        pixels,
        (e.spacing_mm[0], e.spacing_mm[1]),
        pair_tag(&prov),
        subject_id,
        e.phase,
    )?;
    // Label inheritance: the anatomy source's mask or nothing.
    let mask = if e.labeled { e.mask.clone() } else { None };
    Ok((Sample::new(image, mask)?, prov))
}

/// Draws one factor pair and decodes it. The sample carries the anatomy
/// source's mask when that source is labeled.
pub fn fa_sample(
    bank: &FactorBank,
    rng: &mut impl Rng,
    model: &Model,
    fingerprint: &str,
) -> Result<(Sample, Provenance)> {
    bank.check_fingerprint(fingerprint)?;
    let d = draw_pair(bank, rng, false)?;
    let pixels = model.decode_factors(
        &bank.vendors[d.anatomy_vendor].anatomy[d.anatomy_entry].anatomy,
        &bank.vendors[d.modality_vendor].modality[d.modality_entry].z,
    )?;
    assemble(bank, &d, pixels, "fa".into())
}

/// Output `index` uses stream `index` of a ChaCha8 generator seeded with
/// `seed`, so results do not depend on batching or worker count.
pub fn draw_for_index(bank: &FactorBank, seed: u64, index: u64, same_vendor: bool) -> Result<FaDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    draw_pair(bank, &mut rng, same_vendor)
}

/// Generates `n` samples into `out` (data_core layout plus provenance) and
/// writes `out/manifest.json`.
pub fn generate_fa_dataset(
    bank: &FactorBank,
    model: &Model,
    fingerprint: &str,
    n: usize,
    seed: u64,
    same_vendor_control: bool,
    out: &Path,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("FA dataset size must be at least 1".into()));
    }
    bank.check_fingerprint(fingerprint)?;
    let draws = (0..n as u64)
        .map(|i| draw_for_index(bank, seed, i, same_vendor_control))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).at(out)?;
    let mut records = Vec::with_capacity(n);
    let dtype = model.dtype();
    for (c, chunk) in draws.chunks(DECODE_BATCH).enumerate() {
        let anatomy = chunk
            .iter()
            .map(|d| bank.vendors[d.anatomy_vendor].anatomy[d.anatomy_entry].anatomy.binary_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        let z = chunk
            .iter()
            .map(|d| bank.vendors[d.modality_vendor].modality[d.modality_entry].z.tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        let img = model.decode(&candle_core::Tensor::stack(&anatomy, 0)?, &candle_core::Tensor::stack(&z, 0)?)?;
        let (_, _, h, w) = img.dims4()?;
        for (k, d) in chunk.iter().enumerate() {
            let index = c * DECODE_BATCH + k;
            let values: Vec<f32> = img.get(k)?.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
            let pixels = Array2::from_shape_vec((h, w), values).map_err(|e| Error::Shape(e.to_string()))?;
            let (sample, prov) = assemble(bank, d, pixels, format!("FA{index:05}"))?;
            records.push(write_sample(out, &format!("fa/{index:05}"), &sample, index as u32, Some(prov))?);
        }
    }
    let mut vendors: Vec<String> = Vec::new();
    for r in &records {
        if !vendors.contains(&r.vendor) {
            vendors.push(r.vendor.clone());
        }
    }
    vendors.sort();
    let manifest = DatasetManifest::new(out, vendors, records);
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// Labeled share of a generated manifest.
pub fn labeled_fraction(records: &[SampleRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.labeled).count() as f64 / records.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchDescriptor, ModelKind};
    use proptest::prelude::*;

    fn toy_bank(labeled: &[(&str, Vec<bool>)], size: usize) -> FactorBank {
        let mut vendors = Vec::new();
        for (vi, (v, flags)) in labeled.iter().enumerate() {
            let mut vf = VendorFactors {
                vendor: v.to_string(),
                ..Default::default()
            };
            for (i, &l) in flags.iter().enumerate() {
                let bits = Array3::from_shape_fn((8, size, size), |(c, y, x)| ((c + y * 3 + x + i + vi) % 3 == 0) as u8);
                let mask = l.then(|| SegMask::new(Array2::from_shape_fn((size, size), |(y, x)| ((y + x + i) % 4) as u8)).unwrap());
                vf.anatomy.push(AnatomyEntry {
                    anatomy: AnatomyFactor::from_binary(bits),
                    source_record: format!("{v}{i:03}/ED/0"),
                    labeled: l,
                    mask_uri: l.then(|| format!("{v}/{i}/mask.u8")),
                    mask,
                    spacing_mm: [1.0 + vi as f64 * 0.1, 1.2],
                    phase: Phase::ED,
                });
                vf.modality.push(ModalityEntry {
                    z: ModalityFactor {
                        z: (0..8).map(|k| (k as f32 - 3.5) * (vi as f32 + 1.0) + i as f32 * 0.01).collect(),
                    },
                    source_record: format!("{v}{i:03}/ED/0"),
                });
            }
            vendors.push(vf);
        }
        FactorBank {
            fingerprint: "abc123".into(),
            vendors,
        }
    }

    #[test]
    fn bits_round_trip() {
        let bits: Vec<u8> = (0..27).map(|i| (i * 7 % 3 == 0) as u8).collect();
        assert_eq!(unpack_bits(&pack_bits(bits.iter().copied()), 27), bits);
        assert_eq!(pack_bits([1, 0, 0, 0, 0, 0, 0, 1, 1].into_iter()), vec![0x81, 0x80]);
    }

    #[test]
    fn bank_file_round_trip() {
        let bank = toy_bank(&[("A", vec![true, false]), ("C", vec![false]), ("D", vec![])], 16);
        let bytes = bank.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SDFB");
        let back = FactorBank::from_bytes(&bytes).unwrap();
        assert_eq!(back, bank);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bank_rejects_corruption() {
        let bank = toy_bank(&[("A", vec![true])], 16);
        let mut bytes = bank.to_bytes().unwrap();
        assert!(FactorBank::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(FactorBank::from_bytes(&bytes), Err(Error::CorruptBank(_))));
    }

    #[test]
    fn empty_bank_errors() {
        let bank = toy_bank(&[("A", vec![])], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(draw_pair(&bank, &mut rng, false), Err(Error::EmptyBank(_))));
    }

    #[test]
    fn same_vendor_control_pins_modality_vendor() {
        let bank = toy_bank(&[("A", vec![true; 3]), ("B", vec![false; 2]), ("C", vec![true])], 16);
        for i in 0..200 {
            let d = draw_for_index(&bank, 5, i, true).unwrap();
            assert_eq!(d.anatomy_vendor, d.modality_vendor);
        }
    }

    #[test]
    fn two_stage_sampling_is_vendor_uniform() {
        // Vendor A has 9 entries, C has 1: entry-uniform pooling would pick C
        // 10% of the time, vendor-uniform picks it half the time.
        let bank = toy_bank(&[("A", vec![true; 9]), ("C", vec![false])], 16);
        let n = 4000;
        let c_hits = (0..n)
            .filter(|&i| draw_for_index(&bank, 1, i, false).unwrap().anatomy_vendor == 1)
            .count();
        let p = c_hits as f64 / n as f64;
        // 4 sigma of Binomial(4000, 0.5).
        assert!((p - 0.5).abs() < 4.0 * (0.25f64 / n as f64).sqrt(), "{p}");
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let bank = toy_bank(&[("A", vec![true])], 16);
        let model = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = fa_sample(&bank, &mut rng, &model, "other").unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }

    #[test]
    fn labeled_cross_vendor_sample_carries_source_mask() {
        let bank = toy_bank(&[("A", vec![true]), ("C", vec![false])], 16);
        let model = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 0).unwrap();
        let d = FaDraw {
            anatomy_vendor: 0,
            anatomy_entry: 0,
            modality_vendor: 1,
            modality_entry: 0,
        };
        let a = &bank.vendors[0].anatomy[0];
        let px = model.decode_factors(&a.anatomy, &bank.vendors[1].modality[0].z).unwrap();
        let (s, p) = assemble(&bank, &d, px, "x".into()).unwrap();
        assert_eq!(s.image.vendor, "A+C");
        assert_eq!(p.modality_vendor, "C");
        assert_eq!(s.mask.as_ref(), a.mask.as_ref());
        assert!(s.image.pixels.iter().all(|v| v.abs() < 1.0));

        let d = FaDraw {
            anatomy_vendor: 1,
            modality_vendor: 0,
            ..d
        };
        let px = model.decode_factors(&bank.vendors[1].anatomy[0].anatomy, &bank.vendors[0].modality[0].z).unwrap();
        let (s, _) = assemble(&bank, &d, px, "x".into()).unwrap();
        assert!(s.mask.is_none());
    }

    #[test]
    fn generated_dataset_round_trips_and_is_deterministic() {
        let bank = toy_bank(&[("A", vec![true, false, true]), ("C", vec![false, false])], 16);
        let model = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m1 = generate_fa_dataset(&bank, &model, "abc123", 12, 3, false, &dir.path().join("a")).unwrap();
        let m2 = generate_fa_dataset(&bank, &model, "abc123", 12, 3, false, &dir.path().join("b")).unwrap();
        assert_eq!(m1.records, m2.records);
        assert_eq!(m1.records.len(), 12);
        assert!(m1.records.iter().all(|r| r.provenance.is_some()));
        for r in &m1.records {
            let a = fs::read(dir.path().join("a").join(&r.image_uri)).unwrap();
            let b = fs::read(dir.path().join("b").join(&r.image_uri)).unwrap();
            assert_eq!(a, b);
        }
        let loaded = crate::data::load_manifest(dir.path().join("a/manifest.json")).unwrap();
        assert_eq!(loaded.records, m1.records);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn label_inheritance_holds(flags_a in prop::collection::vec(any::<bool>(), 1..5),
                                   flags_c in prop::collection::vec(any::<bool>(), 0..4),
                                   seed in any::<u64>(), index in 0u64..1000) {
            let bank = toy_bank(&[("A", flags_a), ("C", flags_c)], 16);
            let d = draw_for_index(&bank, seed, index, false).unwrap();
            let src = &bank.vendors[d.anatomy_vendor].anatomy[d.anatomy_entry];
            let px = Array2::zeros((16, 16));
            let (s, p) = assemble(&bank, &d, px, "x".into()).unwrap();
            prop_assert_eq!(s.labeled(), src.labeled);
            prop_assert_eq!(s.mask.as_ref(), src.mask.as_ref());
            prop_assert_eq!(p.anatomy_source.clone(), src.source_record.clone());
            prop_assert_eq!(s.image.spacing_mm, (src.spacing_mm[0], src.spacing_mm[1]));
        }
    }
}
