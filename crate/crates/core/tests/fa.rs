//! Factor-augmented datasets built from a real phantom.

use sdaug::factor::{extract_factors, generate_fa_dataset, labeled_fraction, FactorBank};
use sdaug::model::fingerprint;
use sdaug::phantom::{default_desk_config, generate_phantom_dataset, PhantomConfig};
use sdaug::{ArchDescriptor, Model, ModelKind};

#[test]
fn labeled_fraction_matches_bank() {
    let dir = tempfile::tempdir().unwrap();
    let config = PhantomConfig {
        subjects_per_vendor: 2,
        slices_per_subject: 2,
        eval_subjects_per_vendor: 1,
        seed: 1,
        ..default_desk_config()
    };
    let manifest = generate_phantom_dataset(&config, &dir.path().join("p")).unwrap().train.without_held_out();
    let model = Model::new(ArchDescriptor::toy(ModelKind::SdNet), 5).unwrap();
    let fp = fingerprint(&model.to_bytes().unwrap());
    let bank = extract_factors(&model, &fp, &manifest).unwrap();
    assert_eq!(bank.anatomy_count(), manifest.records.len());
    bank.save(&dir.path().join("bank.sdfb")).unwrap();
    let bank = FactorBank::load(&dir.path().join("bank.sdfb")).unwrap();

    let expected = bank.expected_labeled_fraction();
    // A and B labeled, C not; vendor-uniform anatomy draws.
    assert!((expected - 2.0 / 3.0).abs() < 1e-12);
    let out = generate_fa_dataset(&bank, &model, &fp, 1000, 3, false, &dir.path().join("fa")).unwrap();
    let got = labeled_fraction(&out.records);
    assert!((got - expected).abs() <= 0.05, "labeled fraction {got}, expected {expected}");
    for r in &out.records {
        let p = r.provenance.as_ref().unwrap();
        assert_eq!(r.vendor, format!("{}+{}", p.anatomy_vendor, p.modality_vendor));
        assert_eq!(r.labeled, r.mask_uri.is_some());
    }
}
