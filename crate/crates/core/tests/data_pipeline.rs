use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvr::data::*;

fn write_pgm8(path: &Path, side: usize, values: &[u8]) {
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend_from_slice(values);
    fs::write(path, bytes).unwrap();
}

fn record(id: String, patient: String, severity: Option<u8>) -> ImageRecord {
    ImageRecord {
        image_id: id,
        patient_id: patient,
        pixels: vec![0.0; 4],
        side: 2,
        severity,
        report_text: None,
        chf_cohort: false,
    }
}

#[test]
fn manifest_with_three_images_two_labeled() {
    let dir = tempfile::tempdir().unwrap();
    let ramp: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
    write_png16(&dir.path().join("a.png"), &ramp, 4).unwrap();
    write_pgm8(&dir.path().join("b.pgm"), 4, &[10; 16]);
    write_pgm8(&dir.path().join("c.pgm"), 4, &(0..16).map(|i| 50 + 10 * i as u8).collect::<Vec<_>>());
    let csv = dir.path().join("labels.csv");
    fs::write(
        &csv,
        "image_id,patient_id,severity,report_text\na,p1,2,moderate edema\nb,p1,,\nc,p2,0,\"no edema, clear\"\n",
    )
    .unwrap();
    let ds = load_manifest(dir.path(), &csv).unwrap();
    assert_eq!((ds.len(), ds.num_labeled()), (3, 2));
    assert_eq!(ds.get("a").unwrap().pixels, ramp);
    // A constant image normalizes to zeros.
    assert_eq!(ds.get("b").unwrap().pixels, vec![0.0; 16]);
    let c = &ds.get("c").unwrap().pixels;
    assert_eq!((c[0], c[15]), (0.0, 1.0));
    assert_eq!(ds.get("c").unwrap().report_text.as_deref(), Some("no edema, clear"));
}

#[test]
fn out_of_range_severity_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("labels.csv");
    fs::write(&csv, "image_id,patient_id,severity\na,p1,1\nb,p2,5\n").unwrap();
    match read_labels_csv(&csv) {
        Err(DataError::Row { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains('5'), "{msg}");
        }
        other => panic!("expected a row error, got {other:?}"),
    }
}

#[test]
fn missing_image_and_missing_csv_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("labels.csv");
    fs::write(&csv, "image_id,patient_id,severity\nghost,p1,1\n").unwrap();
    assert!(matches!(load_manifest(dir.path(), &csv), Err(DataError::MissingImage { .. })));
    assert!(matches!(
        load_manifest(dir.path(), &dir.path().join("nope.csv")),
        Err(DataError::Io { .. })
    ));
}

#[test]
fn labels_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        LabelRow {
            image_id: "x".into(),
            patient_id: "p".into(),
            severity: Some(3),
            report_text: Some("severe edema, \"quoted\"".into()),
            chf_cohort: false,
        },
        LabelRow {
            image_id: "y".into(),
            patient_id: "p".into(),
            severity: None,
            report_text: None,
            chf_cohort: false,
        },
    ];
    let path = dir.path().join("l.csv");
    write_labels_csv(&path, &rows).unwrap();
    assert_eq!(read_labels_csv(&path).unwrap(), rows);
}

/// Independent statement of the split invariants.
fn assert_split_invariants(ds: &Dataset, m: &SplitManifest) {
    let mut homes: HashMap<&str, HashSet<Split>> = HashMap::new();
    for e in m.entries() {
        let r = ds.get(&e.image_id).expect("manifest names dataset images");
        assert_eq!(r.is_labeled(), e.labeled);
        if e.split != Split::Excluded {
            homes.entry(&e.patient_id).or_default().insert(e.split);
        }
        if matches!(e.split, Split::Validation | Split::Test) {
            assert!(e.labeled, "unlabeled image {} in {}", e.image_id, e.split);
        }
        if e.split == Split::Excluded {
            assert!(!e.labeled);
        }
    }
    assert_eq!(m.entries().len(), ds.len());
    for (p, splits) in &homes {
        assert_eq!(splits.len(), 1, "patient {p} spans {splits:?}");
    }
    let train_unlabeled: HashSet<&str> = m.train_unlabeled().into_iter().collect();
    for e in m.entries() {
        if train_unlabeled.contains(e.image_id.as_str()) {
            let home = &homes[e.patient_id.as_str()];
            assert!(home.contains(&Split::Train), "training unlabeled image from a held-out patient");
        }
    }
    for split in [Split::Train, Split::Validation, Split::Test] {
        assert!(!m.ids(split, Some(true)).is_empty(), "{split} empty");
    }
}

fn random_dataset(rng: &mut ChaCha8Rng, patients: usize, labeled_rate: f64) -> Dataset {
    let mut records = Vec::new();
    for p in 0..patients {
        for k in 0..rng.gen_range(1..=5) {
            let labeled = (p < 3 && k == 0) || rng.gen_bool(labeled_rate);
            let sev = labeled.then(|| rng.gen_range(0..4));
            records.push(record(format!("i{}", records.len()), format!("p{p}"), sev));
        }
    }
    Dataset::new(records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn split_invariants_hold(seed in any::<u64>(), patients in 3usize..40, rate in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = random_dataset(&mut rng, patients, rate);
        let m = split_by_patient(&ds, [0.8, 0.1, 0.1], seed).unwrap();
        assert_split_invariants(&ds, &m);
    }
}

#[test]
fn patient_with_many_images_lands_in_one_split() {
    let mut records: Vec<ImageRecord> = (0..6).map(|k| record(format!("big{k}"), "big".into(), Some(1))).collect();
    records.extend((0..12).map(|i| record(format!("s{i}"), format!("q{i}"), Some(0))));
    let ds = Dataset::new(records).unwrap();
    for seed in 0..20 {
        let m = split_by_patient(&ds, [0.8, 0.1, 0.1], seed).unwrap();
        let splits: HashSet<Split> = m.entries().iter().filter(|e| e.patient_id == "big").map(|e| e.split).collect();
        assert_eq!(splits.len(), 1);
    }
}

#[test]
fn paper_scale_proportions() {
    // 4537/628/606 labeled images, interleaved with unlabeled images.
    let paper = [4537.0 / 5771.0, 628.0 / 5771.0, 606.0 / 5771.0];
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut records = Vec::new();
    let mut labeled = 0;
    let mut p = 0;
    while labeled < 5771 {
        for _ in 0..rng.gen_range(1..=5) {
            let is_labeled = labeled < 5771 && rng.gen_bool(0.6);
            labeled += usize::from(is_labeled);
            records.push(record(format!("i{}", records.len()), format!("p{p}"), is_labeled.then_some(2)));
        }
        p += 1;
    }
    let ds = Dataset::new(records).unwrap();
    for seed in 0..5 {
        let m = split_by_patient(&ds, [0.8, 0.1, 0.1], seed).unwrap();
        let counts = [m.train_labeled().len(), m.validation().len(), m.test().len()];
        let total: usize = counts.iter().sum();
        assert_eq!(total, 5771);
        for k in 0..3 {
            let frac = counts[k] as f64 / total as f64;
            assert!((frac - paper[k]).abs() < 0.03, "seed {seed}: {counts:?}");
        }
    }
}

#[test]
fn split_manifest_csv_round_trip() {
    let synth = synth_generate(&SynthConfig {
        side: 8,
        n_labeled: 10,
        n_unlabeled: 10,
        n_validation: 5,
        n_test: 5,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.csv");
    synth.manifest.write_csv(&path).unwrap();
    assert_eq!(SplitManifest::read_csv(&path).unwrap(), synth.manifest);
}

fn smooth_blob(side: usize) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let mut img = Vec::new();
    for i in 0..side {
        for j in 0..side {
            let d2 = ((i as f64 - c - 3.0).powi(2) + (j as f64 - c + 5.0).powi(2)) / (side as f64 * side as f64);
            img.push((-d2 / 0.02).exp() * 0.9);
        }
    }
    img
}

#[test]
fn augment_identity_and_determinism() {
    let img = smooth_blob(32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(augment(&img, 32, &mut rng, &AugmentParams::identity(32)).unwrap(), img);
    let params = AugmentParams {
        max_rotation_deg: 15.0,
        max_translation_px: 4.0,
        crop_size: 28,
    };
    let a = augment(&img, 32, &mut ChaCha8Rng::seed_from_u64(9), &params).unwrap();
    let b = augment(&img, 32, &mut ChaCha8Rng::seed_from_u64(9), &params).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 28 * 28);
    let crop_err = augment(&img, 32, &mut rng, &AugmentParams::identity(33));
    assert!(matches!(crop_err, Err(DataError::InvalidCrop { .. })));
}

#[test]
fn rotation_round_trip_is_close() {
    let img = smooth_blob(64);
    for deg in [5.0, 12.0, 30.0] {
        let fwd = transform_image(&img, 64, Transform { rotation_deg: deg, ..Default::default() }, 64).unwrap();
        let back = transform_image(&fwd, 64, Transform { rotation_deg: -deg, ..Default::default() }, 64).unwrap();
        let mad = img.iter().zip(&back).map(|(a, b)| (a - b).abs()).sum::<f64>() / img.len() as f64;
        assert!(mad < 0.02, "{deg} deg: mean abs diff {mad}");
        assert!(fwd != img);
    }
}

#[test]
fn translation_moves_content() {
    let img = smooth_blob(16);
    let t = Transform { dx: 2.0, dy: -1.0, ..Default::default() };
    let out = transform_image(&img, 16, t, 16).unwrap();
    for i in 1..15 {
        for j in 2..16 {
            assert!((out[i * 16 + j] - img[(i + 1) * 16 + j - 2]).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn augmentation_preserves_range(seed in any::<u64>(), values in proptest::collection::vec(0.0f64..=1.0, 144)) {
        let params = AugmentParams { max_rotation_deg: 45.0, max_translation_px: 3.0, crop_size: 10 };
        let out = augment(&values, 12, &mut ChaCha8Rng::seed_from_u64(seed), &params).unwrap();
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn default_rules_on_report_phrases() {
    let rules = KeywordRuleset::default();
    let cases = [
        ("Mild pulmonary edema.", Some(1)),
        ("No evidence of pulmonary edema.", Some(0)),
        ("There is no pulmonary edema; mild cardiomegaly.", Some(0)),
        ("Moderate pulmonary edema with small effusions.", Some(2)),
        ("Severe pulmonary edema, worsened.", Some(3)),
        ("Interstitial edema is present.", Some(2)),
        ("Lungs are clear. Normal heart size.", None),
        ("", None),
    ];
    for (text, want) in cases {
        assert_eq!(extract_label(text, &rules), want, "{text:?}");
    }
}

#[test]
fn labeling_is_deterministic() {
    let rules = KeywordRuleset::default();
    let words = ["no", "mild", "moderate", "severe", "pulmonary", "edema", "clear", "evidence", "of", "congestion", "vascular"];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<String> = (0..300)
        .map(|_| (0..rng.gen_range(1..9)).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    let a: Vec<_> = corpus.iter().map(|t| extract_label(t, &rules)).collect();
    let b: Vec<_> = corpus.iter().map(|t| extract_label(t, &rules)).collect();
    assert_eq!(a, b);
    assert!(a.iter().any(Option::is_some) && a.iter().any(Option::is_none));
}

#[test]
fn synthetic_dataset_is_deterministic() {
    let cfg = SynthConfig {
        side: 16,
        n_labeled: 20,
        n_unlabeled: 30,
        n_validation: 10,
        n_test: 10,
        seed: 11,
        ..Default::default()
    };
    let a = synth_generate(&cfg).unwrap();
    let b = synth_generate(&cfg).unwrap();
    assert_eq!(a.dataset.records(), b.dataset.records());
    assert_eq!(a.severities, b.severities);
    assert_eq!(a.manifest, b.manifest);
    let c = synth_generate(&SynthConfig { seed: 12, ..cfg.clone() }).unwrap();
    assert_ne!(a.severities, c.severities);

    assert_eq!(a.dataset.len(), 70);
    assert_eq!(a.manifest.train_labeled().len(), 20);
    assert_eq!(a.manifest.train_unlabeled().len(), 30);
    assert_eq!((a.manifest.validation().len(), a.manifest.test().len()), (10, 10));
    assert_split_invariants(&a.dataset, &a.manifest);
    let mut per_patient: HashMap<&str, usize> = HashMap::new();
    for r in a.dataset.records() {
        *per_patient.entry(&r.patient_id).or_default() += 1;
        assert_eq!(r.is_labeled(), a.manifest.entries().iter().any(|e| e.image_id == r.image_id && e.labeled));
    }
    assert!(per_patient.values().all(|&n| (1..=5).contains(&n)));
    for (r, s) in a.dataset.records().iter().zip(&a.severities) {
        if let Some(c) = r.severity {
            assert_eq!(c, severity_class(*s));
        }
    }
}

#[test]
fn haze_orders_mean_intensity() {
    let cfg = SynthConfig {
        noise: 0.0,
        ..Default::default()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for patient in 0..5 {
        let clear = render_phantom(&cfg, patient, 0.0, 1).unwrap();
        let severe = render_phantom(&cfg, patient, 3.0, 1).unwrap();
        assert!(mean(&severe) > mean(&clear), "patient {patient}");
    }
}

#[test]
fn label_histogram_matches_thresholds() {
    let n = 10_000;
    let synth = synth_generate(&SynthConfig {
        side: 8,
        n_labeled: n,
        n_unlabeled: 0,
        n_validation: 0,
        n_test: 0,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let mut counts = [0usize; 4];
    for r in synth.dataset.records() {
        counts[r.severity.unwrap() as usize] += 1;
    }
    let expected = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];
    for k in 0..4 {
        let p = expected[k];
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let diff = (counts[k] as f64 - n as f64 * p).abs();
        assert!(diff < 3.0 * sigma, "class {k}: {} vs {}", counts[k], n as f64 * p);
    }
}

#[test]
fn severity_tracks_mean_intensity() {
    let synth = synth_generate(&SynthConfig {
        n_labeled: 0,
        n_unlabeled: 600,
        n_validation: 0,
        n_test: 0,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let means: Vec<f64> = synth
        .dataset
        .records()
        .iter()
        .map(|r| r.pixels.iter().sum::<f64>() / r.pixels.len() as f64)
        .collect();
    let cc = ssvr::eval::pearson_cc(&synth.severities, &means).unwrap();
    assert!(cc > 0.9, "pearson(s, mean intensity) = {cc}");
}

#[test]
fn synthetic_images_survive_a_disk_round_trip() {
    let synth = synth_generate(&SynthConfig {
        side: 16,
        n_labeled: 3,
        n_unlabeled: 0,
        n_validation: 0,
        n_test: 0,
        ..Default::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for r in synth.dataset.records() {
        let path = dir.path().join(format!("{}.png", r.image_id));
        write_png16(&path, &r.pixels, r.side).unwrap();
        let (back, side) = read_image(&path).unwrap();
        assert_eq!(side, 16);
        assert_eq!(back, r.pixels);
    }
}
