use std::fs;
use std::path::{Path, PathBuf};

use fpdanet::data::preprocess::{preprocess_file, standardize, to_unit_array};
use fpdanet::data::synth::{render, MANIFEST_FILE};
use fpdanet::data::{
    apportion, compute_norm_stats, load_split, scan_dataset, split_manifest, synth_generate, taxonomy, Augment,
    DatasetManifest, NormStats, Record, Source, Split, SplitTable, SynthSpec,
};
use fpdanet::Error;
use image::{DynamicImage, GrayImage, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_gray(path: &Path, side: u32, value: u8) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    GrayImage::from_pixel(side, side, Luma([value])).save(path).unwrap();
}

/// Folder dataset with `per_class` images for each of the 21 classes.
fn folder_dataset(root: &Path, per_class: usize) {
    for (abbr, _) in taxonomy::CLASSES {
        for i in 0..per_class {
            write_gray(&root.join(abbr).join(format!("{i}.png")), 8, (i * 20) as u8);
        }
    }
}

fn manifest_of(counts: &[usize]) -> DatasetManifest {
    let mut records = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for i in 0..n {
            records.push(Record { path: PathBuf::from(format!("c{label}/{i:03}.png")), label, split: None });
        }
    }
    DatasetManifest {
        source: Source::Folder,
        root: PathBuf::from("/data"),
        classes: taxonomy::abbreviations(counts.len()),
        unknown_directories: Vec::new(),
        records,
    }
}

#[test]
fn scan_indexes_known_classes_only() {
    let dir = tempfile::tempdir().unwrap();
    folder_dataset(dir.path(), 10);
    write_gray(&dir.path().join("XYZ/stray.png"), 8, 1);
    fs::write(dir.path().join("3VT/notes.txt"), "not an image").unwrap();
    fs::write(dir.path().join("3VT/broken.png"), "garbage").unwrap();
    let m = scan_dataset(dir.path()).unwrap();
    assert_eq!(m.records.len(), 210);
    assert_eq!(m.unknown_directories, vec!["XYZ".to_string()]);
    assert_eq!(m.class_counts(), vec![10; 21]);
    assert!(m.records.iter().all(|r| r.split.is_none()));
    assert!(!m.is_split());
}

#[test]
fn scan_of_empty_root_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(scan_dataset(dir.path()), Err(Error::Data(_))));
    assert!(scan_dataset(&dir.path().join("absent")).is_err());
}

#[test]
fn small_classes_split_by_largest_remainder() {
    assert_eq!(apportion(9, &[7, 2, 1]), vec![6, 2, 1]);
    assert_eq!(apportion(13, &[7, 2, 1]), vec![9, 3, 1]);
    let m = split_manifest(&manifest_of(&[9, 13]), [7, 2, 1], 0).unwrap();
    assert_eq!(m.split_counts(), vec![[6, 2, 1], [9, 3, 1]]);
}

#[test]
fn split_is_deterministic_and_seed_dependent() {
    let base = manifest_of(&[40, 25, 7]);
    let a = split_manifest(&base, [7, 2, 1], 5).unwrap();
    let b = split_manifest(&base, [7, 2, 1], 5).unwrap();
    let c = split_manifest(&base, [7, 2, 1], 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.split_counts(), c.split_counts());
    // input order does not matter
    let mut shuffled = base.clone();
    shuffled.records.reverse();
    let d = split_manifest(&shuffled, [7, 2, 1], 5).unwrap();
    for r in &a.records {
        assert_eq!(d.records.iter().find(|x| x.path == r.path).unwrap().split, r.split);
    }
}

#[test]
fn split_is_stratified_within_one_image() {
    let counts: Vec<usize> = (0..21).map(|c| 5 + 7 * c).collect();
    let m = split_manifest(&manifest_of(&counts), [7, 2, 1], 3).unwrap();
    assert!(m.is_split());
    for (c, got) in m.split_counts().iter().enumerate() {
        let n = counts[c] as f64;
        for (s, &frac) in [0.7, 0.2, 0.1].iter().enumerate() {
            assert!((got[s] as f64 - frac * n).abs() < 1.0, "class {c} split {s}: {got:?}");
        }
        assert_eq!(got.iter().sum::<usize>(), counts[c]);
    }
    assert!(matches!(split_manifest(&m, [7, 0, 1], 0), Err(Error::Config(_))));
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let m = split_manifest(&manifest_of(&[4, 6, 3]), [7, 2, 1], 1).unwrap();
    assert_eq!(DatasetManifest::from_jsonl(&m.to_jsonl()).unwrap(), m);
    let dir = tempfile::tempdir().unwrap();
    let inside = DatasetManifest { root: dir.path().join("imgs"), ..m.clone() };
    let path = dir.path().join("m.jsonl");
    inside.write(&path).unwrap();
    assert_eq!(DatasetManifest::read(&path).unwrap(), inside);
    assert!(DatasetManifest::from_jsonl("{\"format\":\"other\"}\n").is_err());
}

#[test]
fn duplicate_records_fail_validation() {
    let mut m = manifest_of(&[2]);
    m.records.push(m.records[0].clone());
    assert!(matches!(m.validate(), Err(Error::Data(_))));
}

#[test]
fn constant_image_maps_to_unit_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.png");
    write_gray(&path, 512, 128);
    let x = preprocess_file::<f64>(&path, [224, 224], &NormStats::IDENTITY).unwrap();
    assert_eq!(x.shape(), [1, 3, 224, 224]);
    assert!(x.data().iter().all(|&v| (v - 0.50196).abs() < 1e-5));
}

#[test]
fn two_image_statistics() {
    let a = vec![0.25f32; 3 * 4];
    let mut b = vec![0.75f32; 3 * 4];
    b[4..8].copy_from_slice(&[0.5; 4]);
    let s = compute_norm_stats(&[a, b]);
    // channel 0 and 2: four 0.25 and four 0.75; channel 1: four 0.25 and four 0.5
    let oracle = |lo: f64, hi: f64| ((lo + hi) / 2.0, (hi - lo) / 2.0);
    let expect = [oracle(0.25, 0.75), oracle(0.25, 0.5), oracle(0.25, 0.75)];
    for c in 0..3 {
        assert!((s.mean[c] - expect[c].0).abs() < 1e-12);
        assert!((s.std[c] - expect[c].1).abs() < 1e-12);
    }
    let flat = compute_norm_stats(&[vec![0.3f32; 12]]);
    assert_eq!(flat.std, [1.0; 3]);
    assert_eq!(compute_norm_stats(&[]), NormStats::IDENTITY);
}

#[test]
fn standardized_data_is_already_standard() {
    let spec = SynthSpec { image_size: 16, ..Default::default() };
    let images: Vec<Vec<f32>> = (0..12)
        .map(|i| to_unit_array(&DynamicImage::ImageLuma8(render(&spec, i % 21, i)), [16, 16]))
        .collect();
    let stats = compute_norm_stats(&images);
    let once: Vec<Vec<f32>> = images.iter().map(|im| standardize::<f32>(im, &stats)).collect();
    let again = compute_norm_stats(&once);
    for c in 0..3 {
        assert!(again.mean[c].abs() < 1e-7, "{again:?}");
        assert!((again.std[c] - 1.0).abs() < 1e-6, "{again:?}");
    }
    let twice: Vec<f32> = standardize(&once[0], &again);
    let diff = twice.iter().zip(&once[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn augmentation_flip_mirrors_exactly() {
    let item: Vec<f64> = (0..2 * 3 * 4).map(|v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut flipped = item.clone();
    Augment { hflip_prob: 1.0, max_rotation_deg: 0.0 }.apply(&mut flipped, [3, 4], &mut rng);
    for c in 0..2 {
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(flipped[c * 12 + y * 4 + x], item[c * 12 + y * 4 + 3 - x]);
            }
        }
    }
    let mut same = item.clone();
    Augment::NONE.apply(&mut same, [3, 4], &mut rng);
    assert_eq!(same, item);
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let spec = SynthSpec::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = synth_generate(&spec, a.path()).unwrap();
    synth_generate(&spec, b.path()).unwrap();
    assert_eq!(ma.records.len(), 210);
    assert_eq!(ma.split_counts(), vec![[7, 2, 1]; 21]);
    for r in &ma.records {
        assert_eq!(fs::read(a.path().join(&r.path)).unwrap(), fs::read(b.path().join(&r.path)).unwrap());
    }
    let read_back = DatasetManifest::read(&a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read_back.records, ma.records);
    // a folder scan sees the same files
    assert_eq!(scan_dataset(a.path()).unwrap().records.len(), 210);
}

#[test]
fn speckle_is_unit_mean_around_the_clean_render() {
    let clean = SynthSpec { noise: 0.0, image_size: 48, ..Default::default() };
    let noisy = SynthSpec { noise: 0.3, ..clean.clone() };
    assert_eq!(render(&clean, 4, 2), render(&clean, 4, 2));
    let mean = |img: &GrayImage| img.pixels().map(|p| p[0] as f64).sum::<f64>() / img.len() as f64;
    let (c, n) = (render(&clean, 4, 2), render(&noisy, 4, 2));
    assert_ne!(c, n);
    assert!((mean(&c) - mean(&n)).abs() / mean(&c) < 0.05, "{} vs {}", mean(&c), mean(&n));
}

#[test]
fn synthetic_classes_are_linearly_separable_enough() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { image_size: 32, per_class: 10, ..Default::default() };
    let m = synth_generate(&spec, dir.path()).unwrap();
    let train = load_split(&m, Split::Train, [32, 32]).unwrap();
    let val = load_split(&m, Split::Val, [32, 32]).unwrap();
    let dim = train.images[0].len();
    let mut centroids = vec![vec![0f64; dim]; 21];
    let mut counts = vec![0f64; 21];
    for (im, &l) in train.images.iter().zip(&train.labels) {
        counts[l] += 1.0;
        centroids[l].iter_mut().zip(im).for_each(|(c, &v)| *c += v as f64);
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n);
    }
    let nearest = |im: &[f32]| {
        (0..21)
            .min_by(|&a, &b| {
                let d = |k: usize| centroids[k].iter().zip(im).map(|(c, &v)| (c - v as f64).powi(2)).sum::<f64>();
                d(a).total_cmp(&d(b))
            })
            .unwrap()
    };
    let hits = val.images.iter().zip(&val.labels).filter(|(im, &l)| nearest(im) == l).count();
    let acc = hits as f64 / val.len() as f64;
    assert!(acc > 1.0 / 21.0 * 3.0, "nearest-centroid accuracy {acc}");
}

#[test]
fn clinical_table_totals() {
    let t = SplitTable::shipped();
    assert_eq!(t.rows.len(), 21);
    assert_eq!(t.totals(), [6554, 1629, 916]);
    assert_eq!(t.declared_totals, Some([6554, 1629, 916]));
    assert_eq!(t.totals().iter().sum::<usize>(), 9099);
    let m = t.to_manifest();
    assert_eq!(m.split_totals(), [6554, 1629, 916]);
    m.validate().unwrap();
    let tampered = fpdanet::data::table::CLINICAL_SPLIT_CSV.replace("All,6554", "All,6555");
    assert!(SplitTable::parse(&tampered).is_err());
}

#[test]
fn undecodable_split_members_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    write_gray(&dir.path().join("3VT/a.png"), 8, 10);
    fs::write(dir.path().join("3VT/b.png"), "garbage").unwrap();
    let m = DatasetManifest {
        records: vec![
            Record { path: "3VT/a.png".into(), label: 0, split: Some(Split::Train) },
            Record { path: "3VT/b.png".into(), label: 0, split: Some(Split::Train) },
        ],
        ..manifest_of(&[0])
    };
    let m = DatasetManifest { root: dir.path().to_path_buf(), ..m };
    let loaded = load_split(&m, Split::Train, [8, 8]).unwrap();
    assert_eq!(loaded.len(), 1);
}
