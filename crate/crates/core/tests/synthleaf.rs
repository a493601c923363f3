use std::path::Path;

use eclf_core::imageio::Image;
use eclf_core::synthleaf::*;
use proptest::prelude::*;

fn small(preset: Preset, seed: u64) -> DatasetSpec {
    DatasetSpec {
        preset,
        train_per_class: 6,
        val_per_class: 2,
        test_per_class: 3,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn generation_is_deterministic_and_seed_dependent() {
    let a = generate_dataset(&small(Preset::Synth4, 3)).unwrap();
    let b = generate_dataset(&small(Preset::Synth4, 3)).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(&small(Preset::Synth4, 4)).unwrap();
    assert_ne!(a.train[0].image, c.train[0].image);
}

#[test]
fn split_sizes_and_class_names() {
    let ds = generate_dataset(&small(Preset::Synth3, 0)).unwrap();
    assert_eq!(ds.class_names, vec!["healthy", "chlorosis", "blight"]);
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (18, 6, 9));
    for c in 0..3 {
        assert_eq!(ds.labels(Split::Train).iter().filter(|&&l| l == c).count(), 6);
    }
    assert_eq!(ds.train[0].image.pixels(), 32 * 32);
}

#[test]
fn splits_do_not_share_images() {
    let ds = generate_dataset(&small(Preset::Synth2, 0)).unwrap();
    for t in &ds.test {
        assert!(ds.train.iter().all(|s| s.image != t.image));
    }
}

#[test]
fn empty_split_and_folder_preset_are_rejected() {
    let spec = DatasetSpec {
        val_per_class: 0,
        ..small(Preset::Synth2, 0)
    };
    assert!(generate_dataset(&spec).unwrap_err().to_string().contains("val_per_class"));
    assert!(generate_dataset(&small(Preset::Folder, 0)).is_err());
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(Preset::Synth4, 1)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn corrupt_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small(Preset::Synth2, 1)).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let manifest = dir.path().join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap().replacen(",0,healthy,", ",x,healthy,", 1);
    std::fs::write(&manifest, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("class_id"), "{err}");
}

fn write_folder(root: &Path, classes: &[(&str, usize)]) {
    for (ci, (name, n)) in classes.iter().enumerate() {
        let d = root.join(name);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..*n {
            let mut img = Image::black(16, 16);
            img.set(0, 0, [i as f32 / 255.0, ci as f32 / 255.0, 0.0]);
            img.save_png(&d.join(format!("img{i:02}.png"))).unwrap();
        }
        std::fs::write(d.join("notes.txt"), "ignored").unwrap();
    }
}

#[test]
fn ingest_splits_each_class_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &[("rust", 7), ("healthy", 6)]);
    let spec = IngestSpec {
        image_size: 16,
        train_per_class: None,
        val_per_class: 1,
        test_per_class: 2,
        seed: 5,
    };
    let ds = ingest_folder(dir.path(), &spec).unwrap();
    // sorted directory order
    assert_eq!(ds.class_names, vec!["healthy", "rust"]);
    assert_eq!(ds.preset, Preset::Folder);
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (3 + 4, 2, 4));
    assert!(ds.train.iter().all(|s| s.factors.is_none()));
    assert_eq!(ingest_folder(dir.path(), &spec).unwrap(), ds);

    let capped = ingest_folder(
        dir.path(),
        &IngestSpec {
            train_per_class: Some(2),
            ..spec.clone()
        },
    )
    .unwrap();
    assert_eq!(capped.train.len(), 4);
    assert_eq!(capped.val, ds.val);
}

#[test]
fn ingest_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &[("only", 3)]);
    let spec = IngestSpec {
        image_size: 16,
        train_per_class: None,
        val_per_class: 1,
        test_per_class: 1,
        seed: 0,
    };
    assert!(ingest_folder(dir.path(), &spec).unwrap_err().to_string().contains("need at least 2"));
    write_folder(dir.path(), &[("second", 2)]);
    let err = ingest_folder(dir.path(), &spec).unwrap_err().to_string();
    assert!(err.contains("\"second\" has 2 images"), "{err}");
}

fn factors() -> impl Strategy<Value = FactorRecord> {
    (0.0..=1.0f64, 0u32..=MAX_SPOTS, 1.0..=6.0f64, 0.0..=1.0f64, 0.0..=1.0f64, any::<u64>()).prop_map(|(h, n, r, d, e, s)| FactorRecord {
        base_hue: h,
        spot_count: n,
        spot_radius: r,
        spot_darkness: d,
        shape_eccentricity: e,
        seed: s,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rendering_is_a_pure_function(f in factors()) {
        let a = render(&f, 32).unwrap();
        prop_assert_eq!(&a, &render(&f, 32).unwrap());
        prop_assert_eq!(a.pixels(), 32 * 32);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = a.get(c, y, x);
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn no_spots_means_empty_mask(f in factors()) {
        let f = FactorRecord { spot_count: 0, ..f };
        prop_assert!(spot_mask(&f, 32).unwrap().iter().all(|&m| !m));
    }

    #[test]
    fn labels_follow_the_rule(preset in prop::sample::select(vec![Preset::Synth2, Preset::Synth3, Preset::Synth4]), seed in 0u64..50) {
        let spec = DatasetSpec { train_per_class: 3, val_per_class: 1, test_per_class: 1, ..small(preset, seed) };
        let ds = generate_dataset(&spec).unwrap();
        for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            let f = s.factors.unwrap();
            f.validate().unwrap();
            prop_assert_eq!(spec.rule.classify(preset, &f), Some(s.class_id));
        }
    }
}
