use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

fn clean(seed: u64) -> Phantom {
    generate_phantom(seed, 64, 64, 0.0, &LesionPlan::Random(LesionParams::NONE)).unwrap()
}

#[test]
fn noise_free_phantom_is_mirror_symmetric() {
    for seed in 0..5 {
        let p = clean(seed);
        let img = p.image.data();
        for r in 0..64 {
            for c in 0..64 {
                assert_eq!(img[r * 64 + c], img[r * 64 + 63 - c]);
                assert_eq!(p.label_at(r, c), p.label_at(r, 63 - c));
            }
        }
        assert!(p.lesions.is_empty());
    }
}

#[test]
fn same_seed_same_phantom() {
    let plan = LesionPlan::Random(LesionParams::default());
    let a = generate_phantom(9, 64, 96, 0.02, &plan).unwrap();
    let b = generate_phantom(9, 64, 96, 0.02, &plan).unwrap();
    assert_eq!(a, b);
    let c = generate_phantom(10, 64, 96, 0.02, &plan).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn every_class_present_and_intensities_in_range() {
    for seed in 0..20 {
        let p = generate_phantom(seed, 32, 32, 0.05, &LesionPlan::Random(LesionParams::default())).unwrap();
        let classes: BTreeSet<u8> = p.label.iter().copied().collect();
        assert_eq!(classes, BTreeSet::from([0, 1, 2, 3]));
        assert!(p.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn explicit_lesion_disagrees_only_inside_disc() {
    let lesion = Lesion {
        row: 20,
        col: 12,
        radius: 3,
    };
    let base = clean(4);
    let p = generate_phantom(4, 64, 64, 0.0, &LesionPlan::Explicit(vec![lesion])).unwrap();
    let diff: BTreeSet<(usize, usize)> = p.asymmetric_pixels().into_iter().filter(|&(_, c)| c < 32).collect();
    let disc: BTreeSet<(usize, usize)> = lesion.pixels(64, 64).into_iter().collect();
    let flipped: BTreeSet<(usize, usize)> = disc
        .iter()
        .copied()
        .filter(|&(r, c)| base.label_at(r, c) == WHITE_MATTER)
        .collect();
    assert_eq!(diff, flipped);
    assert!(diff.len() <= disc.len());
    assert_eq!(disc.len(), 29);
}

#[test]
fn planted_lesions_are_exactly_the_asymmetry() {
    let params = LesionParams {
        min_count: 1,
        max_count: 2,
        min_radius: 2,
        max_radius: 3,
    };
    for seed in 0..30 {
        let p = generate_phantom(seed, 64, 64, 0.02, &LesionPlan::Random(params)).unwrap();
        assert!(!p.lesions.is_empty(), "seed {seed}");
        let w = p.width;
        let disc: BTreeSet<(usize, usize)> = p.lesions.iter().flat_map(|l| l.pixels(64, 64)).collect();
        let mirrored: BTreeSet<(usize, usize)> = disc.iter().map(|&(r, c)| (r, w - 1 - c)).collect();
        let diff: BTreeSet<(usize, usize)> = p.asymmetric_pixels().into_iter().collect();
        assert_eq!(diff, disc.union(&mirrored).copied().collect());
        // One side only.
        let left = p.lesions.iter().filter(|l| l.col < w / 2).count();
        assert!(left == 0 || left == p.lesions.len());
        for &(r, c) in &disc {
            assert_eq!(p.label_at(r, c), GREY_MATTER);
        }
    }
}

#[test]
fn invalid_dims_rejected() {
    let plan = LesionPlan::Random(LesionParams::NONE);
    assert!(generate_phantom(0, 48, 64, 0.0, &plan).is_err());
    assert!(generate_phantom(0, 64, 64, -1.0, &plan).is_err());
    assert!(generate_phantom(0, 0, 64, 0.0, &plan).is_err());
}

#[test]
fn lesion_spec_parsing() {
    let p: LesionParams = "1-3/2-5".parse().unwrap();
    assert_eq!((p.min_count, p.max_count, p.min_radius, p.max_radius), (1, 3, 2, 5));
    assert_eq!(p.to_string().parse::<LesionParams>().unwrap(), p);
    assert_eq!("2/3".parse::<LesionParams>().unwrap().max_count, 2);
    assert!("3-1/2-4".parse::<LesionParams>().is_err());
    assert!("junk".parse::<LesionParams>().is_err());
    assert_eq!(
        "4:5:2".parse::<Lesion>().unwrap(),
        Lesion {
            row: 4,
            col: 5,
            radius: 2
        }
    );
}

fn tiny_manifest(n: usize) -> DatasetManifest {
    DatasetManifest {
        n_samples: n,
        height: 32,
        width: 32,
        seed: 5,
        split: [0.7, 0.15, 0.15],
        ..DatasetManifest::default()
    }
}

#[test]
fn split_sizes_and_determinism() {
    let m = tiny_manifest(20);
    let s = m.split_indices();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 3, 3));
    assert_eq!(s, m.split_indices());
    let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    assert_eq!(all, (0..20).collect());
    // Oracle: the same seeded shuffle, cut by hand.
    let mut idx: Vec<usize> = (0..20).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(5, "split")));
    let mut train = idx[..14].to_vec();
    train.sort_unstable();
    assert_eq!(s.train, train);
    let other = DatasetManifest { seed: 6, ..m };
    assert_ne!(other.split_indices(), s);
}

#[test]
fn manifest_validation() {
    let mut m = tiny_manifest(4);
    m.split = [0.5, 0.2, 0.2];
    assert!(m.validate().is_err());
    m.split = [1.0, 0.0, 0.0];
    m.n_samples = 0;
    assert!(m.validate().is_err());
}

#[test]
fn dataset_roundtrip_is_exact() {
    let mut m = tiny_manifest(4);
    m.lesions = "1-2/2-3".parse().unwrap();
    let data = Dataset::generate(&m).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    assert!(dir.path().join("img_00003.pctn").exists());
    assert!(dir.path().join("lbl_00000.pctn").exists());
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn corrupt_files_are_reported() {
    let data = Dataset::generate(&tiny_manifest(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let img = dir.path().join("img_00001.pctn");
    let mut bytes = fs::read(&img).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(&img, bytes).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Tensor(_)), "{err}");

    write_dataset(&data, dir.path()).unwrap();
    fs::write(dir.path().join("manifest.txt"), "format = other\n").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn labels_stay_in_class_range(seed in any::<u64>(), noise in 0.0f64..0.2) {
        let p = generate_phantom(seed, 32, 64, noise, &LesionPlan::Random(LesionParams::default())).unwrap();
        prop_assert!(p.label.iter().all(|&l| (l as usize) < NUM_CLASSES));
        prop_assert_eq!(p.label.len(), 32 * 64);
    }
}
