use std::fs;

use pcsa_core::config::DataConfig;
use pcsa_core::data::{build_dataset, gen_pair, read_volume, Dataset, DatasetManifest, Split, MANIFEST_FILE};
use pcsa_core::losses::mae;
use pcsa_core::Error;
use proptest::prelude::*;

fn small_manifest() -> DatasetManifest {
    DataConfig { train_pairs: 4, val_pairs: 2, test_pairs: 3, ..DataConfig::default() }.manifest()
}

#[test]
fn build_writes_every_pair_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest();
    assert_eq!(build_dataset(&m, dir.path(), false).unwrap(), [4, 2, 3]);
    for (split, n) in [(Split::Train, 4), (Split::Val, 2), (Split::Test, 3)] {
        assert_eq!(fs::read_dir(dir.path().join(split.name())).unwrap().count(), 2 * n);
    }
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    let val = ds.load_split(Split::Val).unwrap();
    assert_eq!(val.iter().map(|p| p.seed).collect::<Vec<_>>(), [1004, 1005]);
    let (_, header) = read_volume(&DatasetManifest::pair_paths(dir.path(), Split::Val, 1004).1).unwrap();
    assert_eq!((header.modality.as_str(), header.seed), ("PET-surrogate", 1004));
}

#[test]
fn stored_pairs_equal_regenerated_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest();
    build_dataset(&m, dir.path(), false).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    for p in ds.load_split(Split::Train).unwrap() {
        let fresh = gen_pair(&m.spec, p.seed).unwrap();
        assert_eq!(p.source.data(), fresh.source.data());
        assert_eq!(p.target.data(), fresh.target.data());
    }
}

#[test]
fn rebuilding_is_byte_identical_and_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let m = small_manifest();
    build_dataset(&m, &a, false).unwrap();
    build_dataset(&m, &b, false).unwrap();
    for split in Split::ALL {
        for &seed in m.seeds(split) {
            let (pa, pb) = (DatasetManifest::pair_paths(&a, split, seed), DatasetManifest::pair_paths(&b, split, seed));
            assert_eq!(fs::read(&pa.0).unwrap(), fs::read(&pb.0).unwrap());
            assert_eq!(fs::read(&pa.1).unwrap(), fs::read(&pb.1).unwrap());
        }
    }
    assert!(matches!(build_dataset(&m, &a, false), Err(Error::AlreadyExists(_))));
    assert_eq!(build_dataset(&m, &a, true).unwrap(), [4, 2, 3]);
    assert_eq!(fs::read(a.join(MANIFEST_FILE)).unwrap(), fs::read(b.join(MANIFEST_FILE)).unwrap());
}

#[test]
fn missing_split_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = DataConfig { train_pairs: 2, val_pairs: 1, test_pairs: 0, ..DataConfig::default() }.manifest();
    build_dataset(&m, dir.path(), false).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(matches!(ds.load_split(Split::Test), Err(Error::MissingSplit(s)) if s == "test"));
    fs::remove_dir_all(dir.path().join("val")).unwrap();
    assert!(matches!(ds.load_split(Split::Val), Err(Error::MissingSplit(_))));
}

#[test]
fn target_differs_from_source_on_average() {
    let spec = DataConfig::default().spec();
    let errs: Vec<f64> = (0..100).map(|s| {
        let p = gen_pair(&spec, s).unwrap();
        mae(&p.source, &p.target).unwrap()
    }).collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    assert!(mean > 0.02, "mean mae {mean}");
    assert!(errs.iter().all(|&e| e > 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pairs_are_normalised_and_seed_pure(seed in any::<u64>()) {
        let spec = DataConfig { edge: 8, ..DataConfig::default() }.spec();
        let a = gen_pair(&spec, seed).unwrap();
        let b = gen_pair(&spec, seed).unwrap();
        prop_assert_eq!(a.source.data(), b.source.data());
        for v in [&a.source, &a.target] {
            let (lo, hi) = v.min_max();
            prop_assert!(lo >= 0.0 && hi <= 1.0);
            prop_assert!(lo == 0.0 && hi == 1.0 || lo == hi);
        }
    }
}
