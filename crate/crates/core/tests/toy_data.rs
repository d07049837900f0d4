//! The bundled toy dataset must match the generator byte for byte.  Run with
//! `MAMR_BLESS=1` to rewrite it after an intentional generator change.

use std::fs;
use std::path::PathBuf;

use mamr::corpus::{DatasetManifest, SplitKind};
use mamr::toy::{dataset_files, generate};

const SEED: u64 = 2024;
const N: usize = 64;
const N_TRAIN: usize = 48;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy")
}

#[test]
fn bundled_dataset_matches_generator() {
    let files = dataset_files(&generate(N, SEED), N_TRAIN);
    if std::env::var_os("MAMR_BLESS").is_some() {
        fs::create_dir_all(dir()).unwrap();
        for (name, content) in &files {
            fs::write(dir().join(name), content).unwrap();
        }
    }
    for (name, content) in &files {
        let on_disk = fs::read_to_string(dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(&on_disk, content, "{name} differs from the generator");
    }
}

#[test]
fn bundled_manifest_loads() {
    let m = DatasetManifest::load(dir().join("manifest.tsv")).unwrap();
    assert_eq!(m.entries.len(), 4);
    assert_eq!(m.entries.iter().filter(|e| e.split == SplitKind::Train).count(), 2);
    for e in &m.entries {
        assert!(e.amr_file.exists() && e.text_file.exists());
    }
}
