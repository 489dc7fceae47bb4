//! Seeded fixtures must not drift across platforms or dependency upgrades.
//! Set `EVOMERGE_BLESS=1` to rewrite the golden file after an intended change.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use evomerge::archive::{encode, ArchiveOptions};
use evomerge::fixtures::{make_linear_suite, make_vector_fixture};
use evomerge_core::TensorMap;
use sha2::{Digest, Sha256};

fn digest(map: &TensorMap) -> String {
    let bytes = encode(map, ArchiveOptions::default()).unwrap();
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn current() -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for seed in [0u64, 7] {
        let s = make_linear_suite(seed, 3, 12, 40).unwrap();
        out.insert(format!("linear-{seed}/base"), digest(&s.base));
        for (t, m) in s.models.iter().enumerate() {
            out.insert(format!("linear-{seed}/model{t}"), digest(m));
        }
        out.insert(format!("linear-{seed}/suite"), digest(&s.suite));

        let v = make_vector_fixture(seed, 2, 32).unwrap();
        out.insert(format!("vector-{seed}/base"), digest(&v.base));
        for (t, m) in v.models.iter().enumerate() {
            out.insert(format!("vector-{seed}/model{t}"), digest(m));
        }
        out.insert(format!("vector-{seed}/target"), digest(&v.target));
    }
    out
}

#[test]
fn fixtures_match_golden_digests() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/fixtures.sha256");
    let now = current();
    if std::env::var_os("EVOMERGE_BLESS").is_some() {
        let text: String = now.iter().map(|(k, v)| format!("{v}  {k}\n")).collect();
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, text).unwrap();
        return;
    }
    let golden: BTreeMap<String, String> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| {
            let (hash, name) = l.split_once("  ").expect("`<sha256>  <name>` lines");
            (name.to_string(), hash.to_string())
        })
        .collect();
    assert_eq!(now, golden);
}

#[test]
fn fixtures_depend_on_seed() {
    let a = make_vector_fixture(1, 2, 32).unwrap();
    let b = make_vector_fixture(2, 2, 32).unwrap();
    assert!(!a.target.bit_eq(&b.target));
    let again = make_vector_fixture(1, 2, 32).unwrap();
    assert!(a.target.bit_eq(&again.target));
}
