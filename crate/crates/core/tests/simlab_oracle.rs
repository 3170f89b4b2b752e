mod common;

use std::collections::BTreeSet;

use common::oracle;
use labrun::simlab::{
    affinity, dock, fnv1a64, fnv1a64_hex, fold_target, generate_molecules, pose_id,
    splitmix64_next, structure_id, FoldCache, Molecule, PrngState, SimError, FRAGMENTS,
};
use proptest::prelude::*;

#[test]
fn fragment_table_matches() {
    assert_eq!(FRAGMENTS, oracle::FRAGMENTS);
}

#[test]
fn splitmix_streams_match_for_a_thousand_draws() {
    for seed in [0u64, 1, 42, u64::MAX, 0x9E3779B97F4A7C15] {
        let mut ours = PrngState(seed);
        let mut theirs = oracle::SplitMix(seed);
        for i in 0..1000 {
            assert_eq!(ours.next_u64(), theirs.next(), "seed {seed} draw {i}");
        }
    }
    let (s, x) = splitmix64_next(PrngState(0));
    assert_eq!(x, 0xe220a8397b1dcdaf);
    assert_eq!(splitmix64_next(s).1, 0x6e789e6aa1b965f4);
}

#[test]
fn fnv_reference_values() {
    assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
    assert_eq!(fnv1a64_hex(b"a"), "af63dc4c8601ec8c");
    assert_eq!(fnv1a64(b"ab"), 0x089c4407b545986a);
    assert_eq!(fnv1a64(b"ba"), 0x08a63307b54dd00c);
}

#[test]
fn frozen_model_outputs() {
    assert_eq!(affinity("C", "sars-cov-2-mpro"), -666_982);
    let got: Vec<String> = generate_molecules(42, 1, 3, &[], &BTreeSet::new())
        .unwrap()
        .into_iter()
        .map(|m| m.smiles)
        .collect();
    assert_eq!(got, ["C1CCCCC1ClBr", "C=CF", "OCCC"]);
    assert_eq!(structure_id("ACDE"), fnv1a64_hex(b"ACDE"));
    assert_eq!(pose_id("CCO", "abc"), fnv1a64_hex(b"CCO|abc"));
    let pose = dock(&Molecule::generated("CCO"), "abc");
    assert_eq!(pose.pose_id, pose_id("CCO", "abc"));
}

#[test]
fn fold_cache_counts_work_once_per_sequence() {
    let mut cache = FoldCache::default();
    let a = fold_target("t1", "MKV", &mut cache).unwrap();
    let b = fold_target("t2", "MKV", &mut cache).unwrap();
    assert!(!a.cached && b.cached);
    assert_eq!(a.structure.structure_id, b.structure.structure_id);
    assert_eq!(b.structure.target_id, "t2");
    fold_target("t1", "MKVL", &mut cache).unwrap();
    assert_eq!(cache.work(), 2);
    assert!(matches!(
        fold_target("t", "mkv", &mut cache),
        Err(SimError::InvalidArgument(_))
    ));
    assert!(matches!(
        fold_target("t", "", &mut cache),
        Err(SimError::InvalidArgument(_))
    ));
}

#[test]
fn affinity_stays_in_range_at_the_edges() {
    for target in ["x", "sars-cov-2-mpro", "kinase"] {
        for s in oracle::FRAGMENTS {
            let a = affinity(s, target);
            assert!((-2_000_000..=0).contains(&a));
        }
    }
}

proptest! {
    #[test]
    fn affinity_matches_float_reference(smiles in "[A-Za-z0-9=#()]{1,24}", target in "[a-z0-9-]{1,16}") {
        prop_assert_eq!(affinity(&smiles, &target), oracle::affinity(&smiles, &target));
    }

    #[test]
    fn generation_matches_reference(seed in any::<u64>(), it in 1u64..12, n in 1usize..40, k in 0usize..4) {
        let seeds: Vec<String> = oracle::generate(seed ^ 0xabc, 1, k, &[], &BTreeSet::new());
        let seen: BTreeSet<String> = oracle::generate(seed, 99, 10, &[], &BTreeSet::new()).into_iter().collect();
        let expected = oracle::generate(seed, it, n, &seeds, &seen);
        let mols: Vec<Molecule> = seeds.iter().map(|s| Molecule::generated(s.clone())).collect();
        let got: Vec<String> = generate_molecules(seed, it, n, &mols, &seen).unwrap().into_iter().map(|m| m.smiles).collect();
        prop_assert_eq!(&got, &expected);
        let unique: BTreeSet<&String> = got.iter().collect();
        prop_assert_eq!(unique.len(), n);
        prop_assert!(got.iter().all(|g| !seen.contains(g)));
    }
}

#[test]
fn generation_reports_exhaustion() {
    // Exclude every string of two to four fragments: nothing is left to draw.
    let mut all: BTreeSet<String> = BTreeSet::new();
    let mut layer: Vec<String> = vec![String::new()];
    for depth in 1..=4 {
        layer = layer
            .iter()
            .flat_map(|p| FRAGMENTS.iter().map(move |f| format!("{p}{f}")))
            .collect();
        if depth >= 2 {
            all.extend(layer.iter().cloned());
        }
    }
    let err = generate_molecules(1, 1, 5, &[], &all).unwrap_err();
    assert_eq!(
        err,
        SimError::Exhausted {
            requested: 5,
            produced: 0
        }
    );
    assert!(matches!(
        generate_molecules(1, 1, 0, &[], &BTreeSet::new()),
        Err(SimError::InvalidArgument(_))
    ));
}
