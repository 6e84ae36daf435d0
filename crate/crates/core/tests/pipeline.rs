mod common;

use common::pipeline::{check_manifest, random_manifest};
use proptest::prelude::*;

#[test]
fn invariants_hold_on_randomized_manifests() {
    for seed in 0..100 {
        if let Err(e) = check_manifest(seed) {
            panic!("manifest {seed}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariants_hold_on_arbitrary_seeds(seed in any::<u64>()) {
        prop_assert_eq!(check_manifest(seed), Ok(()));
    }

    #[test]
    fn random_manifests_have_both_classes(seed in any::<u64>()) {
        let subjects = random_manifest(seed);
        prop_assert!(subjects.len() >= 6);
        let labels = voxattn::train::labeled_examples(&subjects, voxattn::labeling::LabelingScheme::ExcludeDevelopedAd).unwrap();
        prop_assert!(labels.iter().any(|e| e.label == 1));
        prop_assert!(labels.iter().any(|e| e.label == 0));
    }
}
