//! Randomized longitudinal manifests and the data-pipeline invariants checked on them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxattn::dataset::{
    apply_augment, apply_augments, person_disjoint_split, rebalance, AugmentOp, Axis, BalancedBatchSampler,
    LabeledExample, RotationPlane, Split, DEFAULT_RATIOS,
};
use voxattn::labeling::LabelingScheme;
use voxattn::scan_io::{ClinicalVisit, Diagnosis, Plane, ScanSession, SubjectRecord, VoxelVolume};
use voxattn::train::{check_contamination, examples_in, labeled_examples};
use voxattn::Error;

const DIAGNOSES: [Diagnosis; 5] = [
    Diagnosis::CognitivelyNormal,
    Diagnosis::AdDementia,
    Diagnosis::UncertainDementia,
    Diagnosis::NonAdDementia,
    Diagnosis::Other,
];

fn subject(id: String, rng: &mut ChaCha8Rng, timeline: &[Diagnosis]) -> SubjectRecord {
    let mut day = rng.random_range(0..200);
    let mut visits = Vec::new();
    for &diagnosis in timeline {
        visits.push(ClinicalVisit {
            subject_id: id.clone(),
            day,
            diagnosis,
        });
        day += rng.random_range(200..900);
    }
    let last = day;
    let n_sessions = rng.random_range(1..5);
    // A scan at the first visit keeps every timeline represented.
    let mut days: Vec<u32> = (0..n_sessions).map(|_| rng.random_range(0..last)).collect();
    days.push(visits[0].day);
    days.sort_unstable();
    days.dedup();
    let sessions = days
        .into_iter()
        .map(|d| ScanSession {
            subject_id: id.clone(),
            day: d,
            volume_path: format!("{id}/d{d:05}.vol"),
            plane: Plane::Axial,
        })
        .collect();
    SubjectRecord {
        subject_id: id,
        visits,
        sessions,
    }
}

/// A cohort of random clinical timelines. The first subject always converts
/// from normal to AD and the second always stays normal, so both classes exist.
pub fn random_manifest(seed: u64) -> Vec<SubjectRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(6..40);
    let mut out = Vec::with_capacity(n);
    out.push(subject(
        format!("S{seed}-000"),
        &mut rng,
        &[
            Diagnosis::CognitivelyNormal,
            Diagnosis::CognitivelyNormal,
            Diagnosis::AdDementia,
        ],
    ));
    out.push(subject(
        format!("S{seed}-001"),
        &mut rng,
        &[Diagnosis::CognitivelyNormal],
    ));
    for i in 2..n {
        let visits = rng.random_range(1..6);
        let timeline: Vec<Diagnosis> = (0..visits)
            .map(|_| {
                if rng.random_bool(0.6) {
                    Diagnosis::CognitivelyNormal
                } else {
                    DIAGNOSES[rng.random_range(1..DIAGNOSES.len())]
                }
            })
            .collect();
        out.push(subject(format!("S{seed}-{i:03}"), &mut rng, &timeline));
    }
    out
}

fn random_volume(rng: &mut ChaCha8Rng) -> VoxelVolume {
    let side = rng.random_range(2..6);
    let shape = if rng.random_bool(0.5) {
        [side; 3]
    } else {
        [rng.random_range(1..6), side, rng.random_range(1..6)]
    };
    VoxelVolume::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
}

fn check_split(subjects: &[SubjectRecord], examples: &[LabeledExample], seed: u64) -> Result<(), String> {
    let ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let split = person_disjoint_split(&ids, DEFAULT_RATIOS, seed).map_err(|e| e.to_string())?;
    if split.assignment.len() != ids.len() {
        return Err(format!(
            "{} subjects assigned out of {}",
            split.assignment.len(),
            ids.len()
        ));
    }
    let mut owner: BTreeMap<String, Split> = BTreeMap::new();
    let mut total = 0;
    for which in [Split::Train, Split::Val, Split::Test] {
        let part = examples_in(&split, which, examples);
        total += part.len();
        for e in &part {
            if let Some(prev) = owner.insert(e.subject_id.clone(), which) {
                if prev != which {
                    return Err(format!("subject {} in {prev:?} and {which:?}", e.subject_id));
                }
            }
        }
    }
    if total != examples.len() {
        return Err(format!("splits hold {total} of {} examples", examples.len()));
    }
    Ok(())
}

/// Whether some subsample of class 0 and some oversampling of class 1 (never
/// dropping a positive) lands within 5% of `target`.
fn ratio_reachable(n0: usize, n1: usize, target: f64) -> bool {
    n0 > 0
        && n1 > 0
        && (1..=n0).any(|k0| {
            let k1 = ((target * k0 as f64).round() as usize).max(n1);
            (k1 as f64 / k0 as f64 - target).abs() <= 0.05 * target
        })
}

fn check_rebalance_and_batches(train: &[LabeledExample], seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = [0.5, 1.0, 1.0, 2.0][rng.random_range(0..4)];
    let n1 = train.iter().filter(|e| e.label == 1).count();
    let balanced = match rebalance(train, target, [4, 4, 4], seed) {
        Ok(b) => b,
        Err(Error::Imbalance(_)) if !ratio_reachable(train.len() - n1, n1, target) => return Ok(()),
        Err(e) => return Err(format!("rebalance failed: {e}")),
    };
    let k0 = balanced.iter().filter(|e| e.label == 0).count();
    let k1 = balanced.len() - k0;
    let ratio = k1 as f64 / k0 as f64;
    if (ratio - target).abs() > 0.05 * target {
        return Err(format!("rebalanced ratio {ratio:.3}, target {target}"));
    }
    let originals = balanced.iter().filter(|e| e.label == 1 && e.augment.is_empty()).count();
    if originals != n1 {
        return Err(format!("{originals} of {n1} positives kept unaugmented"));
    }

    let labels: Vec<u8> = balanced.iter().map(|e| e.label).collect();
    let batch = 2 * rng.random_range(1..9);
    let sampler = BalancedBatchSampler::new(&labels, batch, seed).map_err(|e| e.to_string())?;
    let larger = if k0 >= k1 { 0 } else { 1 };
    let mut seen = BTreeSet::new();
    for b in sampler.epoch(rng.random_range(0..5)) {
        let ones = b.iter().filter(|&&i| labels[i] == 1).count();
        if 2 * ones != b.len() || b.len() > batch {
            return Err(format!("batch of {} has {ones} positives", b.len()));
        }
        for &i in b.iter().filter(|&&i| labels[i] == larger) {
            if !seen.insert(i) {
                return Err(format!("index {i} of the larger class drawn twice"));
            }
        }
    }
    if seen.len() != k0.max(k1) {
        return Err(format!(
            "epoch covered {} of {} larger-class examples",
            seen.len(),
            k0.max(k1)
        ));
    }
    Ok(())
}

fn check_augmentations(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = random_volume(&mut rng);
    let shape = v.shape();
    for axis in Axis::ALL {
        let m = AugmentOp::Mirror { axis };
        if apply_augments(&v, &[m, m]).map_err(|e| e.to_string())? != v {
            return Err(format!("mirror {axis:?} twice is not the identity on {shape:?}"));
        }
    }
    for plane in RotationPlane::ALL {
        let (a, b) = plane.axes();
        if shape[a] != shape[b] {
            if apply_augment(&v, AugmentOp::Rotate90 { plane, turns: 1 }).is_ok() {
                return Err(format!("quarter-turn in {plane:?} accepted on {shape:?}"));
            }
            continue;
        }
        let turns = rng.random_range(0..4u8);
        let ops = [
            AugmentOp::Rotate90 { plane, turns },
            AugmentOp::Rotate90 {
                plane,
                turns: 4 - turns,
            },
        ];
        if apply_augments(&v, &ops).map_err(|e| e.to_string())? != v {
            return Err(format!(
                "{turns} + {} quarter-turns in {plane:?} is not the identity",
                4 - turns
            ));
        }
        let half = AugmentOp::Rotate90 { plane, turns: 2 };
        if apply_augments(&v, &[half, half]).map_err(|e| e.to_string())? != v {
            return Err(format!("half-turn in {plane:?} is not an involution"));
        }
    }
    Ok(())
}

fn check_contamination_fails(subjects: &[SubjectRecord], seed: u64) -> Result<(), String> {
    let ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let split = person_disjoint_split(&ids, DEFAULT_RATIOS, seed).map_err(|e| e.to_string())?;
    let train: Vec<String> = split.subjects(Split::Train).into_iter().map(String::from).collect();
    let mut test = split.subjects(Split::Test);
    check_contamination(test.iter().copied(), &train).map_err(|e| format!("clean split rejected: {e}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaked = train[rng.random_range(0..train.len())].as_str();
    test.push(leaked);
    match check_contamination(test.iter().copied(), &train) {
        Err(Error::Contamination(overlap)) if overlap == vec![leaked.to_string()] => Ok(()),
        other => Err(format!("leaked subject {leaked} gave {other:?}")),
    }
}

/// Every pipeline invariant on one randomized manifest.
pub fn check_manifest(seed: u64) -> Result<(), String> {
    let subjects = random_manifest(seed);
    let scheme = if seed.is_multiple_of(2) {
        LabelingScheme::ExcludeDevelopedAd
    } else {
        LabelingScheme::IncludeDevelopedAd
    };
    let examples = labeled_examples(&subjects, scheme).map_err(|e| e.to_string())?;
    check_split(&subjects, &examples, seed)?;
    let ids: Vec<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();
    let split = person_disjoint_split(&ids, DEFAULT_RATIOS, seed).map_err(|e| e.to_string())?;
    let train = examples_in(&split, Split::Train, &examples);
    check_rebalance_and_batches(&train, seed)?;
    check_augmentations(seed)?;
    check_contamination_fails(&subjects, seed)
}
