//! Dataset preparation: person-disjoint splits, class rebalancing with
//! right-angle augmentation, balanced batch sampling and volume/slice
//! resampling.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::{LabelDecision, LabelReason};
use crate::scan_io::VoxelVolume;

pub const DEFAULT_RATIOS: [f64; 3] = [0.65, 0.20, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Subject → split map. Serializes as a flat JSON object.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn subjects(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn get(&self, subject: &str) -> Option<Split> {
        self.assignment.get(subject).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|s| **s == split).count()
    }
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Config(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios sum to {total}, expected 1")));
    }
    Ok(())
}

/// Shuffle subjects with `seed` and cut into train/val/test by subject count.
pub fn person_disjoint_split<S: AsRef<str>>(subject_ids: &[S], ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    validate_ratios(ratios)?;
    let mut ids: Vec<&str> = subject_ids.iter().map(|s| s.as_ref()).collect();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 subjects to split, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let mut n_train = (ratios[0] * n as f64).round() as usize;
    let mut n_val = (ratios[1] * n as f64).round() as usize;
    n_train = n_train.min(n);
    n_val = n_val.min(n - n_train);
    // Every non-zero ratio gets at least one subject.
    let mut counts = [n_train, n_val, n - n_train - n_val];
    for k in 0..3 {
        if ratios[k] > 0.0 && counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).expect("three splits");
            if counts[donor] > 1 {
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
    }
    let mut assignment = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < counts[0] {
            Split::Train
        } else if i < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(id.to_string(), split);
    }
    Ok(SplitAssignment { assignment })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Depth,
    Height,
    Width,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Depth, Axis::Height, Axis::Width];

    fn index(self) -> usize {
        match self {
            Axis::Depth => 0,
            Axis::Height => 1,
            Axis::Width => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationPlane {
    DepthHeight,
    DepthWidth,
    HeightWidth,
}

impl RotationPlane {
    pub const ALL: [RotationPlane; 3] = [
        RotationPlane::DepthHeight,
        RotationPlane::DepthWidth,
        RotationPlane::HeightWidth,
    ];

    pub fn axes(self) -> (usize, usize) {
        match self {
            RotationPlane::DepthHeight => (0, 1),
            RotationPlane::DepthWidth => (0, 2),
            RotationPlane::HeightWidth => (1, 2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    Mirror { axis: Axis },
    Rotate90 { plane: RotationPlane, turns: u8 },
}

impl AugmentOp {
    /// A uniformly chosen mirror or quarter-turn rotation valid for `shape`.
    pub fn random<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Self {
        let planes: Vec<RotationPlane> = RotationPlane::ALL
            .into_iter()
            .filter(|p| {
                let (a, b) = p.axes();
                shape[a] == shape[b]
            })
            .collect();
        if planes.is_empty() || rng.random_bool(0.5) {
            AugmentOp::Mirror {
                axis: Axis::ALL[rng.random_range(0..3)],
            }
        } else {
            AugmentOp::Rotate90 {
                plane: planes[rng.random_range(0..planes.len())],
                turns: rng.random_range(1..4),
            }
        }
    }
}

pub fn apply_augment(volume: &VoxelVolume, op: AugmentOp) -> Result<VoxelVolume> {
    let shape = volume.shape();
    let src = volume.voxels();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut out = vec![0.0f32; src.len()];
    match op {
        AugmentOp::Mirror { axis } => {
            let a = axis.index();
            for d in 0..shape[0] {
                for h in 0..shape[1] {
                    for w in 0..shape[2] {
                        let mut idx = [d, h, w];
                        idx[a] = shape[a] - 1 - idx[a];
                        out[volume.index(d, h, w)] = src[idx[0] * strides[0] + idx[1] * strides[1] + idx[2]];
                    }
                }
            }
        }
        AugmentOp::Rotate90 { plane, turns } => {
            let (a, b) = plane.axes();
            if shape[a] != shape[b] {
                return Err(Error::Shape(format!(
                    "quarter-turn in {plane:?} needs square dims, volume is {shape:?}"
                )));
            }
            let n = shape[a];
            let mut cur = src.to_vec();
            for _ in 0..turns % 4 {
                for d in 0..shape[0] {
                    for h in 0..shape[1] {
                        for w in 0..shape[2] {
                            let dst = [d, h, w];
                            let mut from = dst;
                            from[a] = dst[b];
                            from[b] = n - 1 - dst[a];
                            out[volume.index(d, h, w)] = cur[from[0] * strides[0] + from[1] * strides[1] + from[2]];
                        }
                    }
                }
                cur.copy_from_slice(&out);
            }
            out = cur;
        }
    }
    VoxelVolume::new(shape, out, volume.plane())
}

pub fn apply_augments(volume: &VoxelVolume, ops: &[AugmentOp]) -> Result<VoxelVolume> {
    let mut v = volume.clone();
    for &op in ops {
        v = apply_augment(&v, op)?;
    }
    Ok(v)
}

/// A labeled scan ready for training: which volume, which class, why, and any
/// augmentation to apply when it is loaded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub subject_id: String,
    pub day: u32,
    pub volume_path: String,
    pub label: u8,
    pub reason: LabelReason,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augment: Vec<AugmentOp>,
}

impl LabeledExample {
    /// `None` for excluded sessions.
    pub fn from_decision(d: &LabelDecision) -> Option<Self> {
        Some(Self {
            subject_id: d.session.subject_id.clone(),
            day: d.session.day,
            volume_path: d.session.volume_path.clone(),
            label: d.label.class()?,
            reason: d.reason,
            augment: Vec::new(),
        })
    }
}

/// Downsample class 0 and oversample class 1 (with fresh augmentation) until
/// `class1 / class0 ≈ target_ratio`. Both counts meet near the geometric mean.
pub fn rebalance(
    examples: &[LabeledExample],
    target_ratio: f64,
    cube_shape: [usize; 3],
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if !(target_ratio.is_finite() && target_ratio > 0.0) {
        return Err(Error::Config(format!(
            "target ratio must be positive, got {target_ratio}"
        )));
    }
    let class0: Vec<&LabeledExample> = examples.iter().filter(|e| e.label == 0).collect();
    let class1: Vec<&LabeledExample> = examples.iter().filter(|e| e.label == 1).collect();
    let (n0, n1) = (class0.len(), class1.len());
    if n0 == 0 || n1 == 0 {
        return Err(Error::Imbalance(format!(
            "rebalance needs both classes, got {n0} class-0 and {n1} class-1"
        )));
    }
    // Prefer the class-0 count nearest the geometric mean that rounds to an
    // acceptable ratio.
    let ideal = ((n0 * n1) as f64 / target_ratio).sqrt();
    let counts = |k0: usize| (k0, ((target_ratio * k0 as f64).round() as usize).max(n1));
    let error = |(k0, k1): (usize, usize)| (k1 as f64 / k0 as f64 - target_ratio).abs();
    let mut candidates: Vec<usize> = (1..=n0).collect();
    candidates.sort_by(|&a, &b| (a as f64 - ideal).abs().total_cmp(&(b as f64 - ideal).abs()));
    let Some((k0, k1)) = candidates
        .iter()
        .map(|&k0| counts(k0))
        .find(|&c| error(c) <= 0.05 * target_ratio)
    else {
        let best = (1..=n0).map(counts).min_by(|&a, &b| error(a).total_cmp(&error(b)));
        let achieved = best.map_or(f64::NAN, |(k0, k1)| k1 as f64 / k0 as f64);
        return Err(Error::Imbalance(format!(
            "cannot reach ratio {target_ratio} from {n0}/{n1} without dropping class 1 \
             or fabricating class 0 (best {achieved:.3})"
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, n0, k0).into_vec();
    keep.sort_unstable();
    let mut out: Vec<LabeledExample> = keep.into_iter().map(|i| class0[i].clone()).collect();
    out.extend(class1.iter().map(|e| (*e).clone()));
    let mut order: Vec<usize> = (0..n1).collect();
    let mut cursor = n1;
    for _ in n1..k1 {
        if cursor == n1 {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut replica = class1[order[cursor]].clone();
        cursor += 1;
        replica.augment.push(AugmentOp::random(cube_shape, &mut rng));
        out.push(replica);
    }
    Ok(out)
}

/// Equal numbers of each class in every batch; the larger class is visited
/// once per epoch and the smaller class is recycled.
#[derive(Clone, Debug)]
pub struct BalancedBatchSampler {
    class0: Vec<usize>,
    class1: Vec<usize>,
    batch_size: usize,
    seed: u64,
}

impl BalancedBatchSampler {
    pub fn new(labels: &[u8], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size % 2 == 1 {
            return Err(Error::Config(format!(
                "balanced batches need an even positive batch size, got {batch_size}"
            )));
        }
        let class0: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
        let class1: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        if class0.is_empty() || class1.is_empty() {
            return Err(Error::Imbalance(format!(
                "balanced sampling needs both classes, got {} class-0 and {} class-1",
                class0.len(),
                class1.len()
            )));
        }
        if class0.len() + class1.len() != labels.len() {
            return Err(Error::Validation("labels must be 0 or 1".into()));
        }
        Ok(Self {
            class0,
            class1,
            batch_size,
            seed,
        })
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let (large, small) = if self.class0.len() >= self.class1.len() {
            (&self.class0, &self.class1)
        } else {
            (&self.class1, &self.class0)
        };
        let mut large = large.clone();
        large.shuffle(&mut rng);
        let mut pool = small.clone();
        pool.shuffle(&mut rng);
        let mut cursor = 0;
        let half = self.batch_size / 2;
        let mut batches = Vec::with_capacity(large.len().div_ceil(half));
        for chunk in large.chunks(half) {
            let mut batch = chunk.to_vec();
            for _ in 0..chunk.len() {
                if cursor == pool.len() {
                    pool.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(pool[cursor]);
                cursor += 1;
            }
            batch.shuffle(&mut rng);
            batches.push(batch);
        }
        batches
    }
}

pub fn balanced_batch_sampler(labels: &[u8], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    Ok(BalancedBatchSampler::new(labels, batch_size, seed)?.epoch(0))
}

/// Source coordinate for `dst` under half-pixel-centre resampling, clamped to the grid.
fn source_taps(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Linear resampling of one axis of a row-major grid.
fn resize_axis(data: &[f64], dims: &[usize], axis: usize, n_out: usize) -> (Vec<f64>, Vec<usize>) {
    let n_in = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * n_out * inner];
    let taps: Vec<_> = (0..n_out).map(|j| source_taps(j, n_in, n_out)).collect();
    for o in 0..outer {
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let dst = &mut out[(o * n_out + j) * inner..][..inner];
            let a = &data[(o * n_in + i0) * inner..][..inner];
            let b = &data[(o * n_in + i1) * inner..][..inner];
            for k in 0..inner {
                dst[k] = a[k] * (1.0 - t) + b[k] * t;
            }
        }
    }
    let mut new_dims = dims.to_vec();
    new_dims[axis] = n_out;
    (out, new_dims)
}

fn resize_grid(data: Vec<f64>, dims: &[usize], target: &[usize]) -> Vec<f64> {
    let mut cur = data;
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        if cur_dims[axis] != target[axis] {
            let (d, nd) = resize_axis(&cur, &cur_dims, axis, target[axis]);
            cur = d;
            cur_dims = nd;
        }
    }
    cur
}

/// Trilinear resampling with half-pixel centres.
pub fn resize_trilinear(volume: &VoxelVolume, target: [usize; 3]) -> Result<VoxelVolume> {
    if target.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "target dims must be positive, got {target:?}"
        )));
    }
    let data: Vec<f64> = volume.voxels().iter().map(|&v| f64::from(v)).collect();
    let out = resize_grid(data, &volume.shape(), &target);
    VoxelVolume::new(target, out.into_iter().map(|v| v as f32).collect(), volume.plane())
}

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Shift to zero mean and scale to unit variance; constant inputs become zeros.
pub fn standardize(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
    for v in values.iter_mut() {
        *v = ((f64::from(*v) - mean) * inv) as f32;
    }
}

pub fn preprocess_volume(volume: &VoxelVolume, target: [usize; 3]) -> Result<VoxelVolume> {
    let mut v = resize_trilinear(volume, target)?;
    standardize(v.voxels_mut());
    Ok(v)
}

/// A single 2D frame (height × width), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2d {
    pub shape: [usize; 2],
    pub pixels: Vec<f32>,
}

/// Depth indices of the centred `n`-frame window.
pub fn frame_window(depth: usize, n: usize) -> Result<Range<usize>> {
    if n == 0 || n > depth {
        return Err(Error::Range(format!("cannot select {n} frames from depth {depth}")));
    }
    let start = (depth - n) / 2;
    Ok(start..start + n)
}

pub fn select_frames(volume: &VoxelVolume, n: usize) -> Result<Vec<Slice2d>> {
    let [d, h, w] = volume.shape();
    let window = frame_window(d, n)?;
    Ok(window
        .map(|z| Slice2d {
            shape: [h, w],
            pixels: volume.voxels()[z * h * w..(z + 1) * h * w].to_vec(),
        })
        .collect())
}

/// Bilinear resampling with half-pixel centres.
pub fn resize_slice(slice: &Slice2d, height: usize, width: usize) -> Result<Slice2d> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape(format!(
            "target dims must be positive, got {height}×{width}"
        )));
    }
    let data: Vec<f64> = slice.pixels.iter().map(|&v| f64::from(v)).collect();
    let out = resize_grid(data, &slice.shape, &[height, width]);
    Ok(Slice2d {
        shape: [height, width],
        pixels: out.into_iter().map(|v| v as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn twenty_subjects_split_13_4_3() {
        let s = person_disjoint_split(&ids(20), DEFAULT_RATIOS, 1).unwrap();
        assert_eq!(
            (s.count(Split::Train), s.count(Split::Val), s.count(Split::Test)),
            (13, 4, 3)
        );
    }

    #[test]
    fn split_is_seed_deterministic() {
        let a = person_disjoint_split(&ids(30), DEFAULT_RATIOS, 7).unwrap();
        let b = person_disjoint_split(&ids(30), DEFAULT_RATIOS, 7).unwrap();
        let c = person_disjoint_split(&ids(30), DEFAULT_RATIOS, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_ratios_and_tiny_cohorts() {
        assert!(matches!(
            person_disjoint_split(&ids(10), [0.5, 0.2, 0.2], 0),
            Err(Error::Config(_))
        ));
        assert!(person_disjoint_split(&ids(2), DEFAULT_RATIOS, 0).is_err());
        let s = person_disjoint_split(&ids(3), DEFAULT_RATIOS, 0).unwrap();
        assert_eq!(
            (s.count(Split::Train), s.count(Split::Val), s.count(Split::Test)),
            (1, 1, 1)
        );
    }

    #[test]
    fn mirror_moves_hot_voxel() {
        let mut v = VoxelVolume::zeros([3, 4, 5]);
        v.voxels_mut()[0] = 1.0;
        let m = apply_augment(&v, AugmentOp::Mirror { axis: Axis::Width }).unwrap();
        assert_eq!(m.at(0, 0, 4), 1.0);
        assert_eq!(m.voxels().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn rotation_requires_square_plane() {
        let v = VoxelVolume::zeros([3, 4, 5]);
        let op = AugmentOp::Rotate90 {
            plane: RotationPlane::HeightWidth,
            turns: 1,
        };
        assert!(matches!(apply_augment(&v, op), Err(Error::Shape(_))));
        let v = VoxelVolume::zeros([3, 4, 4]);
        assert!(apply_augment(&v, op).is_ok());
    }

    #[test]
    fn quarter_turn_moves_corner() {
        let mut v = VoxelVolume::zeros([1, 3, 3]);
        v.voxels_mut()[0] = 1.0; // (0,0,0)
        let r = apply_augment(
            &v,
            AugmentOp::Rotate90 {
                plane: RotationPlane::HeightWidth,
                turns: 1,
            },
        )
        .unwrap();
        // out[h][w] = in[w][n-1-h]: the hot voxel lands where w=0, n-1-h=0.
        assert_eq!(r.at(0, 2, 0), 1.0);
    }

    #[test]
    fn frame_windows() {
        assert_eq!(frame_window(256, 96).unwrap(), 80..176);
        assert_eq!(frame_window(256, 48).unwrap(), 104..152);
        assert_eq!(frame_window(7, 7).unwrap(), 0..7);
        assert!(matches!(frame_window(4, 5), Err(Error::Range(_))));
    }

    #[test]
    fn select_all_frames_in_order() {
        let v = VoxelVolume::from_fn([4, 2, 2], |d, _, _| d as f32);
        let f = select_frames(&v, 4).unwrap();
        let firsts: Vec<f32> = f.iter().map(|s| s.pixels[0]).collect();
        assert_eq!(firsts, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_volume_standardizes_to_zero() {
        let v = VoxelVolume::from_fn([4, 4, 4], |_, _, _| 5.0);
        let p = preprocess_volume(&v, [4, 4, 4]).unwrap();
        assert!(p.voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ramp_downscale_hits_midpoints() {
        // v = d + 4h + 16w on a 4³ grid; 2³ output samples at source 0.5 and 2.5 per axis.
        let v = VoxelVolume::from_fn([4, 4, 4], |d, h, w| (d + 4 * h + 16 * w) as f32);
        let r = resize_trilinear(&v, [2, 2, 2]).unwrap();
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let mid = |i: usize| 0.5 + 2.0 * i as f64;
                    let expect = mid(d) + 4.0 * mid(h) + 16.0 * mid(w);
                    assert!((f64::from(r.at(d, h, w)) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn slice_resize_identity_constant_and_ramp() {
        let s = Slice2d {
            shape: [3, 5],
            pixels: (0..15).map(|i| i as f32 * 0.25).collect(),
        };
        assert_eq!(resize_slice(&s, 3, 5).unwrap(), s);

        let c = Slice2d {
            shape: [6, 4],
            pixels: vec![2.5; 24],
        };
        let r = resize_slice(&c, 11, 3).unwrap();
        assert!(r.pixels.iter().all(|&v| (v - 2.5).abs() < 1e-6));

        // ramp v = h + 10w on 4×4 → 2×2 samples sources 0.5 and 2.5
        let ramp = Slice2d {
            shape: [4, 4],
            pixels: (0..16).map(|i| ((i / 4) + 10 * (i % 4)) as f32).collect(),
        };
        let r = resize_slice(&ramp, 2, 2).unwrap();
        assert_eq!(r.pixels, vec![5.5, 25.5, 7.5, 27.5]);
    }

    #[test]
    fn sampler_rejects_odd_batch_and_missing_class() {
        assert!(matches!(balanced_batch_sampler(&[0, 1], 3, 0), Err(Error::Config(_))));
        assert!(matches!(
            balanced_batch_sampler(&[0, 0], 2, 0),
            Err(Error::Imbalance(_))
        ));
    }

    #[test]
    fn sampler_eight_and_eight() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let batches = balanced_batch_sampler(&labels, 4, 3).unwrap();
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| labels[i] == 1).count(), 2);
        }
    }

    #[test]
    fn rebalance_paper_imbalance() {
        let mut ex = Vec::new();
        for i in 0..2181 {
            ex.push(example(i, 0));
        }
        for i in 0..176 {
            ex.push(example(10_000 + i, 1));
        }
        let out = rebalance(&ex, 1.0, [8, 8, 8], 5).unwrap();
        let n0 = out.iter().filter(|e| e.label == 0).count() as f64;
        let n1 = out.iter().filter(|e| e.label == 1).count() as f64;
        assert!((n1 / n0 - 1.0).abs() <= 0.05, "{n0} vs {n1}");
    }

    #[test]
    fn rebalance_requires_both_classes() {
        let ex: Vec<_> = (0..4).map(|i| example(i, 0)).collect();
        assert!(matches!(rebalance(&ex, 1.0, [2, 2, 2], 0), Err(Error::Imbalance(_))));
    }

    #[test]
    fn rebalance_balanced_is_fixed_point() {
        let ex: Vec<_> = (0..20).map(|i| example(i, (i % 2) as u8)).collect();
        let out = rebalance(&ex, 1.0, [2, 2, 2], 0).unwrap();
        let mut a: Vec<_> = ex.iter().map(|e| e.volume_path.clone()).collect();
        let mut b: Vec<_> = out.iter().map(|e| e.volume_path.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(out.iter().all(|e| e.augment.is_empty()));
    }

    #[test]
    fn rebalance_is_deterministic() {
        let ex: Vec<_> = (0..15).map(|i| example(i, u8::from(i >= 10))).collect();
        let a = rebalance(&ex, 1.0, [4, 4, 4], 9).unwrap();
        let b = rebalance(&ex, 1.0, [4, 4, 4], 9).unwrap();
        assert_eq!(a, b);
    }

    pub(crate) fn example(i: usize, label: u8) -> LabeledExample {
        LabeledExample {
            subject_id: format!("s{i}"),
            day: 0,
            volume_path: format!("v{i}"),
            label,
            reason: if label == 1 {
                LabelReason::PreclinicalConversion
            } else {
                LabelReason::HealthyNoConversion
            },
            augment: Vec::new(),
        }
    }
}
