//! Synthetic longitudinal cohorts with a planted ellipsoidal lesion in the
//! scans of subjects who later convert to AD dementia.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::roc_auc;
use crate::model::rvn::{location_to_coords, Rvn};
use crate::scan_io::{
    read_volume, resolve_volume_path, write_manifest, write_volume, ClinicalVisit, Diagnosis, Plane, ScanSession,
    SubjectRecord, VoxelVolume,
};
use crate::tensor::Tensor;

/// Semi-axis ratios of the lesion ellipsoid (depth, height, width).
const LESION_SHAPE: [f64; 3] = [1.0, 0.85, 0.7];
const BACKGROUND_WAVES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    /// Centre displacement from the volume centre, in units of half the side.
    pub center_offset: [f64; 3],
    /// Largest semi-axis, in units of half the side.
    pub radius: f64,
    pub amplitude: f64,
    /// −1 darkens the region, +1 brightens it.
    pub sign: f64,
}

impl Default for LesionSpec {
    fn default() -> Self {
        Self {
            center_offset: [0.2, 0.25, -0.25],
            radius: 0.2,
            amplitude: 5.0,
            sign: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    /// Inclusive range of scanned visits per subject.
    pub sessions_per_subject: [usize; 2],
    pub visit_cadence_days: u32,
    pub conversion_prevalence: f64,
    pub volume_side: usize,
    pub lesion: LesionSpec,
    pub noise_std: f64,
    /// Amplitude of the smooth random background.
    pub background: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 60,
            sessions_per_subject: [2, 4],
            visit_cadence_days: 365,
            conversion_prevalence: 0.4,
            volume_side: 64,
            lesion: LesionSpec::default(),
            noise_std: 1.0,
            background: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conversion_prevalence) {
            return Err(Error::Config(format!(
                "prevalence {} outside [0,1]",
                self.conversion_prevalence
            )));
        }
        let l = &self.lesion;
        if !(l.radius > 0.0 && l.radius < 0.5) {
            return Err(Error::Config(format!("lesion radius {} outside (0, 0.5)", l.radius)));
        }
        if l.center_offset.iter().any(|o| o.abs() > 0.25) {
            return Err(Error::Config("lesion offsets must lie within ±0.25".into()));
        }
        if !(self.noise_std >= 0.0 && l.amplitude >= 0.0 && self.background >= 0.0) {
            return Err(Error::Config(
                "noise, amplitude and background must be non-negative".into(),
            ));
        }
        let [lo, hi] = self.sessions_per_subject;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad sessions range {lo}..={hi}")));
        }
        if self.volume_side < 4 || self.visit_cadence_days < 16 {
            return Err(Error::Config("volume side ≥ 4 and cadence ≥ 16 days required".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.volume_side; 3]
    }

    /// Lesion centre in voxel coordinates.
    pub fn lesion_center(&self) -> [f64; 3] {
        let n = self.volume_side as f64;
        self.lesion.center_offset.map(|o| (n - 1.0) / 2.0 + o * n / 2.0)
    }

    /// Lesion centre after the volume is resampled to `shape`, with voxel
    /// centres aligned as in trilinear resizing.
    pub fn lesion_center_in(&self, shape: [usize; 3]) -> [f64; 3] {
        let n = self.volume_side as f64;
        let c = self.lesion_center();
        std::array::from_fn(|i| (c[i] + 0.5) * shape[i] as f64 / n - 0.5)
    }

    pub fn lesion_semi_axes(&self) -> [f64; 3] {
        let r = self.lesion.radius * self.volume_side as f64 / 2.0;
        LESION_SHAPE.map(|s| s * r)
    }

    /// Row-major flags of the voxels inside the lesion ellipsoid.
    pub fn lesion_mask(&self) -> Vec<bool> {
        let c = self.lesion_center();
        let a = self.lesion_semi_axes();
        let n = self.volume_side;
        let mut mask = Vec::with_capacity(n * n * n);
        for d in 0..n {
            for h in 0..n {
                for w in 0..n {
                    let p = [d as f64, h as f64, w as f64];
                    let q: f64 = (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum();
                    mask.push(q <= 1.0);
                }
            }
        }
        mask
    }
}

/// Smooth random background plus Gaussian noise; preclinical volumes carry
/// the lesion.
pub fn generate_volume<R: Rng + ?Sized>(spec: &SynthSpec, is_preclinical: bool, rng: &mut R) -> Result<VoxelVolume> {
    spec.validate()?;
    let n = spec.volume_side;
    let tau = std::f64::consts::TAU;
    let waves: Vec<([f64; 3], f64, f64)> = (0..BACKGROUND_WAVES)
        .map(|_| {
            let freq = [0; 3].map(|_: i32| f64::from(rng.random_range(0..=2u8)));
            let phase = rng.random_range(0.0..tau);
            let amp = rng.random_range(0.5..1.0) * spec.background / (BACKGROUND_WAVES as f64).sqrt();
            (freq, phase, amp)
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mask = is_preclinical.then(|| spec.lesion_mask());
    let shift = spec.lesion.sign * spec.lesion.amplitude;
    let mut voxels = Vec::with_capacity(n * n * n);
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                let p = [d as f64, h as f64, w as f64];
                let mut v: f64 = waves
                    .iter()
                    .map(|(f, phase, amp)| {
                        amp * (tau * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) / n as f64 + phase).cos()
                    })
                    .sum();
                v += noise.sample(rng);
                if let Some(m) = &mask {
                    if m[voxels.len()] {
                        v += shift;
                    }
                }
                voxels.push(v as f32);
            }
        }
    }
    VoxelVolume::new(spec.shape(), voxels, Plane::Axial)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A generated cohort and the generator's intended class per scan.
#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub manifest_path: PathBuf,
    pub subjects: Vec<SubjectRecord>,
    /// Volume path → whether the lesion was planted.
    pub truth: BTreeMap<String, bool>,
}

/// Timelines only: which subjects convert, their visits and scan days.
pub fn generate_timelines(spec: &SynthSpec) -> Result<(Vec<SubjectRecord>, BTreeMap<String, bool>)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let n = spec.n_subjects;
    let converters = (spec.conversion_prevalence * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut converts = vec![false; n];
    for &i in &order[..converters] {
        converts[i] = true;
    }
    let cadence = spec.visit_cadence_days;
    let visit_jitter = (cadence / 10) as i64;
    let scan_jitter = (cadence / 8) as i64;
    let mut subjects = Vec::with_capacity(n);
    let mut truth = BTreeMap::new();
    for (i, &convert) in converts.iter().enumerate() {
        let id = format!("S{i:04}");
        let scans = rng.random_range(spec.sessions_per_subject[0]..=spec.sessions_per_subject[1]);
        // Conversion falls in the back half: at most as many AD visits as normal ones.
        let ad_visits = if convert { rng.random_range(1..=scans) } else { 0 };
        let mut visits = Vec::with_capacity(scans + ad_visits);
        for v in 0..scans + ad_visits {
            let base = i64::from(cadence) * v as i64;
            let day = if v == 0 {
                0
            } else {
                base + rng.random_range(-visit_jitter..=visit_jitter)
            };
            let diagnosis = if v < scans {
                Diagnosis::CognitivelyNormal
            } else {
                Diagnosis::AdDementia
            };
            visits.push(ClinicalVisit {
                subject_id: id.clone(),
                day: day as u32,
                diagnosis,
            });
        }
        let mut sessions = Vec::with_capacity(scans);
        for visit in &visits[..scans] {
            let day = (i64::from(visit.day) + rng.random_range(-scan_jitter..=scan_jitter)).max(0) as u32;
            let volume_path = format!("volumes/{id}_d{day:05}");
            truth.insert(volume_path.clone(), convert);
            sessions.push(ScanSession {
                subject_id: id.clone(),
                day,
                volume_path,
                plane: Plane::Axial,
            });
        }
        subjects.push(SubjectRecord {
            subject_id: id,
            visits,
            sessions,
        });
    }
    Ok((subjects, truth))
}

/// Write volumes, `manifest.jsonl`, `truth.json` and `spec.json` under `out_dir`.
pub fn generate_cohort(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthCohort> {
    let out_dir = out_dir.as_ref();
    let (subjects, truth) = generate_timelines(spec)?;
    let volumes = out_dir.join("volumes");
    fs::create_dir_all(&volumes).map_err(|e| Error::io(&volumes, e))?;
    for (i, s) in subjects.iter().enumerate() {
        for (j, session) in s.sessions.iter().enumerate() {
            let mut rng = stream_rng(spec.seed, 1 + ((i as u64) << 16) + j as u64);
            let v = generate_volume(spec, truth[&session.volume_path], &mut rng)?;
            write_volume(&v, out_dir.join(&session.volume_path))?;
        }
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&subjects, &manifest_path)?;
    let truth_path = out_dir.join("truth.json");
    fs::write(&truth_path, serde_json::to_vec_pretty(&truth)?).map_err(|e| Error::io(&truth_path, e))?;
    let spec_path = out_dir.join("spec.json");
    fs::write(&spec_path, serde_json::to_vec_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(SynthCohort {
        manifest_path,
        subjects,
        truth,
    })
}

/// Mean intensity inside the true lesion region, oriented so larger means
/// more lesion-like.
pub fn roi_score(volume: &VoxelVolume, spec: &SynthSpec, mask: &[bool]) -> f64 {
    let (sum, count) = volume
        .voxels()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (&v, _)| (s + f64::from(v), c + 1));
    let sign = if spec.lesion.sign < 0.0 { -1.0 } else { 1.0 };
    sign * sum / count.max(1) as f64
}

/// ROC AUC of the ROI-mean classifier over in-memory volumes.
pub fn roi_oracle_volumes(volumes: &[VoxelVolume], labels: &[u8], spec: &SynthSpec) -> Result<f64> {
    let mask = spec.lesion_mask();
    let scores: Vec<f64> = volumes.iter().map(|v| roi_score(v, spec, &mask)).collect();
    roc_auc(&scores, labels).ok_or_else(|| Error::Degenerate("oracle needs both classes".into()))
}

/// ROC AUC of the ROI-mean classifier over every scan of a generated cohort.
pub fn roi_oracle(cohort: &SynthCohort, spec: &SynthSpec) -> Result<f64> {
    let mask = spec.lesion_mask();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (path, &planted) in &cohort.truth {
        let v = read_volume(resolve_volume_path(&cohort.manifest_path, path))?;
        scores.push(roi_score(&v, spec, &mask));
        labels.push(u8::from(planted));
    }
    roc_auc(&scores, &labels).ok_or_else(|| Error::Degenerate("oracle needs both classes".into()))
}

/// How often the glimpse path ends up nearer the lesion than it started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Volumes whose mean later glimpse location is nearer the lesion centre
    /// than the starting location is.
    pub closer: usize,
    pub total: usize,
    pub start_distance: f64,
    pub mean_distance: f64,
}

impl LocalizationReport {
    pub fn fraction(&self) -> f64 {
        self.closer as f64 / self.total.max(1) as f64
    }
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Deterministic glimpse paths over `inputs`, averaged from step index
/// `first_step` on and compared in the model's voxel space with the lesion
/// centre.
pub fn glimpse_localization(
    rvn: &Rvn,
    inputs: &[&Tensor],
    spec: &SynthSpec,
    first_step: usize,
) -> Result<LocalizationReport> {
    let shape = rvn.config().input_shape;
    if first_step >= rvn.config().steps {
        return Err(Error::Range(format!(
            "first step {first_step} beyond the {} glimpses",
            rvn.config().steps
        )));
    }
    let lesion = spec.lesion_center_in(shape);
    let start = distance(location_to_coords([0.0; 3], shape), lesion);
    let mut report = LocalizationReport {
        closer: 0,
        total: inputs.len(),
        start_distance: start,
        mean_distance: 0.0,
    };
    for t in rvn.trajectories(inputs, None, false, 0)? {
        let later = &t.locations[first_step..];
        let mean: [f64; 3] = std::array::from_fn(|i| {
            later.iter().map(|l| location_to_coords(*l, shape)[i]).sum::<f64>() / later.len() as f64
        });
        let d = distance(mean, lesion);
        report.mean_distance += d / inputs.len().max(1) as f64;
        if d < start {
            report.closer += 1;
        }
    }
    Ok(report)
}
