//! On-disk volumes (`.json` sidecar + `.raw` little-endian `f32` payload) and
//! JSON Lines cohort manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    #[default]
    Axial,
    Sagittal,
}

/// A 3D scalar grid stored row-major with depth outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    shape: [usize; 3],
    voxels: Vec<f32>,
    plane: Plane,
}

impl VoxelVolume {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>, plane: Plane) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "volume dims must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if voxels.len() != n {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidShape(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self { shape, voxels, plane })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        assert!(!shape.contains(&0), "volume dims must be positive");
        Self {
            shape,
            voxels: vec![0.0; shape.iter().product()],
            plane: Plane::Axial,
        }
    }

    /// Build from a function of `(depth, row, col)`.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut voxels = Vec::with_capacity(shape.iter().product());
        for d in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    voxels.push(f(d, h, w));
                }
            }
        }
        Self {
            shape,
            voxels,
            plane: Plane::Axial,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn with_plane(mut self, plane: Plane) -> Self {
        self.plane = plane;
        self
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn at(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(d, h, w)]
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: Vec<usize>,
    dtype: String,
    order: String,
    endianness: String,
    plane: Plane,
}

const DTYPE: &str = "float32";
const ORDER: &str = "row-major-depth-outer";
const ENDIANNESS: &str = "little";

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    with_suffix(path, ".json")
}

pub fn raw_path(path: &Path) -> PathBuf {
    with_suffix(path, ".raw")
}

/// Write `<path>.json` and `<path>.raw`.
pub fn write_volume(volume: &VoxelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let sidecar = Sidecar {
        shape: volume.shape.to_vec(),
        dtype: DTYPE.into(),
        order: ORDER.into(),
        endianness: ENDIANNESS.into(),
        plane: volume.plane,
    };
    let json_path = sidecar_path(path);
    fs::write(&json_path, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(4 * volume.len());
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VoxelVolume> {
    let path = path.as_ref();
    let json_path = sidecar_path(path);
    let text = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::CorruptVolume {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let shape: [usize; 3] = sidecar
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidShape(format!("expected 3 dims, got {:?}", sidecar.shape)))?;
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!(
            "volume dims must be positive, got {shape:?}"
        )));
    }
    if sidecar.dtype != DTYPE || sidecar.order != ORDER || sidecar.endianness != ENDIANNESS {
        return Err(Error::CorruptVolume {
            path: json_path,
            reason: format!(
                "unsupported layout {}/{}/{}",
                sidecar.dtype, sidecar.order, sidecar.endianness
            ),
        });
    }
    let raw = raw_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::CorruptVolume {
            path: raw,
            reason: format!("expected {} bytes, found {}", 4 * n, bytes.len()),
        });
    }
    let voxels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::CorruptVolume {
            path: raw,
            reason: "non-finite voxel value".into(),
        });
    }
    Ok(VoxelVolume {
        shape,
        voxels,
        plane: sidecar.plane,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diagnosis {
    CognitivelyNormal,
    AdDementia,
    UncertainDementia,
    NonAdDementia,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalVisit {
    pub subject_id: String,
    pub day: u32,
    pub diagnosis: Diagnosis,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanSession {
    pub subject_id: String,
    pub day: u32,
    pub volume_path: String,
    #[serde(default)]
    pub plane: Plane,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub visits: Vec<ClinicalVisit>,
    pub sessions: Vec<ScanSession>,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestLine {
    Visit(ClinicalVisit),
    Scan(ScanSession),
}

/// Group manifest lines into subjects, sorted by id and then by day.
pub fn parse_manifest(text: &str) -> Result<Vec<SubjectRecord>> {
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        lines.push(parsed);
    }
    group_manifest(lines)
}

pub fn group_manifest(lines: Vec<ManifestLine>) -> Result<Vec<SubjectRecord>> {
    let mut visits: BTreeMap<String, Vec<ClinicalVisit>> = BTreeMap::new();
    let mut scans: Vec<ScanSession> = Vec::new();
    for line in lines {
        match line {
            ManifestLine::Visit(v) => visits.entry(v.subject_id.clone()).or_default().push(v),
            ManifestLine::Scan(s) => scans.push(s),
        }
    }
    let mut subjects: BTreeMap<String, SubjectRecord> = BTreeMap::new();
    for (id, mut vs) in visits {
        vs.sort_by_key(|v| v.day);
        if let Some(w) = vs.windows(2).find(|w| w[0].day == w[1].day) {
            return Err(Error::Validation(format!(
                "subject {id} has two visits on day {}",
                w[0].day
            )));
        }
        subjects.insert(
            id.clone(),
            SubjectRecord {
                subject_id: id,
                visits: vs,
                sessions: Vec::new(),
            },
        );
    }
    for s in scans {
        let Some(rec) = subjects.get_mut(&s.subject_id) else {
            return Err(Error::Validation(format!(
                "scan {} references subject {} with no visits",
                s.volume_path, s.subject_id
            )));
        };
        rec.sessions.push(s);
    }
    let mut out: Vec<SubjectRecord> = subjects.into_values().collect();
    for rec in &mut out {
        rec.sessions
            .sort_by(|a, b| (a.day, &a.volume_path).cmp(&(b.day, &b.volume_path)));
        if let Some(w) = rec
            .sessions
            .windows(2)
            .find(|w| w[0].day == w[1].day && w[0].volume_path == w[1].volume_path)
        {
            return Err(Error::Validation(format!(
                "duplicate scan {} for subject {} on day {}",
                w[0].volume_path, rec.subject_id, w[0].day
            )));
        }
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SubjectRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Serialize subjects back into manifest lines (visits first, then scans).
pub fn manifest_lines(subjects: &[SubjectRecord]) -> Vec<ManifestLine> {
    let mut out = Vec::new();
    for s in subjects {
        out.extend(s.visits.iter().cloned().map(ManifestLine::Visit));
        out.extend(s.sessions.iter().cloned().map(ManifestLine::Scan));
    }
    out
}

pub fn write_manifest(subjects: &[SubjectRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for line in manifest_lines(subjects) {
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Resolve a session's volume path against the manifest's directory.
pub fn resolve_volume_path(manifest: &Path, volume_path: &str) -> PathBuf {
    let p = Path::new(volume_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}
