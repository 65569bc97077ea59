//! 4D sequences and the `case.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_labels, load_volume, save_labels, save_volume, Encoding, Geometry, LabelMap, Volume3};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "case.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub volume: Volume3,
    pub labels: Option<LabelMap>,
}

/// Ordered frames of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence4D {
    pub case_id: String,
    pub frame_interval_s: f64,
    pub frames: Vec<Frame>,
}

impl Sequence4D {
    pub fn new(case_id: impl Into<String>, frame_interval_s: f64, frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("a sequence needs at least one frame".into()));
        }
        if !(frame_interval_s > 0.0 && frame_interval_s.is_finite()) {
            return Err(Error::Invalid(format!("frame interval must be > 0, got {frame_interval_s}")));
        }
        Ok(Self { case_id: case_id.into(), frame_interval_s, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn geometry(&self) -> &Geometry {
        self.frames[0].volume.geometry()
    }

    pub fn has_labels(&self) -> bool {
        self.frames.iter().all(|f| f.labels.is_some())
    }

    /// Label maps of every frame, or an error naming the first unlabeled frame.
    pub fn label_maps(&self) -> Result<Vec<&LabelMap>> {
        self.frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                f.labels
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("case '{}' frame {i} has no labels", self.case_id)))
            })
            .collect()
    }

    /// Keeps frames `start..end` (e.g. the swallowing phase of a longer
    /// chewing sequence). Frame indices in the result restart at zero.
    pub fn window(&self, start: usize, end: usize) -> Result<Sequence4D> {
        if start >= end || end > self.frames.len() {
            return Err(Error::Invalid(format!("frame window {start}..{end} outside 0..{}", self.frames.len())));
        }
        Sequence4D::new(self.case_id.clone(), self.frame_interval_s, self.frames[start..end].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub volume: PathBuf,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub frame_interval_s: f64,
    pub frames: Vec<FrameEntry>,
}

impl CaseManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CaseManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest { path: path.clone(), reason: e.to_string() })?;
        if m.frames.is_empty() {
            return Err(Error::Manifest { path, reason: "no frames".into() });
        }
        if !(m.frame_interval_s > 0.0) {
            return Err(Error::Manifest { path, reason: "frame_interval_s must be > 0".into() });
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

/// Standard file names used when this toolkit writes a case.
pub fn volume_file_name(frame: usize) -> String {
    format!("vol_{frame:03}.nrrd")
}

pub fn labels_file_name(frame: usize) -> String {
    format!("lab_{frame:03}.nrrd")
}

/// Loads a case directory; frames are read in parallel.
pub fn load_case(dir: impl AsRef<Path>) -> Result<Sequence4D> {
    let dir = dir.as_ref();
    let m = CaseManifest::read(dir)?;
    let frames = m
        .frames
        .par_iter()
        .map(|e| {
            let volume = load_volume(dir.join(&e.volume))?;
            let labels = e.labels.as_ref().map(|p| load_labels(dir.join(p))).transpose()?;
            Ok(Frame { volume, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    Sequence4D::new(m.case_id, m.frame_interval_s, frames)
}

/// Writes a case directory with `vol_NNN.nrrd` / `lab_NNN.nrrd` files.
pub fn save_case(dir: impl AsRef<Path>, seq: &Sequence4D, encoding: Encoding) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = seq
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let vol = volume_file_name(i);
            save_volume(dir.join(&vol), &f.volume, encoding)?;
            let labels = match &f.labels {
                Some(l) => {
                    let name = labels_file_name(i);
                    save_labels(dir.join(&name), l, encoding)?;
                    Some(PathBuf::from(name))
                }
                None => None,
            };
            Ok(FrameEntry { volume: PathBuf::from(vol), labels })
        })
        .collect::<Result<Vec<_>>>()?;
    CaseManifest { case_id: seq.case_id.clone(), frame_interval_s: seq.frame_interval_s, frames: entries }.write(dir)
}

/// One problem found by [`validate_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    GeometryMismatch { frame: usize, field: &'static str },
    LabelGeometryMismatch { frame: usize },
    InvalidCode { frame: usize, code: u8, voxels: usize },
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Finding::GeometryMismatch { frame, field } => write!(f, "frame {frame}: {field} differs from frame 0"),
            Finding::LabelGeometryMismatch { frame } => write!(f, "frame {frame}: label geometry differs from its volume"),
            Finding::InvalidCode { frame, code, voxels } => {
                write!(f, "frame {frame}: {voxels} voxels carry invalid region code {code}")
            }
        }
    }
}

/// Reports inter-frame geometry mismatches and invalid label codes. HU
/// values are stored as integers, so non-finite values cannot occur after
/// load (the loader rejects them).
pub fn validate_sequence(s: &Sequence4D) -> Vec<Finding> {
    let mut out = Vec::new();
    let Some(first) = s.frames.first() else {
        return out;
    };
    let g0 = *first.volume.geometry();
    for (i, f) in s.frames.iter().enumerate() {
        let g = f.volume.geometry();
        if g.dims != g0.dims {
            out.push(Finding::GeometryMismatch { frame: i, field: "dims" });
        }
        if g.spacing != g0.spacing {
            out.push(Finding::GeometryMismatch { frame: i, field: "spacing" });
        }
        if g.origin != g0.origin {
            out.push(Finding::GeometryMismatch { frame: i, field: "origin" });
        }
        if let Some(l) = &f.labels {
            if l.geometry() != g {
                out.push(Finding::LabelGeometryMismatch { frame: i });
            }
            for (code, voxels) in l.invalid_codes() {
                out.push(Finding::InvalidCode { frame: i, code, voxels });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(spacing: [f64; 3]) -> Frame {
        let g = Geometry::new([4, 4, 4], spacing, [0.0; 3]).unwrap();
        Frame { volume: Volume3::filled(g, 40), labels: Some(LabelMap::empty(g)) }
    }

    #[test]
    fn clean_sequence_has_no_findings() {
        let s = Sequence4D::new("c", 0.1, (0..25).map(|_| frame([0.5; 3])).collect()).unwrap();
        assert!(validate_sequence(&s).is_empty());
    }

    #[test]
    fn spacing_mismatch_names_the_frame() {
        let mut frames: Vec<_> = (0..6).map(|_| frame([0.5; 3])).collect();
        frames[3] = frame([0.5, 0.5, 0.6]);
        let s = Sequence4D::new("c", 0.1, frames).unwrap();
        let f = validate_sequence(&s);
        assert!(f.contains(&Finding::GeometryMismatch { frame: 3, field: "spacing" }));
        assert!(f.iter().all(|x| matches!(x, Finding::GeometryMismatch { frame: 3, .. })));
    }

    #[test]
    fn invalid_code_is_counted() {
        let mut f = frame([0.5; 3]);
        let l = f.labels.as_mut().unwrap();
        l.codes_mut()[..7].fill(10);
        let s = Sequence4D::new("c", 0.1, vec![f]).unwrap();
        assert_eq!(validate_sequence(&s), vec![Finding::InvalidCode { frame: 0, code: 10, voxels: 7 }]);
    }

    #[test]
    fn case_round_trip_and_window() {
        let dir = tempfile::tempdir().unwrap();
        let mut frames: Vec<_> = (0..5).map(|_| frame([0.5; 3])).collect();
        frames[2].labels = None;
        frames[4].volume.data_mut()[3] = 1500;
        let s = Sequence4D::new("case-a", 0.1, frames).unwrap();
        save_case(dir.path(), &s, Encoding::Raw).unwrap();
        let back = load_case(dir.path()).unwrap();
        assert_eq!(back, s);
        let w = back.window(3, 5).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w.frames[1].volume.data()[3], 1500);
        assert!(back.window(4, 6).is_err());
    }

    #[test]
    fn bad_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_NAME), "{\"case_id\": 3}").unwrap();
        assert!(matches!(load_case(dir.path()), Err(Error::Manifest { .. })));
        assert!(matches!(load_case(dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
