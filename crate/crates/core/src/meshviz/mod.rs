//! Surface extraction, mesh-sequence export and motion metrics.
//!
//! Vertical is +z. Left/right follow the phantom convention (+x is the
//! patient's right), so the left side of a sagittal split is the low-x half.

mod mc;
mod tables;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mc::{marching_cubes, ISO, RAW_WEIGHT};

use crate::segkit::TriMesh;
use crate::volcore::{LabelMap, RegionCode};
use crate::{Error, Result};

/// Per-frame meshes for a set of regions.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub frame_interval_s: f64,
    pub regions: Vec<RegionCode>,
    /// `frames[t][region]`; empty meshes mean the region is absent.
    pub frames: Vec<BTreeMap<RegionCode, TriMesh>>,
}

impl MeshSequence {
    /// Extracts every requested region from every frame (frames in parallel).
    pub fn extract(labels: &[&LabelMap], regions: &[RegionCode], frame_interval_s: f64) -> MeshSequence {
        let frames = labels
            .par_iter()
            .map(|l| regions.iter().map(|&r| (r, marching_cubes(&l.extract_region(r), r))).collect())
            .collect();
        MeshSequence { frame_interval_s, regions: regions.to_vec(), frames }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeshFormat {
    #[default]
    Obj,
}

pub const SEQUENCE_INDEX: &str = "sequence.json";

pub fn mesh_file_name(frame: usize, region: RegionCode) -> String {
    format!("f{frame:03}_{}.obj", region.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub code: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceIndexFrame {
    /// Region name to OBJ file name, or null when the region is absent.
    pub files: BTreeMap<String, Option<String>>,
    /// Region names whose mesh is not watertight.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub open_meshes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceIndex {
    pub frame_interval_s: f64,
    pub units: String,
    pub regions: Vec<RegionEntry>,
    pub frames: Vec<SequenceIndexFrame>,
}

/// Writes one OBJ per non-empty (frame, region) plus `sequence.json`.
pub fn export_mesh_sequence(ms: &MeshSequence, dir: impl AsRef<Path>, format: MeshFormat) -> Result<SequenceIndex> {
    let MeshFormat::Obj = format;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frames = ms
        .frames
        .par_iter()
        .enumerate()
        .map(|(t, meshes)| {
            let mut files = BTreeMap::new();
            let mut open_meshes = Vec::new();
            for r in &ms.regions {
                let entry = match meshes.get(r) {
                    Some(m) if !m.is_empty() => {
                        let name = mesh_file_name(t, *r);
                        m.write_obj(dir.join(&name))?;
                        if !m.is_watertight() {
                            open_meshes.push(r.name().to_string());
                        }
                        Some(name)
                    }
                    _ => None,
                };
                files.insert(r.name().to_string(), entry);
            }
            Ok(SequenceIndexFrame { files, open_meshes })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = SequenceIndex {
        frame_interval_s: ms.frame_interval_s,
        units: "mm".into(),
        regions: ms
            .regions
            .iter()
            .map(|r| RegionEntry { code: r.code(), name: r.name().into(), color: r.color() })
            .collect(),
        frames,
    };
    let path = dir.join(SEQUENCE_INDEX);
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Per-frame motion of one region. `None` marks frames (or sides) where
/// the region is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTrace {
    pub region: u8,
    pub frame_interval_s: f64,
    pub centroid_mm: Vec<Option<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub left_height_mm: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub right_height_mm: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub asymmetry_mm: Vec<Option<f64>>,
}

impl MotionTrace {
    pub fn peak_asymmetry(&self) -> Option<f64> {
        self.asymmetry_mm.iter().flatten().copied().reduce(f64::max)
    }
}

/// Voxel centroid of `region` per frame, in mm.
pub fn centroid_trajectory(labels: &[&LabelMap], region: RegionCode, frame_interval_s: f64) -> MotionTrace {
    MotionTrace {
        region: region.code(),
        frame_interval_s,
        centroid_mm: labels.par_iter().map(|l| l.extract_region(region).centroid_world()).collect(),
        left_height_mm: Vec::new(),
        right_height_mm: Vec::new(),
        asymmetry_mm: Vec::new(),
    }
}

/// Fraction of a side's voxels, taken from the posterior end, whose centroid
/// stands in for the greater-horn tip.
pub const HORN_FRACTION: f64 = 0.10;

/// Height (z, mm) of the posterior-decile centroid of the voxels on one side
/// of `split_x`. Voxels tied with the cut-off y are included.
fn horn_height(labels: &LabelMap, code: u8, split_x: f64, left: bool) -> Option<f64> {
    let g = labels.geometry();
    let mut pts: Vec<[f64; 3]> = labels
        .codes()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == code)
        .map(|(i, _)| {
            let [x, y, z] = g.coords(i);
            g.voxel_center(x, y, z)
        })
        .filter(|p| if left { p[0] < split_x } else { p[0] >= split_x })
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a[1].total_cmp(&b[1]));
    let k = ((pts.len() as f64 * HORN_FRACTION).ceil() as usize).max(1);
    let cut = pts[k - 1][1];
    let tip: Vec<&[f64; 3]> = pts.iter().take_while(|p| p[1] <= cut).collect();
    Some(tip.iter().map(|p| p[2]).sum::<f64>() / tip.len() as f64)
}

/// Centroid trajectory plus greater-horn asymmetry
/// `|Δz_left(t) − Δz_right(t)|`, with Δz measured from frame 0.
pub fn horn_asymmetry(labels: &[&LabelMap], hyoid: RegionCode, frame_interval_s: f64) -> Result<MotionTrace> {
    let first = labels.first().ok_or_else(|| Error::Invalid("no frames".into()))?;
    let split_x = first
        .extract_region(hyoid)
        .centroid_world()
        .ok_or_else(|| Error::Invalid(format!("{hyoid} is empty in frame 0")))?[0];
    let code = hyoid.code();
    let sides: Vec<(Option<f64>, Option<f64>)> = labels
        .par_iter()
        .map(|l| (horn_height(l, code, split_x, true), horn_height(l, code, split_x, false)))
        .collect();
    let (l0, r0) = sides[0];
    let mut trace = centroid_trajectory(labels, hyoid, frame_interval_s);
    trace.left_height_mm = sides.iter().map(|s| s.0).collect();
    trace.right_height_mm = sides.iter().map(|s| s.1).collect();
    trace.asymmetry_mm = sides
        .iter()
        .map(|&(l, r)| match (l, r, l0, r0) {
            (Some(l), Some(r), Some(l0), Some(r0)) => Some(((l - l0) - (r - r0)).abs()),
            _ => None,
        })
        .collect();
    Ok(trace)
}
