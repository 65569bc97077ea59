//! Annotation sessions: a loaded case, its working labels, per-frame cages
//! and a bounded undo stack of sparse label deltas.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swct_core::evalkit::{dice_entries, DiceReport};
use swct_core::meshviz::marching_cubes;
use swct_core::segkit::{
    cage_bind, cage_deform, region_grow, track_rigid, voxelize, Binding, Cage, Connectivity, GrowParams, NodeMove,
    TrackParams, TriMesh, DEFAULT_MAX_VOXELS,
};
use swct_core::volcore::{
    labels_file_name, load_case, save_labels, CaseManifest, Encoding, LabelMap, Mask, RegionCode, Sequence4D,
};
use swct_core::{Error, Result};

pub const UNDO_LIMIT: usize = 64;
/// Cage lattice fitted lazily to a region's surface.
pub const CAGE_DIMS: [usize; 3] = [4, 4, 4];
/// Cage padding around the surface, in voxels of the coarsest spacing.
pub const CAGE_PAD_VOXELS: f64 = 2.0;
pub const CAGE_DIR: &str = "cages";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Edit {
    /// Moves cage nodes. A single `node`/`delta_mm` pair or a `moves` list.
    Cage {
        frame: usize,
        region: RegionCode,
        #[serde(default)]
        node: Option<usize>,
        #[serde(default)]
        delta_mm: Option<[f64; 3]>,
        #[serde(default)]
        moves: Vec<NodeMove>,
    },
    Grow {
        frame: usize,
        region: RegionCode,
        seeds: Vec<[usize; 3]>,
        range: [i32; 2],
        #[serde(default)]
        max_voxels: Option<usize>,
        #[serde(default)]
        connectivity: Option<u32>,
    },
    /// Tracks the region of `template_frame` through `frames` (half-open,
    /// default: from the template frame to the end).
    Track {
        template_frame: usize,
        region: RegionCode,
        #[serde(default)]
        frames: Option<[usize; 2]>,
    },
    /// Sets voxel runs `[start, length]` (flat indices) to `region`.
    Paint { frame: usize, region: RegionCode, runs: Vec<[usize; 2]> },
    /// Sets voxel runs to background.
    Erase { frame: usize, runs: Vec<[usize; 2]> },
    Undo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub changed_voxels: usize,
    pub frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub undo_depth: usize,
}

type CageKey = (usize, RegionCode);

struct CageState {
    cage: Cage,
    rest_mesh: TriMesh,
    binding: Binding,
    /// Voxelization of the mesh under the current displaced lattice.
    current: Mask,
}

impl CageState {
    fn new(rest_mesh: TriMesh, cage: Cage, seq: &Sequence4D) -> Result<Self> {
        let binding = cage_bind(&rest_mesh, &cage)?;
        let current = voxelize(&cage_deform(&binding, &cage)?, seq.geometry())?;
        Ok(Self { cage, rest_mesh, binding, current })
    }
}

#[derive(Default)]
struct UndoStep {
    /// `(frame, [(voxel, previous code)])`.
    labels: Vec<(usize, Vec<(u32, u8)>)>,
    /// Cage state before the edit (`None`: no cage existed).
    cage: Option<(CageKey, Option<Cage>)>,
}

pub struct Session {
    pub id: String,
    pub case_dir: PathBuf,
    pub edit_token: String,
    pub seq: Sequence4D,
    pub labels: Vec<LabelMap>,
    pub dirty: bool,
    cages: BTreeMap<CageKey, CageState>,
    undo: VecDeque<UndoStep>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub case_id: String,
    pub case: String,
    pub frames: usize,
    pub dirty: bool,
}

fn cage_file_stem(frame: usize, region: RegionCode) -> String {
    format!("f{frame:03}_{}", region.name())
}

/// Applies `new` over `old` within one label map, recording previous codes.
fn write_codes(l: &mut LabelMap, changes: impl Iterator<Item = (usize, u8)>, log: &mut Vec<(u32, u8)>) {
    let codes = l.codes_mut();
    for (i, c) in changes {
        if codes[i] != c {
            log.push((i as u32, codes[i]));
            codes[i] = c;
        }
    }
}

fn precedence_of(code: u8) -> u8 {
    RegionCode::from_u8(code).map_or(0, RegionCode::precedence)
}

impl Session {
    /// Loads a case; labels start empty for unlabeled frames. Saved cages are
    /// restored from `cages/`.
    pub fn open(id: String, case_dir: &Path, edit_token: String) -> Result<Session> {
        let mut seq = load_case(case_dir)?;
        let g = *seq.geometry();
        let labels: Vec<LabelMap> =
            seq.frames.iter_mut().map(|f| f.labels.take().unwrap_or_else(|| LabelMap::empty(g))).collect();
        let mut s = Session {
            id,
            case_dir: case_dir.to_path_buf(),
            edit_token,
            seq,
            labels,
            dirty: false,
            cages: BTreeMap::new(),
            undo: VecDeque::new(),
        };
        s.load_cages()?;
        Ok(s)
    }

    fn load_cages(&mut self) -> Result<()> {
        let dir = self.case_dir.join(CAGE_DIR);
        let Ok(rd) = fs::read_dir(&dir) else {
            return Ok(());
        };
        let mut stems: Vec<String> = rd
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
            .collect();
        stems.sort();
        for stem in stems {
            let Some((f, name)) = stem.strip_prefix('f').and_then(|s| s.split_once('_')) else {
                continue;
            };
            let (Ok(frame), Some(region)) = (f.parse::<usize>(), RegionCode::from_name(name)) else {
                continue;
            };
            let cage = Cage::read(dir.join(format!("{stem}.json")))?;
            let rest = TriMesh::read_obj(dir.join(format!("{stem}_rest.obj")), region)?;
            self.cages.insert((frame, region), CageState::new(rest, cage, &self.seq)?);
        }
        Ok(())
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            case_id: self.seq.case_id.clone(),
            case: self.case_dir.display().to_string(),
            frames: self.seq.len(),
            dirty: self.dirty,
        }
    }

    pub fn undo_depth(&self) -> usize {
        self.undo.len()
    }

    pub fn cage_keys(&self) -> Vec<(usize, RegionCode)> {
        self.cages.keys().copied().collect()
    }

    fn check_frame(&self, frame: usize) -> Result<()> {
        if frame >= self.seq.len() {
            return Err(Error::Invalid(format!("frame {frame} out of range 0..{}", self.seq.len())));
        }
        Ok(())
    }

    fn fit_mesh(&self, frame: usize, region: RegionCode) -> Result<TriMesh> {
        let mesh = marching_cubes(&self.labels[frame].extract_region(region), region);
        if mesh.is_empty() {
            return Err(Error::Invalid(format!("{region} has no surface in frame {frame}")));
        }
        Ok(mesh)
    }

    fn fit_cage(&self, frame: usize, region: RegionCode) -> Result<Cage> {
        let pad = CAGE_PAD_VOXELS * self.seq.geometry().spacing.iter().copied().fold(0.0, f64::max);
        Cage::around(&self.fit_mesh(frame, region)?, CAGE_DIMS, pad)
    }

    /// The stored cage, or the rest cage that an edit would create.
    pub fn cage(&self, frame: usize, region: RegionCode) -> Result<Cage> {
        self.check_frame(frame)?;
        match self.cages.get(&(frame, region)) {
            Some(c) => Ok(c.cage.clone()),
            None => self.fit_cage(frame, region),
        }
    }

    /// Replaces the region's cage voxelization `old` by `new` in one frame:
    /// voxels leaving the surface return to background, voxels entering it
    /// take the region where precedence allows.
    fn swap_voxelization(&mut self, frame: usize, region: RegionCode, old: &Mask, new: &Mask) -> Vec<(u32, u8)> {
        let code = region.code();
        let p = region.precedence();
        let cur = self.labels[frame].codes().to_vec();
        let changes = old.bits().iter().zip(new.bits()).enumerate().filter_map(|(i, (&o, &n))| match (o, n) {
            (true, false) if cur[i] == code => Some((i, 0)),
            (false, true) if cur[i] != code && precedence_of(cur[i]) < p => Some((i, code)),
            _ => None,
        });
        let mut log = Vec::new();
        write_codes(&mut self.labels[frame], changes, &mut log);
        log
    }

    /// Sets a cage's lattice (creating the rest cage if needed) and moves
    /// the region's voxels from the old deformed surface to the new one.
    fn set_cage(&mut self, frame: usize, region: RegionCode, target: Cage) -> Result<UndoStep> {
        let key = (frame, region);
        let g = *self.seq.geometry();
        let existing = self.cages.get(&key);
        let prev = existing.map(|s| s.cage.clone());
        let (rest_mesh, binding, old) = match existing {
            Some(s) if s.cage.rest == target.rest && s.cage.dims == target.dims => {
                (s.rest_mesh.clone(), s.binding.clone(), s.current.clone())
            }
            Some(s) => (s.rest_mesh.clone(), cage_bind(&s.rest_mesh, &target)?, s.current.clone()),
            None => {
                let mesh = self.fit_mesh(frame, region)?;
                let binding = cage_bind(&mesh, &target)?;
                let old = voxelize(&mesh, &g)?;
                (mesh, binding, old)
            }
        };
        let new = voxelize(&cage_deform(&binding, &target)?, &g)?;
        let log = self.swap_voxelization(frame, region, &old, &new);
        self.cages.insert(key, CageState { cage: target, rest_mesh, binding, current: new });
        Ok(UndoStep { labels: vec![(frame, log)], cage: Some((key, prev)) })
    }

    fn restore_cage(&mut self, key: CageKey, prev: Option<Cage>) -> Result<()> {
        match prev {
            None => {
                self.cages.remove(&key);
            }
            Some(c) => {
                let rest_mesh = match self.cages.remove(&key) {
                    Some(s) => s.rest_mesh,
                    None => self.fit_mesh(key.0, key.1)?,
                };
                self.cages.insert(key, CageState::new(rest_mesh, c, &self.seq)?);
            }
        }
        Ok(())
    }

    pub fn put_cage(&mut self, frame: usize, region: RegionCode, cage: Cage) -> Result<EditOutcome> {
        self.check_frame(frame)?;
        cage.validate()?;
        let step = self.set_cage(frame, region, cage)?;
        Ok(self.commit(step, None))
    }

    fn commit(&mut self, step: UndoStep, warning: Option<String>) -> EditOutcome {
        let changed_voxels = step.labels.iter().map(|(_, l)| l.len()).sum();
        let mut frames: Vec<usize> = step.labels.iter().filter(|(_, l)| !l.is_empty()).map(|(f, _)| *f).collect();
        frames.dedup();
        if changed_voxels > 0 || step.cage.is_some() {
            self.dirty = true;
            self.undo.push_back(step);
            if self.undo.len() > UNDO_LIMIT {
                self.undo.pop_front();
            }
        }
        EditOutcome { changed_voxels, frames, warning, undo_depth: self.undo.len() }
    }

    pub fn apply(&mut self, edit: Edit) -> Result<EditOutcome> {
        match edit {
            Edit::Undo => self.undo(),
            Edit::Cage { frame, region, node, delta_mm, mut moves } => {
                self.check_frame(frame)?;
                match (node, delta_mm) {
                    (Some(node), Some(delta_mm)) => moves.push(NodeMove { node, delta_mm }),
                    (None, None) => {}
                    _ => return Err(Error::Invalid("cage edit needs both node and delta_mm".into())),
                }
                let mut target = self.cage(frame, region)?;
                target.apply_moves(&moves)?;
                let step = self.set_cage(frame, region, target)?;
                Ok(self.commit(step, None))
            }
            Edit::Grow { frame, region, seeds, range, max_voxels, connectivity } => {
                self.check_frame(frame)?;
                let mut p = GrowParams::new(seeds, range[0], range[1]);
                p.max_voxels = max_voxels.unwrap_or(DEFAULT_MAX_VOXELS);
                if let Some(n) = connectivity {
                    p.connectivity = Connectivity::from_count(n)?;
                }
                match region_grow(&self.seq.frames[frame].volume, &p) {
                    Ok(mask) => {
                        let code = region.code();
                        let cur = self.labels[frame].codes().to_vec();
                        let changes = mask
                            .indices()
                            .filter(|&i| cur[i] != code && precedence_of(cur[i]) < region.precedence())
                            .map(|i| (i, code));
                        let mut log = Vec::new();
                        write_codes(&mut self.labels[frame], changes, &mut log);
                        Ok(self.commit(UndoStep { labels: vec![(frame, log)], cage: None }, None))
                    }
                    Err(e @ Error::GrowthCapExceeded { .. }) => {
                        Ok(EditOutcome { changed_voxels: 0, frames: Vec::new(), warning: Some(e.to_string()), undo_depth: self.undo.len() })
                    }
                    Err(e) => Err(e),
                }
            }
            Edit::Track { template_frame, region, frames } => {
                self.check_frame(template_frame)?;
                let [start, end] = frames.unwrap_or([template_frame, self.seq.len()]);
                if !(start <= template_frame && template_frame < end && end <= self.seq.len()) {
                    return Err(Error::Invalid(format!(
                        "frame range {start}..{end} must contain the template frame {template_frame}"
                    )));
                }
                let tmpl = self.labels[template_frame].extract_region(region);
                if tmpl.is_empty() {
                    return Err(Error::Invalid(format!("{region} is empty in frame {template_frame}")));
                }
                let mut step = UndoStep::default();
                let mut run = |sess: &mut Session, window: Sequence4D, first: usize, reverse: bool| -> Result<()> {
                    let tracked = track_rigid(&window, &tmpl, &TrackParams::default())?;
                    for (k, t) in tracked.into_iter().enumerate().skip(1) {
                        let f = if reverse { first - k } else { first + k };
                        let code = region.code();
                        let cur = sess.labels[f].codes().to_vec();
                        let changes = cur.iter().zip(t.mask.bits()).enumerate().filter_map(|(i, (&c, &on))| {
                            if on && c != code && precedence_of(c) < region.precedence() {
                                Some((i, code))
                            } else if !on && c == code {
                                Some((i, 0))
                            } else {
                                None
                            }
                        });
                        let mut log = Vec::new();
                        write_codes(&mut sess.labels[f], changes, &mut log);
                        step.labels.push((f, log));
                    }
                    Ok(())
                };
                if end - template_frame > 1 {
                    let w = self.seq.window(template_frame, end)?;
                    run(self, w, template_frame, false)?;
                }
                if template_frame > start {
                    let mut frames: Vec<_> = self.seq.frames[start..=template_frame].to_vec();
                    frames.reverse();
                    let w = Sequence4D::new(self.seq.case_id.clone(), self.seq.frame_interval_s, frames)?;
                    run(self, w, template_frame, true)?;
                }
                step.labels.sort_by_key(|(f, _)| *f);
                Ok(self.commit(step, None))
            }
            Edit::Paint { frame, region, runs } => self.runs(frame, region.code(), &runs),
            Edit::Erase { frame, runs } => self.runs(frame, 0, &runs),
        }
    }

    fn runs(&mut self, frame: usize, code: u8, runs: &[[usize; 2]]) -> Result<EditOutcome> {
        self.check_frame(frame)?;
        let n = self.seq.geometry().len();
        if let Some(r) = runs.iter().find(|r| r[0].checked_add(r[1]).is_none_or(|e| e > n)) {
            return Err(Error::Invalid(format!("run {r:?} exceeds the {n}-voxel grid")));
        }
        let mut log = Vec::new();
        let changes = runs.iter().flat_map(|&[s, len]| (s..s + len).map(move |i| (i, code)));
        write_codes(&mut self.labels[frame], changes, &mut log);
        Ok(self.commit(UndoStep { labels: vec![(frame, log)], cage: None }, None))
    }

    pub fn undo(&mut self) -> Result<EditOutcome> {
        let step = self.undo.pop_back().ok_or_else(|| Error::Invalid("nothing to undo".into()))?;
        let mut changed = 0;
        let mut frames = Vec::new();
        for (f, log) in step.labels.iter().rev() {
            let codes = self.labels[*f].codes_mut();
            for &(i, old) in log.iter().rev() {
                codes[i as usize] = old;
            }
            changed += log.len();
            if !log.is_empty() {
                frames.push(*f);
            }
        }
        frames.sort();
        if let Some((key, prev)) = step.cage {
            self.restore_cage(key, prev)?;
        }
        self.dirty = true;
        Ok(EditOutcome { changed_voxels: changed, frames, warning: None, undo_depth: self.undo.len() })
    }

    /// Writes labels into the case directory, updates `case.json`, and
    /// stores every cage with its rest and deformed meshes under `cages/`.
    pub fn save(&mut self) -> Result<Vec<String>> {
        let dir = self.case_dir.clone();
        let mut manifest = CaseManifest::read(&dir)?;
        let mut written = Vec::new();
        for (f, l) in self.labels.iter().enumerate() {
            let name = labels_file_name(f);
            save_labels(dir.join(&name), l, Encoding::Gzip)?;
            manifest.frames[f].labels = Some(PathBuf::from(&name));
            written.push(name);
        }
        manifest.write(&dir)?;
        let cdir = dir.join(CAGE_DIR);
        if !self.cages.is_empty() {
            fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
        }
        for (&(frame, region), s) in &self.cages {
            let stem = cage_file_stem(frame, region);
            s.cage.write(cdir.join(format!("{stem}.json")))?;
            s.rest_mesh.write_obj(cdir.join(format!("{stem}_rest.obj")))?;
            cage_deform(&s.binding, &s.cage)?.write_obj(cdir.join(format!("{stem}.obj")))?;
            written.push(format!("{CAGE_DIR}/{stem}.json"));
        }
        self.dirty = false;
        Ok(written)
    }

    pub fn mesh(&self, frame: usize, region: RegionCode) -> Result<TriMesh> {
        self.check_frame(frame)?;
        Ok(marching_cubes(&self.labels[frame].extract_region(region), region))
    }

    /// Dice of the working labels against a labeled reference case.
    pub fn dice(&self, reference: &Path) -> Result<DiceReport> {
        let gt = load_case(reference)?;
        let refs: Vec<&LabelMap> = self.labels.iter().collect();
        let regions: Vec<RegionCode> = RegionCode::anatomical().collect();
        Ok(DiceReport::from_entries(dice_entries(&gt, &refs, &regions)?))
    }
}
