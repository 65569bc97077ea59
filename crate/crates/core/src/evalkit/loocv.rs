use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dice_entries, DiceEntry, DiceReport};
use crate::phantom::Palette;
use crate::segkit::{region_grow, track_rigid, GrowParams, TrackParams};
use crate::volcore::{labels_file_name, load_case, load_labels, CaseManifest, LabelMap, Mask, RegionCode, Sequence4D, MANIFEST_NAME};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoocvPlan {
    pub folds: Vec<Fold>,
}

/// Fold k tests case k and trains on the others, in input order.
pub fn loocv_plan(case_ids: &[String]) -> Result<LoocvPlan> {
    if case_ids.len() < 2 {
        return Err(Error::Invalid(format!("leave-one-out needs at least 2 cases, got {}", case_ids.len())));
    }
    for (i, id) in case_ids.iter().enumerate() {
        if case_ids[..i].contains(id) {
            return Err(Error::Invalid(format!("duplicate case id '{id}'")));
        }
    }
    let folds = case_ids
        .iter()
        .map(|test| Fold { train: case_ids.iter().filter(|c| *c != test).cloned().collect(), test: test.clone() })
        .collect();
    Ok(LoocvPlan { folds })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRef {
    pub id: String,
    pub dir: PathBuf,
}

/// Reads a JSON array of case directories (relative paths resolve against
/// the list file's directory). Case ids come from each `case.json`.
pub fn load_case_list(path: impl AsRef<Path>) -> Result<Vec<CaseRef>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dirs: Vec<PathBuf> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    dirs.into_iter()
        .map(|d| {
            let dir = base.join(d);
            let id = CaseManifest::read(&dir)?.case_id;
            Ok(CaseRef { id, dir })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorKind {
    /// Argument template with `{train}`, `{test}` and `{out}` placeholders.
    External { command: String },
    Baseline,
}

/// How predictions are produced for a test case.
///
/// An external command receives `{train}` (a JSON file listing the training
/// case directories), `{test}` (the test case directory) and `{out}` (an
/// empty directory). It must write either a case directory (`case.json`
/// with labels) or one `lab_NNN.nrrd` per test frame into `{out}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub working_dir: Option<PathBuf>,
    pub timeout_s: f64,
}

impl PredictorSpec {
    pub fn external(command: impl Into<String>) -> Result<Self> {
        let command = command.into();
        for p in ["{train}", "{test}", "{out}"] {
            if !command.contains(p) {
                return Err(Error::Invalid(format!("predictor command lacks the {p} placeholder")));
            }
        }
        let words = shell_words::split(&command).map_err(|e| Error::Invalid(format!("predictor command: {e}")))?;
        if words.is_empty() {
            return Err(Error::Invalid("empty predictor command".into()));
        }
        Ok(Self { kind: PredictorKind::External { command }, working_dir: None, timeout_s: 3600.0 })
    }

    pub fn baseline() -> Self {
        Self { kind: PredictorKind::Baseline, working_dir: None, timeout_s: 3600.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoocvOptions {
    /// Folds run concurrently up to this many.
    pub jobs: usize,
    /// Scratch root; fold k uses `fold_kk/`.
    pub work_dir: PathBuf,
    pub regions: Vec<RegionCode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub test: String,
    pub train: Vec<String>,
    pub status: FoldStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs every fold and pools the test-case entries. A failing fold is
/// recorded and contributes no entries; the others are unaffected.
pub fn run_loocv(plan: &LoocvPlan, predictor: &PredictorSpec, cases: &[CaseRef], opts: &LoocvOptions) -> Result<DiceReport> {
    let dir_of = |id: &str| {
        cases
            .iter()
            .find(|c| c.id == id)
            .map(|c| std::path::absolute(&c.dir).unwrap_or_else(|_| c.dir.clone()))
            .ok_or_else(|| Error::Invalid(format!("case '{id}' is not in the case list")))
    };
    for f in &plan.folds {
        dir_of(&f.test)?;
        for t in &f.train {
            dir_of(t)?;
        }
    }
    fs::create_dir_all(&opts.work_dir).map_err(|e| Error::io(&opts.work_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<DiceEntry>>> = pool.install(|| {
        plan.folds
            .par_iter()
            .enumerate()
            .map(|(k, fold)| {
                let test_dir = dir_of(&fold.test)?;
                let train: Vec<PathBuf> = fold.train.iter().map(|t| dir_of(t)).collect::<Result<_>>()?;
                let fold_dir = opts.work_dir.join(format!("fold_{k:02}"));
                run_fold(predictor, &fold_dir, &train, &test_dir, &opts.regions)
            })
            .collect()
    });
    let mut entries = Vec::new();
    let mut folds = Vec::new();
    for (k, (fold, res)) in plan.folds.iter().zip(results).enumerate() {
        let (status, error) = match res {
            Ok(e) => {
                entries.extend(e);
                (FoldStatus::Ok, None)
            }
            Err(e) => {
                log::warn!("fold {k} (test {}) failed: {e}", fold.test);
                (FoldStatus::Failed, Some(e.to_string()))
            }
        };
        folds.push(FoldRecord { fold: k, test: fold.test.clone(), train: fold.train.clone(), status, error });
    }
    let mut report = DiceReport::from_entries(entries);
    report.folds = folds;
    Ok(report)
}

fn run_fold(
    predictor: &PredictorSpec,
    fold_dir: &Path,
    train: &[PathBuf],
    test_dir: &Path,
    regions: &[RegionCode],
) -> Result<Vec<DiceEntry>> {
    let gt = load_case(test_dir)?;
    let pred = match &predictor.kind {
        PredictorKind::Baseline => baseline_predict(&gt)?,
        PredictorKind::External { command } => {
            let out = fold_dir.join("out");
            if out.exists() {
                fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            }
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let train_list = fold_dir.join("train.json");
            fs::write(&train_list, serde_json::to_string_pretty(train)? + "\n").map_err(|e| Error::io(&train_list, e))?;
            run_external(command, predictor, &train_list, test_dir, &out)?;
            read_predictions(&out, gt.len())?
        }
    };
    let refs: Vec<&LabelMap> = pred.iter().collect();
    dice_entries(&gt, &refs, regions)
}

fn run_external(template: &str, spec: &PredictorSpec, train: &Path, test: &Path, out: &Path) -> Result<()> {
    let fill = |w: &str| {
        w.replace("{train}", &train.to_string_lossy())
            .replace("{test}", &test.to_string_lossy())
            .replace("{out}", &out.to_string_lossy())
    };
    let argv: Vec<String> = shell_words::split(template)
        .map_err(|e| Error::Invalid(format!("predictor command: {e}")))?
        .iter()
        .map(|w| fill(w))
        .collect();
    let (prog, args) = argv.split_first().ok_or_else(|| Error::Invalid("empty predictor command".into()))?;
    let log_path = out.join("predictor.log");
    let log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let log2 = log.try_clone().map_err(|e| Error::io(&log_path, e))?;
    let mut cmd = Command::new(prog);
    cmd.args(args).stdin(Stdio::null()).stdout(log).stderr(log2);
    if let Some(wd) = &spec.working_dir {
        cmd.current_dir(wd);
    }
    let mut child = cmd.spawn().map_err(|e| Error::Predictor(format!("cannot start '{prog}': {e}")))?;
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) if status.success() => return Ok(()),
            Ok(Some(status)) => return Err(Error::Predictor(format!("'{prog}' exited with {status}"))),
            Ok(None) if start.elapsed().as_secs_f64() > spec.timeout_s => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Predictor(format!("'{prog}' timed out after {} s", spec.timeout_s)));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(Error::Predictor(format!("waiting for '{prog}': {e}"))),
        }
    }
}

fn read_predictions(out: &Path, n_frames: usize) -> Result<Vec<LabelMap>> {
    let missing = |what: String| Error::Predictor(format!("prediction in {}: {what}", out.display()));
    if out.join(MANIFEST_NAME).exists() {
        let seq = load_case(out)?;
        if seq.len() != n_frames {
            return Err(missing(format!("{} frames, expected {n_frames}", seq.len())));
        }
        return seq.frames.into_iter().enumerate().map(|(i, f)| f.labels.ok_or_else(|| missing(format!("frame {i} has no labels")))).collect();
    }
    (0..n_frames)
        .map(|f| {
            let p = out.join(labels_file_name(f));
            if !p.exists() {
                return Err(missing(format!("{} is missing", labels_file_name(f))));
            }
            load_labels(p)
        })
        .collect()
}

const BASELINE_DILATION: usize = 2;
const BOLUS_RANGE: (i32, i32) = (1000, 2000);

/// Chebyshev-ball dilation, separable per axis.
fn dilate(m: &Mask, r: usize) -> Mask {
    let g = *m.geometry();
    let [nx, ny, nz] = g.dims;
    let mut bits = m.bits().to_vec();
    for (axis, n, stride) in [(0usize, nx, 1usize), (1, ny, nx), (2, nz, nx * ny)] {
        let src = bits.clone();
        for i in 0..g.len() {
            if src[i] {
                let c = g.coords(i)[axis];
                for d in c.saturating_sub(r)..=(c + r).min(n - 1) {
                    bits[i - c * stride + d * stride] = true;
                }
            }
        }
    }
    Mask::new(g, bits).expect("same geometry")
}

/// Reference pipeline standing in for a learned model. Needs frame-0
/// labels: soft tissue keeps its frame-0 shape, static bones are the
/// thresholded voxels near their frame-0 region, moving bones and cartilage
/// are rigidly tracked, and the bolus is grown from the brightest voxel.
pub fn baseline_predict(seq: &Sequence4D) -> Result<Vec<LabelMap>> {
    let first = seq.frames[0]
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid(format!("case '{}' has no frame-0 labels for the baseline", seq.case_id)))?;
    let g = *seq.geometry();
    let mut out: Vec<LabelMap> = vec![LabelMap::empty(g); seq.len()];
    let tracked = [RegionCode::Hyoid, RegionCode::ThyroidCartilage, RegionCode::Epiglottis];
    for r in tracked {
        let tmpl = first.extract_region(r);
        if tmpl.is_empty() {
            continue;
        }
        for (l, t) in out.iter_mut().zip(track_rigid(seq, &tmpl, &TrackParams::default())?) {
            l.paint_with_precedence(&t.mask, r)?;
        }
    }
    let thr = Palette::default().bone_threshold();
    let near: Vec<(RegionCode, Mask)> = [RegionCode::FacialBones, RegionCode::Mandible, RegionCode::CervicalVertebrae]
        .into_iter()
        .map(|r| (r, dilate(&first.extract_region(r), BASELINE_DILATION)))
        .collect();
    let soft: Vec<(RegionCode, Mask)> =
        [RegionCode::Tongue, RegionCode::SoftPalate].into_iter().map(|r| (r, first.extract_region(r))).collect();
    out.par_iter_mut().zip(&seq.frames).enumerate().try_for_each(|(f, (l, frame))| -> Result<()> {
        let v = &frame.volume;
        let bone = Mask::new(g, v.data().iter().map(|&h| h > thr).collect())?;
        for (r, m) in &near {
            l.paint_with_precedence(&bone.and(m)?, *r)?;
        }
        for (r, m) in &soft {
            l.paint_with_precedence(m, *r)?;
        }
        let (imax, &hmax) = v.data().iter().enumerate().max_by_key(|&(i, h)| (*h, std::cmp::Reverse(i))).expect("non-empty volume");
        if (BOLUS_RANGE.0..=BOLUS_RANGE.1).contains(&hmax) {
            match region_grow(v, &GrowParams::new(vec![g.coords(imax)], BOLUS_RANGE.0, BOLUS_RANGE.1)) {
                Ok(m) => {
                    l.paint_with_precedence(&m, RegionCode::Bolus)?;
                }
                Err(e) if e.is_algorithmic() => log::warn!("baseline bolus growth failed at frame {f}: {e}"),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::Geometry;

    #[test]
    fn plan_partitions() {
        let ids: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let p = loocv_plan(&ids).unwrap();
        assert_eq!(p.folds.len(), 5);
        for (k, f) in p.folds.iter().enumerate() {
            assert_eq!(f.test, ids[k]);
            assert_eq!(f.train.len(), 4);
            assert!(!f.train.contains(&f.test));
        }
        assert!(loocv_plan(&ids[..1]).is_err());
        assert!(loocv_plan(&["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn external_template_needs_placeholders() {
        assert!(PredictorSpec::external("run {train} {test}").is_err());
        assert!(PredictorSpec::external("run {train} {test} {out}").is_ok());
        assert!(PredictorSpec::external("run '{train} {test} {out}").is_err());
    }

    #[test]
    fn dilation_is_a_cube() {
        let g = Geometry::new([11, 11, 11], [1.0; 3], [0.0; 3]).unwrap();
        let mut m = Mask::empty(g);
        m.set(4, 4, 4, true);
        m.set(10, 0, 0, true);
        let d = dilate(&m, 2);
        assert_eq!(d.count(), 125 + 27);
        assert!(d.get(2, 6, 6) && !d.get(1, 4, 4));
    }
}
