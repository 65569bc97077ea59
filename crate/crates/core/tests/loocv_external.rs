//! Leave-one-out runs with external predictor processes.

use std::fs;
use std::path::Path;
use std::time::Instant;

use swct_core::evalkit::{loocv_plan, run_loocv, CaseRef, FoldStatus, LoocvOptions, PredictorSpec};
use swct_core::phantom::{generate, write_phantom, PhantomConfig};
use swct_core::volcore::{Encoding, RegionCode};

fn cases(root: &Path, n: u64) -> Vec<CaseRef> {
    (0..n)
        .map(|k| {
            let cfg = PhantomConfig { dims: [40; 3], n_frames: 2, rng_seed: k, ..Default::default() };
            let (seq, truth) = generate(&cfg).unwrap();
            let dir = root.join(format!("case{k}"));
            write_phantom(&dir, &seq, &truth, Encoding::Raw).unwrap();
            CaseRef { id: seq.case_id.clone(), dir }
        })
        .collect()
}

fn opts(root: &Path) -> LoocvOptions {
    LoocvOptions { jobs: 2, work_dir: root.join("work"), regions: vec![RegionCode::Hyoid, RegionCode::Bolus] }
}

#[test]
fn failing_fold_is_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let cs = cases(tmp.path(), 3);
    let ids: Vec<String> = cs.iter().map(|c| c.id.clone()).collect();
    let spec = PredictorSpec::external(
        r#"sh -c 'case "$2" in *case1) echo boom >&2; exit 9;; esac; test -s "$1" && cp "$2"/lab_*.nrrd "$3"/' sh {train} {test} {out}"#,
    )
    .unwrap();
    let r = run_loocv(&loocv_plan(&ids).unwrap(), &spec, &cs, &opts(tmp.path())).unwrap();
    let status: Vec<FoldStatus> = r.folds.iter().map(|f| f.status).collect();
    assert_eq!(status, [FoldStatus::Ok, FoldStatus::Failed, FoldStatus::Ok]);
    assert!(r.folds[1].error.as_deref().unwrap().contains("exit"));
    assert!(r.entries.iter().all(|e| e.case_id != ids[1] && e.dice == 1.0));
    assert_eq!(r.entries.len(), 2 * 2 * 2);
    let log = fs::read_to_string(tmp.path().join("work/fold_01/out/predictor.log")).unwrap();
    assert!(log.contains("boom"));
}

#[test]
fn train_list_names_the_other_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let cs = cases(tmp.path(), 2);
    let ids: Vec<String> = cs.iter().map(|c| c.id.clone()).collect();
    // copy the training case's labels: Dice against the test case is below 1
    let spec = PredictorSpec::external(
        r#"sh -c 'd=$(tr -d "[] \n\"" < "$1"); cp "$d"/lab_*.nrrd "$3"/' sh {train} {test} {out}"#,
    )
    .unwrap();
    let r = run_loocv(&loocv_plan(&ids).unwrap(), &spec, &cs, &opts(tmp.path())).unwrap();
    assert!(r.folds.iter().all(|f| f.status == FoldStatus::Ok), "{:?}", r.folds);
    let train: Vec<String> = serde_json::from_str(&fs::read_to_string(tmp.path().join("work/fold_00/train.json")).unwrap()).unwrap();
    assert_eq!(train.len(), 1);
    assert!(train[0].ends_with("case1"));
}

#[test]
fn hung_predictor_times_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cs = cases(tmp.path(), 2);
    let ids: Vec<String> = cs.iter().map(|c| c.id.clone()).collect();
    let mut spec = PredictorSpec::external("sh -c 'exec sleep 30' sh {train} {test} {out}").unwrap();
    spec.timeout_s = 0.3;
    let t0 = Instant::now();
    let r = run_loocv(&loocv_plan(&ids).unwrap(), &spec, &cs, &opts(tmp.path())).unwrap();
    assert!(t0.elapsed().as_secs_f64() < 10.0);
    assert!(r.folds.iter().all(|f| f.status == FoldStatus::Failed && f.error.as_deref().unwrap().contains("timed out")));
    assert!(r.entries.is_empty());
}

#[test]
fn template_without_placeholders_is_rejected() {
    assert!(PredictorSpec::external("predict {test} {out}").is_err());
    assert!(PredictorSpec::external("predict 'unterminated {train} {test} {out}").is_err());
}
