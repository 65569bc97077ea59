use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use swct_annotd::{router, AppState, EDIT_TOKEN_HEADER};
use swct_core::phantom::{add_leak_bridge, generate, write_phantom, PhantomConfig, Scene};
use swct_core::volcore::{load_case, save_case, Encoding, Frame, RegionCode, Sequence4D};
use tower::ServiceExt;

fn config() -> PhantomConfig {
    PhantomConfig { dims: [48; 3], n_frames: 4, noise_sigma: 0.0, hyoid_timing: [0.0, 3.0, 10.0, 12.0], ..Default::default() }
}

/// Writes `case` (labeled), `bare` (no labels) and `leaky` (airway bridge
/// joined to the bolus) under `root`.
fn fixture(root: &Path) {
    let cfg = config();
    let (seq, truth) = generate(&cfg).unwrap();
    write_phantom(root.join("case"), &seq, &truth, Encoding::Raw).unwrap();
    let bare = Sequence4D::new(
        "bare",
        seq.frame_interval_s,
        seq.frames.iter().map(|f| Frame { volume: f.volume.clone(), labels: None }).collect(),
    )
    .unwrap();
    save_case(root.join("bare"), &bare, Encoding::Raw).unwrap();
    let scene = Scene::new(&cfg).unwrap();
    let mut leaky = seq.clone();
    leaky.case_id = "leaky".into();
    for (f, fr) in leaky.frames.iter_mut().enumerate() {
        fr.volume = add_leak_bridge(&fr.volume, &scene, &truth.frames[f], 1500);
    }
    save_case(root.join("leaky"), &leaky, Encoding::Raw).unwrap();
}

struct Client {
    app: axum::Router,
}

impl Client {
    async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(t) = token {
            req = req.header(EDIT_TOKEN_HEADER, t);
        }
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn json(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let (s, b) = self.call(method, uri, token, body).await;
        (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
    }

    async fn open(&self, case: &str) -> (String, String) {
        let (s, v) = self.json(Method::POST, "/sessions", None, Some(json!({ "case": case }))).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        (v["id"].as_str().unwrap().to_string(), v["edit_token"].as_str().unwrap().to_string())
    }

    async fn edit(&self, id: &str, token: &str, e: Value) -> Value {
        let (s, v) = self.json(Method::POST, &format!("/s/{id}/edit"), Some(token), Some(e)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v
    }

    /// Label codes of every axial slice of one frame, via the PNG endpoint.
    async fn frame_codes(&self, id: &str, frame: usize, nz: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for z in 0..nz {
            let (s, png) = self.call(Method::GET, &format!("/s/{id}/labels/slice?frame={frame}&axis=axial&index={z}"), None, None).await;
            assert_eq!(s, StatusCode::OK);
            out.extend(decode(&png).2);
        }
        out
    }
}

fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut r = dec.read_info().unwrap();
    let mut buf = vec![0; r.output_buffer_size().unwrap()];
    let info = r.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

fn setup() -> (tempfile::TempDir, Client) {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let app = router(AppState::new(dir.path()));
    (dir, Client { app })
}

#[tokio::test]
async fn sessions_open_list_and_fail() {
    let (_d, c) = setup();
    let (a, _) = c.open("case").await;
    let (b, _) = c.open("case").await;
    assert_ne!(a, b);
    let (_, list) = c.json(Method::GET, "/sessions", None, None).await;
    assert_eq!(list.as_array().unwrap().len(), 2);
    let (_, meta) = c.json(Method::GET, &format!("/s/{a}/meta"), None, None).await;
    assert_eq!(meta["n_frames"], 4);
    assert_eq!(meta["dims"], json!([48, 48, 48]));
    let (s, _) = c.json(Method::POST, "/sessions", None, Some(json!({ "case": "nope" }))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = c.json(Method::GET, "/s/zzz/meta", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn slices_are_windowed_and_bounded() {
    let (d, c) = setup();
    let (id, _) = c.open("case").await;
    let seq = load_case(d.path().join("case")).unwrap();
    let v = &seq.frames[1].volume;
    let z = 24;
    let (s, png) = c.call(Method::GET, &format!("/s/{id}/slice?frame=1&axis=axial&index={z}&wc=40&ww=400"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let (w, h, px) = decode(&png);
    assert_eq!((w, h), (48, 48));
    let (mut soft, mut air) = (0, 0);
    for row in 0..48 {
        for x in 0..48 {
            let hu = v.get(x, 47 - row, z);
            let expect = ((hu as f64 + 160.0) / 400.0 * 255.0).round().clamp(0.0, 255.0) as u8;
            let got = px[row * 48 + x];
            assert_eq!(got, expect);
            if hu == 40 {
                assert_eq!(got, 128);
                soft += 1;
            }
            if hu == -1000 {
                assert_eq!(got, 0);
                air += 1;
            }
        }
    }
    assert!(soft > 0 && air > 0);
    let (s, _) = c.call(Method::GET, &format!("/s/{id}/slice?frame=0&axis=sagittal&index=48"), None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = c.call(Method::GET, &format!("/s/{id}/slice?frame=4&axis=axial&index=0"), None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (bare, _) = c.open("bare").await;
    let codes = c.frame_codes(&bare, 0, 48).await;
    assert!(codes.iter().all(|&c| c == 0));
    let (_, png) = c.call(Method::GET, &format!("/s/{id}/labels/slice?frame=0&axis=coronal&index=24"), None, None).await;
    let (w, h, _) = decode(&png);
    assert_eq!((w, h), (48, 48));
}

#[tokio::test]
async fn cage_edits_and_undo_restore_labels() {
    let (_d, c) = setup();
    let (id, tok) = c.open("case").await;
    let before = c.frame_codes(&id, 0, 48).await;

    let zero = json!({ "kind": "cage", "frame": 0, "region": "tongue", "node": 21, "delta_mm": [0.0, 0.0, 0.0] });
    let (s, _) = c.json(Method::POST, &format!("/s/{id}/edit"), None, Some(zero.clone())).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let r = c.edit(&id, &tok, zero).await;
    assert_eq!(r["changed_voxels"], 0);

    let r = c.edit(&id, &tok, json!({ "kind": "cage", "frame": 0, "region": "tongue", "node": 21, "delta_mm": [0.0, 0.0, 1.5] })).await;
    assert!(r["changed_voxels"].as_u64().unwrap() > 0);
    assert_ne!(c.frame_codes(&id, 0, 48).await, before);
    let (_, cage) = c.json(Method::GET, &format!("/s/{id}/cage?frame=0&region=tongue"), None, None).await;
    assert_eq!(cage["dims"], json!([4, 4, 4]));
    assert_ne!(cage["rest"][21], cage["displaced"][21]);

    let (s, _) = c.json(Method::POST, &format!("/s/{id}/undo"), Some(&tok), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(c.frame_codes(&id, 0, 48).await, before);
    let (_, cage2) = c.json(Method::GET, &format!("/s/{id}/cage?frame=0&region=tongue"), None, None).await;
    assert_eq!(cage2["rest"], cage2["displaced"]);

    let bad = json!({ "kind": "cage", "frame": 0, "region": "tongue", "node": 64, "delta_mm": [1.0, 0.0, 0.0] });
    let (s, _) = c.json(Method::POST, &format!("/s/{id}/edit"), Some(&tok), Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn put_cage_matches_node_edit() {
    let (_d, c) = setup();
    let (a, ta) = c.open("case").await;
    let (b, tb) = c.open("case").await;
    c.edit(&a, &ta, json!({ "kind": "cage", "frame": 2, "region": "tongue", "node": 42, "delta_mm": [1.0, -1.0, 0.5] })).await;
    let (_, mut cage) = c.json(Method::GET, &format!("/s/{b}/cage?frame=2&region=tongue"), None, None).await;
    let p = cage["displaced"][42].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect::<Vec<_>>();
    cage["displaced"][42] = json!([p[0] + 1.0, p[1] - 1.0, p[2] + 0.5]);
    let (s, v) = c.json(Method::PUT, &format!("/s/{b}/cage?frame=2&region=tongue"), Some(&tb), Some(cage)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(c.frame_codes(&a, 2, 48).await, c.frame_codes(&b, 2, 48).await);
}

#[tokio::test]
async fn grow_leak_is_a_warning_and_changes_nothing() {
    let (d, c) = setup();
    let (id, tok) = c.open("leaky").await;
    let before = c.frame_codes(&id, 1, 48).await;
    let truth = swct_core::phantom::PhantomTruth::read(d.path().join("case/truth.json")).unwrap();
    let seq = load_case(d.path().join("case")).unwrap();
    let g = *seq.geometry();
    let seed = g.world_to_index(truth.frames[1].bolus_centroid_mm).map(|v| v.round() as usize);
    let bolus = seq.frames[1].labels.as_ref().unwrap().count(RegionCode::Bolus);
    let r = c
        .edit(&id, &tok, json!({ "kind": "grow", "frame": 1, "region": "bolus", "seeds": [seed], "range": [1000, 2000], "max_voxels": 3 * bolus }))
        .await;
    assert_eq!(r["changed_voxels"], 0);
    assert!(r["warning"].as_str().unwrap().contains("cap"));
    assert_eq!(r["undo_depth"], 0);
    assert_eq!(c.frame_codes(&id, 1, 48).await, before);

    // the clean case grows to exactly the bolus label
    let (clean, ct) = c.open("bare").await;
    let r = c.edit(&clean, &ct, json!({ "kind": "grow", "frame": 1, "region": "bolus", "seeds": [seed], "range": [1000, 2000] })).await;
    assert_eq!(r["changed_voxels"].as_u64().unwrap() as usize, bolus);
    let (s, _) = c
        .json(Method::POST, &format!("/s/{clean}/edit"), Some(&ct), Some(json!({ "kind": "grow", "frame": 1, "region": "bolus", "seeds": [[0, 0, 0]], "range": [1000, 2000] })))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn edits_then_undos_restore_the_opening_state() {
    let (_d, c) = setup();
    let (id, tok) = c.open("case").await;
    let mut before = Vec::new();
    for f in 0..4 {
        before.push(c.frame_codes(&id, f, 48).await);
    }
    let edits = [
        json!({ "kind": "paint", "frame": 0, "region": "epiglottis", "runs": [[1000, 300], [50000, 10]] }),
        json!({ "kind": "erase", "frame": 3, "runs": [[0, 110592]] }),
        json!({ "kind": "cage", "frame": 1, "region": "soft_palate", "moves": [{ "node": 5, "delta_mm": [0.4, 0.4, 0.4] }] }),
        json!({ "kind": "track", "template_frame": 0, "region": "hyoid" }),
        json!({ "kind": "undo" }),
        json!({ "kind": "track", "template_frame": 2, "region": "thyroid_cartilage", "frames": [0, 4] }),
    ];
    let mut depth = 0;
    for e in edits {
        let r = c.edit(&id, &tok, e).await;
        depth = r["undo_depth"].as_u64().unwrap();
    }
    assert_eq!(depth, 4);
    for _ in 0..depth {
        let (s, _) = c.json(Method::POST, &format!("/s/{id}/undo"), Some(&tok), None).await;
        assert_eq!(s, StatusCode::OK);
    }
    for f in 0..4 {
        assert_eq!(c.frame_codes(&id, f, 48).await, before[f], "frame {f}");
    }
    let (s, _) = c.json(Method::POST, &format!("/s/{id}/undo"), Some(&tok), None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn save_reopen_dice_and_mesh() {
    let (d, c) = setup();
    let (id, tok) = c.open("bare").await;
    // copy the truth in by painting every labeled voxel of the reference
    let truth = load_case(d.path().join("case")).unwrap();
    for (f, fr) in truth.frames.iter().enumerate() {
        let codes = fr.labels.as_ref().unwrap().codes();
        for r in RegionCode::anatomical() {
            let runs: Vec<[usize; 2]> = codes.iter().enumerate().filter(|(_, &v)| v == r.code()).map(|(i, _)| [i, 1]).collect();
            c.edit(&id, &tok, json!({ "kind": "paint", "frame": f, "region": r.name(), "runs": runs })).await;
        }
    }
    let (_, rep) = c.json(Method::GET, &format!("/s/{id}/dice?ref=case"), None, None).await;
    let entries = rep["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 4 * 9);
    assert!(entries.iter().all(|e| e["dice"] == 1.0));
    assert_eq!(rep["guideline"], 0.7);

    c.edit(&id, &tok, json!({ "kind": "cage", "frame": 0, "region": "tongue", "node": 21, "delta_mm": [0.0, 0.0, 1.0] })).await;
    let (s, _) = c.json(Method::POST, &format!("/s/{id}/save"), None, None).await;
    assert_eq!(s, StatusCode::FORBIDDEN);
    let (s, v) = c.json(Method::POST, &format!("/s/{id}/save"), Some(&tok), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(d.path().join("bare/cages/f000_tongue.json").exists());
    assert!(d.path().join("bare/cages/f000_tongue.obj").exists());

    let (re, _) = c.open("bare").await;
    for f in 0..4 {
        assert_eq!(c.frame_codes(&re, f, 48).await, c.frame_codes(&id, f, 48).await);
    }
    let (_, meta) = c.json(Method::GET, &format!("/s/{re}/meta"), None, None).await;
    assert_eq!(meta["cages"], json!([{ "frame": 0, "region": "tongue" }]));

    // removing the left half of the hyoid (one horn and half the body)
    let seq = load_case(d.path().join("case")).unwrap();
    let g = *seq.geometry();
    let hy = seq.frames[2].labels.as_ref().unwrap().extract_region(RegionCode::Hyoid);
    let cx = hy.centroid_world().unwrap()[0];
    let runs: Vec<[usize; 2]> = hy
        .indices()
        .filter(|&i| {
            let [x, y, z] = g.coords(i);
            g.voxel_center(x, y, z)[0] < cx
        })
        .map(|i| [i, 1])
        .collect();
    c.edit(&id, &tok, json!({ "kind": "erase", "frame": 2, "runs": runs })).await;
    let (_, rep) = c.json(Method::GET, &format!("/s/{id}/dice?ref=case"), None, None).await;
    let hy2 = rep["entries"].as_array().unwrap().iter().find(|e| e["frame_index"] == 2 && e["region"] == "hyoid").unwrap().clone();
    assert!(hy2["dice"].as_f64().unwrap() < 0.7);
    assert_eq!(rep["aggregates"]["hyoid"]["below_guideline"], json!([{ "case_id": "phantom-0", "frame_index": 2 }]));

    let (s, obj) = c.call(Method::GET, &format!("/s/{id}/mesh?frame=0&region=hyoid"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(obj).unwrap();
    assert!(text.lines().any(|l| l.starts_with("v ")) && text.lines().any(|l| l.starts_with("f ")));
    let (s, _) = c.call(Method::GET, &format!("/s/{id}/mesh?frame=0&region=spleen"), None, None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}
