//! Deterministic synthetic swallowing 4D-CT with ground truth.
//!
//! The scene is a neck cylinder with static bones (facial plate, mandible
//! arch, vertebral column), a rigid bar-with-horns hyoid and a thyroid plate
//! that follow a scripted excursion, a cage-animated tongue and a contrast
//! bolus travelling along a curved path. Orientation: +x patient right,
//! +y anterior, +z superior.
//!
//! Motion blur is modelled by averaging renderings at instants spread over
//! the exposure window. This is a stand-in for the real reconstruction
//! artifact, which has no published intensity profile.

mod scene;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use scene::{excursion, AnalyticParams, Rendering, Scene};

use crate::segkit::RigidPose;
use crate::volcore::{save_case, Encoding, Frame, LabelMap, Sequence4D, Volume3};
use crate::{Error, Result};

pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub air: i32,
    pub soft_tissue: i32,
    pub bone: i32,
    pub cartilage: i32,
    pub bolus: i32,
}

impl Default for Palette {
    fn default() -> Self {
        Self { air: -1000, soft_tissue: 40, bone: 800, cartilage: 200, bolus: 1500 }
    }
}

impl Palette {
    /// Midpoint between soft tissue and bone.
    pub fn bone_threshold(&self) -> i32 {
        (self.soft_tissue + self.bone) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_frames: usize,
    pub frame_interval_s: f64,
    pub exposure_s: f64,
    pub rng_seed: u64,
    /// Peak hyoid displacement in voxels (x, y, z).
    pub hyoid_peak_vox: [f64; 3],
    /// Rise start, rise end, return start, return end (frame units).
    pub hyoid_timing: [f64; 4],
    /// The left greater horn rises `1 + horn_imbalance` times as far as the
    /// right one.
    pub horn_imbalance: f64,
    /// Hyoid body radius; horns are 0.75 of it. Defaults to 12 scene units.
    pub hyoid_radius_mm: Option<f64>,
    /// Thyroid translation as a fraction of the hyoid's.
    pub thyroid_follow: f64,
    /// Displacement of the tongue's top cage layer. Defaults to 8 scene units.
    pub tongue_amplitude_mm: Option<f64>,
    pub tongue_timing: [f64; 4],
    /// Bolus path traversal window (frame units).
    pub bolus_timing: [f64; 2],
    /// Fraction of the bolus path travelled (0 keeps it still).
    pub bolus_travel: f64,
    pub motion_blur: bool,
    pub blur_samples: usize,
    pub metal_artifact: bool,
    pub metal_site_mm: Option<[f64; 3]>,
    pub metal_amplitude: f64,
    pub palette: Palette,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [128; 3],
            spacing: [0.5; 3],
            n_frames: 25,
            frame_interval_s: 0.1,
            exposure_s: 0.2,
            rng_seed: 0,
            hyoid_peak_vox: [2.0, 6.0, 8.0],
            hyoid_timing: [5.0, 12.0, 15.0, 20.0],
            horn_imbalance: 0.0,
            hyoid_radius_mm: None,
            thyroid_follow: 0.5,
            tongue_amplitude_mm: None,
            tongue_timing: [2.0, 8.0, 12.0, 18.0],
            bolus_timing: [2.0, 16.0],
            bolus_travel: 1.0,
            motion_blur: false,
            blur_samples: 5,
            metal_artifact: false,
            metal_site_mm: None,
            metal_amplitude: 300.0,
            palette: Palette::default(),
            noise_sigma: 15.0,
        }
    }
}

impl PhantomConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PhantomConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// No motion anywhere in the scene.
    pub fn without_motion(mut self) -> Self {
        self.hyoid_peak_vox = [0.0; 3];
        self.tongue_amplitude_mm = Some(0.0);
        self.bolus_travel = 0.0;
        self
    }

    /// Exposure length in frame units.
    pub fn exposure_frames(&self) -> f64 {
        self.exposure_s / self.frame_interval_s
    }

    /// Instants (frame units) averaged into frame `f`.
    pub fn exposure_instants(&self, frame: usize) -> Vec<f64> {
        let t = frame as f64;
        let k = self.blur_samples;
        if k <= 1 {
            return vec![t];
        }
        let e = self.exposure_frames();
        (0..k).map(|i| t + e * (i as f64 / (k - 1) as f64 - 0.5)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.dims.iter().any(|&d| d < 32) {
            return bad(format!("phantom dims must be >= 32, got {:?}", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing must be > 0, got {:?}", self.spacing));
        }
        if self.n_frames < 2 {
            return bad(format!("n_frames must be >= 2, got {}", self.n_frames));
        }
        if !(self.frame_interval_s > 0.0 && self.frame_interval_s.is_finite()) {
            return bad(format!("frame_interval_s must be > 0, got {}", self.frame_interval_s));
        }
        if !(self.exposure_s >= 0.0 && self.exposure_s <= 2.0 * self.frame_interval_s) {
            return bad(format!(
                "exposure_s must lie in [0, 2 * frame_interval_s], got {} with interval {}",
                self.exposure_s, self.frame_interval_s
            ));
        }
        if self.blur_samples == 0 {
            return bad("blur_samples must be >= 1".into());
        }
        for (name, t) in [("hyoid_timing", self.hyoid_timing), ("tongue_timing", self.tongue_timing)] {
            if t.windows(2).any(|w| !(w[0] < w[1])) {
                return bad(format!("{name} must be strictly increasing, got {t:?}"));
            }
        }
        if !(self.bolus_timing[0] < self.bolus_timing[1]) {
            return bad(format!("bolus_timing must be increasing, got {:?}", self.bolus_timing));
        }
        if !(self.horn_imbalance > -1.0) {
            return bad(format!("horn_imbalance must be > -1, got {}", self.horn_imbalance));
        }
        if self.hyoid_radius_mm.is_some_and(|r| !(r > 0.0)) {
            return bad("hyoid_radius_mm must be > 0".into());
        }
        let finite = self.hyoid_peak_vox.iter().all(|v| v.is_finite())
            && self.thyroid_follow.is_finite()
            && self.bolus_travel.is_finite()
            && self.metal_amplitude.is_finite()
            && self.tongue_amplitude_mm.is_none_or(f64::is_finite);
        if !finite || !(self.noise_sigma >= 0.0) {
            return bad("motion amplitudes must be finite and noise_sigma >= 0".into());
        }
        Ok(())
    }
}

/// Per-frame ground truth beyond the label maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub index: usize,
    pub time_s: f64,
    /// Maps frame-0 world points to this frame.
    pub hyoid_pose: RigidPose,
    pub thyroid_pose: RigidPose,
    pub hyoid_landmarks_mm: Vec<[f64; 3]>,
    /// Frame-0 hyoid label centroid carried by the pose.
    pub hyoid_centroid_mm: [f64; 3],
    pub bolus_centroid_mm: [f64; 3],
    /// Largest hyoid landmark travel within the exposure window, in voxels
    /// (0 without motion blur).
    #[serde(default)]
    pub hyoid_blur_vox: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub config: PhantomConfig,
    pub analytic: AnalyticParams,
    pub frames: Vec<TruthFrame>,
    /// Label maps at each frame's mid-exposure instant (stored as case files).
    #[serde(skip)]
    pub labels: Vec<LabelMap>,
}

impl PhantomTruth {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean of the scene rendered at the configured exposure instants around
/// `frame`. Each rendering is integer HU; the mean is rounded.
pub fn add_motion_blur(scene: &Scene, frame: usize, cfg: &PhantomConfig) -> Result<Volume3> {
    let instants = cfg.exposure_instants(frame);
    let renders = instants.par_iter().map(|&t| scene.render(t)).collect::<Result<Vec<_>>>()?;
    let k = renders.len() as f64;
    let n = scene.geometry().len();
    let data = (0..n)
        .into_par_iter()
        .map(|i| {
            let s: i64 = renders.iter().map(|r| r.hu[i] as i64).sum();
            (s as f64 / k).round() as i32
        })
        .collect();
    Volume3::new(*scene.geometry(), data)
}

fn noise_field(cfg: &PhantomConfig, n: usize) -> Vec<f32> {
    if cfg.noise_sigma == 0.0 {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
}

/// Streak pattern from a dense implant: alternating-sign beams radiating in
/// the axial plane through `site`, decaying as `1 / (1 + d / 10 mm)`, confined
/// to a ±2 mm slab. Beam orientation is drawn from the config seed.
pub fn add_metal_artifact(v: &Volume3, site: [f64; 3], cfg: &PhantomConfig) -> Result<Volume3> {
    let g = *v.geometry();
    let idx = g.world_to_index(site);
    if !(0..3).all(|a| idx[a] >= -0.5 && idx[a] <= g.dims[a] as f64 - 0.5) {
        return Err(Error::Invalid(format!("metal artifact site {site:?} lies outside the volume")));
    }
    let amp = cfg.metal_amplitude;
    if amp == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x6d65_7461_6c00);
    let phase = rand::Rng::random_range(&mut rng, 0.0..PI);
    const BEAMS: f64 = 6.0;
    const SLAB_MM: f64 = 2.0;
    let mut out = v.clone();
    let [nx, ny, nz] = g.dims;
    for z in 0..nz {
        let wz = g.origin[2] + z as f64 * g.spacing[2];
        if (wz - site[2]).abs() > SLAB_MM {
            continue;
        }
        for y in 0..ny {
            for x in 0..nx {
                let p = g.voxel_center(x, y, z);
                let (dx, dy) = (p[0] - site[0], p[1] - site[1]);
                let d = (dx * dx + dy * dy).sqrt();
                let c = (BEAMS * (dy.atan2(dx) - phase)).cos();
                if c.abs() > 0.7 {
                    let i = g.index(x, y, z);
                    let s = c.signum() * amp / (1.0 + d / 10.0);
                    out.data_mut()[i] = (out.data()[i] as f64 + s).round() as i32;
                }
            }
        }
    }
    Ok(out)
}

/// Default implant site: the front of the mandible arch, at the teeth.
pub fn default_metal_site(scene: &Scene) -> [f64; 3] {
    let p = scene.params();
    let u = p.unit_mm;
    [p.center_mm[0], p.center_mm[1] + 46.0 * u, p.center_mm[2] + 22.0 * u]
}

/// Fills the airway with contrast and joins it to the bolus with a tube of
/// the same HU, so growth from the bolus escapes along the airway.
pub fn add_leak_bridge(v: &Volume3, scene: &Scene, frame: &TruthFrame, hu: i32) -> Volume3 {
    let g = *v.geometry();
    let p = scene.params();
    let [ax, ay] = p.airway_axis_mm;
    let b = frame.bolus_centroid_mm;
    let tube_r = 0.5 * p.bolus_radius_mm;
    let mut out = v.clone();
    for i in 0..g.len() {
        let [x, y, z] = g.coords(i);
        let q = g.voxel_center(x, y, z);
        let in_airway = ((q[0] - ax).powi(2) + (q[1] - ay).powi(2)).sqrt() < p.airway_radius_mm;
        // segment from the bolus center to the airway axis at the same height
        let (ex, ey) = (ax - b[0], ay - b[1]);
        let len2 = ex * ex + ey * ey;
        let h = if len2 > 0.0 { (((q[0] - b[0]) * ex + (q[1] - b[1]) * ey) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let d = ((q[0] - b[0] - h * ex).powi(2) + (q[1] - b[1] - h * ey).powi(2) + (q[2] - b[2]).powi(2)).sqrt();
        if in_airway || d < tube_r {
            out.data_mut()[i] = hu;
        }
    }
    out
}

/// Largest distance between any two exposure instants' positions of any
/// hyoid landmark, in units of the finest voxel spacing.
pub fn hyoid_blur_vox(scene: &Scene, frame: usize, cfg: &PhantomConfig) -> f64 {
    let tracks: Vec<Vec<[f64; 3]>> = cfg
        .exposure_instants(frame)
        .iter()
        .map(|&t| scene.hyoid_landmarks(&scene.hyoid_pose(t, frame)))
        .collect();
    let mut worst: f64 = 0.0;
    for a in &tracks {
        for b in &tracks {
            for (p, q) in a.iter().zip(b) {
                let d = (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt();
                worst = worst.max(d);
            }
        }
    }
    worst / cfg.spacing.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Renders the full sequence and its truth. Frames render in parallel.
pub fn generate(cfg: &PhantomConfig) -> Result<(Sequence4D, PhantomTruth)> {
    let scene = Scene::new(cfg)?;
    let g = *scene.geometry();
    let noise = noise_field(cfg, g.len());
    let metal_site = cfg.metal_artifact.then(|| cfg.metal_site_mm.unwrap_or_else(|| default_metal_site(&scene)));
    let rendered = (0..cfg.n_frames)
        .into_par_iter()
        .map(|f| {
            let mid = scene.render(f as f64)?;
            let clean = if cfg.motion_blur {
                add_motion_blur(&scene, f, cfg)?.into_data()
            } else {
                mid.hu
            };
            let data = clean.iter().zip(&noise).map(|(&h, &n)| (h as f64 + n as f64).round() as i32).collect();
            let mut vol = Volume3::new(g, data)?;
            if let Some(site) = metal_site {
                vol = add_metal_artifact(&vol, site, cfg)?;
            }
            Ok((vol, LabelMap::new(g, mid.labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<LabelMap> = rendered.iter().map(|(_, l)| l.clone()).collect();
    let c0 = labels[0]
        .extract_region(crate::volcore::RegionCode::Hyoid)
        .centroid_world()
        .ok_or_else(|| Error::Invalid("hyoid lies outside the phantom grid".into()))?;
    let frames = (0..cfg.n_frames)
        .map(|f| {
            let t = f as f64;
            let hyoid_pose = scene.hyoid_pose(t, f);
            TruthFrame {
                index: f,
                time_s: t * cfg.frame_interval_s,
                hyoid_landmarks_mm: scene.hyoid_landmarks(&hyoid_pose),
                hyoid_centroid_mm: hyoid_pose.apply(c0),
                hyoid_pose,
                thyroid_pose: scene.thyroid_pose(t, f),
                bolus_centroid_mm: scene.bolus_center(t),
                hyoid_blur_vox: if cfg.motion_blur { hyoid_blur_vox(&scene, f, cfg) } else { 0.0 },
            }
        })
        .collect();
    let seq = Sequence4D::new(
        format!("phantom-{}", cfg.rng_seed),
        cfg.frame_interval_s,
        rendered.into_iter().map(|(volume, l)| Frame { volume, labels: Some(l) }).collect(),
    )?;
    let truth = PhantomTruth { config: cfg.clone(), analytic: scene.params().clone(), frames, labels };
    Ok((seq, truth))
}

/// Writes the case directory (volumes, labels, `case.json`) plus `truth.json`.
pub fn write_phantom(dir: impl AsRef<Path>, seq: &Sequence4D, truth: &PhantomTruth, encoding: Encoding) -> Result<()> {
    let dir = dir.as_ref();
    save_case(dir, seq, encoding)?;
    truth.write(dir.join(TRUTH_FILE))
}
