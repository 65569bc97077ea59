//! Rigid-body tracking of a frame-0 template through a sequence.
//!
//! The objective is the sum of squared HU differences between frame-0
//! intensities at the template voxels and frame-t intensities sampled
//! (trilinearly) at the pose-mapped positions. Each frame starts from the
//! previous frame's pose: a coarse integer-translation grid search, then
//! coordinate descent over three translations and three XYZ Euler angles
//! (about the template centroid) with a halving step schedule.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volcore::{Geometry, Mask, Sequence4D, Volume3};
use crate::{Error, Result};

/// Maps template-frame world points (mm) to frame `frame_index`:
/// `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    #[serde(with = "mat3_rows")]
    pub rotation: Matrix3<f64>,
    #[serde(with = "vec3_array")]
    pub translation: Vector3<f64>,
    pub frame_index: usize,
}

mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|r, c| rows[r][c]))
    }
}

mod vec3_array {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}

impl RigidPose {
    pub fn identity(frame_index: usize) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros(), frame_index }
    }

    /// Rotation by XYZ Euler angles (degrees, applied x then y then z) about
    /// `pivot`, followed by `shift` (mm).
    pub fn from_euler_about(pivot: [f64; 3], angles_deg: [f64; 3], shift: [f64; 3], frame_index: usize) -> Self {
        let [ax, ay, az] = angles_deg.map(f64::to_radians);
        let r = (Rotation3::from_axis_angle(&Vector3::z_axis(), az)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ay)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), ax))
        .into_inner();
        let c = Vector3::from(pivot);
        Self { rotation: r, translation: c - r * c + Vector3::from(shift), frame_index }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::from(p) + self.translation;
        [q.x, q.y, q.z]
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation), frame_index: self.frame_index }
    }

    /// Max deviation of `RᵀR` from identity and the determinant.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        (e, self.rotation.determinant())
    }

    /// Rotation angle (degrees) of `self⁻¹ ∘ other`.
    pub fn rotation_angle_to(&self, other: &RigidPose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

/// Nearest-neighbour resampling of `mask` under `pose`: output voxel `y` is
/// set when the voxel nearest to `pose⁻¹(y)` is set in the input.
pub fn apply_rigid(mask: &Mask, pose: &RigidPose) -> Mask {
    let g = *mask.geometry();
    let mut out = Mask::empty(g);
    let Some((lo, hi)) = mask.bounding_box() else {
        return out;
    };
    // Transformed bounding box of the set voxels, padded by one voxel.
    let mut wlo = [f64::INFINITY; 3];
    let mut whi = [f64::NEG_INFINITY; 3];
    for k in 0..8 {
        let corner = std::array::from_fn(|a| if k >> a & 1 == 0 { lo[a] as f64 - 0.5 } else { hi[a] as f64 + 0.5 });
        let w = pose.apply(g.index_to_world(corner));
        let i = g.world_to_index(w);
        for a in 0..3 {
            wlo[a] = wlo[a].min(i[a]);
            whi[a] = whi[a].max(i[a]);
        }
    }
    let range = |a: usize| {
        let s = (wlo[a].floor() - 1.0).max(0.0) as usize;
        let e = ((whi[a].ceil() + 1.0).max(-1.0) as usize).min(g.dims[a] - 1);
        (s, e)
    };
    let (xs, xe) = range(0);
    let (ys, ye) = range(1);
    let (zs, ze) = range(2);
    if wlo.iter().zip(g.dims).any(|(&l, d)| l > d as f64) || whi.iter().any(|&h| h < -1.0) {
        return out;
    }
    let inv = pose.inverse();
    for z in zs..=ze {
        for y in ys..=ye {
            for x in xs..=xe {
                let src = g.world_to_index(inv.apply(g.voxel_center(x, y, z)));
                let r = src.map(|v| v.round() as i64);
                if g.contains(r) && mask.get(r[0] as usize, r[1] as usize, r[2] as usize) {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Ssd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackParams {
    /// Half-width of the coarse integer translation search, voxels.
    pub coarse_radius: usize,
    pub coarse_step: usize,
    pub translation_step_start: f64,
    pub translation_step_min: f64,
    pub rotation_step_start_deg: f64,
    pub rotation_step_min_deg: f64,
    pub metric: SimilarityMetric,
    /// Cap on coordinate-descent sweeps per frame.
    pub max_iterations: usize,
    /// A step level ends when a sweep improves the objective by less than
    /// this fraction.
    pub tolerance: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            coarse_radius: 5,
            coarse_step: 1,
            translation_step_start: 1.0,
            translation_step_min: 0.1,
            rotation_step_start_deg: 2.0,
            rotation_step_min_deg: 0.25,
            metric: SimilarityMetric::Ssd,
            max_iterations: 100,
            tolerance: 1e-3,
        }
    }
}

impl TrackParams {
    fn validate(&self) -> Result<()> {
        let ok = self.coarse_step > 0
            && self.translation_step_start > 0.0
            && self.translation_step_min > 0.0
            && self.rotation_step_start_deg > 0.0
            && self.rotation_step_min_deg > 0.0
            && self.tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("tracking radii and steps must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackedFrame {
    pub pose: RigidPose,
    pub mask: Mask,
    /// Objective after the coarse search and after every descent sweep.
    pub objective_trace: Vec<f64>,
}

struct Template {
    points: Vec<Vector3<f64>>,
    reference: Vec<f64>,
    centroid: Vector3<f64>,
}

impl Template {
    fn new(frame0: &Volume3, mask: &Mask) -> Self {
        let g = mask.geometry();
        let mut points = Vec::new();
        let mut reference = Vec::new();
        for i in mask.indices() {
            let [x, y, z] = g.coords(i);
            points.push(Vector3::from(g.voxel_center(x, y, z)));
            reference.push(frame0.data()[i] as f64);
        }
        let centroid = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        Self { points, reference, centroid }
    }

    fn pose(&self, p: &[f64; 6], frame_index: usize) -> RigidPose {
        RigidPose::from_euler_about(self.centroid.into(), [p[3], p[4], p[5]], [p[0], p[1], p[2]], frame_index)
    }

    /// SSD over in-volume samples, rescaled to the full template size.
    /// NaN when no template voxel lands inside the volume.
    fn objective(&self, vol: &Volume3, g: &Geometry, p: &[f64; 6]) -> f64 {
        let pose = self.pose(p, 0);
        let mut ssd = 0.0;
        let mut valid = 0usize;
        for (x, &r) in self.points.iter().zip(&self.reference) {
            let w = pose.rotation * x + pose.translation;
            if let Some(v) = vol.sample_trilinear(g.world_to_index([w.x, w.y, w.z])) {
                let d = v - r;
                ssd += d * d;
                valid += 1;
            }
        }
        if valid == 0 {
            return f64::NAN;
        }
        ssd * self.points.len() as f64 / valid as f64
    }
}

/// Exhaustive search over integer voxel offsets of the translation around
/// `start`. Every offset shares each template point's trilinear fractions, so
/// weights are computed once; candidates whose partial SSD already exceeds
/// the best complete one are abandoned (this never changes the winner).
fn coarse_search(t: &Template, vol: &Volume3, g: &Geometry, start: [f64; 6], prm: &TrackParams) -> [f64; 6] {
    let r = prm.coarse_radius as i64;
    let step = prm.coarse_step as i64;
    let mut offsets = Vec::new();
    let mut dz = -r;
    while dz <= r {
        let mut dy = -r;
        while dy <= r {
            let mut dx = -r;
            while dx <= r {
                offsets.push([dx, dy, dz]);
                dx += step;
            }
            dy += step;
        }
        dz += step;
    }
    let pose = t.pose(&start, 0);
    let pts: Vec<([i64; 3], [f64; 3], f64)> = t
        .points
        .iter()
        .zip(&t.reference)
        .map(|(x, &r)| {
            let w = pose.rotation * x + pose.translation;
            let i = g.world_to_index([w.x, w.y, w.z]);
            let base = i.map(|v| v.floor() as i64);
            (base, std::array::from_fn(|a| i[a] - base[a] as f64), r)
        })
        .collect();
    let d = g.dims.map(|v| v as i64);
    let nx = d[0] as usize;
    let nxy = nx * d[1] as usize;
    let data = vol.data();
    let n = pts.len() as f64;
    let best = AtomicU64::new(f64::INFINITY.to_bits());
    let score = |o: &[i64; 3]| -> Option<f64> {
        let bound = f64::from_bits(best.load(Ordering::Relaxed));
        let mut ssd = 0.0;
        let mut valid = 0usize;
        for (k, (base, frac, reference)) in pts.iter().enumerate() {
            let b = [base[0] + o[0], base[1] + o[1], base[2] + o[2]];
            if (0..3).any(|a| b[a] < 0 || b[a] > d[a] - 1 || (b[a] == d[a] - 1 && frac[a] > 0.0)) {
                continue;
            }
            let sx = usize::from(b[0] < d[0] - 1);
            let sy = if b[1] < d[1] - 1 { nx } else { 0 };
            let sz = if b[2] < d[2] - 1 { nxy } else { 0 };
            let i = b[0] as usize + nx * b[1] as usize + nxy * b[2] as usize;
            let v = |j: usize| data[j] as f64;
            let [fx, fy, fz] = *frac;
            let c0 = (v(i) * (1.0 - fx) + v(i + sx) * fx) * (1.0 - fy) + (v(i + sy) * (1.0 - fx) + v(i + sy + sx) * fx) * fy;
            let c1 = (v(i + sz) * (1.0 - fx) + v(i + sz + sx) * fx) * (1.0 - fy)
                + (v(i + sz + sy) * (1.0 - fx) + v(i + sz + sy + sx) * fx) * fy;
            let diff = c0 * (1.0 - fz) + c1 * fz - reference;
            ssd += diff * diff;
            valid += 1;
            // the rescaled total is never below the partial sum
            if k % 256 == 255 && ssd > bound {
                return None;
            }
        }
        if valid == 0 {
            return None;
        }
        let f = ssd * n / valid as f64;
        best.fetch_min(f.to_bits(), Ordering::Relaxed);
        Some(f)
    };
    // the previous pose is usually close: score it first for a tight bound
    let _ = score(&[0, 0, 0]);
    let scored: Vec<Option<f64>> = offsets.par_iter().map(score).collect();
    // Lowest objective wins; ties go to the smallest displacement, then the
    // first offset in scan order.
    let norm2 = |o: [i64; 3]| o.iter().map(|v| v * v).sum::<i64>();
    let mut winner: Option<(usize, f64)> = None;
    for (k, f) in scored.iter().enumerate() {
        let Some(f) = *f else { continue };
        let better = match winner {
            None => true,
            Some((bk, bf)) => f < bf || (f == bf && norm2(offsets[k]) < norm2(offsets[bk])),
        };
        if better {
            winner = Some((k, f));
        }
    }
    let mut p = start;
    if let Some((k, _)) = winner {
        for a in 0..3 {
            p[a] += offsets[k][a] as f64 * g.spacing[a];
        }
    }
    p
}

fn refine(t: &Template, vol: &Volume3, g: &Geometry, mut p: [f64; 6], mut f: f64, prm: &TrackParams) -> ([f64; 6], Vec<f64>) {
    let mut trace = vec![f];
    let mut tstep = prm.translation_step_start;
    let mut rstep = prm.rotation_step_start_deg;
    let mut sweeps = 0;
    loop {
        loop {
            if sweeps >= prm.max_iterations {
                return (p, trace);
            }
            sweeps += 1;
            let before = f;
            for k in 0..6 {
                let step = if k < 3 { tstep * g.spacing[k] } else { rstep };
                for dir in [1.0, -1.0] {
                    let mut q = p;
                    q[k] += dir * step;
                    let fq = t.objective(vol, g, &q);
                    if fq < f {
                        p = q;
                        f = fq;
                        break;
                    }
                }
            }
            trace.push(f);
            let rel = if before > 0.0 { (before - f) / before } else { 0.0 };
            if f >= before || rel < prm.tolerance {
                break;
            }
        }
        let next_t = tstep / 2.0;
        let next_r = rstep / 2.0;
        if next_t < prm.translation_step_min && next_r < prm.rotation_step_min_deg {
            return (p, trace);
        }
        tstep = next_t.max(prm.translation_step_min);
        rstep = next_r.max(prm.rotation_step_min_deg);
    }
}

/// Tracks the frame-0 `template` through every frame of `seq`. The result
/// has one entry per frame; frame 0 carries the identity pose and the
/// template itself.
pub fn track_rigid(seq: &Sequence4D, template: &Mask, prm: &TrackParams) -> Result<Vec<TrackedFrame>> {
    prm.validate()?;
    if template.is_empty() {
        return Err(Error::Invalid("tracking template is empty".into()));
    }
    if seq.len() < 2 {
        return Err(Error::Invalid("tracking needs at least two frames".into()));
    }
    let g = *seq.geometry();
    g.ensure_same(template.geometry(), "tracking template")?;
    for f in &seq.frames {
        g.ensure_same(f.volume.geometry(), "sequence frame")?;
    }
    let t = Template::new(&seq.frames[0].volume, template);
    let mut out = Vec::with_capacity(seq.len());
    out.push(TrackedFrame { pose: RigidPose::identity(0), mask: template.clone(), objective_trace: vec![0.0] });
    let mut params = [0.0f64; 6];
    for (fi, frame) in seq.frames.iter().enumerate().skip(1) {
        let p0 = coarse_search(&t, &frame.volume, &g, params, prm);
        let f0 = t.objective(&frame.volume, &g, &p0);
        if !f0.is_finite() {
            return Err(Error::NonFiniteObjective { frame: fi });
        }
        let (p, trace) = refine(&t, &frame.volume, &g, p0, f0, prm);
        params = p;
        let pose = t.pose(&p, fi);
        log::debug!("frame {fi}: objective {:.4e} -> {:.4e}", f0, trace.last().copied().unwrap_or(f0));
        out.push(TrackedFrame { mask: apply_rigid(template, &pose), pose, objective_trace: trace });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::{Frame, Geometry};

    fn geom() -> Geometry {
        Geometry::new([40, 40, 40], [0.5; 3], [-10.0, -10.0, -10.0]).unwrap()
    }

    fn blob(g: Geometry, c: [f64; 3]) -> Mask {
        Mask::from_fn(g, |x, y, z| {
            let p = g.voxel_center(x, y, z);
            let d = [(p[0] - c[0]) / 3.0, (p[1] - c[1]) / 2.0, (p[2] - c[2]) / 1.5];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] < 1.0
        })
    }

    fn render(m: &Mask) -> Volume3 {
        Volume3::new(*m.geometry(), m.bits().iter().map(|&b| if b { 800 } else { 40 }).collect()).unwrap()
    }

    #[test]
    fn identity_pose_is_exact() {
        let g = geom();
        let m = blob(g, [0.3, -0.2, 0.1]);
        assert_eq!(apply_rigid(&m, &RigidPose::identity(0)), m);
    }

    #[test]
    fn unit_voxel_shift() {
        let g = geom();
        let m = blob(g, [0.0; 3]);
        let pose = RigidPose { translation: Vector3::new(0.5, 0.0, 0.0), ..RigidPose::identity(1) };
        let s = apply_rigid(&m, &pose);
        assert_eq!(s.count(), m.count());
        for i in m.indices() {
            let [x, y, z] = g.coords(i);
            assert!(s.get(x + 1, y, z));
        }
    }

    #[test]
    fn pose_then_inverse_round_trip() {
        let g = geom();
        let m = Mask::from_fn(g, |x, y, z| (15..25).contains(&x) && (15..25).contains(&y) && (15..25).contains(&z));
        let pose = RigidPose::from_euler_about([0.0; 3], [7.0, -4.0, 11.0], [0.8, -1.1, 0.35], 1);
        let back = apply_rigid(&apply_rigid(&m, &pose), &pose.inverse());
        let inter = back.and(&m).unwrap().count();
        let dice = 2.0 * inter as f64 / (back.count() + m.count()) as f64;
        assert!(dice >= 0.95, "dice {dice}");
    }

    #[test]
    fn euler_pose_is_orthonormal() {
        let p = RigidPose::from_euler_about([1.0, 2.0, 3.0], [30.0, -45.0, 60.0], [0.0; 3], 0);
        let (e, det) = p.orthonormality_error();
        assert!(e < 1e-12 && (det - 1.0).abs() < 1e-12);
        let c = p.apply([1.0, 2.0, 3.0]);
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12 && (c[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn static_sequence_gives_identity() {
        let g = geom();
        let m = blob(g, [0.0; 3]);
        let v = render(&m);
        let frames = (0..3).map(|_| Frame { volume: v.clone(), labels: None }).collect();
        let seq = Sequence4D::new("s", 0.1, frames).unwrap();
        let out = track_rigid(&seq, &m, &TrackParams::default()).unwrap();
        for f in &out {
            assert_eq!(f.pose.translation, Vector3::zeros());
            assert_eq!(f.pose.rotation, Matrix3::identity());
            assert_eq!(f.mask, m);
        }
    }

    #[test]
    fn recovers_translation_and_objective_never_increases() {
        let g = geom();
        let m0 = blob(g, [0.0; 3]);
        let shifts = [[0.0, 0.0, 0.0], [0.0, 1.0, 1.5], [0.3, 2.1, 2.9]];
        let frames = shifts.iter().map(|s| Frame { volume: render(&blob(g, *s)), labels: None }).collect();
        let seq = Sequence4D::new("s", 0.1, frames).unwrap();
        let out = track_rigid(&seq, &m0, &TrackParams::default()).unwrap();
        for (f, s) in out.iter().zip(shifts) {
            let c = f.pose.apply([0.0; 3]);
            let err = ((c[0] - s[0]).powi(2) + (c[1] - s[1]).powi(2) + (c[2] - s[2]).powi(2)).sqrt();
            assert!(err < 0.5 * 0.5, "frame {} err {err} mm", f.pose.frame_index);
            assert!(f.objective_trace.windows(2).all(|w| w[1] <= w[0]));
            let (e, det) = f.pose.orthonormality_error();
            assert!(e < 1e-9 && (det - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let g = geom();
        let v = Volume3::filled(g, 0);
        let seq = Sequence4D::new("s", 0.1, vec![Frame { volume: v.clone(), labels: None }; 2]).unwrap();
        assert!(track_rigid(&seq, &Mask::empty(g), &TrackParams::default()).is_err());
        let one = Sequence4D::new("s", 0.1, vec![Frame { volume: v, labels: None }]).unwrap();
        assert!(track_rigid(&one, &blob(g, [0.0; 3]), &TrackParams::default()).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let p = RigidPose::from_euler_about([1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [0.5, 0.25, -1.0], 4);
        let s = serde_json::to_string(&p).unwrap();
        let back: RigidPose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
