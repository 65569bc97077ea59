//! Analytic scene: signed-distance bodies plus the cage-animated tongue.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PhantomConfig;
use crate::segkit::{cage_bind, cage_deform, voxelize, Binding, Cage, RigidPose, TriMesh};
use crate::volcore::{Geometry, Mask, RegionCode};
use crate::Result;

/// Maximum partial-volume weight of a structure on the voxels just outside it.
const EDGE_BLEND: f64 = 0.45;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Sdf {
    Capsule { a: [f64; 3], b: [f64; 3], r: f64 },
    RoundBox { c: [f64; 3], half: [f64; 3], round: f64 },
    Ellipsoid { c: [f64; 3], radii: [f64; 3] },
    Sphere { c: [f64; 3], r: f64 },
    /// Infinite cylinder along z.
    CylinderZ { cx: f64, cy: f64, r: f64 },
    /// Anterior half (y ≥ cy) of a torus lying in the plane z = cz.
    HalfTorus { c: [f64; 3], major: f64, minor: f64 },
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

impl Sdf {
    pub(crate) fn eval(&self, p: [f64; 3]) -> f64 {
        match *self {
            Sdf::Capsule { a, b, r } => {
                let pa = sub(p, a);
                let ba = sub(b, a);
                let h = ((pa[0] * ba[0] + pa[1] * ba[1] + pa[2] * ba[2]) / (ba[0] * ba[0] + ba[1] * ba[1] + ba[2] * ba[2]))
                    .clamp(0.0, 1.0);
                norm([pa[0] - ba[0] * h, pa[1] - ba[1] * h, pa[2] - ba[2] * h]) - r
            }
            Sdf::RoundBox { c, half, round } => {
                let q: [f64; 3] = std::array::from_fn(|a| (p[a] - c[a]).abs() - half[a] + round);
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0) - round
            }
            Sdf::Ellipsoid { c, radii } => {
                let d = sub(p, c);
                let k0 = norm(std::array::from_fn(|a| d[a] / radii[a]));
                let k1 = norm(std::array::from_fn(|a| d[a] / (radii[a] * radii[a])));
                if k1 == 0.0 {
                    -radii.iter().copied().fold(f64::INFINITY, f64::min)
                } else {
                    k0 * (k0 - 1.0) / k1
                }
            }
            Sdf::Sphere { c, r } => norm(sub(p, c)) - r,
            Sdf::CylinderZ { cx, cy, r } => ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt() - r,
            Sdf::HalfTorus { c, major, minor } => {
                let ring = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt() - major;
                let t = (ring * ring + (p[2] - c[2]).powi(2)).sqrt() - minor;
                t.max(c[1] - p[1])
            }
        }
    }

    /// World bounds, `None` when unbounded.
    fn aabb(&self) -> Option<([f64; 3], [f64; 3])> {
        match *self {
            Sdf::Capsule { a, b, r } => {
                Some((std::array::from_fn(|i| a[i].min(b[i]) - r), std::array::from_fn(|i| a[i].max(b[i]) + r)))
            }
            Sdf::RoundBox { c, half, .. } => {
                Some((std::array::from_fn(|i| c[i] - half[i]), std::array::from_fn(|i| c[i] + half[i])))
            }
            Sdf::Ellipsoid { c, radii } => {
                Some((std::array::from_fn(|i| c[i] - radii[i]), std::array::from_fn(|i| c[i] + radii[i])))
            }
            Sdf::Sphere { c, r } => Some((c.map(|v| v - r), c.map(|v| v + r))),
            Sdf::CylinderZ { .. } => None,
            Sdf::HalfTorus { c, major, minor } => {
                let e = major + minor;
                Some(([c[0] - e, c[1], c[2] - minor], [c[0] + e, c[1] + e, c[2] + minor]))
            }
        }
    }
}

/// A union of SDF parts with one material, optionally moved by a rigid pose.
#[derive(Debug, Clone)]
pub(crate) struct Body {
    pub parts: Vec<Sdf>,
    /// Pose and its inverse.
    pub pose: Option<(RigidPose, RigidPose)>,
    pub hu: i32,
    pub region: RegionCode,
}

impl Body {
    fn new(parts: Vec<Sdf>, hu: i32, region: RegionCode) -> Self {
        Self { parts, pose: None, hu, region }
    }

    fn posed(mut self, pose: RigidPose) -> Self {
        self.pose = Some((pose, pose.inverse()));
        self
    }

    pub(crate) fn eval(&self, p: [f64; 3]) -> f64 {
        let q = match &self.pose {
            Some((_, inv)) => inv.apply(p),
            None => p,
        };
        self.parts.iter().map(|s| s.eval(q)).fold(f64::INFINITY, f64::min)
    }

    fn aabb(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.parts {
            let (l, h) = s.aabb()?;
            for a in 0..3 {
                lo[a] = lo[a].min(l[a]);
                hi[a] = hi[a].max(h[a]);
            }
        }
        let Some((pose, _)) = &self.pose else {
            return Some((lo, hi));
        };
        let mut plo = [f64::INFINITY; 3];
        let mut phi = [f64::NEG_INFINITY; 3];
        for k in 0..8 {
            let c = std::array::from_fn(|a| if k >> a & 1 == 0 { lo[a] } else { hi[a] });
            let w = pose.apply(c);
            for a in 0..3 {
                plo[a] = plo[a].min(w[a]);
                phi[a] = phi[a].max(w[a]);
            }
        }
        Some((plo, phi))
    }
}

/// Smooth 0 → 1 → 0 profile: smoothstep rise over `[t0, t1]`, hold, smoothstep
/// return over `[t2, t3]` (times in frame units).
pub fn excursion(t: f64, timing: [f64; 4]) -> f64 {
    let [t0, t1, t2, t3] = timing;
    let ss = |a: f64, b: f64| {
        if t <= a {
            0.0
        } else if t >= b {
            1.0
        } else {
            let x = (t - a) / (b - a);
            x * x * (3.0 - 2.0 * x)
        }
    };
    ss(t0, t1) - ss(t2, t3)
}

/// Fixed scene geometry derived from a configuration. Lengths are in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticParams {
    /// Scene unit (mm): all layout constants below were designed on a
    /// 128-unit cube and are scaled by this.
    pub unit_mm: f64,
    pub center_mm: [f64; 3],
    pub hyoid_pivot_mm: [f64; 3],
    pub hyoid_radius_mm: f64,
    pub horn_radius_mm: f64,
    /// Lateral offset of each horn tip from the pivot.
    pub horn_lateral_mm: f64,
    pub hyoid_peak_mm: [f64; 3],
    /// Peak roll about the anterior-posterior axis that produces the
    /// left/right horn imbalance.
    pub hyoid_peak_roll_deg: f64,
    pub bolus_radius_mm: f64,
    pub bolus_path_mm: [[f64; 3]; 3],
    pub tongue_center_mm: [f64; 3],
    pub tongue_radii_mm: [f64; 3],
    pub tongue_amplitude_mm: f64,
    pub airway_axis_mm: [f64; 2],
    pub airway_radius_mm: f64,
}

/// Renderable scene for one configuration.
pub struct Scene {
    pub(crate) cfg: PhantomConfig,
    pub(crate) geom: Geometry,
    pub(crate) params: AnalyticParams,
    hyoid_parts: Vec<Sdf>,
    thyroid: Sdf,
    statics_soft: Vec<Body>,
    statics_hard: Vec<Body>,
    air: Vec<Sdf>,
    neck: Sdf,
    tongue_cage: Cage,
    tongue_binding: Binding,
}

/// One instant of the scene on the grid, before noise.
pub struct Rendering {
    pub hu: Vec<i32>,
    pub labels: Vec<u8>,
}

impl Scene {
    pub fn new(cfg: &PhantomConfig) -> Result<Scene> {
        cfg.validate()?;
        let geom = Geometry::new(cfg.dims, cfg.spacing, [0.0; 3])?;
        let extent: Vec<f64> = (0..3).map(|a| (cfg.dims[a] - 1) as f64 * cfg.spacing[a]).collect();
        let u = (0..3).map(|a| cfg.dims[a] as f64 * cfg.spacing[a]).fold(f64::INFINITY, f64::min) / 128.0;
        let c = [extent[0] / 2.0, extent[1] / 2.0, extent[2] / 2.0];
        let at = |x: f64, y: f64, z: f64| [c[0] + x * u, c[1] + y * u, c[2] + z * u];
        let pal = &cfg.palette;

        let hr = cfg.hyoid_radius_mm.unwrap_or(12.0 * u);
        let horn_r = 0.75 * hr;
        let hyoid_parts = vec![
            Sdf::Capsule { a: at(-20.0, 22.0, -20.0), b: at(20.0, 22.0, -20.0), r: hr },
            Sdf::Capsule { a: at(-20.0, 22.0, -20.0), b: at(-28.0, -6.0, -16.0), r: horn_r },
            Sdf::Capsule { a: at(20.0, 22.0, -20.0), b: at(28.0, -6.0, -16.0), r: horn_r },
        ];
        let pivot = at(0.0, 22.0, -20.0);
        let lateral = 28.0 * u;
        let peak: [f64; 3] = std::array::from_fn(|a| cfg.hyoid_peak_vox[a] * cfg.spacing[a]);
        // Left horn rises (1 + imbalance) times as far as the right; the mean
        // rise stays the configured z amplitude.
        let g = 1.0 + cfg.horn_imbalance;
        let diff = 2.0 * peak[2] * (g - 1.0) / (1.0 + g);
        let roll = (diff / (2.0 * lateral)).clamp(-1.0, 1.0).asin().to_degrees();

        let thyroid = Sdf::RoundBox { c: at(0.0, 16.0, -50.0), half: [22.0 * u, 5.0 * u, 8.0 * u], round: 3.0 * u };
        let statics_soft = vec![Body::new(
            vec![Sdf::Ellipsoid { c: at(0.0, -6.0, 24.0), radii: [10.0 * u, 10.0 * u, 3.0 * u] }],
            pal.soft_tissue,
            RegionCode::SoftPalate,
        )];
        let statics_hard = vec![
            Body::new(
                vec![Sdf::RoundBox { c: at(0.0, 14.0, 34.0), half: [26.0 * u, 22.0 * u, 4.0 * u], round: 2.0 * u }],
                pal.bone,
                RegionCode::FacialBones,
            ),
            Body::new(
                vec![Sdf::HalfTorus { c: at(0.0, 10.0, 22.0), major: 36.0 * u, minor: 7.0 * u }],
                pal.bone,
                RegionCode::Mandible,
            ),
            Body::new(
                vec![Sdf::RoundBox { c: at(0.0, -46.0, 0.0), half: [14.0 * u, 10.0 * u, 50.0 * u], round: 2.0 * u }],
                pal.bone,
                RegionCode::CervicalVertebrae,
            ),
            Body::new(
                vec![Sdf::RoundBox { c: at(0.0, 2.0, -4.0), half: [9.0 * u, 1.5 * u, 7.0 * u], round: 1.0 * u }],
                pal.cartilage,
                RegionCode::Epiglottis,
            ),
        ];
        let airway = [c[0], c[1] - 24.0 * u];
        let air = vec![
            Sdf::CylinderZ { cx: airway[0], cy: airway[1], r: 7.0 * u },
            Sdf::Ellipsoid { c: at(0.0, 14.0, 18.0), radii: [24.0 * u, 28.0 * u, 8.0 * u] },
        ];
        let neck = Sdf::CylinderZ { cx: c[0], cy: c[1], r: 60.0 * u };

        let tongue_center = at(0.0, 14.0, 4.0);
        let tongue_radii = [22.0 * u, 26.0 * u, 14.0 * u];
        let tongue = TriMesh::superellipsoid(tongue_center, tongue_radii, 2.5, 64, 32, RegionCode::Tongue);
        let tongue_cage = Cage::around(&tongue, [3, 3, 3], 2.0 * u)?;
        let tongue_binding = cage_bind(&tongue, &tongue_cage)?;

        let params = AnalyticParams {
            unit_mm: u,
            center_mm: c,
            hyoid_pivot_mm: pivot,
            hyoid_radius_mm: hr,
            horn_radius_mm: horn_r,
            horn_lateral_mm: lateral,
            hyoid_peak_mm: peak,
            hyoid_peak_roll_deg: roll,
            bolus_radius_mm: 8.0 * u,
            bolus_path_mm: [at(0.0, 20.0, 16.0), at(0.0, -10.0, 20.0), at(0.0, -24.0, -30.0)],
            tongue_center_mm: tongue_center,
            tongue_radii_mm: tongue_radii,
            tongue_amplitude_mm: cfg.tongue_amplitude_mm.unwrap_or(8.0 * u),
            airway_axis_mm: airway,
            airway_radius_mm: 7.0 * u,
        };
        Ok(Scene {
            cfg: cfg.clone(),
            geom,
            params,
            hyoid_parts,
            thyroid,
            statics_soft,
            statics_hard,
            air,
            neck,
            tongue_cage,
            tongue_binding,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn params(&self) -> &AnalyticParams {
        &self.params
    }

    /// Hyoid pose at time `t` (frame units): translation along the configured
    /// excursion plus the imbalance roll about the pivot.
    pub fn hyoid_pose(&self, t: f64, frame_index: usize) -> RigidPose {
        let ph = excursion(t, self.cfg.hyoid_timing);
        let d = self.params.hyoid_peak_mm.map(|v| v * ph);
        let roll = (self.params.hyoid_peak_roll_deg.to_radians().sin() * ph).asin().to_degrees();
        RigidPose::from_euler_about(self.params.hyoid_pivot_mm, [0.0, roll, 0.0], d, frame_index)
    }

    pub fn thyroid_pose(&self, t: f64, frame_index: usize) -> RigidPose {
        let ph = excursion(t, self.cfg.hyoid_timing);
        let d = self.params.hyoid_peak_mm.map(|v| v * ph * self.cfg.thyroid_follow);
        RigidPose::from_euler_about(self.params.hyoid_pivot_mm, [0.0; 3], d, frame_index)
    }

    pub fn bolus_center(&self, t: f64) -> [f64; 3] {
        let [b0, b1] = self.cfg.bolus_timing;
        let s = self.cfg.bolus_travel * excursion(t, [b0, b1, f64::INFINITY, f64::INFINITY]);
        let [p0, p1, p2] = self.params.bolus_path_mm;
        std::array::from_fn(|a| (1.0 - s) * (1.0 - s) * p0[a] + 2.0 * s * (1.0 - s) * p1[a] + s * s * p2[a])
    }

    /// Landmarks rigidly attached to the hyoid: body ends and horn tips.
    pub fn hyoid_landmarks(&self, pose: &RigidPose) -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        for s in &self.hyoid_parts {
            if let Sdf::Capsule { a, b, .. } = s {
                pts.push(pose.apply(*a));
                pts.push(pose.apply(*b));
            }
        }
        pts.dedup();
        pts
    }

    pub(crate) fn hyoid_body(&self, pose: RigidPose) -> Body {
        Body::new(self.hyoid_parts.clone(), self.cfg.palette.bone, RegionCode::Hyoid).posed(pose)
    }

    pub fn tongue_mesh(&self, t: f64) -> Result<TriMesh> {
        let ph = excursion(t, self.cfg.tongue_timing);
        let amp = self.params.tongue_amplitude_mm * ph;
        let dir = [0.0, -0.5 / 1.25f64.sqrt(), 1.0 / 1.25f64.sqrt()];
        let mut cage = self.tongue_cage.clone();
        for k in 0..3 {
            let w = k as f64 / 2.0;
            for j in 0..3 {
                for i in 0..3 {
                    let n = cage.node_index(i, j, k);
                    for a in 0..3 {
                        cage.displaced[n][a] = cage.rest[n][a] + w * amp * dir[a];
                    }
                }
            }
        }
        cage_deform(&self.tongue_binding, &cage)
    }

    /// Renders the noise-free scene at time `t` (frame units).
    pub fn render(&self, t: f64) -> Result<Rendering> {
        let tongue = voxelize(&self.tongue_mesh(t)?, &self.geom)?;
        let mut bodies: Vec<Body> = self.statics_soft.clone();
        bodies.extend(self.statics_hard.iter().cloned());
        bodies.push(self.hyoid_body(self.hyoid_pose(t, 0)));
        bodies.push(Body::new(vec![self.thyroid], self.cfg.palette.cartilage, RegionCode::ThyroidCartilage).posed(self.thyroid_pose(t, 0)));
        bodies.push(Body::new(
            vec![Sdf::Sphere { c: self.bolus_center(t), r: self.params.bolus_radius_mm }],
            self.cfg.palette.bolus,
            RegionCode::Bolus,
        ));
        Ok(self.rasterize(&bodies, &tongue))
    }

    fn rasterize(&self, bodies: &[Body], tongue: &Mask) -> Rendering {
        let g = self.geom;
        let [nx, ny, nz] = g.dims;
        let w = g.spacing.iter().copied().fold(f64::INFINITY, f64::min);
        let pal = &self.cfg.palette;
        // voxel index ranges of each body, padded by one voxel for the edge blend
        let ranges: Vec<[(usize, usize); 3]> = bodies
            .iter()
            .map(|b| {
                let (lo, hi) = b.aabb().expect("scene bodies are bounded");
                std::array::from_fn(|a| {
                    let l = ((lo[a] - w - g.origin[a]) / g.spacing[a]).floor().max(0.0) as usize;
                    let h = ((hi[a] + w - g.origin[a]) / g.spacing[a]).ceil();
                    let h = if h < 0.0 { 0 } else { (h as usize + 1).min(g.dims[a]) };
                    (l.min(h), h)
                })
            })
            .collect();
        let slices: Vec<(Vec<i32>, Vec<u8>)> = (0..nz)
            .into_par_iter()
            .map(|z| {
                let n = nx * ny;
                let mut hu = vec![pal.air; n];
                let mut lab = vec![0u8; n];
                let mut prec = vec![0u8; n];
                for y in 0..ny {
                    for x in 0..nx {
                        let p = g.voxel_center(x, y, z);
                        let i = x + nx * y;
                        if self.neck.eval(p) < 0.0 && !self.air.iter().any(|s| s.eval(p) < 0.0) {
                            hu[i] = pal.soft_tissue;
                        }
                        if tongue.get(x, y, z) {
                            hu[i] = pal.soft_tissue;
                            lab[i] = RegionCode::Tongue.code();
                            prec[i] = RegionCode::Tongue.precedence();
                        }
                    }
                }
                let mut sdfs: Vec<Option<Vec<f64>>> = Vec::with_capacity(bodies.len());
                for (b, r) in bodies.iter().zip(&ranges) {
                    if z < r[2].0 || z >= r[2].1 {
                        sdfs.push(None);
                        continue;
                    }
                    let (x0, x1) = r[0];
                    let (y0, y1) = r[1];
                    let mut d = vec![f64::INFINITY; (x1 - x0) * (y1 - y0)];
                    let bp = b.region.precedence();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let s = b.eval(g.voxel_center(x, y, z));
                            d[(x - x0) + (x1 - x0) * (y - y0)] = s;
                            let i = x + nx * y;
                            if s < 0.0 && bp >= prec[i] {
                                hu[i] = b.hu;
                                lab[i] = b.region.code();
                                prec[i] = bp;
                            }
                        }
                    }
                    sdfs.push(Some(d));
                }
                // partial volume: structures bleed into the lower-precedence voxels just outside them
                let mut blend = vec![(0.0f64, 0i32); n];
                for ((b, r), d) in bodies.iter().zip(&ranges).zip(&sdfs) {
                    let Some(d) = d else { continue };
                    let (x0, x1) = r[0];
                    let (y0, y1) = r[1];
                    let bp = b.region.precedence();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let s = d[(x - x0) + (x1 - x0) * (y - y0)];
                            let i = x + nx * y;
                            if s >= 0.0 && s < w && bp > prec[i] {
                                let f = EDGE_BLEND * (1.0 - s / w);
                                if f > blend[i].0 {
                                    blend[i] = (f, b.hu);
                                }
                            }
                        }
                    }
                }
                for (h, (f, target)) in hu.iter_mut().zip(blend) {
                    if f > 0.0 {
                        *h = (*h as f64 + f * (target - *h) as f64).round() as i32;
                    }
                }
                (hu, lab)
            })
            .collect();
        let mut out = Rendering { hu: Vec::with_capacity(g.len()), labels: Vec::with_capacity(g.len()) };
        for (h, l) in slices {
            out.hu.extend(h);
            out.labels.extend(l);
        }
        out
    }
}
