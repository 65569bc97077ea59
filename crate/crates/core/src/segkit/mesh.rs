//! Triangle meshes in millimetre coordinates, plus OBJ text IO.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::volcore::RegionCode;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub region: RegionCode,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl TriMesh {
    /// Validates index ranges and rejects degenerate triangles.
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>, region: RegionCode) -> Result<Self> {
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&i| i as usize >= n) {
                return Err(Error::Invalid(format!("triangle {t} references a missing vertex")));
            }
            let [a, b, c] = tri.map(|i| vertices[i as usize]);
            let nrm = cross(sub(b, a), sub(c, a));
            if dot(nrm, nrm) == 0.0 {
                return Err(Error::Invalid(format!("triangle {t} is degenerate")));
            }
        }
        Ok(Self { vertices, triangles, region })
    }

    pub fn empty(region: RegionCode) -> Self {
        Self { vertices: Vec::new(), triangles: Vec::new(), region }
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Number of undirected edges not shared by exactly two triangles.
    pub fn bad_edge_count(&self) -> usize {
        let mut edges: HashMap<(u32, u32), u32> = HashMap::with_capacity(self.triangles.len() * 3 / 2);
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().filter(|&&c| c != 2).count()
    }

    pub fn is_watertight(&self) -> bool {
        self.bad_edge_count() == 0
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                let n = cross(sub(b, a), sub(c, a));
                0.5 * dot(n, n).sqrt()
            })
            .sum()
    }

    /// Enclosed volume by the divergence theorem; positive for outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i as usize]);
                dot(a, cross(b, c)) / 6.0
            })
            .sum()
    }

    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.vertices.first()?;
        let mut lo = first;
        let mut hi = first;
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        Some((lo, hi))
    }

    pub fn translated(&self, d: [f64; 3]) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]).collect(),
            triangles: self.triangles.clone(),
            region: self.region,
        }
    }

    /// Closed superellipsoid `|x/a|^p + |y/b|^p + |z/c|^p = 1`, built by
    /// radially projecting a latitude/longitude sphere. Watertight with
    /// outward winding; `p = 2` gives an ellipsoid.
    pub fn superellipsoid(
        center: [f64; 3],
        radii: [f64; 3],
        exponent: f64,
        segments: usize,
        rings: usize,
        region: RegionCode,
    ) -> TriMesh {
        let segments = segments.max(3);
        let rings = rings.max(2);
        let project = |n: [f64; 3]| -> [f64; 3] {
            let s: f64 = n.iter().map(|c| c.abs().powf(exponent)).sum::<f64>().powf(1.0 / exponent);
            std::array::from_fn(|a| center[a] + radii[a] * n[a] / s)
        };
        let mut vertices = vec![project([0.0, 0.0, 1.0])];
        for r in 1..rings {
            let theta = std::f64::consts::PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = std::f64::consts::TAU * s as f64 / segments as f64;
                vertices.push(project([theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()]));
            }
        }
        vertices.push(project([0.0, 0.0, -1.0]));
        let south = (vertices.len() - 1) as u32;
        let ring = |r: usize, s: usize| (1 + (r - 1) * segments + s % segments) as u32;
        let mut triangles = Vec::new();
        for s in 0..segments {
            triangles.push([0, ring(1, s), ring(1, s + 1)]);
        }
        for r in 1..rings - 1 {
            for s in 0..segments {
                let (a, b) = (ring(r, s), ring(r, s + 1));
                let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
                triangles.push([a, c, d]);
                triangles.push([a, d, b]);
            }
        }
        for s in 0..segments {
            triangles.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
        }
        TriMesh { vertices, triangles, region }
    }

    /// Wavefront OBJ with `v` and `f` records only (1-based indices, mm).
    /// Coordinates use the shortest representation that round-trips exactly.
    pub fn to_obj(&self) -> String {
        let mut out = String::with_capacity(self.vertices.len() * 40 + self.triangles.len() * 24);
        let _ = writeln!(out, "o {}", self.region.name());
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    /// Parses `v` and `f` records; polygon faces are fan-triangulated and
    /// `v/vt/vn` style references keep only the vertex index.
    pub fn from_obj(text: &str, region: RegionCode) -> Result<TriMesh> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Invalid(format!("OBJ line {}: bad vertex", ln + 1)))?;
                    if c.len() != 3 {
                        return Err(Error::Invalid(format!("OBJ line {}: vertex needs 3 coordinates", ln + 1)));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or_default();
                            let i: i64 = head
                                .parse()
                                .map_err(|_| Error::Invalid(format!("OBJ line {}: bad face index", ln + 1)))?;
                            let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                            u32::try_from(resolved)
                                .map_err(|_| Error::Invalid(format!("OBJ line {}: face index out of range", ln + 1)))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(Error::Invalid(format!("OBJ line {}: face needs 3 vertices", ln + 1)));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        TriMesh::new(vertices, triangles, region)
    }

    pub fn write_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    pub fn read_obj(path: impl AsRef<Path>, region: RegionCode) -> Result<TriMesh> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TriMesh::from_obj(&text, region)
    }
}
