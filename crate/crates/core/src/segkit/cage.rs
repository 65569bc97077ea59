//! Lattice cage free-form deformation with per-cell trilinear weights.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TriMesh;
use crate::{Error, Result};

/// Control lattice. Nodes are stored x-fastest: `i + cx * (j + cy * k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cage {
    pub dims: [usize; 3],
    pub rest: Vec<[f64; 3]>,
    pub displaced: Vec<[f64; 3]>,
}

impl Cage {
    /// Regular lattice spanning `lo..=hi`, with displaced = rest.
    pub fn regular(lo: [f64; 3], hi: [f64; 3], dims: [usize; 3]) -> Result<Cage> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Invalid(format!("cage dims must be >= 2, got {dims:?}")));
        }
        let mut rest = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let ijk = [i, j, k];
                    rest.push(std::array::from_fn(|a| {
                        lo[a] + (hi[a] - lo[a]) * ijk[a] as f64 / (dims[a] - 1) as f64
                    }));
                }
            }
        }
        let c = Cage { dims, displaced: rest.clone(), rest };
        c.validate()?;
        Ok(c)
    }

    /// Regular lattice around the mesh bounds, padded by `pad` mm per side.
    pub fn around(mesh: &TriMesh, dims: [usize; 3], pad: f64) -> Result<Cage> {
        let (lo, hi) = mesh.bounds().ok_or_else(|| Error::Invalid("cannot fit a cage to an empty mesh".into()))?;
        Cage::regular(lo.map(|v| v - pad), hi.map(|v| v + pad), dims)
    }

    pub fn node_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Rest coordinates along each axis; the rest lattice must be the
    /// tensor product of these.
    fn axes(&self) -> [Vec<f64>; 3] {
        let [cx, cy, cz] = self.dims;
        [
            (0..cx).map(|i| self.rest[self.node_index(i, 0, 0)][0]).collect(),
            (0..cy).map(|j| self.rest[self.node_index(0, j, 0)][1]).collect(),
            (0..cz).map(|k| self.rest[self.node_index(0, 0, k)][2]).collect(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::Invalid(format!("cage dims must be >= 2, got {:?}", self.dims)));
        }
        let n = self.node_count();
        if self.rest.len() != n || self.displaced.len() != n {
            return Err(Error::Invalid(format!(
                "cage {:?} needs {n} nodes, got {} rest / {} displaced",
                self.dims,
                self.rest.len(),
                self.displaced.len()
            )));
        }
        if self.rest.iter().chain(&self.displaced).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("cage coordinates must be finite".into()));
        }
        let axes = self.axes();
        for (a, ax) in axes.iter().enumerate() {
            if ax.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Invalid(format!("cage rest axis {a} is not strictly increasing")));
            }
        }
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    let p = self.rest[self.node_index(i, j, k)];
                    if p != [axes[0][i], axes[1][j], axes[2][k]] {
                        return Err(Error::Invalid(format!("cage rest node ({i},{j},{k}) is off the axis-aligned lattice")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn is_rest(&self) -> bool {
        self.rest == self.displaced
    }

    pub fn from_json(text: &str) -> Result<Cage> {
        let c: Cage = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Cage> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Cage::from_json(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Displacement of one cage node, added to its current position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMove {
    pub node: usize,
    pub delta_mm: [f64; 3],
}

/// Deformation file: `{"moves": [{"node": i, "delta_mm": [dx, dy, dz]}]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CageMoves {
    pub moves: Vec<NodeMove>,
}

impl CageMoves {
    pub fn read(path: impl AsRef<Path>) -> Result<CageMoves> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl Cage {
    /// Adds each move to the displaced lattice. Fails without changing
    /// anything if a node index or delta is invalid.
    pub fn apply_moves(&mut self, moves: &[NodeMove]) -> Result<()> {
        let n = self.node_count();
        if let Some(m) = moves.iter().find(|m| m.node >= n || !m.delta_mm.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid(format!("invalid cage move of node {} (cage has {n} nodes)", m.node)));
        }
        for m in moves {
            for a in 0..3 {
                self.displaced[m.node][a] += m.delta_mm[a];
            }
        }
        Ok(())
    }
}

/// One vertex's containing cell and its eight trilinear weights, ordered
/// by corner bits `(dx, dy, dz)` = `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexWeights {
    pub cell: [usize; 3],
    pub weights: [f64; 8],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub dims: [usize; 3],
    pub vertices: Vec<VertexWeights>,
    triangles: Vec<[u32; 3]>,
    region: crate::volcore::RegionCode,
}

fn locate(axis: &[f64], v: f64) -> Option<(usize, f64)> {
    let n = axis.len();
    if !(v >= axis[0] && v <= axis[n - 1]) {
        return None;
    }
    // last cell whose lower node is <= v, capped so the top face belongs to the last cell
    let c = axis.partition_point(|&a| a <= v).saturating_sub(1).min(n - 2);
    let t = (v - axis[c]) / (axis[c + 1] - axis[c]);
    Some((c, t))
}

/// Binds every mesh vertex to its containing cell of the cage's rest lattice.
pub fn cage_bind(mesh: &TriMesh, cage: &Cage) -> Result<Binding> {
    cage.validate()?;
    let axes = cage.axes();
    let vertices = mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let mut cell = [0usize; 3];
            let mut t = [0f64; 3];
            for a in 0..3 {
                let (c, f) = locate(&axes[a], p[a]).ok_or(Error::OutsideCage { index })?;
                cell[a] = c;
                t[a] = f;
            }
            let weights = std::array::from_fn(|c| {
                let w = |a: usize| if c >> a & 1 == 1 { t[a] } else { 1.0 - t[a] };
                w(0) * w(1) * w(2)
            });
            Ok(VertexWeights { cell, weights })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Binding { dims: cage.dims, vertices, triangles: mesh.triangles.clone(), region: mesh.region })
}

/// Blends the cage's displaced nodes with the stored weights.
pub fn cage_deform(binding: &Binding, cage: &Cage) -> Result<TriMesh> {
    if binding.dims != cage.dims {
        return Err(Error::Invalid(format!("binding built for cage {:?}, got {:?}", binding.dims, cage.dims)));
    }
    cage.validate()?;
    let vertices = binding
        .vertices
        .iter()
        .map(|vw| {
            let mut p = [0f64; 3];
            for (c, &w) in vw.weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let n = cage.node_index(vw.cell[0] + (c & 1), vw.cell[1] + (c >> 1 & 1), vw.cell[2] + (c >> 2 & 1));
                let d = cage.displaced[n];
                for a in 0..3 {
                    p[a] += w * d[a];
                }
            }
            p
        })
        .collect();
    // Deformation can fold cells; keep the topology and let voxelization
    // decide inside/outside rather than rejecting collapsed triangles.
    Ok(TriMesh { vertices, triangles: binding.triangles.clone(), region: binding.region })
}
