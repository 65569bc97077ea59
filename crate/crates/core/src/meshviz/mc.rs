use super::tables::TRI_TABLE;
use crate::segkit::TriMesh;
use crate::volcore::{Mask, RegionCode};

pub const ISO: f64 = 0.5;

/// Weight of the raw mask in the smoothed field; the rest is the 3³ box
/// average. A small raw share keeps voxel centers on the correct side of the
/// isovalue at corners and thin edges, where a pure box filter erodes.
pub const RAW_WEIGHT: f64 = 0.15;

const CORNERS: [[usize; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]];

// (origin corner offset, axis) for each of the 12 cube edges
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

/// Smoothed scalar field on a sub-box of the grid (voxel coordinates
/// `lo..lo + dims`, which may extend past the grid; outside is 0).
struct Field {
    lo: [i64; 3],
    dims: [usize; 3],
    values: Vec<f64>,
}

impl Field {
    fn new(mask: &Mask, lo: [i64; 3], dims: [usize; 3]) -> Self {
        let g = mask.geometry();
        let at = |p: [i64; 3]| -> u32 {
            if g.contains(p) {
                u32::from(mask.get(p[0] as usize, p[1] as usize, p[2] as usize))
            } else {
                0
            }
        };
        let [dx, dy, dz] = dims;
        let n = dx * dy * dz;
        let idx = |x: usize, y: usize, z: usize| x + dx * (y + dy * z);
        let mut raw = vec![0u32; n];
        for z in 0..dz {
            for y in 0..dy {
                for x in 0..dx {
                    raw[idx(x, y, z)] = at([lo[0] + x as i64, lo[1] + y as i64, lo[2] + z as i64]);
                }
            }
        }
        // Separable 3-tap sums; the sub-box is padded so its own edge is empty.
        let mut a = raw.clone();
        let mut b = vec![0u32; n];
        for (axis, stride) in [(0usize, 1usize), (1, dx), (2, dx * dy)] {
            for z in 0..dz {
                for y in 0..dy {
                    for x in 0..dx {
                        let c = [x, y, z][axis];
                        let i = idx(x, y, z);
                        let mut s = a[i];
                        if c > 0 {
                            s += a[i - stride];
                        }
                        if c + 1 < dims[axis] {
                            s += a[i + stride];
                        }
                        b[i] = s;
                    }
                }
            }
            std::mem::swap(&mut a, &mut b);
        }
        let values = raw
            .iter()
            .zip(&a)
            .map(|(&r, &s)| RAW_WEIGHT * r as f64 + (1.0 - RAW_WEIGHT) * s as f64 / 27.0)
            .collect();
        Self { lo, dims, values }
    }

    fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.dims[0] * (p[1] + self.dims[1] * p[2])
    }
}

/// Isosurface of the box-smoothed mask at 0.5, in world mm. Triangles are
/// wound so normals point out of the region. The field is evaluated on a
/// box padded past the mask's extent, so the result is always closed.
pub fn marching_cubes(mask: &Mask, region: RegionCode) -> TriMesh {
    let Some((blo, bhi)) = mask.bounding_box() else {
        return TriMesh::empty(region);
    };
    let g = *mask.geometry();
    let lo: [i64; 3] = std::array::from_fn(|a| blo[a] as i64 - 2);
    let dims: [usize; 3] = std::array::from_fn(|a| bhi[a] - blo[a] + 5);
    let field = Field::new(mask, lo, dims);
    let n = field.values.len();
    let mut edge_vertex = [vec![u32::MAX; n], vec![u32::MAX; n], vec![u32::MAX; n]];
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for z in 0..dims[2] - 1 {
        for y in 0..dims[1] - 1 {
            for x in 0..dims[0] - 1 {
                let base = [x, y, z];
                let mut case = 0usize;
                for (bit, c) in CORNERS.iter().enumerate() {
                    let p = [x + c[0], y + c[1], z + c[2]];
                    if field.values[field.index(p)] < ISO {
                        case |= 1 << bit;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut vert_of_edge = |e: usize| -> u32 {
                    let (off, axis) = EDGES[e];
                    let p = [base[0] + off[0], base[1] + off[1], base[2] + off[2]];
                    let i = field.index(p);
                    if edge_vertex[axis][i] == u32::MAX {
                        let mut q = p;
                        q[axis] += 1;
                        let (va, vb) = (field.values[i], field.values[field.index(q)]);
                        let t = (ISO - va) / (vb - va);
                        let mut ix: [f64; 3] = std::array::from_fn(|a| (field.lo[a] + p[a] as i64) as f64);
                        ix[axis] += t;
                        edge_vertex[axis][i] = vertices.len() as u32;
                        vertices.push(g.index_to_world(ix));
                    }
                    edge_vertex[axis][i]
                };
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let a = vert_of_edge(tri[0] as usize);
                    let b = vert_of_edge(tri[1] as usize);
                    let c = vert_of_edge(tri[2] as usize);
                    triangles.push([a, b, c]);
                }
            }
        }
    }
    TriMesh { vertices, triangles, region }
}
