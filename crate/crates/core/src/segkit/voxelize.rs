//! Mesh to mask conversion by +x ray parity at voxel centers.

use rayon::prelude::*;

use super::TriMesh;
use crate::volcore::{Geometry, Mask};
use crate::{Error, Result};

// Rays run slightly off the voxel-center rows so they never graze edges or
// vertices lying exactly on grid rows (marching-cubes output does).
const RAY_DY: f64 = 1.414_213_562e-6;
const RAY_DZ: f64 = 1.732_050_808e-6;

/// x (in continuous index units) where the ray `y = py, z = pz` crosses the
/// triangle, if it does.
fn crossing(a: [f64; 3], b: [f64; 3], c: [f64; 3], py: f64, pz: f64) -> Option<f64> {
    let e = |p: [f64; 3], q: [f64; 3]| (q[1] - p[1]) * (pz - p[2]) - (q[2] - p[2]) * (py - p[1]);
    let w0 = e(b, c);
    let w1 = e(c, a);
    let w2 = e(a, b);
    let inside = (w0 > 0.0 && w1 > 0.0 && w2 > 0.0) || (w0 < 0.0 && w1 < 0.0 && w2 < 0.0);
    if !inside {
        return None;
    }
    let s = w0 + w1 + w2;
    Some((w0 * a[0] + w1 * b[0] + w2 * c[0]) / s)
}

/// Inside test for world point `p` by the same parity rule.
pub fn point_in_mesh(mesh: &TriMesh, p: [f64; 3]) -> bool {
    let mut n = 0usize;
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i as usize]);
        if let Some(x) = crossing(a, b, c, p[1] + RAY_DY, p[2] + RAY_DZ) {
            if x > p[0] {
                n += 1;
            }
        }
    }
    n % 2 == 1
}

/// Marks voxels whose centers lie inside the watertight `mesh`.
pub fn voxelize(mesh: &TriMesh, geom: &Geometry) -> Result<Mask> {
    let bad = mesh.bad_edge_count();
    if bad > 0 {
        return Err(Error::NotWatertight(bad));
    }
    let [nx, ny, nz] = geom.dims;
    let mut mask = Mask::empty(*geom);
    if mesh.is_empty() {
        return Ok(mask);
    }
    let verts: Vec<[f64; 3]> = mesh.vertices.iter().map(|&v| geom.world_to_index(v)).collect();
    // Bucket triangles by the z rows they span so each slab only visits its own.
    let mut by_z: Vec<Vec<u32>> = vec![Vec::new(); nz];
    for (ti, t) in mesh.triangles.iter().enumerate() {
        let zs = t.map(|i| verts[i as usize][2]);
        let lo = zs.iter().copied().fold(f64::INFINITY, f64::min) - RAY_DZ;
        let hi = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - RAY_DZ;
        if hi < 0.0 || lo > (nz - 1) as f64 {
            continue;
        }
        let z0 = lo.ceil().max(0.0) as usize;
        let z1 = (hi.floor() as usize).min(nz - 1);
        for bucket in by_z.iter_mut().take(z1 + 1).skip(z0) {
            bucket.push(ti as u32);
        }
    }
    let slab = nx * ny;
    mask.bits_mut().par_chunks_mut(slab).enumerate().for_each(|(z, bits)| {
        let pz = z as f64 + RAY_DZ;
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); ny];
        for &ti in &by_z[z] {
            let [a, b, c] = mesh.triangles[ti as usize].map(|i| verts[i as usize]);
            let lo = a[1].min(b[1]).min(c[1]) - RAY_DY;
            let hi = a[1].max(b[1]).max(c[1]) - RAY_DY;
            if hi < 0.0 || lo > (ny - 1) as f64 {
                continue;
            }
            let y0 = lo.ceil().max(0.0) as usize;
            let y1 = (hi.floor() as usize).min(ny - 1);
            for (y, row) in rows.iter_mut().enumerate().take(y1 + 1).skip(y0) {
                if let Some(x) = crossing(a, b, c, y as f64 + RAY_DY, pz) {
                    row.push(x);
                }
            }
        }
        for (y, row) in rows.iter_mut().enumerate() {
            if row.is_empty() {
                continue;
            }
            row.sort_by(f64::total_cmp);
            for x in 0..nx {
                // crossings strictly to the right of the voxel center
                let right = row.len() - row.partition_point(|&c| c <= x as f64);
                bits[x + nx * y] = right % 2 == 1;
            }
        }
    });
    Ok(mask)
}
