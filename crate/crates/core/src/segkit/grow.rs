//! Range-restricted region growing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volcore::{Mask, Volume3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            _ => Err(Error::Invalid(format!("connectivity must be 6 or 26, got {n}"))),
        }
    }

    pub(crate) fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Self::Six => vec![[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]],
            Self::TwentySix => {
                let mut v = Vec::with_capacity(26);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

pub const DEFAULT_MAX_VOXELS: usize = 2_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct GrowParams {
    pub seeds: Vec<[usize; 3]>,
    /// Inclusive HU bounds.
    pub hu_range: (i32, i32),
    /// Optional spatial restriction: growth never leaves the set voxels.
    pub restriction: Option<Mask>,
    pub connectivity: Connectivity,
    /// Growth stops with [`Error::GrowthCapExceeded`] past this many voxels.
    pub max_voxels: usize,
}

impl GrowParams {
    pub fn new(seeds: Vec<[usize; 3]>, lo: i32, hi: i32) -> Self {
        Self {
            seeds,
            hu_range: (lo, hi),
            restriction: None,
            connectivity: Connectivity::Six,
            max_voxels: DEFAULT_MAX_VOXELS,
        }
    }
}

/// Flood fill from the seeds through voxels whose HU lies in `hu_range` and,
/// when given, inside the restriction mask.
pub fn region_grow(v: &Volume3, p: &GrowParams) -> Result<Mask> {
    let g = *v.geometry();
    let (lo, hi) = p.hu_range;
    if lo > hi {
        return Err(Error::Invalid(format!("empty HU range [{lo}, {hi}]")));
    }
    if p.seeds.is_empty() {
        return Err(Error::Invalid("region growing needs at least one seed".into()));
    }
    if let Some(r) = &p.restriction {
        g.ensure_same(r.geometry(), "growth restriction")?;
    }
    let admissible = |i: usize| {
        let hu = v.data()[i];
        hu >= lo && hu <= hi && p.restriction.as_ref().is_none_or(|r| r.bits()[i])
    };
    let mut out = Mask::empty(g);
    let mut queue = VecDeque::new();
    let mut count = 0usize;
    for &s in &p.seeds {
        if s.iter().zip(g.dims).any(|(&c, d)| c >= d) {
            return Err(Error::Invalid(format!("seed {s:?} outside volume of dims {:?}", g.dims)));
        }
        let i = g.index(s[0], s[1], s[2]);
        let hu = v.data()[i];
        if hu < lo || hu > hi {
            return Err(Error::SeedOutOfRange { seed: s, hu, lo, hi });
        }
        if !admissible(i) {
            return Err(Error::Invalid(format!("seed {s:?} lies outside the restriction mask")));
        }
        if !out.bits()[i] {
            out.bits_mut()[i] = true;
            count += 1;
            queue.push_back(s);
        }
    }
    if count > p.max_voxels {
        return Err(Error::GrowthCapExceeded { cap: p.max_voxels });
    }
    let offsets = p.connectivity.offsets();
    while let Some(c) = queue.pop_front() {
        for o in &offsets {
            let n = [c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]];
            if !g.contains(n) {
                continue;
            }
            let n = [n[0] as usize, n[1] as usize, n[2] as usize];
            let i = g.index(n[0], n[1], n[2]);
            if out.bits()[i] || !admissible(i) {
                continue;
            }
            out.bits_mut()[i] = true;
            count += 1;
            if count > p.max_voxels {
                return Err(Error::GrowthCapExceeded { cap: p.max_voxels });
            }
            queue.push_back(n);
        }
    }
    Ok(out)
}
