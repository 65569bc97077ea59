//! Volumetric data model: CT frames, label maps, binary masks, the region
//! code table, and 4D sequences.

mod nrrd;
mod sequence;

use serde::{Deserialize, Serialize};

pub use nrrd::{load_labels, load_mask, load_volume, save_labels, save_mask, save_volume, Encoding};
pub use sequence::{
    labels_file_name, load_case, save_case, validate_sequence, volume_file_name, CaseManifest, Finding, Frame,
    FrameEntry, Sequence4D, MANIFEST_NAME,
};

use crate::{Error, Result};

/// Grid geometry shared by a volume and everything aligned to it.
///
/// `origin` is the world position (mm) of the center of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Invalid(format!("spacing must be > 0, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Invalid(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, ijk: [i64; 3]) -> bool {
        (0..3).all(|a| ijk[a] >= 0 && (ijk[a] as usize) < self.dims[a])
    }

    /// Continuous index of a world point; out-of-grid indices are returned as is.
    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn index_to_world(&self, i: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + i[a] * self.spacing[a])
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.index_to_world([x as f64, y as f64, z as f64])
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// World-space axis-aligned box spanned by the voxel centers.
    pub fn world_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = self.origin;
        let hi = std::array::from_fn(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a]);
        (lo, hi)
    }

    pub fn ensure_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!("{what}: {self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// One CT frame: Hounsfield units on a regular grid, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    geom: Geometry,
    data: Vec<i32>,
}

impl Volume3 {
    pub fn new(geom: Geometry, data: Vec<i32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::SizeMismatch { expected: geom.len(), found: data.len() });
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: Geometry, hu: i32) -> Self {
        Self { data: vec![hu; geom.len()], geom }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i32 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn world_to_index(&self, p: [f64; 3]) -> [f64; 3] {
        self.geom.world_to_index(p)
    }

    pub fn index_to_world(&self, i: [f64; 3]) -> [f64; 3] {
        self.geom.index_to_world(i)
    }

    /// Trilinear sample at a continuous index. `None` when any of the eight
    /// neighbours falls outside the grid, except that degenerate axes
    /// (size 1) and exact integer positions on the last plane are allowed.
    pub fn sample_trilinear(&self, i: [f64; 3]) -> Option<f64> {
        let d = self.geom.dims;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let v = i[a];
            if !(v >= 0.0) || v > (d[a] - 1) as f64 {
                return None;
            }
            let f = v.floor();
            let mut b = f as usize;
            let mut t = v - f;
            if b + 1 >= d[a] {
                b = d[a] - 1;
                t = 0.0;
            }
            base[a] = b;
            frac[a] = t;
        }
        let nx = d[0];
        let nxy = d[0] * d[1];
        let step = [
            usize::from(base[0] + 1 < d[0]),
            if base[1] + 1 < d[1] { nx } else { 0 },
            if base[2] + 1 < d[2] { nxy } else { 0 },
        ];
        let o = self.geom.index(base[0], base[1], base[2]);
        let v = |k: usize| self.data[k] as f64;
        let c00 = v(o) * (1.0 - frac[0]) + v(o + step[0]) * frac[0];
        let c10 = v(o + step[1]) * (1.0 - frac[0]) + v(o + step[1] + step[0]) * frac[0];
        let c01 = v(o + step[2]) * (1.0 - frac[0]) + v(o + step[2] + step[0]) * frac[0];
        let c11 = v(o + step[2] + step[1]) * (1.0 - frac[0]) + v(o + step[2] + step[1] + step[0]) * frac[0];
        let c0 = c00 * (1.0 - frac[1]) + c10 * frac[1];
        let c1 = c01 * (1.0 - frac[1]) + c11 * frac[1];
        Some(c0 * (1.0 - frac[2]) + c1 * frac[2])
    }
}

/// Anatomical region codes. Values are stable across files and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum RegionCode {
    Background = 0,
    Tongue = 1,
    SoftPalate = 2,
    FacialBones = 3,
    Mandible = 4,
    CervicalVertebrae = 5,
    Hyoid = 6,
    ThyroidCartilage = 7,
    Epiglottis = 8,
    Bolus = 9,
}

impl RegionCode {
    pub const ALL: [RegionCode; 10] = [
        RegionCode::Background,
        RegionCode::Tongue,
        RegionCode::SoftPalate,
        RegionCode::FacialBones,
        RegionCode::Mandible,
        RegionCode::CervicalVertebrae,
        RegionCode::Hyoid,
        RegionCode::ThyroidCartilage,
        RegionCode::Epiglottis,
        RegionCode::Bolus,
    ];

    /// The nine anatomical regions (everything but background).
    pub fn anatomical() -> impl Iterator<Item = RegionCode> {
        Self::ALL.into_iter().skip(1)
    }

    pub fn from_u8(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionCode::Background => "background",
            RegionCode::Tongue => "tongue",
            RegionCode::SoftPalate => "soft_palate",
            RegionCode::FacialBones => "facial_bones",
            RegionCode::Mandible => "mandible",
            RegionCode::CervicalVertebrae => "cervical_vertebrae",
            RegionCode::Hyoid => "hyoid",
            RegionCode::ThyroidCartilage => "thyroid_cartilage",
            RegionCode::Epiglottis => "epiglottis",
            RegionCode::Bolus => "bolus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }

    /// Overlap precedence: bolus > bone/cartilage > soft tissue > background.
    pub fn precedence(self) -> u8 {
        match self {
            RegionCode::Background => 0,
            RegionCode::Tongue | RegionCode::SoftPalate => 1,
            RegionCode::Bolus => 3,
            _ => 2,
        }
    }

    /// Bones and cartilage, the structures segmented by rigid tracking.
    pub fn is_rigid(self) -> bool {
        self.precedence() == 2
    }

    /// Presentation color (RGB) used by overlays and mesh exports.
    pub fn color(self) -> [u8; 3] {
        match self {
            RegionCode::Background => [0, 0, 0],
            RegionCode::Tongue => [220, 90, 90],
            RegionCode::SoftPalate => [240, 150, 180],
            RegionCode::FacialBones => [230, 220, 190],
            RegionCode::Mandible => [250, 240, 200],
            RegionCode::CervicalVertebrae => [200, 200, 160],
            RegionCode::Hyoid => [90, 160, 240],
            RegionCode::ThyroidCartilage => [120, 210, 160],
            RegionCode::Epiglottis => [250, 200, 80],
            RegionCode::Bolus => [170, 110, 230],
        }
    }
}

impl std::fmt::Display for RegionCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses either a numeric code or a region name.
impl std::str::FromStr for RegionCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<u8>() {
            return RegionCode::from_u8(n).ok_or_else(|| Error::Invalid(format!("unknown region code {n}")));
        }
        RegionCode::from_name(s).ok_or_else(|| Error::Invalid(format!("unknown region '{s}'")))
    }
}

/// Per-voxel region codes aligned to a volume.
///
/// Codes are not checked on construction so that files carrying stray
/// values can still be loaded and reported by [`validate_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geom: Geometry,
    codes: Vec<u8>,
}

impl LabelMap {
    pub fn new(geom: Geometry, codes: Vec<u8>) -> Result<Self> {
        if codes.len() != geom.len() {
            return Err(Error::SizeMismatch { expected: geom.len(), found: codes.len() });
        }
        Ok(Self { geom, codes })
    }

    pub fn empty(geom: Geometry) -> Self {
        Self { codes: vec![0; geom.len()], geom }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut [u8] {
        &mut self.codes
    }

    /// Counts of codes outside the region table, as `(code, voxels)`.
    pub fn invalid_codes(&self) -> Vec<(u8, usize)> {
        let mut hist = [0usize; 256];
        for &c in &self.codes {
            hist[c as usize] += 1;
        }
        (RegionCode::ALL.len()..256)
            .filter(|&c| hist[c] > 0)
            .map(|c| (c as u8, hist[c]))
            .collect()
    }

    pub fn count(&self, region: RegionCode) -> usize {
        let c = region.code();
        self.codes.iter().filter(|&&v| v == c).count()
    }

    /// Binary mask of one region.
    pub fn extract_region(&self, region: RegionCode) -> Mask {
        let c = region.code();
        Mask { geom: self.geom, bits: self.codes.iter().map(|&v| v == c).collect() }
    }

    /// Writes `region` into every voxel of `mask` whose current code has
    /// lower precedence. Returns the number of voxels changed.
    pub fn paint_with_precedence(&mut self, mask: &Mask, region: RegionCode) -> Result<usize> {
        self.geom.ensure_same(mask.geometry(), "paint mask")?;
        let code = region.code();
        let mut changed = 0;
        for (dst, &on) in self.codes.iter_mut().zip(mask.bits()) {
            if on && *dst != code {
                let cur = RegionCode::from_u8(*dst).map_or(0, RegionCode::precedence);
                if cur < region.precedence() {
                    *dst = code;
                    changed += 1;
                }
            }
        }
        Ok(changed)
    }
}

/// Binary mask on a grid. Stored on disk as a `uint8` map with codes {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geom: Geometry,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(geom: Geometry, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != geom.len() {
            return Err(Error::SizeMismatch { expected: geom.len(), found: bits.len() });
        }
        Ok(Self { geom, bits })
    }

    pub fn empty(geom: Geometry) -> Self {
        Self { bits: vec![false; geom.len()], geom }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geom.dims;
        let mut bits = Vec::with_capacity(geom.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    bits.push(f(x, y, z));
                }
            }
        }
        Self { geom, bits }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.geom.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        let i = self.geom.index(x, y, z);
        self.bits[i] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Indices of set voxels in memory order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Centroid of set voxels in world coordinates.
    pub fn centroid_world(&self) -> Option<[f64; 3]> {
        let mut acc = [0f64; 3];
        let mut n = 0usize;
        for i in self.indices() {
            let c = self.geom.coords(i);
            for a in 0..3 {
                acc[a] += c[a] as f64;
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        Some(self.geom.index_to_world(acc.map(|v| v / n as f64)))
    }

    /// Inclusive voxel bounding box of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for i in self.indices() {
            let c = self.geom.coords(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
        any.then_some((lo, hi))
    }

    pub fn to_label_map(&self) -> LabelMap {
        LabelMap { geom: self.geom, codes: self.bits.iter().map(|&b| u8::from(b)).collect() }
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.geom.ensure_same(&other.geom, "mask intersection")?;
        Ok(Mask { geom: self.geom, bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect() })
    }
}
