//! Slice extraction and PNG encoding.

use serde::Deserialize;
use swct_core::volcore::{Geometry, RegionCode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Constant z; columns x, rows y.
    Axial,
    /// Constant y; columns x, rows z.
    Coronal,
    /// Constant x; columns y, rows z.
    Sagittal,
}

impl Axis {
    fn layout(self) -> (usize, usize, usize) {
        match self {
            Axis::Axial => (2, 0, 1),
            Axis::Coronal => (1, 0, 2),
            Axis::Sagittal => (0, 1, 2),
        }
    }

    pub fn extent(self, g: &Geometry) -> usize {
        g.dims[self.layout().0]
    }
}

/// Flat voxel indices of a slice, row-major. Columns run along the first
/// in-plane axis; rows run from high to low along the second, so superior
/// (or anterior, for axial slices) is at the top.
pub fn slice_indices(g: &Geometry, axis: Axis, index: usize) -> (usize, usize, Vec<usize>) {
    let (fixed, col, row) = axis.layout();
    let (w, h) = (g.dims[col], g.dims[row]);
    let mut out = Vec::with_capacity(w * h);
    for r in (0..h).rev() {
        for c in 0..w {
            let mut p = [0usize; 3];
            p[fixed] = index;
            p[col] = c;
            p[row] = r;
            out.push(g.index(p[0], p[1], p[2]));
        }
    }
    (w, h, out)
}

/// `round((hu - (center - width/2)) / width * 255)`, clamped to 0..=255.
pub fn window(hu: i32, center: f64, width: f64) -> u8 {
    let v = ((hu as f64 - (center - width / 2.0)) / width * 255.0).round();
    v.clamp(0.0, 255.0) as u8
}

pub fn encode_gray(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().expect("in-memory PNG header");
        wr.write_image_data(pixels).expect("in-memory PNG data");
    }
    buf
}

/// Palette-indexed PNG whose index is the region code; background is fully
/// transparent.
pub fn encode_labels(w: usize, h: usize, codes: &[u8]) -> Vec<u8> {
    let palette: Vec<u8> = RegionCode::ALL.iter().flat_map(|r| r.color()).collect();
    let trns: Vec<u8> = RegionCode::ALL.iter().map(|r| if *r == RegionCode::Background { 0 } else { 255 }).collect();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(palette);
        enc.set_trns(trns);
        let mut wr = enc.write_header().expect("in-memory PNG header");
        wr.write_image_data(codes).expect("in-memory PNG data");
    }
    buf
}
