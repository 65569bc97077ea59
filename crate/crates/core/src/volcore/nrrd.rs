//! NRRD reader/writer for single 3D frames.
//!
//! Only the subset used by this toolkit is supported: attached data, little
//! endian, `raw` or `gzip` encoding, axis-aligned (diagonal) space
//! directions. Volumes are `int16`, `int32` or `float`; label maps are
//! `uint8`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Geometry, LabelMap, Mask, Volume3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Raw,
    Gzip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
    Int16,
    Int32,
    Float32,
    Uint8,
}

impl ScalarType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => Self::Int16,
            "int" | "signed int" | "int32" | "int32_t" => Self::Int32,
            "float" => Self::Float32,
            "uchar" | "unsigned char" | "uint8" | "uint8_t" => Self::Uint8,
            other => return Err(Error::NrrdUnsupported(format!("scalar type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Int16 => "int16",
            Self::Int32 => "int32",
            Self::Float32 => "float",
            Self::Uint8 => "uint8",
        }
    }
}

struct Header {
    scalar: ScalarType,
    geom: Geometry,
    encoding: Encoding,
}

fn parse_vector(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    let inner = s
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| Error::NrrdHeader(format!("expected '(a,b,c)', got '{s}'")))?;
    inner
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::NrrdHeader(format!("bad number in '{s}'"))))
        .collect()
}

fn split_vectors(s: &str) -> Vec<&str> {
    // "(a,b,c) (d,e,f) (g,h,i)"; tolerate arbitrary whitespace between groups.
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => start = Some(i),
            ')' => {
                if let Some(st) = start.take() {
                    out.push(&s[st..=i]);
                }
            }
            _ => {}
        }
    }
    out
}

fn parse_header(text: &str) -> Result<Header> {
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if !magic.starts_with("NRRD000") {
        return Err(Error::NrrdHeader(format!("bad magic '{magic}'")));
    }
    let mut scalar = None;
    let mut dimension = None;
    let mut sizes: Option<Vec<usize>> = None;
    let mut directions: Option<Vec<Vec<f64>>> = None;
    let mut origin: Option<Vec<f64>> = None;
    let mut encoding = None;
    let mut endian = None;
    for line in lines {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        // key/value pairs (`key:=value`) carry no geometry; skip them.
        if line.contains(":=") {
            continue;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| Error::NrrdHeader(format!("unparseable line '{line}'")))?;
        let value = value.trim();
        match key.trim() {
            "type" => scalar = Some(ScalarType::parse(value)?),
            "dimension" => {
                dimension = Some(value.parse::<usize>().map_err(|_| Error::NrrdHeader(format!("dimension '{value}'")))?)
            }
            "sizes" => {
                sizes = Some(
                    value
                        .split_whitespace()
                        .map(|t| t.parse::<usize>().map_err(|_| Error::NrrdHeader(format!("sizes '{value}'"))))
                        .collect::<Result<_>>()?,
                )
            }
            "space directions" => {
                directions = Some(split_vectors(value).into_iter().map(parse_vector).collect::<Result<_>>()?)
            }
            "space origin" => origin = Some(parse_vector(value)?),
            "encoding" => {
                encoding = Some(match value {
                    "raw" => Encoding::Raw,
                    "gzip" | "gz" => Encoding::Gzip,
                    other => return Err(Error::NrrdUnsupported(format!("encoding '{other}'"))),
                })
            }
            "endian" => endian = Some(value.to_string()),
            "data file" | "datafile" => {
                return Err(Error::NrrdUnsupported("detached data files".into()));
            }
            _ => {}
        }
    }
    let missing = |f: &str| Error::NrrdHeader(format!("missing required field '{f}'"));
    let scalar = scalar.ok_or_else(|| missing("type"))?;
    if dimension.ok_or_else(|| missing("dimension"))? != 3 {
        return Err(Error::NrrdUnsupported(format!("dimension {}", dimension.unwrap_or(0))));
    }
    let sizes = sizes.ok_or_else(|| missing("sizes"))?;
    if sizes.len() != 3 {
        return Err(Error::NrrdHeader(format!("expected 3 sizes, got {}", sizes.len())));
    }
    let directions = directions.ok_or_else(|| missing("space directions"))?;
    if directions.len() != 3 || directions.iter().any(|d| d.len() != 3) {
        return Err(Error::NrrdHeader("space directions must be three 3-vectors".into()));
    }
    let mut spacing = [0.0; 3];
    for (a, d) in directions.iter().enumerate() {
        for (b, &v) in d.iter().enumerate() {
            if a != b && v != 0.0 {
                return Err(Error::NrrdUnsupported("non-diagonal space directions".into()));
            }
        }
        spacing[a] = d[a];
    }
    let origin = origin.ok_or_else(|| missing("space origin"))?;
    if origin.len() != 3 {
        return Err(Error::NrrdHeader("space origin must be a 3-vector".into()));
    }
    let encoding = encoding.ok_or_else(|| missing("encoding"))?;
    match endian.as_deref() {
        Some("little") => {}
        None if scalar.size() == 1 => {}
        Some(other) => return Err(Error::NrrdUnsupported(format!("endian '{other}'"))),
        None => return Err(missing("endian")),
    }
    let geom = Geometry::new([sizes[0], sizes[1], sizes[2]], spacing, [origin[0], origin[1], origin[2]])
        .map_err(|e| Error::NrrdHeader(e.to_string()))?;
    Ok(Header { scalar, geom, encoding })
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::NrrdHeader("no blank line terminating the header".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::NrrdHeader("header is not UTF-8".into()))?;
    let text = text.replace('\r', "");
    let header = parse_header(&text)?;
    let payload = &bytes[split + 2..];
    let raw = match header.encoding {
        Encoding::Raw => payload.to_vec(),
        Encoding::Gzip => {
            let mut out = Vec::new();
            GzDecoder::new(payload).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
            out
        }
    };
    let expected = header.geom.len();
    let size = header.scalar.size();
    if raw.len() != expected * size {
        return Err(Error::SizeMismatch { expected, found: raw.len() / size });
    }
    Ok((header, raw))
}

fn write_file(path: &Path, scalar: ScalarType, geom: &Geometry, raw: &[u8], encoding: Encoding) -> Result<()> {
    let [nx, ny, nz] = geom.dims;
    let [sx, sy, sz] = geom.spacing;
    let [ox, oy, oz] = geom.origin;
    let enc = match encoding {
        Encoding::Raw => "raw",
        Encoding::Gzip => "gzip",
    };
    let mut out = format!(
        "NRRD0004\n\
         type: {}\n\
         dimension: 3\n\
         space dimension: 3\n\
         sizes: {nx} {ny} {nz}\n\
         space directions: ({sx},0,0) (0,{sy},0) (0,0,{sz})\n\
         space origin: ({ox},{oy},{oz})\n\
         endian: little\n\
         encoding: {enc}\n\n",
        scalar.name()
    )
    .into_bytes();
    match encoding {
        Encoding::Raw => out.extend_from_slice(raw),
        Encoding::Gzip => {
            let mut gz = GzEncoder::new(out, Compression::default());
            gz.write_all(raw).map_err(|e| Error::io(path, e))?;
            out = gz.finish().map_err(|e| Error::io(path, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a CT frame; any supported scalar type is converted to 32-bit HU.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let path = path.as_ref();
    let (h, raw) = read_file(path)?;
    let data: Vec<i32> = match h.scalar {
        ScalarType::Int16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect(),
        ScalarType::Int32 => raw.chunks_exact(4).map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        ScalarType::Float32 => raw
            .chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if v.is_finite() {
                    Ok(v.round() as i32)
                } else {
                    Err(Error::Invalid(format!("{}: non-finite HU value", path.display())))
                }
            })
            .collect::<Result<_>>()?,
        ScalarType::Uint8 => {
            return Err(Error::NrrdUnsupported(format!("{}: uint8 data is a label map, not a volume", path.display())))
        }
    };
    Volume3::new(h.geom, data)
}

/// Saves a CT frame as `int32`.
pub fn save_volume(path: impl AsRef<Path>, v: &Volume3, encoding: Encoding) -> Result<()> {
    let raw: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_file(path.as_ref(), ScalarType::Int32, v.geometry(), &raw, encoding)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (h, raw) = read_file(path)?;
    if h.scalar != ScalarType::Uint8 {
        return Err(Error::NrrdUnsupported(format!("{}: label maps must be uint8", path.display())));
    }
    LabelMap::new(h.geom, raw)
}

pub fn save_labels(path: impl AsRef<Path>, l: &LabelMap, encoding: Encoding) -> Result<()> {
    write_file(path.as_ref(), ScalarType::Uint8, l.geometry(), l.codes(), encoding)
}

/// Loads a binary mask; any nonzero code counts as set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let l = load_labels(path)?;
    Mask::new(*l.geometry(), l.codes().iter().map(|&c| c != 0).collect())
}

pub fn save_mask(path: impl AsRef<Path>, m: &Mask, encoding: Encoding) -> Result<()> {
    save_labels(path, &m.to_label_map(), encoding)
}
