//! Binary little-endian PLY for Gaussian scenes.
//!
//! The reader accepts any scalar property layout as long as the required
//! fields are present; unknown properties are skipped. The writer emits
//! exactly `x y z f_dc_0..2 opacity scale_0..2 rot_0..3` as float32.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{GaussianPrimitive, GaussianScene};

/// Degree-0 spherical harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// Opacity is clamped to this margin before taking the logit on save.
const OPACITY_EPS: f64 = 1e-6;

const FIELDS: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Raw (pre-activation) fields of one PLY vertex, in file order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSplat(pub [f32; 14]);

impl RawSplat {
    pub fn activate(&self, index: usize) -> Result<GaussianPrimitive> {
        let r = &self.0;
        if let Some(k) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(
                index,
                format!("field {} is not finite", FIELDS[k]),
            ));
        }
        let f = |k: usize| r[k] as f64;
        let wxyz = [f(10), f(11), f(12), f(13)];
        if wxyz.iter().all(|&c| c == 0.0) {
            return Err(Error::data(index, "rotation quaternion is all zero"));
        }
        let color = [0, 1, 2].map(|c| (SH_C0 * f(3 + c) + 0.5).clamp(0.0, 1.0));
        let scale = [f(7).exp(), f(8).exp(), f(9).exp()];
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::data(
                index,
                "activated scale is not strictly positive",
            ));
        }
        GaussianPrimitive::from_wxyz([f(0), f(1), f(2)], scale, wxyz, sigmoid(f(6)), color)
            .map_err(|e| Error::data(index, e.to_string()))
    }

    pub fn from_primitive(p: &GaussianPrimitive) -> Self {
        let opacity = p.opacity.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
        let q = p.wxyz();
        let mut raw = [0f32; 14];
        raw[0] = p.center.x as f32;
        raw[1] = p.center.y as f32;
        raw[2] = p.center.z as f32;
        for c in 0..3 {
            raw[3 + c] = ((p.color[c] - 0.5) / SH_C0) as f32;
            raw[7 + c] = p.scale[c].ln() as f32;
        }
        raw[6] = logit(opacity) as f32;
        for c in 0..4 {
            raw[10 + c] = q[c] as f32;
        }
        Self(raw)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, s)| s.size()).sum()
    }
}

struct Header {
    elements: Vec<Element>,
    source: Option<String>,
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut next_line = |reader: &mut R| -> Result<String> {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::format(format!("reading PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::format("PLY header ended before end_header"));
        }
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    };

    if next_line(reader)? != "ply" {
        return Err(Error::format("missing 'ply' magic line"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut source = None;
    let mut saw_format = false;
    loop {
        let l = next_line(reader)?;
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("format") => {
                let fmt = parts.next().unwrap_or_default();
                if fmt != "binary_little_endian" {
                    return Err(Error::format(format!(
                        "unsupported PLY format '{fmt}', expected binary_little_endian"
                    )));
                }
                saw_format = true;
            }
            Some("comment") => {
                if let Some(rest) = l.trim_start().strip_prefix("comment source ") {
                    source = Some(rest.to_string());
                }
            }
            Some("obj_info") | None => {}
            Some("element") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format("element without name"))?;
                let count = parts
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::format(format!("element '{name}' has no valid count")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let ty = parts.next().unwrap_or_default();
                if ty == "list" {
                    return Err(Error::format("list properties are not supported"));
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| Error::format(format!("unknown property type '{ty}'")))?;
                let name = parts
                    .next()
                    .ok_or_else(|| Error::format("property without name"))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::format("property before any element"))?;
                el.props.push((name.to_string(), scalar));
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::format(format!(
                    "unexpected header keyword '{other}'"
                )))
            }
        }
    }
    if !saw_format {
        return Err(Error::format("missing format line"));
    }
    Ok(Header { elements, source })
}

/// Reads vertex records without applying activations.
pub fn read_raw_splats<R: Read>(reader: R) -> Result<(Vec<RawSplat>, Option<String>)> {
    let mut reader = BufReader::new(reader);
    let header = read_header(&mut reader)?;
    let mut splats = Vec::new();
    for el in &header.elements {
        let stride = el.stride();
        if el.name != "vertex" {
            let mut skip = vec![0u8; stride * el.count];
            reader.read_exact(&mut skip).map_err(|_| {
                Error::format(format!("truncated payload in element '{}'", el.name))
            })?;
            continue;
        }
        let mut slots = [(0usize, Scalar::F32); 14];
        for (k, field) in FIELDS.iter().enumerate() {
            let mut offset = 0;
            let mut found = None;
            for (name, ty) in &el.props {
                if name == field {
                    found = Some((offset, *ty));
                    break;
                }
                offset += ty.size();
            }
            slots[k] = found.ok_or_else(|| {
                Error::format(format!("vertex element is missing field '{field}'"))
            })?;
        }
        let mut buf = vec![0u8; stride];
        splats.reserve(el.count);
        for i in 0..el.count {
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::format(format!("truncated vertex payload at vertex {i}")))?;
            let mut raw = [0f32; 14];
            for (k, (off, ty)) in slots.iter().enumerate() {
                raw[k] = ty.decode(&buf[*off..]) as f32;
            }
            splats.push(RawSplat(raw));
        }
        return Ok((splats, header.source));
    }
    Err(Error::format("PLY has no vertex element"))
}

pub fn read_scene_ply<R: Read>(reader: R, fallback_source: &str) -> Result<GaussianScene> {
    let (raw, source) = read_raw_splats(reader)?;
    let primitives = raw
        .iter()
        .enumerate()
        .map(|(i, r)| r.activate(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianScene::new(
        source.unwrap_or_else(|| fallback_source.to_string()),
        primitives,
    ))
}

pub fn load_scene_ply(path: impl AsRef<Path>) -> Result<GaussianScene> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scene_ply(file, &path.display().to_string())
}

pub fn write_raw_splats<W: Write>(
    mut w: W,
    splats: &[RawSplat],
    source_id: &str,
) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    if !source_id.is_empty() {
        writeln!(w, "comment source {}", source_id.replace(['\n', '\r'], " "))?;
    }
    writeln!(w, "element vertex {}", splats.len())?;
    for f in FIELDS {
        writeln!(w, "property float {f}")?;
    }
    writeln!(w, "end_header")?;
    for s in splats {
        for v in s.0 {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn write_scene_ply<W: Write>(w: W, scene: &GaussianScene) -> Result<()> {
    scene.validate()?;
    let raw: Vec<RawSplat> = scene
        .primitives
        .iter()
        .map(RawSplat::from_primitive)
        .collect();
    write_raw_splats(w, &raw, &scene.source_id)
        .map_err(|e| Error::format(format!("writing PLY: {e}")))
}

pub fn save_scene_ply(scene: &GaussianScene, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_scene_ply(BufWriter::new(file), scene)
}
