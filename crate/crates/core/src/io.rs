//! Point cloud and raster file formats.
//!
//! * XYZ: UTF-8 text, one point per line, `#` comments, extra columns ignored.
//! * PLY: `binary_little_endian 1.0` only, `vertex` element with float or
//!   double `x`, `y`, `z`. Other scalar properties are skipped by size; an
//!   optional `uchar class` property round-trips point labels.
//! * PGM: `P5`, maxval 255, canopy black (0) and background white (255).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Label, Point3, PointCloud, RigidTransform, RotationMatrix3, Vec3};
use crate::raster::BinaryImage;

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut coord = [0.0; 3];
        for c in &mut coord {
            let field = fields.next().ok_or_else(|| Error::MalformedLine {
                line_no: i + 1,
                reason: "fewer than 3 fields".into(),
            })?;
            *c = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedLine {
                    line_no: i + 1,
                    reason: format!("bad coordinate `{field}`"),
                })?;
        }
        points.push(Point3::new(coord[0], coord[1], coord[2]));
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud::new(points))
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for p in &cloud.points {
        writeln!(w, "{:.6} {:.6} {:.6}", p.x, p.y, p.z).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_f64(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyElement {
    name: String,
    count: usize,
    /// (name, type, byte offset within the record)
    properties: Vec<(String, Scalar, usize)>,
    stride: usize,
}

fn parse_ply_header(text: &str) -> Result<Vec<PlyElement>> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(Error::UnsupportedPly("missing `ply` magic".into()));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_ok = false;
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => {
                return Err(Error::UnsupportedPly(format!("format `{other}`")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::UnsupportedPly(format!("bad element count `{count}`")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    stride: 0,
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last()
                    .ok_or_else(|| Error::UnsupportedPly("property before element".into()))?;
                if el.name == "vertex" {
                    return Err(Error::UnsupportedPly("list property on vertex".into()));
                }
                // Variable-size records: only tolerated after the vertex element.
                let el = elements.last_mut().unwrap();
                el.stride = usize::MAX;
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::UnsupportedPly("property before element".into()))?;
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| Error::UnsupportedPly(format!("property type `{ty}`")))?;
                if el.stride != usize::MAX {
                    el.properties.push((name.to_string(), scalar, el.stride));
                    el.stride += scalar.size();
                }
            }
            ["end_header"] => break,
            _ => return Err(Error::UnsupportedPly(format!("header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(Error::UnsupportedPly("missing binary_little_endian format".into()));
    }
    Ok(elements)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::UnsupportedPly("no end_header".into()))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::UnsupportedPly("header is not UTF-8".into()))?;
    let elements = parse_ply_header(header)?;

    let mut offset = header_end;
    for el in &elements {
        if el.name != "vertex" {
            if el.stride == usize::MAX {
                return Err(Error::UnsupportedPly(format!(
                    "list element `{}` before vertex",
                    el.name
                )));
            }
            offset += el.count * el.stride;
            continue;
        }
        let find = |n: &str| el.properties.iter().find(|(name, ..)| name == n);
        let (Some(x), Some(y), Some(z)) = (find("x"), find("y"), find("z")) else {
            return Err(Error::UnsupportedPly("vertex lacks x/y/z".into()));
        };
        for (_, ty, _) in [x, y, z] {
            if !matches!(ty, Scalar::F32 | Scalar::F64) {
                return Err(Error::UnsupportedPly("x/y/z must be float or double".into()));
            }
        }
        let class = find("class").filter(|(_, ty, _)| *ty == Scalar::U8);
        let body = bytes
            .get(offset..offset + el.count * el.stride)
            .ok_or_else(|| Error::UnsupportedPly("truncated vertex data".into()))?;
        let mut points = Vec::with_capacity(el.count);
        let mut labels = Vec::with_capacity(if class.is_some() { el.count } else { 0 });
        for rec in body.chunks_exact(el.stride) {
            let read = |(_, ty, off): &(String, Scalar, usize)| ty.read_f64(&rec[*off..]);
            points.push(Point3::new(read(x), read(y), read(z)));
            if let Some((_, _, off)) = class {
                labels.push(Label::from_code(rec[*off]).unwrap_or(Label::Unclassified));
            }
        }
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        return if class.is_some() {
            PointCloud::with_labels(points, labels)
        } else {
            Ok(PointCloud::new(points))
        };
    }
    Err(Error::UnsupportedPly("no vertex element".into()))
}

/// Writes double-precision x, y, z (plus `uchar class` when the cloud is labelled).
pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let labels = cloud.labels();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n",
        cloud.len()
    );
    if labels.is_some() {
        header.push_str("property uchar class\n");
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    for (i, p) in cloud.points.iter().enumerate() {
        for c in [p.x, p.y, p.z] {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        if let Some(labels) = labels {
            w.write_all(&[labels[i].code()]).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads `.ply` or anything else as XYZ text.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => read_ply(path),
        _ => read_xyz(path),
    }
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => write_ply(path, cloud),
        _ => write_xyz(path, cloud),
    }
}

/// PGM bytes for a binary image. Rows are written top (largest `v`) first so
/// the picture appears north-up.
pub fn encode_pgm(image: &BinaryImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.width * image.height);
    for v in (0..image.height).rev() {
        out.extend(
            (0..image.width).map(|u| if image.get(u, v) { 0u8 } else { 255u8 }),
        );
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, image: &BinaryImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

/// Grey-level PGM (P5) of an arbitrary byte raster, rows given bottom-up.
pub fn write_gray_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for v in (0..height).rev() {
        out.extend_from_slice(&pixels[v * width..(v + 1) * width]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// JSON form of a rigid transform: row-major rotation and translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformJson {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformJson {
    fn from(t: &RigidTransform) -> Self {
        Self {
            rotation: t.rotation.to_row_major(),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl From<RigidTransform> for TransformJson {
    fn from(t: RigidTransform) -> Self {
        Self::from(&t)
    }
}

impl TryFrom<TransformJson> for RigidTransform {
    type Error = Error;

    fn try_from(json: TransformJson) -> Result<Self> {
        json.to_transform()
    }
}

impl TransformJson {
    pub fn to_transform(&self) -> Result<RigidTransform> {
        let rotation = RotationMatrix3::from_row_slice(&self.rotation).or_else(|_| {
            // Printed matrices lose a few ulps; accept and re-project if close.
            let m = nalgebra::Matrix3::from_row_slice(&self.rotation);
            let err = (m.transpose() * m - nalgebra::Matrix3::identity()).abs().max();
            if err < 1e-6 && m.determinant() > 0.0 {
                Ok(RotationMatrix3::orthonormalized(&m))
            } else {
                Err(Error::DegenerateGeometry(format!(
                    "rotation is not orthonormal (error {err:e})"
                )))
            }
        })?;
        Ok(RigidTransform::new(rotation, Vec3::from(self.translation)))
    }
}

pub fn write_transform_json(path: impl AsRef<Path>, t: &RigidTransform) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&TransformJson::from(t)).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_transform_json(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: TransformJson = serde_json::from_str(&text).map_err(|e| Error::MalformedLine {
        line_no: e.line(),
        reason: e.to_string(),
    })?;
    json.to_transform()
}

/// One label code per line (`0` unclassified, `1` vegetation, `2` ground).
pub fn write_labels(path: impl AsRef<Path>, labels: &[Label]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for l in labels {
        writeln!(w, "{}", l.code()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<Label>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u8>()
                .ok()
                .and_then(Label::from_code)
                .ok_or_else(|| Error::MalformedLine {
                    line_no: i + 1,
                    reason: format!("bad label `{l}`"),
                })
        })
        .collect()
}

/// Reads `x1 y1 z1 x2 y2 z2` correspondence lines (`#` comments allowed).
pub fn read_correspondences(path: impl AsRef<Path>) -> Result<Vec<(Point3, Point3)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MalformedLine {
                line_no: i + 1,
                reason: "non-numeric field".into(),
            })?;
        if v.len() < 6 {
            return Err(Error::MalformedLine {
                line_no: i + 1,
                reason: format!("expected 6 fields, got {}", v.len()),
            });
        }
        out.push((Point3::new(v[0], v[1], v[2]), Point3::new(v[3], v[4], v[5])));
    }
    Ok(out)
}

/// Writes pairs in the format [`read_correspondences`] reads.
pub fn write_correspondences(path: impl AsRef<Path>, pairs: &[(Point3, Point3)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# moving_x moving_y moving_z reference_x reference_y reference_z").map_err(io)?;
    for (a, b) in pairs {
        writeln!(w, "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6}", a.x, a.y, a.z, b.x, b.y, b.z).map_err(io)?;
    }
    w.flush().map_err(io)
}
