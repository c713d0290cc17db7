//! Minimal PLY reader/writer: one vertex element with named scalar
//! properties and an optional triangle face element.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyData {
    /// Vertex properties in header order.
    pub vertex_props: Vec<(String, Vec<f64>)>,
    pub faces: Vec<[u32; 3]>,
}

impl PlyData {
    pub fn vertex_count(&self) -> usize {
        self.vertex_props.first().map_or(0, |(_, v)| v.len())
    }

    pub fn prop(&self, name: &str) -> Option<&[f64]> {
        self.vertex_props
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn positions(&self) -> Option<Vec<[f64; 3]>> {
        let (x, y, z) = (self.prop("x")?, self.prop("y")?, self.prop("z")?);
        Some((0..x.len()).map(|i| [x[i], y[i], z[i]]).collect())
    }

    pub fn push_prop(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.vertex_props.push((name.into(), values));
    }

    pub fn from_positions(points: &[[f64; 3]]) -> Self {
        let mut d = Self::default();
        for (k, n) in ["x", "y", "z"].iter().enumerate() {
            d.push_prop(*n, points.iter().map(|p| p[k]).collect());
        }
        d
    }

    /// Binary little-endian output.
    pub fn write(&self, path: &Path, precision: Precision) -> Result<()> {
        let n = self.vertex_count();
        for (name, v) in &self.vertex_props {
            assert_eq!(v.len(), n, "property {name} has inconsistent length");
        }
        let ty = match precision {
            Precision::F32 => "float",
            Precision::F64 => "double",
        };
        let mut out = Vec::new();
        out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
        out.extend_from_slice(format!("element vertex {n}\n").as_bytes());
        for (name, _) in &self.vertex_props {
            out.extend_from_slice(format!("property {ty} {name}\n").as_bytes());
        }
        if !self.faces.is_empty() {
            out.extend_from_slice(format!("element face {}\n", self.faces.len()).as_bytes());
            out.extend_from_slice(b"property list uchar int vertex_indices\n");
        }
        out.extend_from_slice(b"end_header\n");
        for i in 0..n {
            for (_, v) in &self.vertex_props {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(v[i] as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v[i].to_le_bytes()),
                }
            }
        }
        for f in &self.faces {
            out.push(3);
            for idx in f {
                out.extend_from_slice(&(*idx as i32).to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse(&bytes, path)
    }
}

#[derive(Debug, Clone, Copy)]
enum Ty {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Ty {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Ty::I8,
            "uchar" | "uint8" => Ty::U8,
            "short" | "int16" => Ty::I16,
            "ushort" | "uint16" => Ty::U16,
            "int" | "int32" => Ty::I32,
            "uint" | "uint32" => Ty::U32,
            "float" | "float32" => Ty::F32,
            "double" | "float64" => Ty::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Ty::I8 | Ty::U8 => 1,
            Ty::I16 | Ty::U16 => 2,
            Ty::I32 | Ty::U32 | Ty::F32 => 4,
            Ty::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Ty::I8 => b[0] as i8 as f64,
            Ty::U8 => b[0] as f64,
            Ty::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Ty::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Ty::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Ty::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Ty::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Ty::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Prop {
    Scalar(String, Ty),
    List(String, Ty, Ty),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Prop>,
}

fn parse(bytes: &[u8], path: &Path) -> Result<PlyData> {
    let err = |line: usize, msg: &str| Error::parse(path, line, msg.to_string());
    // Locate the end of the header.
    let marker = b"end_header";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| err(0, "missing end_header"))?;
    let mut body_start = pos + marker.len();
    while body_start < bytes.len() && bytes[body_start] != b'\n' {
        body_start += 1;
    }
    body_start += 1;
    let header = std::str::from_utf8(&bytes[..pos]).map_err(|_| err(0, "header is not utf-8"))?;

    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _] => {
                binary = Some(match *fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    _ => return Err(err(i + 1, "unsupported PLY format")),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(i + 1, "bad element count"))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let (ct, it) = (
                    Ty::parse(ct).ok_or_else(|| err(i + 1, "bad list count type"))?,
                    Ty::parse(it).ok_or_else(|| err(i + 1, "bad list item type"))?,
                );
                elements
                    .last_mut()
                    .ok_or_else(|| err(i + 1, "property before element"))?
                    .props
                    .push(Prop::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let ty = Ty::parse(ty).ok_or_else(|| err(i + 1, "bad property type"))?;
                elements
                    .last_mut()
                    .ok_or_else(|| err(i + 1, "property before element"))?
                    .props
                    .push(Prop::Scalar(name.to_string(), ty));
            }
            _ => return Err(err(i + 1, "unrecognized header line")),
        }
    }
    let binary = binary.ok_or_else(|| err(0, "missing format line"))?;
    let body = &bytes[body_start.min(bytes.len())..];

    let mut data = PlyData::default();
    let mut reader: Box<dyn FnMut(Ty) -> Result<f64>> = if binary {
        let mut off = 0usize;
        Box::new(move |ty: Ty| {
            let n = ty.size();
            if off + n > body.len() {
                return Err(Error::parse(path, 0, "unexpected end of binary body"));
            }
            let v = ty.read_le(&body[off..off + n]);
            off += n;
            Ok(v)
        })
    } else {
        let text = std::str::from_utf8(body).map_err(|_| err(0, "ascii body is not utf-8"))?;
        let mut toks = text.split_whitespace();
        Box::new(move |_ty: Ty| {
            toks.next()
                .ok_or_else(|| Error::parse(path, 0, "unexpected end of ascii body"))?
                .parse::<f64>()
                .map_err(|_| Error::parse(path, 0, "bad ascii number"))
        })
    };

    for el in &elements {
        let is_vertex = el.name == "vertex";
        if is_vertex {
            for p in &el.props {
                if let Prop::Scalar(n, _) = p {
                    data.vertex_props.push((n.clone(), Vec::with_capacity(el.count)));
                }
            }
        }
        for _ in 0..el.count {
            let mut slot = 0;
            for p in &el.props {
                match p {
                    Prop::Scalar(_, ty) => {
                        let v = reader(*ty)?;
                        if is_vertex {
                            data.vertex_props[slot].1.push(v);
                            slot += 1;
                        }
                    }
                    Prop::List(name, ct, it) => {
                        let n = reader(*ct)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(reader(*it)? as u32);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            // Fan-triangulate polygons.
                            for k in 1..n.saturating_sub(1) {
                                data.faces.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_keeps_doubles() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        let mut d = PlyData::from_positions(&[[0.1, 0.2, 0.3], [1.0, -2.0, 1e-7]]);
        d.push_prop("us", vec![0.0, 3.0]);
        d.faces = vec![[0, 1, 1]];
        d.write(&p, Precision::F64).unwrap();
        assert_eq!(PlyData::read(&p).unwrap(), d);
    }

    #[test]
    fn reads_ascii_with_quads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        fs::write(
            &p,
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_index\nend_header\n0 0 0 1\n1 0 0 2\n1 1 0 3\n0 1 0 4\n4 0 1 2 3\n",
        )
        .unwrap();
        let d = PlyData::read(&p).unwrap();
        assert_eq!(d.vertex_count(), 4);
        assert_eq!(d.prop("red").unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn truncated_binary_body_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ply");
        fs::write(&p, b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nend_header\n\0\0\0\0").unwrap();
        assert!(PlyData::read(&p).is_err());
    }
}
