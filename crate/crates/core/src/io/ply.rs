//! Minimal PLY reader (ascii and binary little-endian) and binary
//! little-endian writer. Scalar properties are held as `f64`, which is exact
//! for every PLY scalar type.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
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

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend((v as i16).to_le_bytes()),
            Self::U16 => out.extend((v as u16).to_le_bytes()),
            Self::I32 => out.extend((v as i32).to_le_bytes()),
            Self::U32 => out.extend((v as u32).to_le_bytes()),
            Self::F32 => out.extend((v as f32).to_le_bytes()),
            Self::F64 => out.extend(v.to_le_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyProperty {
    pub name: String,
    pub ty: ScalarType,
    /// Count type for list properties. Lists are read and discarded.
    pub list_count: Option<ScalarType>,
}

impl PlyProperty {
    pub fn scalar(name: impl Into<String>, ty: ScalarType) -> Self {
        Self {
            name: name.into(),
            ty,
            list_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyElement {
    pub name: String,
    pub properties: Vec<PlyProperty>,
    /// Row-major scalar values, one entry per scalar property.
    pub rows: Vec<Vec<f64>>,
}

impl PlyElement {
    pub fn new(name: impl Into<String>, properties: Vec<PlyProperty>) -> Self {
        Self {
            name: name.into(),
            properties,
            rows: Vec::new(),
        }
    }

    /// Column position of a scalar property within each row.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties
            .iter()
            .filter(|p| p.list_count.is_none())
            .position(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ply {
    pub elements: Vec<PlyElement>,
}

impl Ply {
    pub fn element(&self, name: &str) -> Option<&PlyElement> {
        self.elements.iter().find(|e| e.name == name)
    }
}

enum Format {
    Ascii,
    BinaryLe,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn read_ply(path: &Path) -> Result<Ply> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut lineno = 0;
    let mut next_line = |reader: &mut BufReader<std::fs::File>, line: &mut String| -> Result<usize> {
        line.clear();
        let n = reader.read_line(line).map_err(|e| Error::io(path, e))?;
        lineno += 1;
        if n == 0 {
            return Err(parse_err(path, lineno, "unexpected end of header"));
        }
        Ok(lineno)
    };
    let ln = next_line(&mut reader, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(parse_err(path, ln, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<(PlyElement, usize)> = Vec::new();
    loop {
        let ln = next_line(&mut reader, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", f, ..] => return Err(parse_err(path, ln, format!("unsupported ply format `{f}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| parse_err(path, ln, "bad element count"))?;
                elements.push((PlyElement::new(*name, Vec::new()), count));
            }
            ["property", "list", ct, it, name] => {
                let (ct, it) = ScalarType::parse(ct)
                    .zip(ScalarType::parse(it))
                    .ok_or_else(|| parse_err(path, ln, "bad list property type"))?;
                let el = elements.last_mut().ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.0.properties.push(PlyProperty {
                    name: name.to_string(),
                    ty: it,
                    list_count: Some(ct),
                });
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| parse_err(path, ln, format!("bad property type `{ty}`")))?;
                let el = elements.last_mut().ok_or_else(|| parse_err(path, ln, "property before element"))?;
                el.0.properties.push(PlyProperty::scalar(*name, ty));
            }
            _ => return Err(parse_err(path, ln, format!("unrecognized header line `{}`", line.trim_end()))),
        }
    }
    let format = format.ok_or_else(|| parse_err(path, lineno, "missing format line"))?;
    let header_lines = lineno;
    match format {
        Format::BinaryLe => {
            let mut bytes = Vec::new();
            reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
            let mut pos = 0usize;
            let mut take = |n: usize| -> Result<&[u8]> {
                if pos + n > bytes.len() {
                    return Err(parse_err(path, header_lines, "binary body is truncated"));
                }
                pos += n;
                Ok(&bytes[pos - n..pos])
            };
            let mut out = Vec::new();
            for (mut el, count) in elements {
                el.rows.reserve(count);
                for _ in 0..count {
                    let mut row = Vec::with_capacity(el.properties.len());
                    for p in &el.properties {
                        match p.list_count {
                            None => row.push(p.ty.decode(take(p.ty.size())?)),
                            Some(ct) => {
                                let n = ct.decode(take(ct.size())?) as usize;
                                take(n * p.ty.size())?;
                            }
                        }
                    }
                    el.rows.push(row);
                }
                out.push(el);
            }
            Ok(Ply { elements: out })
        }
        Format::Ascii => {
            let mut rest = String::new();
            reader.read_to_string(&mut rest).map_err(|e| Error::io(path, e))?;
            let mut lines = rest.lines().enumerate();
            let mut out = Vec::new();
            for (mut el, count) in elements {
                for _ in 0..count {
                    let (i, l) = lines
                        .next()
                        .ok_or_else(|| parse_err(path, header_lines, "ascii body is truncated"))?;
                    let ln = header_lines + i + 1;
                    let mut toks = l.split_whitespace();
                    let mut num = || -> Result<f64> {
                        toks.next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| parse_err(path, ln, "bad or missing value"))
                    };
                    let mut row = Vec::new();
                    for p in &el.properties {
                        match p.list_count {
                            None => row.push(num()?),
                            Some(_) => {
                                let n = num()? as usize;
                                for _ in 0..n {
                                    num()?;
                                }
                            }
                        }
                    }
                    el.rows.push(row);
                }
                out.push(el);
            }
            Ok(Ply { elements: out })
        }
    }
}

/// Writes binary little-endian. List properties are not supported.
pub fn write_ply(path: &Path, ply: &Ply) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    for el in &ply.elements {
        writeln!(out, "element {} {}", el.name, el.rows.len()).unwrap();
        for p in &el.properties {
            if p.list_count.is_some() {
                return Err(Error::Usage(format!("cannot write list property `{}`", p.name)));
            }
            writeln!(out, "property {} {}", p.ty.name(), p.name).unwrap();
        }
    }
    out.extend_from_slice(b"end_header\n");
    for el in &ply.elements {
        for row in &el.rows {
            if row.len() != el.properties.len() {
                return Err(Error::DimensionMismatch(format!(
                    "ply row has {} values for {} properties of `{}`",
                    row.len(),
                    el.properties.len(),
                    el.name
                )));
            }
            for (v, p) in row.iter().zip(&el.properties) {
                p.ty.encode(*v, &mut out);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ply");
        let mut v = PlyElement::new(
            "vertex",
            vec![
                PlyProperty::scalar("x", ScalarType::F64),
                PlyProperty::scalar("f", ScalarType::F32),
                PlyProperty::scalar("red", ScalarType::U8),
                PlyProperty::scalar("i", ScalarType::I32),
            ],
        );
        v.rows.push(vec![0.1 + 0.2, 0.5, 255.0, -7.0]);
        v.rows.push(vec![-1e-300, -2.25, 0.0, 123456.0]);
        let ply = Ply { elements: vec![v, PlyElement::new("empty", vec![PlyProperty::scalar("a", ScalarType::U16)])] };
        write_ply(&path, &ply).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back, ply);
    }

    #[test]
    fn ascii_with_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty uchar red\n\
             element face 1\nproperty list uchar int vertex_indices\nend_header\n1.5 3\n-2 255\n3 0 1 1\n",
        )
        .unwrap();
        let ply = read_ply(&path).unwrap();
        assert_eq!(ply.element("vertex").unwrap().rows, vec![vec![1.5, 3.0], vec![-2.0, 255.0]]);
        assert_eq!(ply.element("face").unwrap().rows.len(), 1);
    }

    #[test]
    fn truncated_binary_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        std::fs::write(&path, b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty double x\nend_header\n\0\0\0\0").unwrap();
        assert!(matches!(read_ply(&path), Err(Error::Parse { .. })));
        assert!(matches!(read_ply(&dir.path().join("none.ply")), Err(Error::MissingFile(_))));
    }
}
