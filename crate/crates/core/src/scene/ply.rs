//! Minimal PLY reader/writer for the binary little-endian flavour used by
//! Gaussian-splatting checkpoints and labelled point clouds.
//!
//! Only scalar properties are decoded into columns. List properties (mesh
//! faces and the like) are parsed far enough to be skipped.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlyError {
    #[error("not a PLY file (missing magic)")]
    Magic,
    #[error("header: {0}")]
    Header(String),
    #[error("unsupported PLY format `{0}` (only binary_little_endian 1.0)")]
    UnsupportedFormat(String),
    #[error("element `{0}` not present")]
    MissingElement(String),
    #[error("element `{element}` has no property `{property}`")]
    MissingProperty { element: String, property: String },
    #[error("truncated body: element `{element}` needs more data")]
    Truncated { element: String },
    #[error("element `{element}` row {row}: invalid `{property}`")]
    InvalidValue { element: String, row: usize, property: &'static str },
}

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

    pub fn name(self) -> &'static str {
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

    pub fn size(self) -> usize {
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
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn encode(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Self::I8 => out.push(v as i8 as u8),
            Self::U8 => out.push(v as u8),
            Self::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            Self::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            Self::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            Self::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            Self::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Self::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PropertyKind {
    Scalar(ScalarType),
    List { count: ScalarType, item: ScalarType },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyDef {
    pub name: String,
    pub kind: PropertyKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementDef {
    pub name: String,
    pub count: usize,
    pub properties: Vec<PropertyDef>,
}

impl ElementDef {
    /// Row size in bytes when the element has only scalar properties.
    fn fixed_row_size(&self) -> Option<usize> {
        self.properties
            .iter()
            .map(|p| match p.kind {
                PropertyKind::Scalar(t) => Some(t.size()),
                PropertyKind::List { .. } => None,
            })
            .sum()
    }

    fn min_row_size(&self) -> usize {
        self.properties
            .iter()
            .map(|p| match p.kind {
                PropertyKind::Scalar(t) => t.size(),
                PropertyKind::List { count, .. } => count.size(),
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyHeader {
    pub elements: Vec<ElementDef>,
    pub comments: Vec<String>,
}

/// Decoded scalar columns of one element.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyTable {
    pub element: String,
    pub rows: usize,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Result<&[f64], PlyError> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| PlyError::MissingProperty {
                element: self.element.clone(),
                property: name.to_string(),
            })
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.columns.iter().any(|(n, _)| n == name)
    }
}

const MAX_HEADER: usize = 1 << 16;

/// Parses the ASCII header and returns it with the byte offset of the body.
pub fn parse_header(bytes: &[u8]) -> Result<(PlyHeader, usize), PlyError> {
    const END: &[u8] = b"end_header";
    if !bytes.starts_with(b"ply") {
        return Err(PlyError::Magic);
    }
    let limit = bytes.len().min(MAX_HEADER);
    let mut end = None;
    let mut line_start = 0;
    for i in 0..limit {
        if bytes[i] == b'\n' {
            let line = trim_cr(&bytes[line_start..i]);
            if line == END {
                end = Some(i + 1);
                break;
            }
            line_start = i + 1;
        }
    }
    let body = end.ok_or_else(|| PlyError::Header("missing end_header".into()))?;
    let text = std::str::from_utf8(&bytes[..body])
        .map_err(|_| PlyError::Header("header is not valid UTF-8".into()))?;

    let mut elements: Vec<ElementDef> = Vec::new();
    let mut comments = Vec::new();
    let mut format_seen = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let mut tok = line.split_whitespace();
        let Some(keyword) = tok.next() else { continue };
        match keyword {
            "ply" if lineno == 0 => {}
            "format" => {
                let fmt = tok.next().unwrap_or_default();
                let version = tok.next().unwrap_or_default();
                if fmt != "binary_little_endian" || version != "1.0" {
                    return Err(PlyError::UnsupportedFormat(format!("{fmt} {version}")));
                }
                format_seen = true;
            }
            "comment" | "obj_info" => comments.push(line[keyword.len()..].trim().to_string()),
            "element" => {
                let name = tok
                    .next()
                    .ok_or_else(|| PlyError::Header(format!("line {}: element without name", lineno + 1)))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| PlyError::Header(format!("line {}: bad element count", lineno + 1)))?;
                elements.push(ElementDef { name: name.to_string(), count, properties: Vec::new() });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header(format!("line {}: property before element", lineno + 1)))?;
                let bad = || PlyError::Header(format!("line {}: malformed property `{line}`", lineno + 1));
                let first = tok.next().ok_or_else(bad)?;
                let kind = if first == "list" {
                    let count = tok.next().and_then(ScalarType::parse).ok_or_else(bad)?;
                    let item = tok.next().and_then(ScalarType::parse).ok_or_else(bad)?;
                    PropertyKind::List { count, item }
                } else {
                    PropertyKind::Scalar(ScalarType::parse(first).ok_or_else(bad)?)
                };
                let name = tok.next().ok_or_else(bad)?;
                element.properties.push(PropertyDef { name: name.to_string(), kind });
            }
            "end_header" => break,
            other => return Err(PlyError::Header(format!("line {}: unknown keyword `{other}`", lineno + 1))),
        }
    }
    if !format_seen {
        return Err(PlyError::Header("missing format line".into()));
    }
    Ok((PlyHeader { elements, comments }, body))
}

fn trim_cr(line: &[u8]) -> &[u8] {
    line.strip_suffix(b"\r").unwrap_or(line)
}

/// Skips over one element's rows, returning the new offset.
fn skip_element(def: &ElementDef, bytes: &[u8], mut offset: usize) -> Result<usize, PlyError> {
    let truncated = || PlyError::Truncated { element: def.name.clone() };
    if let Some(row) = def.fixed_row_size() {
        let total = row.checked_mul(def.count).ok_or_else(truncated)?;
        let end = offset.checked_add(total).ok_or_else(truncated)?;
        return if end <= bytes.len() { Ok(end) } else { Err(truncated()) };
    }
    for _ in 0..def.count {
        for prop in &def.properties {
            match prop.kind {
                PropertyKind::Scalar(t) => offset += t.size(),
                PropertyKind::List { count, item } => {
                    let head = bytes.get(offset..offset + count.size()).ok_or_else(truncated)?;
                    let n = count.decode(head);
                    if !(0.0..=u32::MAX as f64).contains(&n) {
                        return Err(truncated());
                    }
                    offset += count.size() + n as usize * item.size();
                }
            }
            if offset > bytes.len() {
                return Err(truncated());
            }
        }
    }
    Ok(offset)
}

/// Decodes every scalar property of element `name` into `f64` columns.
pub fn read_table(bytes: &[u8], name: &str) -> Result<PlyTable, PlyError> {
    let (header, mut offset) = parse_header(bytes)?;
    for def in &header.elements {
        if def.name != name {
            offset = skip_element(def, bytes, offset)?;
            continue;
        }
        let truncated = || PlyError::Truncated { element: def.name.clone() };
        // Reject absurd counts before allocating anything.
        let min = def.min_row_size().max(1);
        if def.count.checked_mul(min).is_none_or(|n| n > bytes.len() - offset) {
            return Err(truncated());
        }
        let mut columns: Vec<(String, Vec<f64>)> = def
            .properties
            .iter()
            .filter(|p| matches!(p.kind, PropertyKind::Scalar(_)))
            .map(|p| (p.name.clone(), Vec::with_capacity(def.count)))
            .collect();
        for _ in 0..def.count {
            let mut col = 0;
            for prop in &def.properties {
                match prop.kind {
                    PropertyKind::Scalar(t) => {
                        let b = bytes.get(offset..offset + t.size()).ok_or_else(truncated)?;
                        columns[col].1.push(t.decode(b));
                        col += 1;
                        offset += t.size();
                    }
                    PropertyKind::List { count, item } => {
                        let head = bytes.get(offset..offset + count.size()).ok_or_else(truncated)?;
                        let n = count.decode(head);
                        if !(0.0..=u32::MAX as f64).contains(&n) {
                            return Err(truncated());
                        }
                        offset += count.size() + n as usize * item.size();
                        if offset > bytes.len() {
                            return Err(truncated());
                        }
                    }
                }
            }
        }
        return Ok(PlyTable { element: def.name.clone(), rows: def.count, columns });
    }
    Err(PlyError::MissingElement(name.to_string()))
}

/// Writes a single-element binary little-endian PLY.
///
/// `value(row, col)` supplies each cell; it is encoded with the column's type.
pub fn write_table<W: Write>(
    out: &mut W,
    element: &str,
    properties: &[(&str, ScalarType)],
    rows: usize,
    comment: Option<&str>,
    value: impl Fn(usize, usize) -> f64,
) -> std::io::Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    if let Some(c) = comment {
        header.push_str(&format!("comment {c}\n"));
    }
    header.push_str(&format!("element {element} {rows}\n"));
    for (name, t) in properties {
        header.push_str(&format!("property {} {name}\n", t.name()));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;

    let row_size: usize = properties.iter().map(|(_, t)| t.size()).sum();
    let mut buf = Vec::with_capacity(row_size * 1024);
    for row in 0..rows {
        for (col, (_, t)) in properties.iter().enumerate() {
            t.encode(value(row, col), &mut buf);
        }
        if buf.len() >= row_size * 1024 {
            out.write_all(&buf)?;
            buf.clear();
        }
    }
    out.write_all(&buf)?;
    Ok(())
}
