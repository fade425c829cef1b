//! Minimal PLY reader (ASCII header, binary little-endian body).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
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

#[derive(Clone, Debug, PartialEq)]
pub struct Property {
    pub name: String,
    pub ty: ScalarType,
    /// Count type for list properties.
    pub list: Option<ScalarType>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Element {
    pub name: String,
    pub count: usize,
    pub props: Vec<Property>,
    /// `rows[i][p]` holds one value for scalar properties, the items for lists.
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl Element {
    pub fn prop_index(&self, name: &str) -> Option<usize> {
        self.props.iter().position(|p| p.name == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.prop_index(name)?;
        Some(self.rows.iter().map(|r| r[k][0]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ply {
    pub elements: Vec<Element>,
}

impl Ply {
    pub fn element(&self, name: &str) -> Option<&Element> {
        self.elements.iter().find(|e| e.name == name)
    }
}

pub fn read(path: &Path) -> Result<Ply> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, path)
}

pub fn parse(bytes: &[u8], path: &Path) -> Result<Ply> {
    let mut elements: Vec<Element> = Vec::new();
    let mut pos = 0;
    let mut line_no = 0;
    let mut saw_format = false;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, format!("line {}: header not terminated", line_no + 1)))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::format(path, format!("line {}: header is not text", line_no + 1)))?
            .trim_end_matches('\r');
        pos += end + 1;
        line_no += 1;
        let bad = |msg: &str| Error::format(path, format!("line {line_no}: {msg}"));
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["ply"] if line_no == 1 => {}
            _ if line_no == 1 => return Err(bad("missing `ply` magic")),
            ["format", "binary_little_endian", _] => saw_format = true,
            ["format", other, _] => return Err(bad(&format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| bad("bad element count"))?,
                props: Vec::new(),
                rows: Vec::new(),
            }),
            ["property", "list", cty, ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    ty: ScalarType::parse(ty).ok_or_else(|| bad("unknown type"))?,
                    list: Some(ScalarType::parse(cty).ok_or_else(|| bad("unknown type"))?),
                });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| bad("property before element"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    ty: ScalarType::parse(ty).ok_or_else(|| bad("unknown type"))?,
                    list: None,
                });
            }
            ["end_header"] => break,
            _ => return Err(bad(&format!("unrecognised header line `{line}`"))),
        }
    }
    if !saw_format {
        return Err(Error::format(path, "missing format line"));
    }
    for el in &mut elements {
        el.rows.reserve(el.count);
        for _ in 0..el.count {
            let mut row = Vec::with_capacity(el.props.len());
            for p in &el.props {
                let take = |pos: &mut usize, ty: ScalarType| -> Result<f64> {
                    let n = ty.size();
                    if *pos + n > bytes.len() {
                        return Err(Error::format(path, format!("byte {}: unexpected end of data", *pos)));
                    }
                    let v = ty.read(&bytes[*pos..*pos + n]);
                    *pos += n;
                    Ok(v)
                };
                match p.list {
                    None => row.push(vec![take(&mut pos, p.ty)?]),
                    Some(cty) => {
                        let len = take(&mut pos, cty)?;
                        if !(len >= 0.0) {
                            return Err(Error::format(path, format!("byte {pos}: negative list length")));
                        }
                        let items = (0..len as usize).map(|_| take(&mut pos, p.ty)).collect::<Result<Vec<_>>>()?;
                        row.push(items);
                    }
                }
            }
            el.rows.push(row);
        }
    }
    Ok(Ply { elements })
}
