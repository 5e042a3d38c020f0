//! Point cloud file formats and checkpoint serialization.
//!
//! - XYZ: one point per line, three whitespace-separated decimals, extra
//!   columns ignored. Output uses `%.9g`-style formatting (9 significant
//!   digits), so XYZ round-trips to 9 significant digits.
//! - PLY: ascii and binary-little-endian, `vertex` element with
//!   float/double x, y, z; other properties are skipped. Output is
//!   binary-little-endian with double precision, which round-trips to the
//!   last ulp. A separate reader extracts triangle meshes (`face`
//!   elements) for point-to-surface references.
//! - Checkpoints: a small binary container with a magic string, an
//!   embedded format-version integer, and raw little-endian f64
//!   parameters; round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Point cloud file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Xyz,
    Ply,
}

impl PointFormat {
    /// Picks the format from a file extension (`.ply` vs everything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => Self::Ply,
            _ => Self::Xyz,
        }
    }
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed,
/// scientific notation for extreme exponents.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".to_string() } else { "0".to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    if !(-4..9).contains(&exp) {
        let s = format!("{:.8e}", x);
        let (mantissa, e) = s.split_once('e').unwrap();
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{e}")
    } else {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads a point cloud, erroring on malformed content or zero points.
pub fn read_point_cloud(path: &Path, format: PointFormat) -> Result<PointCloud> {
    match format {
        PointFormat::Xyz => read_xyz(path),
        PointFormat::Ply => read_ply(path),
    }
}

/// Writes a point cloud; the empty cloud is rejected.
pub fn write_point_cloud(cloud: &PointCloud, path: &Path, format: PointFormat) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    match format {
        PointFormat::Xyz => write_xyz(cloud, path),
        PointFormat::Ply => write_ply(cloud, path),
    }
}

fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coord = [0.0f64; 3];
        for c in &mut coord {
            let tok = it
                .next()
                .ok_or_else(|| parse_err(path, lineno + 1, "expected three coordinates"))?;
            *c = tok
                .parse::<f64>()
                .map_err(|e| parse_err(path, lineno + 1, format!("bad number `{tok}`: {e}")))?;
        }
        points.push(Vec3::new(coord[0], coord[1], coord[2]));
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new(points)
}

fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", format_g9(p.x), format_g9(p.y), format_g9(p.z))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarType {
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
    fn parse(tok: &str) -> Option<Self> {
        Some(match tok {
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

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Self::I8 => bytes[0] as i8 as f64,
            Self::U8 => bytes[0] as f64,
            Self::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Self::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(ScalarType, String),
    List(ScalarType, ScalarType, String),
}

#[derive(Debug, Clone)]
struct ElementDecl {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

struct PlyHeader {
    encoding: PlyEncoding,
    elements: Vec<ElementDecl>,
    /// Byte offset of the first data byte.
    data_start: usize,
    /// Line count of the header, for error offsets in ascii files.
    header_lines: usize,
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    lineno: usize,
}

impl HeaderCursor<'_> {
    fn next_line(&mut self, path: &Path) -> Result<String> {
        if self.pos >= self.bytes.len() {
            return Err(parse_err(path, self.lineno, "unexpected end of header"));
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        let line = String::from_utf8_lossy(&self.bytes[start..self.pos])
            .trim_end_matches('\r')
            .trim()
            .to_string();
        self.pos += 1; // consume the newline
        self.lineno += 1;
        Ok(line)
    }
}

fn parse_ply_header(path: &Path, bytes: &[u8]) -> Result<PlyHeader> {
    let mut cursor = HeaderCursor {
        bytes,
        pos: 0,
        lineno: 0,
    };
    if cursor.next_line(path)? != "ply" {
        return Err(parse_err(path, 1, "missing `ply` magic"));
    }
    let mut encoding = None;
    let mut elements: Vec<ElementDecl> = Vec::new();
    loop {
        let line = cursor.next_line(path)?;
        let lineno = cursor.lineno;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("format") => {
                encoding = match tokens.next() {
                    Some("ascii") => Some(PlyEncoding::Ascii),
                    Some("binary_little_endian") => Some(PlyEncoding::BinaryLittleEndian),
                    Some(other) => {
                        return Err(parse_err(
                            path,
                            lineno,
                            format!("unsupported ply format `{other}`"),
                        ))
                    }
                    None => return Err(parse_err(path, lineno, "format line missing encoding")),
                };
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| parse_err(path, lineno, "element missing name"))?;
                let count = tokens
                    .next()
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(path, lineno, "element missing count"))?;
                elements.push(ElementDecl {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, lineno, "property before any element"))?;
                let first = tokens
                    .next()
                    .ok_or_else(|| parse_err(path, lineno, "property missing type"))?;
                if first == "list" {
                    let count_ty = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| parse_err(path, lineno, "bad list count type"))?;
                    let item_ty = tokens
                        .next()
                        .and_then(ScalarType::parse)
                        .ok_or_else(|| parse_err(path, lineno, "bad list item type"))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "list property missing name"))?;
                    element
                        .properties
                        .push(Property::List(count_ty, item_ty, name.to_string()));
                } else {
                    let ty = ScalarType::parse(first)
                        .ok_or_else(|| parse_err(path, lineno, format!("bad type `{first}`")))?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| parse_err(path, lineno, "property missing name"))?;
                    element
                        .properties
                        .push(Property::Scalar(ty, name.to_string()));
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("unexpected header line `{other}`"),
                ))
            }
        }
    }
    let encoding =
        encoding.ok_or_else(|| parse_err(path, cursor.lineno, "missing format line"))?;
    Ok(PlyHeader {
        encoding,
        elements,
        data_start: cursor.pos,
        header_lines: cursor.lineno,
    })
}

/// Per-row values of the named scalar properties (lists are returned too,
/// keyed by name).
struct RowReader<'a> {
    encoding: PlyEncoding,
    bytes: &'a [u8],
    cursor: usize,
    lineno: usize,
    path: &'a Path,
}

impl<'a> RowReader<'a> {
    fn read_binary(&mut self, ty: ScalarType) -> Result<f64> {
        let size = ty.size();
        if self.cursor + size > self.bytes.len() {
            return Err(parse_err(
                self.path,
                0,
                format!("unexpected end of binary data at byte {}", self.cursor),
            ));
        }
        let v = ty.read_le(&self.bytes[self.cursor..]);
        self.cursor += size;
        Ok(v)
    }

    fn ascii_line(&mut self) -> Result<Vec<f64>> {
        loop {
            if self.cursor >= self.bytes.len() {
                return Err(parse_err(self.path, self.lineno, "unexpected end of data"));
            }
            let start = self.cursor;
            while self.cursor < self.bytes.len() && self.bytes[self.cursor] != b'\n' {
                self.cursor += 1;
            }
            let line = String::from_utf8_lossy(&self.bytes[start..self.cursor]);
            self.cursor += 1;
            self.lineno += 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut out = Vec::new();
            for tok in line.split_whitespace() {
                out.push(tok.parse::<f64>().map_err(|e| {
                    parse_err(self.path, self.lineno, format!("bad number `{tok}`: {e}"))
                })?);
            }
            return Ok(out);
        }
    }

    /// Reads one row of `element`, returning the values of scalar
    /// properties in declaration order (lists are skipped) plus the lists
    /// by property index.
    fn read_row(&mut self, element: &ElementDecl) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut scalars = Vec::new();
        let mut lists = Vec::new();
        match self.encoding {
            PlyEncoding::Ascii => {
                let tokens = self.ascii_line()?;
                let mut it = tokens.into_iter();
                let mut take = |ctx: &str, lineno: usize, path: &Path| -> Result<f64> {
                    it.next()
                        .ok_or_else(|| parse_err(path, lineno, format!("missing {ctx}")))
                };
                for prop in &element.properties {
                    match prop {
                        Property::Scalar(_, _) => {
                            scalars.push(take("value", self.lineno, self.path)?)
                        }
                        Property::List(_, _, _) => {
                            let n = take("list count", self.lineno, self.path)? as usize;
                            let mut items = Vec::with_capacity(n);
                            for _ in 0..n {
                                items.push(take("list item", self.lineno, self.path)?);
                            }
                            lists.push(items);
                        }
                    }
                }
            }
            PlyEncoding::BinaryLittleEndian => {
                for prop in &element.properties {
                    match prop {
                        Property::Scalar(ty, _) => scalars.push(self.read_binary(*ty)?),
                        Property::List(cty, ity, _) => {
                            let n = self.read_binary(*cty)? as usize;
                            let mut items = Vec::with_capacity(n);
                            for _ in 0..n {
                                items.push(self.read_binary(*ity)?);
                            }
                            lists.push(items);
                        }
                    }
                }
            }
        }
        Ok((scalars, lists))
    }
}

fn ply_rows(path: &Path, bytes: &[u8], wanted: &str) -> Result<(ElementDecl, Vec<(Vec<f64>, Vec<Vec<f64>>)>)> {
    let header = parse_ply_header(path, bytes)?;
    let mut reader = RowReader {
        encoding: header.encoding,
        bytes,
        cursor: header.data_start,
        lineno: header.header_lines,
        path,
    };
    for element in &header.elements {
        let is_wanted = element.name == wanted;
        let mut rows = Vec::new();
        for _ in 0..element.count {
            let row = reader.read_row(element)?;
            if is_wanted {
                rows.push(row);
            }
        }
        if is_wanted {
            return Ok((element.clone(), rows));
        }
    }
    Err(parse_err(
        path,
        header.header_lines,
        format!("no `{wanted}` element in ply file"),
    ))
}

fn scalar_position(element: &ElementDecl, name: &str) -> Option<usize> {
    element
        .properties
        .iter()
        .filter_map(|p| match p {
            Property::Scalar(_, n) => Some(n.as_str()),
            Property::List(_, _, _) => None,
        })
        .position(|n| n == name)
}

fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    let (element, rows) = ply_rows(path, &bytes, "vertex")?;
    let x = scalar_position(&element, "x");
    let y = scalar_position(&element, "y");
    let z = scalar_position(&element, "z");
    let (x, y, z) = match (x, y, z) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => {
            return Err(parse_err(
                path,
                0,
                "vertex element lacks x, y, z properties",
            ))
        }
    };
    if rows.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let points = rows
        .into_iter()
        .map(|(scalars, _)| Vec3::new(scalars[x], scalars[y], scalars[z]))
        .collect();
    PointCloud::new(points)
}

fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )?;
    for p in cloud.points() {
        w.write_all(&p.x.to_le_bytes())?;
        w.write_all(&p.y.to_le_bytes())?;
        w.write_all(&p.z.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a triangle mesh from a PLY file (`vertex` + `face` elements);
/// polygons are fan-triangulated.
pub fn read_triangle_mesh_ply(path: &Path) -> Result<Vec<[Vec3; 3]>> {
    let bytes = std::fs::read(path)?;
    let cloud = read_ply(path)?;
    let vertices = cloud.points();
    let (face_el, rows) = ply_rows(path, &bytes, "face")?;
    let list_idx = face_el
        .properties
        .iter()
        .filter(|p| matches!(p, Property::List(_, _, _)))
        .position(|p| matches!(p, Property::List(_, _, n) if n == "vertex_indices" || n == "vertex_index"))
        .ok_or_else(|| parse_err(path, 0, "face element lacks a vertex index list"))?;
    let mut triangles = Vec::new();
    for (_, lists) in rows {
        let idx = &lists[list_idx];
        if idx.len() < 3 {
            continue;
        }
        let fetch = |v: f64| -> Result<Vec3> {
            let i = v as usize;
            vertices
                .get(i)
                .copied()
                .ok_or_else(|| parse_err(path, 0, format!("face references vertex {i} out of range")))
        };
        let a = fetch(idx[0])?;
        for w in idx[1..].windows(2) {
            triangles.push([a, fetch(w[0])?, fetch(w[1])?]);
        }
    }
    if triangles.is_empty() {
        return Err(parse_err(path, 0, "mesh has no triangles"));
    }
    Ok(triangles)
}

/// Binary checkpoint container.
///
/// Layout: 8-byte magic, u32 format version, u8 payload kind, payload.
/// All multi-byte values are little-endian; parameters are raw f64 bits,
/// so write/read round-trips are bit-exact.
pub mod ckpt {
    use super::*;
    use crate::nn::{Activation, LayerSpec, Link, LinkKind, MlpModel, MlpSpec};
    use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

    pub const MAGIC: &[u8; 8] = b"UDFCKPT\0";
    pub const FORMAT_VERSION: u32 = 1;

    /// Payload kind tags.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Kind {
        Mlp = 1,
        Ldi = 2,
        Field = 3,
    }

    pub fn write_header(w: &mut impl Write, kind: Kind) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u8(kind as u8)?;
        Ok(())
    }

    pub fn read_header(r: &mut impl Read) -> Result<Kind> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidArgument(
                "not a checkpoint file (bad magic)".to_string(),
            ));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        match r.read_u8()? {
            1 => Ok(Kind::Mlp),
            2 => Ok(Kind::Ldi),
            3 => Ok(Kind::Field),
            k => Err(Error::InvalidArgument(format!(
                "unknown checkpoint kind {k}"
            ))),
        }
    }

    pub fn expect_kind(r: &mut impl Read, want: Kind) -> Result<()> {
        let got = read_header(r)?;
        if got != want {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {got:?}, expected {want:?}"
            )));
        }
        Ok(())
    }

    pub fn write_mlp(w: &mut impl Write, model: &MlpModel) -> Result<()> {
        let spec = model.spec();
        w.write_u32::<LittleEndian>(spec.layers.len() as u32)?;
        for layer in &spec.layers {
            w.write_u32::<LittleEndian>(layer.in_dim as u32)?;
            w.write_u32::<LittleEndian>(layer.out_dim as u32)?;
            w.write_u8(match layer.activation {
                Activation::Relu => 0,
                Activation::Linear => 1,
            })?;
        }
        w.write_u32::<LittleEndian>(spec.links.len() as u32)?;
        for link in &spec.links {
            w.write_u32::<LittleEndian>(link.from as u32)?;
            w.write_u32::<LittleEndian>(link.to as u32)?;
            w.write_u8(match link.kind {
                LinkKind::Add => 0,
                LinkKind::Concat => 1,
            })?;
        }
        w.write_u64::<LittleEndian>(model.params().len() as u64)?;
        for &p in model.params() {
            w.write_f64::<LittleEndian>(p)?;
        }
        Ok(())
    }

    pub fn read_mlp(r: &mut impl Read) -> Result<MlpModel> {
        let n_layers = r.read_u32::<LittleEndian>()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.read_u32::<LittleEndian>()? as usize;
            let out_dim = r.read_u32::<LittleEndian>()? as usize;
            let activation = match r.read_u8()? {
                0 => Activation::Relu,
                1 => Activation::Linear,
                a => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown activation tag {a}"
                    )))
                }
            };
            layers.push(LayerSpec {
                in_dim,
                out_dim,
                activation,
            });
        }
        let n_links = r.read_u32::<LittleEndian>()? as usize;
        let mut links = Vec::with_capacity(n_links);
        for _ in 0..n_links {
            let from = r.read_u32::<LittleEndian>()? as usize;
            let to = r.read_u32::<LittleEndian>()? as usize;
            let kind = match r.read_u8()? {
                0 => LinkKind::Add,
                1 => LinkKind::Concat,
                k => return Err(Error::InvalidArgument(format!("unknown link tag {k}"))),
            };
            links.push(Link { from, to, kind });
        }
        let n_params = r.read_u64::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(r.read_f64::<LittleEndian>()?);
        }
        MlpModel::from_params(MlpSpec { layers, links }, params)
    }

    pub fn write_vec3(w: &mut impl Write, v: &Vec3) -> Result<()> {
        w.write_f64::<LittleEndian>(v.x)?;
        w.write_f64::<LittleEndian>(v.y)?;
        w.write_f64::<LittleEndian>(v.z)?;
        Ok(())
    }

    pub fn read_vec3(r: &mut impl Read) -> Result<Vec3> {
        Ok(Vec3::new(
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
        ))
    }

    pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
        w.write_f64::<LittleEndian>(v)?;
        Ok(())
    }

    pub fn read_f64(r: &mut impl Read) -> Result<f64> {
        Ok(r.read_f64::<LittleEndian>()?)
    }

    pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
        w.write_u32::<LittleEndian>(v)?;
        Ok(())
    }

    pub fn read_u32(r: &mut impl Read) -> Result<u32> {
        Ok(r.read_u32::<LittleEndian>()?)
    }

    pub fn write_u8(w: &mut impl Write, v: u8) -> Result<()> {
        w.write_u8(v)?;
        Ok(())
    }

    pub fn read_u8(r: &mut impl Read) -> Result<u8> {
        Ok(r.read_u8()?)
    }
}
