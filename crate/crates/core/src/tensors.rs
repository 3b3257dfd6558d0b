//! Dense series and the TQKD tensor-dump format.
//!
//! A TQKD file is a fixed 28-byte little-endian header followed by a
//! row-major `f32` payload laid out as `[layer][head][t][dim]`:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"TQKD"`                         |
//! | 4      | 4    | version (`u32`, always 1)               |
//! | 8      | 4    | `num_layers`                            |
//! | 12     | 4    | `num_heads`                             |
//! | 16     | 4    | `seq_len`                               |
//! | 20     | 4    | `head_dim`                              |
//! | 24     | 1    | tensor kind (0 queries, 1 keys, 2 hidden) |
//! | 25     | 3    | reserved, zero                          |
//!
//! Optional metadata lives in a JSON sidecar next to the dump, named by
//! replacing the extension with `.meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};

pub const MAGIC: [u8; 4] = *b"TQKD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

/// Dense row-major matrix of finite values; rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    data: Vec<f64>,
    rows: usize,
    dim: usize,
}

impl Series {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::Invariant(format!(
                "series must be non-empty, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(Error::Shape {
                expected: rows * dim,
                found: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Series { data, rows, dim })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Series::new(rows.len(), dim, data)
    }

    pub fn from_fn(
        rows: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * dim);
        for t in 0..rows {
            for j in 0..dim {
                data.push(f(t, j));
            }
        }
        Series::new(rows, dim, data)
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Keep only rows in `range`.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.rows {
            return Err(Error::Bounds {
                what: "row range end",
                index: range.end,
                limit: self.rows,
            });
        }
        let data = self.data[range.start * self.dim..range.end * self.dim].to_vec();
        Ok(Series {
            data,
            rows: range.len(),
            dim: self.dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Queries,
    Keys,
    Hidden,
}

impl TensorKind {
    pub fn code(self) -> u8 {
        match self {
            TensorKind::Queries => 0,
            TensorKind::Keys => 1,
            TensorKind::Hidden => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TensorKind::Queries),
            1 => Ok(TensorKind::Keys),
            2 => Ok(TensorKind::Hidden),
            other => Err(Error::Format(format!("unknown tensor kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TensorKind::Queries => "queries",
            TensorKind::Keys => "keys",
            TensorKind::Hidden => "hidden",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub num_layers: u32,
    pub num_heads: u32,
    pub seq_len: u32,
    pub head_dim: u32,
    pub kind: TensorKind,
}

impl DumpHeader {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("seq_len", self.seq_len),
            ("head_dim", self.head_dim),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::Invariant(format!("{name} must be positive")));
            }
        }
        if self.kind != TensorKind::Hidden && !self.head_dim.is_multiple_of(2) {
            return Err(Error::Invariant(format!(
                "head_dim must be even for {} dumps, got {}",
                self.kind.name(),
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Number of `f32` values in the payload.
    pub fn value_count(&self) -> usize {
        self.num_layers as usize
            * self.num_heads as usize
            * self.seq_len as usize
            * self.head_dim as usize
    }

    pub fn payload_len(&self) -> usize {
        self.value_count() * 4
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.num_layers.to_le_bytes());
        out[12..16].copy_from_slice(&self.num_heads.to_le_bytes());
        out[16..20].copy_from_slice(&self.seq_len.to_le_bytes());
        out[20..24].copy_from_slice(&self.head_dim.to_le_bytes());
        out[24] = self.kind.code();
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if bytes[25..28] != [0, 0, 0] {
            return Err(Error::Format("reserved header bytes must be zero".into()));
        }
        let header = DumpHeader {
            num_layers: word(8),
            num_heads: word(12),
            seq_len: word(16),
            head_dim: word(20),
            kind: TensorKind::from_code(bytes[24])?,
        };
        header.validate()?;
        Ok(header)
    }
}

/// Free-form sidecar metadata. Known keys are typed; anything else is kept
/// verbatim in `extra`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_heads: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDump {
    header: DumpHeader,
    payload: Vec<f32>,
    pub metadata: Option<Metadata>,
}

impl TensorDump {
    pub fn new(header: DumpHeader, payload: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if payload.len() != header.value_count() {
            return Err(Error::Shape {
                expected: header.value_count(),
                found: payload.len(),
            });
        }
        if let Some(index) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(TensorDump {
            header,
            payload,
            metadata: None,
        })
    }

    /// Build a dump from per-(layer, head) series, given in layer-major order.
    pub fn from_heads(
        kind: TensorKind,
        num_layers: usize,
        num_heads: usize,
        heads: &[Series],
    ) -> Result<Self> {
        if heads.len() != num_layers * num_heads {
            return Err(Error::Shape {
                expected: num_layers * num_heads,
                found: heads.len(),
            });
        }
        let first = heads
            .first()
            .ok_or_else(|| Error::Invariant("dump needs at least one head".into()))?;
        let (seq_len, head_dim) = (first.row_count(), first.dim());
        let mut payload = Vec::with_capacity(heads.len() * seq_len * head_dim);
        for s in heads {
            if s.row_count() != seq_len || s.dim() != head_dim {
                return Err(Error::Shape {
                    expected: seq_len * head_dim,
                    found: s.row_count() * s.dim(),
                });
            }
            payload.extend(s.as_slice().iter().map(|&v| v as f32));
        }
        let header = DumpHeader {
            num_layers: to_u32(num_layers)?,
            num_heads: to_u32(num_heads)?,
            seq_len: to_u32(seq_len)?,
            head_dim: to_u32(head_dim)?,
            kind,
        };
        TensorDump::new(header, payload)
    }

    pub fn with_metadata(mut self, metadata: Metadata) -> Self {
        self.metadata = Some(metadata);
        self
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn kind(&self) -> TensorKind {
        self.header.kind
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers as usize
    }

    pub fn num_heads(&self) -> usize {
        self.header.num_heads as usize
    }

    pub fn seq_len(&self) -> usize {
        self.header.seq_len as usize
    }

    pub fn head_dim(&self) -> usize {
        self.header.head_dim as usize
    }

    pub fn payload(&self) -> &[f32] {
        &self.payload
    }

    fn head_offset(&self, layer: usize, head: usize) -> usize {
        (layer * self.num_heads() + head) * self.seq_len() * self.head_dim()
    }

    /// Copy the `seq_len x head_dim` block for one (layer, head).
    pub fn slice_head(&self, layer: usize, head: usize) -> Result<Series> {
        check_index("layer", layer, self.num_layers())?;
        check_index("head", head, self.num_heads())?;
        let start = self.head_offset(layer, head);
        let len = self.seq_len() * self.head_dim();
        let data = self.payload[start..start + len]
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        Series::new(self.seq_len(), self.head_dim(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.header.payload_len());
        out.extend_from_slice(&self.header.to_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = DumpHeader::parse(bytes)?;
        let body = &bytes[HEADER_LEN..];
        let expected = header.payload_len();
        if body.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: body.len(),
            });
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        TensorDump::new(header, payload)
    }
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invariant(format!("count {n} exceeds u32")))
}

/// `foo/bar.tqkd` -> `foo/bar.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<TensorDump> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut dump = TensorDump::from_bytes(&bytes)?;
    let sidecar = sidecar_path(path);
    if sidecar.is_file() {
        let text = fs::read_to_string(&sidecar)?;
        dump.metadata = Some(serde_json::from_str(&text)?);
    }
    Ok(dump)
}

pub fn write_dump(dump: &TensorDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    dump.header.validate()?;
    fs::write(path, dump.to_bytes())?;
    if let Some(meta) = &dump.metadata {
        let mut text = serde_json::to_string_pretty(meta)?;
        text.push('\n');
        fs::write(sidecar_path(path), text)?;
    }
    Ok(())
}
