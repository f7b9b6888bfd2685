//! BTEN: a minimal little-endian container of named tensors.
//!
//! ```text
//! "BTEN" | version: u8 = 1 | count: u32
//! per entry:
//!   name_len: u16 | name: UTF-8 | dtype: u8 | rank: u8 | extents: u32 × rank
//!   payload: row-major, little-endian
//! ```
//! dtype codes: 0 = f32, 1 = f64, 2 = u8, 3 = i32.

use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTEN";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    I32 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bitwise_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            (TensorData::I32(a), TensorData::I32(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtenEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl BtenEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = shape.iter().product();
        contract!(
            numel == data.len(),
            "entry shape {shape:?} implies {numel} elements, payload has {}",
            data.len()
        );
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn f64(name: impl Into<String>, tensor: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: TensorData::F64(tensor.data().to_vec()),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(name, shape, TensorData::U8(data))
    }

    pub fn i32(name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(name, shape, TensorData::I32(data))
    }

    /// Converts any dtype to an `f64` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
        };
        let shape = if self.shape.is_empty() {
            vec![1]
        } else {
            self.shape.clone()
        };
        Tensor::new(shape, data)
    }

    pub fn bitwise_eq(&self, other: &BtenEntry) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bitwise_eq(&other.data)
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 2 + 4 * self.shape.len() + self.data.len() * self.data.dtype().size()
    }
}

pub fn header_len() -> usize {
    MAGIC.len() + 1 + 4
}

pub fn encode(entries: &[BtenEntry]) -> Result<Vec<u8>> {
    contract!(
        u32::try_from(entries.len()).is_ok(),
        "too many entries: {}",
        entries.len()
    );
    let total = header_len() + entries.iter().map(BtenEntry::encoded_len).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (i, e) in entries.iter().enumerate() {
        contract!(
            !entries[..i].iter().any(|p| p.name == e.name),
            "duplicate entry name `{}`",
            e.name
        );
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Contract(format!("entry name too long: {} bytes", e.name.len())))?;
        let rank =
            u8::try_from(e.shape.len()).map_err(|_| Error::Contract(format!("rank {} exceeds 255", e.shape.len())))?;
        let numel: usize = e.shape.iter().product();
        contract!(numel == e.data.len(), "entry `{}` shape/payload mismatch", e.name);
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype() as u8);
        out.push(rank);
        for &extent in &e.shape {
            let extent = u32::try_from(extent).map_err(|_| Error::Contract(format!("extent {extent} exceeds u32")))?;
            out.extend_from_slice(&extent.to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {remaining} left"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a BTEN byte buffer. Every failure names the byte offset at which
/// it was detected.
pub fn decode(bytes: &[u8]) -> Result<Vec<BtenEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic (expected \"BTEN\")".into(),
        });
    }
    r.pos = MAGIC.len();
    let version_at = r.pos;
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")? as usize;
    // Each entry needs at least 4 bytes, so a count beyond that is corrupt;
    // checking it first keeps allocation bounded by the input size.
    if count > (bytes.len() - r.pos) / 4 {
        return Err(Error::Format {
            offset: r.pos - 4,
            msg: format!("entry count {count} exceeds what the remaining bytes can hold"),
        });
    }
    let mut entries: Vec<BtenEntry> = Vec::with_capacity(count);
    for _ in 0..count {
        let entry_at = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Format {
                offset: name_at + e.valid_up_to(),
                msg: "entry name is not UTF-8".into(),
            })?
            .to_string();
        if entries.iter().any(|e| e.name == name) {
            return Err(Error::Format {
                offset: entry_at,
                msg: format!("duplicate entry name `{name}`"),
            });
        }
        let dtype_at = r.pos;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format {
            offset: dtype_at,
            msg: format!("unknown dtype code {code}"),
        })?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let extent_at = r.pos;
            let extent = r.u32("extent")? as usize;
            numel = numel.checked_mul(extent).ok_or_else(|| Error::Format {
                offset: extent_at,
                msg: "element count overflows".into(),
            })?;
            shape.push(extent);
        }
        let payload_at = r.pos;
        let nbytes = numel.checked_mul(dtype.size()).ok_or_else(|| Error::Format {
            offset: payload_at,
            msg: "payload size overflows".into(),
        })?;
        let raw = r.take(nbytes, "payload")?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(raw.to_vec()),
            DType::I32 => TensorData::I32(
                raw.chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        entries.push(BtenEntry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn write_bten(path: impl AsRef<Path>, entries: &[BtenEntry]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bten(path: impl AsRef<Path>) -> Result<Vec<BtenEntry>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Finds an entry by name.
pub fn find<'a>(entries: &'a [BtenEntry], name: &str) -> Result<&'a BtenEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Data(format!("missing BTEN entry `{name}`")))
}
