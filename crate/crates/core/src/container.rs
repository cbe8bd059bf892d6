//! Named-record binary container used for checkpoints and graph caches.
//!
//! ```text
//! magic   b"DGCRNCKPT\x01"
//! u32     record count
//! record  u32 name_len, name bytes, u8 dtype (0 f32, 1 f64, 2 utf8),
//!         u32 ndim, ndim x u32 dims, values little-endian
//! ```
//!
//! Text records have one dimension holding their byte length.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 10] = b"DGCRNCKPT\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Tensor(Dtype, Tensor),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    records: Vec<(String, Record)>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "tensor container",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn records(&self) -> &[(String, Record)] {
        &self.records
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, dtype: Dtype, tensor: Tensor) {
        self.records.push((name.into(), Record::Tensor(dtype, tensor)));
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.records.push((name.into(), Record::Text(text.into())));
    }

    fn find(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| fmt_err(format!("missing record {name:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.find(name)? {
            Record::Tensor(_, t) => Ok(t),
            Record::Text(_) => Err(fmt_err(format!("record {name:?} is text, expected a tensor"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.find(name)? {
            Record::Text(s) => Ok(s),
            Record::Tensor(..) => Err(fmt_err(format!("record {name:?} is a tensor, expected text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.records.len() as u32).to_le_bytes());
        for (name, rec) in &self.records {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            match rec {
                Record::Tensor(dtype, t) => {
                    out.push(match dtype {
                        Dtype::F32 => 0,
                        Dtype::F64 => 1,
                    });
                    out.extend((t.ndim() as u32).to_le_bytes());
                    for &d in t.shape() {
                        out.extend((d as u32).to_le_bytes());
                    }
                    for &v in t.data() {
                        match dtype {
                            Dtype::F32 => out.extend((v as f32).to_le_bytes()),
                            Dtype::F64 => out.extend(v.to_le_bytes()),
                        }
                    }
                }
                Record::Text(s) => {
                    out.push(2);
                    out.extend(1u32.to_le_bytes());
                    out.extend((s.len() as u32).to_le_bytes());
                    out.extend(s.as_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(fmt_err("bad magic header"));
        }
        let mut r = Reader {
            buf,
            pos: MAGIC.len(),
        };
        let count = r.u32()?;
        let mut records = Vec::with_capacity(count.min(4096) as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt_err("record name is not UTF-8"))?
                .to_string();
            let tag = r.u8()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| fmt_err(format!("record {name:?} shape overflows")))?;
            let rec = match tag {
                0 | 1 => {
                    let width = if tag == 0 { 4 } else { 8 };
                    let bytes = r.take(numel.checked_mul(width).ok_or_else(|| fmt_err("size overflow"))?)?;
                    let data: Vec<f64> = if tag == 0 {
                        bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                            .collect()
                    } else {
                        bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect()
                    };
                    let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("record {name:?}: {e}")))?;
                    Record::Tensor(if tag == 0 { Dtype::F32 } else { Dtype::F64 }, t)
                }
                2 => {
                    if ndim != 1 {
                        return Err(fmt_err(format!("text record {name:?} has {ndim} dims")));
                    }
                    let s = std::str::from_utf8(r.take(numel)?)
                        .map_err(|_| fmt_err(format!("text record {name:?} is not UTF-8")))?;
                    Record::Text(s.to_string())
                }
                t => return Err(fmt_err(format!("record {name:?} has unknown dtype tag {t}"))),
            };
            records.push((name, rec));
        }
        if r.pos != buf.len() {
            return Err(fmt_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Container { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
