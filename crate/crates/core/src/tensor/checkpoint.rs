//! `OGCK` checkpoint container.
//!
//! Layout (little-endian): magic `OGCK`, `u16` version, `u32` entry count,
//! then per entry: `u32` name length, UTF-8 name, `u32` rank, rank × `u32`
//! dims, `u8` dtype tag, payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OGCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    Bytes = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Bytes),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Bytes => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<u32>,
    pub dtype: DType,
    /// Raw little-endian payload.
    pub payload: Vec<u8>,
}

impl Entry {
    pub fn from_tensor(name: &str, t: &Tensor, dtype: DType) -> Self {
        let payload = match dtype {
            DType::F64 => t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F32 => t
                .data()
                .iter()
                .flat_map(|v| (*v as f32).to_le_bytes())
                .collect(),
            DType::Bytes => panic!("tensor entries must be f32 or f64"),
        };
        Self {
            name: name.to_string(),
            shape: t.shape().iter().map(|&d| d as u32).collect(),
            dtype,
            payload,
        }
    }

    pub fn from_bytes(name: &str, bytes: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            shape: vec![bytes.len() as u32],
            dtype: DType::Bytes,
            payload: bytes.to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let data: Vec<f64> = match self.dtype {
            DType::F64 => self
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => self
                .payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::Bytes => {
                return Err(Error::Config(format!("entry {} holds bytes", self.name)))
            }
        };
        Tensor::new(self.shape.iter().map(|&d| d as usize).collect(), data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no entry {name:?}")))?
            .to_tensor()
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.entries.len() as u32).to_le_bytes())?;
    for e in &ckpt.entries {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for d in &e.shape {
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&[e.dtype as u8])?;
        w.write_all(&e.payload)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            },
            _ => Error::Io(e),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut cur = Cursor { inner: r, offset: 0 };
    if cur.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected OGCK".into(),
        });
    }
    let version = u16::from_le_bytes(cur.bytes(2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("entry count")?;
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let at = cur.offset;
        let name = String::from_utf8(cur.bytes(name_len, "name")?).map_err(|_| Error::Format {
            offset: at,
            msg: "entry name is not UTF-8".into(),
        })?;
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")?);
        }
        let at = cur.offset;
        let tag = cur.bytes(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format {
            offset: at,
            msg: format!("unknown dtype tag {tag}"),
        })?;
        let numel: usize = shape.iter().map(|&d| d as usize).product();
        let payload = cur.bytes(numel * dtype.width(), "payload")?;
        ckpt.push(Entry {
            name,
            shape,
            dtype,
            payload,
        });
    }
    Ok(ckpt)
}
