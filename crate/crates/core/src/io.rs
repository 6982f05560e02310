//! On-disk tensor and checkpoint formats.
//!
//! Both formats are little-endian and fully self-describing:
//!
//! * Tensor file: magic `FMCT`, dtype tag (u8, 0 = f32), rank (u8), extents
//!   (u32 each), then the row-major f32 payload.
//! * Checkpoint: magic `FMCW`, version (u16), tensor count (u32), one record
//!   per tensor (name length u16 + UTF-8 name, dtype u8, rank u8, extents
//!   u32 each, payload byte offset u64), then a single payload section all
//!   offsets point into.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"FMCT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCW";
const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

fn push_extents(out: &mut Vec<u8>, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Io(format!("rank {} too large to serialize", shape.len())));
    }
    out.push(shape.len() as u8);
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| Error::Io(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    Ok(())
}

fn push_payload(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Io("truncated file".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn extents(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        Ok(shape)
    }
}

fn payload_from(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if bytes.len() < numel * 4 {
        return Err(Error::Io("payload shorter than extents demand".to_string()));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in bytes[..numel * 4].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Tensor::new(shape, data)
}

/// Serialize one tensor.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    push_extents(&mut out, t.shape())?;
    push_payload(&mut out, t);
    Ok(out)
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Io("not a tensor file (bad magic)".to_string()));
    }
    if r.u8()? != DTYPE_F32 {
        return Err(Error::Io("unsupported dtype tag".to_string()));
    }
    let shape = r.extents()?;
    payload_from(&bytes[r.pos..], &shape)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = tensor_bytes(t)?;
    let mut f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    tensor_from_bytes(&bytes)
}

/// Serialize a parameter store. Records are emitted in name order, so equal
/// stores produce byte-identical checkpoints.
pub fn checkpoint_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Io("too many tensors".to_string()))?;
    out.extend_from_slice(&count.to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in store.iter() {
        let name_len =
            u16::try_from(name.len()).map_err(|_| Error::Io(format!("name {name} too long")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        push_extents(&mut out, t.shape())?;
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        push_payload(&mut payload, t);
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Io("not a checkpoint (bad magic)".to_string()));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Io(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Io("parameter name is not UTF-8".to_string()))?;
        if r.u8()? != DTYPE_F32 {
            return Err(Error::Io(format!("unsupported dtype for {name}")));
        }
        let shape = r.extents()?;
        let offset = r.u64()? as usize;
        records.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut store = ParamStore::new();
    for (name, shape, offset) in records {
        if offset > payload.len() {
            return Err(Error::Io(format!("offset for {name} outside payload")));
        }
        store.insert(&name, payload_from(&payload[offset..], &shape)?)?;
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let bytes = checkpoint_bytes(store)?;
    let mut f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    f.write_all(&bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    checkpoint_from_bytes(&bytes)
}
