//! Bit-exact binary snapshots of a [`ParamStore`].
//!
//! Layout (little endian): magic `MTCK`, `u32` version, `u32` note length,
//! UTF-8 note, `u32` array count, then per array `u32` name length, UTF-8
//! name, `u32` rank, `u64` dims, `f64` data.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn encode(params: &ParamStore) -> Vec<u8> {
    encode_with_note(params, "")
}

/// Like [`encode`], with a free-form note (e.g. a run fingerprint) stored in
/// the header.
pub fn encode_with_note(params: &ParamStore, note: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + note.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(note.len() as u32).to_le_bytes());
    out.extend_from_slice(note.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Corrupt("unexpected end of file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    decode_with_note(bytes).map(|(p, _)| p)
}

pub fn decode_with_note(bytes: &[u8]) -> Result<(ParamStore, String), CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let note = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CheckpointError::Corrupt("note is not UTF-8".into()))?
        .to_string();
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("array too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if store.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate array `{name}`")));
        }
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((store, note))
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save(params: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    save_with_note(params, "", path)
}

pub fn save_with_note(params: &ParamStore, note: &str, path: &Path) -> Result<(), CheckpointError> {
    Ok(write_atomic(path, &encode_with_note(params, note))?)
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    load_with_note(path).map(|(p, _)| p)
}

pub fn load_with_note(path: &Path) -> Result<(ParamStore, String), CheckpointError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_with_note(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_every_bit() {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        p.insert("b", Tensor::scalar(-7.25));
        let back = decode(&encode(&p)).unwrap();
        for (name, t) in p.iter() {
            let u = back.get(name).unwrap();
            assert_eq!(t.shape(), u.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode(&p);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(decode(b"nope"), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn note_survives() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.5));
        let (back, note) = decode_with_note(&encode_with_note(&p, "abc123")).unwrap();
        assert_eq!(note, "abc123");
        assert_eq!(back.get("w").unwrap().item(), 1.5);
    }
}
