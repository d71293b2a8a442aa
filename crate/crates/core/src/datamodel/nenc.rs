//! The `NENC` array container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | field                                 |
//! |--------------|---------------------------------------|
//! | 4            | magic `b"NENC"`                       |
//! | 4 (u32)      | format version, currently 1           |
//! | 4 (u32)      | dtype code, 1 = float32               |
//! | 4 (u32)      | number of dimensions `n`              |
//! | 8·n (u64)    | dimension sizes                       |
//! | 4·∏dims      | row-major float32 payload             |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndiff::NdTensor;

pub const MAGIC: [u8; 4] = *b"NENC";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
const MAX_DIMS: u32 = 16;

pub fn header_len(ndim: usize) -> usize {
    16 + 8 * ndim
}

pub fn encode_array(array: &NdTensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(array.ndim()) + 4 * array.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    out.extend_from_slice(&(array.ndim() as u32).to_le_bytes());
    for &d in array.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in array.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptContainer {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_header(cur: &mut Cursor<'_>) -> Result<Vec<usize>> {
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(cur.corrupt(format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(cur.corrupt(format!("unsupported format version {version}")));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(cur.corrupt(format!("unsupported dtype code {dtype}")));
    }
    let ndim = cur.u32("ndim")?;
    if ndim == 0 || ndim > MAX_DIMS {
        return Err(cur.corrupt(format!("invalid ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for i in 0..ndim {
        let d = cur.u64("dimension")?;
        if d == 0 {
            return Err(cur.corrupt(format!("dimension {i} is zero")));
        }
        shape.push(usize::try_from(d).map_err(|_| cur.corrupt("dimension overflows usize"))?);
    }
    Ok(shape)
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<NdTensor<f32>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let shape = parse_header(&mut cur)?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
        .ok_or_else(|| cur.corrupt("element count overflows"))?;
    let payload = cur.take(n.1, "payload")?;
    if cur.pos != bytes.len() {
        return Err(cur.corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    NdTensor::new(shape, data)
}

pub fn write_array(path: impl AsRef<Path>, array: &NdTensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_array(array)).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<NdTensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_array(&bytes, path)
}

/// Reads only the shape recorded in a container's header.
pub fn read_shape(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = vec![0u8; 16];
    f.read_exact(&mut head)
        .map_err(|_| Error::CorruptContainer {
            path: path.to_path_buf(),
            reason: "truncated header".into(),
        })?;
    let ndim = u32::from_le_bytes(head[12..16].try_into().unwrap()).min(MAX_DIMS + 1) as usize;
    let mut dims = vec![0u8; 8 * ndim];
    let got = f.read(&mut dims).map_err(|e| Error::io(path, e))?;
    head.extend_from_slice(&dims[..got]);
    parse_header(&mut Cursor {
        bytes: &head,
        pos: 0,
        path,
    })
}
