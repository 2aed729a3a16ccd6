//! Named-tensor parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TNSR" | version u32 | count u32 | count x tensor
//! tensor = name_len u16 | name utf-8 | rank u8 | rank x extent u32 | f32 payload
//! ```

use std::path::Path;

use crate::binio::{put_f32s, put_u16, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

pub fn encode<T: Float>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, len_u32(tensors.len(), "tensor count")?);
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Invalid(format!("tensor name too long: {} bytes", name.len())))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Invalid(format!("{name}: rank {} exceeds 255", t.rank())))?;
        put_u16(&mut out, name_len);
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &e in t.shape() {
            put_u32(&mut out, len_u32(e, "extent")?);
        }
        put_f32s(&mut out, t.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = ByteReader::new(bytes, source);
    let magic = r.bytes(4, "magic")?;
    if magic != MAGIC {
        return Err(r.error(0, format!("bad magic {magic:?}, expected \"TNSR\"")));
    }
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(at, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let at = r.offset();
        let name = std::str::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| r.error(at, "tensor name is not utf-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let at = r.offset();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| r.error(at, format!("{name}: element count overflows")))?;
        let data = r.f32s(n, &format!("payload of {name}"))?;
        out.push((name, Tensor::new(shape, data)?));
    }
    r.expect_end()?;
    Ok(out)
}

pub fn write<T: Float>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes = encode(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Invalid(format!("{what} {n} exceeds u32")))
}
