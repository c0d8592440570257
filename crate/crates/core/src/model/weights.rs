//! Binary weight files.
//!
//! Layout (all integers little-endian): `DSGW`, u32 version (1), u32 tensor
//! count, then per tensor: u16 name length, UTF-8 name, u8 dtype (0 = f32,
//! 1 = f64), u8 rank, `rank` × u32 dims, raw element bytes in row-major order.

use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result, WeightFileError};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DSGW";
pub const VERSION: u32 = 1;

/// Serialises every registered tensor, running statistics included.
pub fn encode_weights<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE_CODE);
        out.push(p.dims.len() as u8);
        for &d in &p.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_weights<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

/// Decodes `bytes` into `store`. The store is only modified when the whole
/// file is valid; tensors are checked in file order.
pub fn decode_weights<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<(), WeightFileError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(WeightFileError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightFileError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut staged = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| WeightFileError::BadName)?
            .to_owned();
        let code = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let id = store
            .find(&name)
            .ok_or_else(|| WeightFileError::UnknownTensor(name.clone()))?;
        let expected = &store.get(id).dims;
        if *expected != dims {
            return Err(WeightFileError::ShapeMismatch {
                name,
                expected: expected.clone(),
                found: dims,
            });
        }
        let n: usize = dims.iter().product();
        let data: Vec<T> = match code {
            0 => r.take(n * 4)?.chunks_exact(4).map(|c| T::cast(f32::read_le(c) as f64)).collect(),
            1 => r.take(n * 8)?.chunks_exact(8).map(|c| T::cast(f64::read_le(c))).collect(),
            code => return Err(WeightFileError::UnsupportedDtype { name, code }),
        };
        staged.push((id, data));
    }
    if let Some((_, p)) = store.iter().find(|(id, _)| !staged.iter().any(|(s, _)| s == id)) {
        return Err(WeightFileError::MissingTensor(p.name.clone()));
    }
    for (id, data) in staged {
        let shape = store.value(id).shape();
        *store.value_mut(id) = Tensor::new(shape, data).expect("length checked against dims");
    }
    Ok(())
}

pub fn load_weights<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(store, &bytes).map_err(|kind| Error::WeightFile {
        path: path.to_path_buf(),
        kind,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        let end = self.pos.checked_add(n).ok_or(WeightFileError::UnexpectedEof)?;
        let s = self.bytes.get(self.pos..end).ok_or(WeightFileError::UnexpectedEof)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
