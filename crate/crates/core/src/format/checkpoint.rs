use std::path::Path;

use super::{checked_u32, FormatError, Reader};
use crate::autodiff::Array2;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LIXPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, u32 version, u32 parameter count, then per parameter
/// u32 name length, UTF-8 name, u32 rows, u32 cols, `rows·cols` f64.
pub fn encode_checkpoint(store: &ParamStore) -> std::result::Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&checked_u32(store.len(), "parameter count")?.to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&checked_u32(p.name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&checked_u32(p.value.rows(), "rows")?.to_le_bytes());
        out.extend_from_slice(&checked_u32(p.value.cols(), "cols")?.to_le_bytes());
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decoded parameters carry `decay = false`; the model that loads them owns
/// the decay flags.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<ParamStore, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, "checkpoint magic")?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| FormatError::InvalidName)?
            .to_owned();
        if store.find(&name).is_some() {
            return Err(FormatError::DuplicateName(name));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or(FormatError::Overflow("parameter payload"))?;
        let data = r
            .take(n, "parameter payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.push(
            name,
            Array2::from_vec(rows, cols, data).expect("length checked"),
            false,
        );
    }
    r.finish()?;
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(store)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.push(
            "image.0.weight",
            Array2::from_fn(3, 2, |i, j| i as f64 - 0.1 * j as f64),
            true,
        );
        s.push("temp.log_tau1", Array2::scalar(10f64.ln()), false);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let back = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.value.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.value.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_bad_header_fields() {
        let good = encode_checkpoint(&store()).unwrap();
        let mut magic = good.clone();
        magic[7] = b'X';
        assert!(matches!(
            decode_checkpoint(&magic),
            Err(FormatError::BadMagic { .. })
        ));

        let mut version = good.clone();
        version[8] = 9;
        assert_eq!(
            decode_checkpoint(&version),
            Err(FormatError::UnsupportedVersion(9))
        );

        let mut name_len = good.clone();
        name_len[16] = 200;
        assert!(matches!(
            decode_checkpoint(&name_len),
            Err(FormatError::Truncated { .. })
        ));

        let mut trailing = good;
        trailing.extend_from_slice(&[1, 2]);
        assert_eq!(
            decode_checkpoint(&trailing),
            Err(FormatError::TrailingBytes(2))
        );
    }
}
