use std::path::Path;

use super::{checked_u32, FormatError, Reader};
use crate::autodiff::Array2;
use crate::data::EmbeddingBatch;
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"LIXPEMB1";
pub const LABEL_MAGIC: &[u8; 4] = b"LBL1";

/// Contents of a `LIXPEMB1` file. Values are the stored `f32`s widened back
/// to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub embeddings: Array2,
    pub labels: Option<Vec<i32>>,
}

impl EmbeddingFile {
    /// Labels as class indices; negative labels are rejected.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("embedding file has no label block".into()))?;
        labels
            .iter()
            .map(|&l| usize::try_from(l).map_err(|_| Error::Config(format!("negative label {l}"))))
            .collect()
    }
}

/// Layout: magic, u32 count, u32 dim, `count·dim` f32 row-major, then an
/// optional block of magic `LBL1`, u32 count, `count` i32 labels.
pub fn encode_embeddings(
    embeddings: &Array2,
    labels: Option<&[i32]>,
) -> std::result::Result<Vec<u8>, FormatError> {
    let count = checked_u32(embeddings.rows(), "row count")?;
    let dim = checked_u32(embeddings.cols(), "dimension")?;
    let mut out = Vec::with_capacity(16 + embeddings.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for &x in embeddings.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(labels) = labels {
        if labels.len() != embeddings.rows() {
            return Err(FormatError::LabelCount {
                labels: labels.len(),
                rows: embeddings.rows(),
            });
        }
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&checked_u32(labels.len(), "label count")?.to_le_bytes());
        for &l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> std::result::Result<EmbeddingFile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(EMBEDDING_MAGIC, "embedding magic")?;
    let count = r.u32("row count")? as usize;
    let dim = r.u32("dimension")? as usize;
    let n = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or(FormatError::Overflow("embedding payload"))?;
    let payload = r.take(n, "embedding payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let embeddings = Array2::from_vec(count, dim, data).expect("length checked");
    let labels = if r.remaining() == 0 {
        None
    } else {
        r.magic(LABEL_MAGIC, "label magic")?;
        let n = r.u32("label count")? as usize;
        if n != count {
            return Err(FormatError::LabelCount {
                labels: n,
                rows: count,
            });
        }
        let bytes = r.take(n * 4, "label payload")?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    };
    r.finish()?;
    Ok(EmbeddingFile { embeddings, labels })
}

/// Writes the normalized view of `batch` with its class labels.
pub fn export_embeddings(
    batch: &EmbeddingBatch,
    labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    if labels.len() != batch.len() {
        return Err(Error::dim(
            "export_embeddings",
            format!("{} labels for {} rows", labels.len(), batch.len()),
        ));
    }
    let labels: Vec<i32> = labels
        .iter()
        .map(|&l| i32::try_from(l).map_err(|_| FormatError::Overflow("label")))
        .collect::<std::result::Result<_, _>>()?;
    let bytes = encode_embeddings(&batch.normalized, Some(&labels))?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn import_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_embeddings(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_batch_is_a_valid_file() {
        let bytes = encode_embeddings(&Array2::zeros(0, 8), Some(&[])).unwrap();
        assert_eq!(bytes.len(), 16 + 8);
        let f = decode_embeddings(&bytes).unwrap();
        assert_eq!(f.embeddings.shape(), (0, 8));
        assert_eq!(f.labels, Some(vec![]));
    }

    #[test]
    fn file_size_follows_layout() {
        let e = Array2::from_fn(1000, 64, |i, j| (i as f64 - j as f64) * 0.01);
        let labels: Vec<i32> = (0..1000).map(|i| i % 7).collect();
        let bytes = encode_embeddings(&e, Some(&labels)).unwrap();
        // header 16, payload 1000·64·4, label block 4 + 4 + 1000·4
        assert_eq!(bytes.len(), 16 + 256_000 + 4_008);
        assert_eq!(bytes.len(), 260_024);
        let unlabeled = encode_embeddings(&e, None).unwrap();
        assert_eq!(unlabeled.len(), 256_016);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let e = Array2::ones(2, 3);
        let good = encode_embeddings(&e, Some(&[0, 1])).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_embeddings(&bad),
            Err(FormatError::BadMagic { .. })
        ));

        assert!(matches!(
            decode_embeddings(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));

        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode_embeddings(&long), Err(FormatError::TrailingBytes(1)));

        let mut count = good.clone();
        count[8] = 3;
        assert!(decode_embeddings(&count).is_err());

        let mut lbl = good.clone();
        let at = 16 + 24;
        lbl[at..at + 4].copy_from_slice(b"LBL2");
        assert!(matches!(
            decode_embeddings(&lbl),
            Err(FormatError::BadMagic { .. })
        ));

        let mut lcount = good;
        lcount[at + 4] = 5;
        assert_eq!(
            decode_embeddings(&lcount),
            Err(FormatError::LabelCount { labels: 5, rows: 2 })
        );
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = EMBEDDING_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_embeddings(&bytes).is_err());
    }

    #[test]
    fn mismatched_label_length_is_rejected() {
        assert_eq!(
            encode_embeddings(&Array2::ones(2, 2), Some(&[1])),
            Err(FormatError::LabelCount { labels: 1, rows: 2 })
        );
    }
}
