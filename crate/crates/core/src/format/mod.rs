//! Binary file formats: `LIXPEMB1` embedding files and `LIXPCKPT` checkpoints.
//! Both are little-endian and length-prefixed; readers reject anything that
//! does not consume the input exactly.

mod checkpoint;
mod embeddings;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use embeddings::{
    decode_embeddings, encode_embeddings, export_embeddings, import_embeddings, EmbeddingFile,
    EMBEDDING_MAGIC, LABEL_MAGIC,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated {what}: need {needed} bytes, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("label block holds {labels} labels for {rows} embeddings")]
    LabelCount { labels: usize, rows: usize },
    #[error("{0} does not fit the header field")]
    Overflow(&'static str),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("parameter name is not valid UTF-8")]
    InvalidName,
    #[error("duplicate parameter {0:?}")]
    DuplicateName(String),
}

/// Cursor over a byte slice with bounds-checked little-endian reads.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                what,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8], what: &'static str) -> Result<(), FormatError> {
        let found = self.take(expected.len(), what)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

fn checked_u32(n: usize, what: &'static str) -> Result<u32, FormatError> {
    u32::try_from(n).map_err(|_| FormatError::Overflow(what))
}
