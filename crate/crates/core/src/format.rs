//! Binary tensor-record files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "DATT" | version | tensor count | records...
//! record: name length | UTF-8 name | rank | extents... | f32 LE payload
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DATT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}, expected \"DATT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("file truncated while reading tensor {tensor}")]
    Truncated { tensor: String },
    #[error("tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    Dimension {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("unexpected tensor {0}")]
    Unexpected(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("{0} trailing bytes after last record")]
    Trailing(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn encode(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, tensor: &str) -> Result<&[u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                tensor: tensor.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, tensor: &str) -> Result<u32, FormatError> {
        let b = self.take(4, tensor)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "<header>")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("<header>")?;
    if version != VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("<header>")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let placeholder = format!("#{i}");
        let name_len = r.u32(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
            .map_err(|_| FormatError::BadName)?
            .to_string();
        let rank = r.u32(&name)? as usize;
        let shape = (0..rank)
            .map(|_| r.u32(&name).map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| FormatError::Truncated {
            tensor: name.clone(),
        })?, &name)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).expect("payload length matches extents");
        records.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(FormatError::Trailing(buf.len() - r.pos));
    }
    Ok(records)
}

pub fn write_file(path: &Path, records: &[(String, Tensor)]) -> Result<(), FormatError> {
    fs::write(path, encode(records)).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>, FormatError> {
    let buf = fs::read(path).map_err(|source| FormatError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}

/// Name-indexed view over decoded records that tracks which ones were consumed.
pub struct RecordSet {
    records: Vec<(String, Tensor, bool)>,
}

impl RecordSet {
    pub fn new(records: Vec<(String, Tensor)>) -> Self {
        Self {
            records: records.into_iter().map(|(n, t)| (n, t, false)).collect(),
        }
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor, FormatError> {
        let rec = self
            .records
            .iter_mut()
            .find(|(n, _, used)| n == name && !used)
            .ok_or_else(|| FormatError::Missing(name.to_string()))?;
        rec.2 = true;
        Ok(rec.1.clone())
    }

    pub fn take_shaped(&mut self, name: &str, expected: &[usize]) -> Result<Tensor, FormatError> {
        let t = self.take(name)?;
        if t.shape() != expected {
            return Err(FormatError::Dimension {
                tensor: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _, _)| n.as_str())
    }

    /// Error on the first record that was never taken.
    pub fn finish(self) -> Result<(), FormatError> {
        match self.records.into_iter().find(|(_, _, used)| !used) {
            Some((n, _, _)) => Err(FormatError::Unexpected(n)),
            None => Ok(()),
        }
    }
}

/// Encode a list of indices as a float tensor.
pub fn index_tensor(idx: &[usize]) -> Tensor {
    Tensor::from_vec(idx.iter().map(|&i| i as f32).collect())
}

pub fn tensor_indices(name: &str, t: &Tensor) -> Result<Vec<usize>, FormatError> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(FormatError::Invalid(format!("{name} holds non-index value {v}")))
            }
        })
        .collect()
}
