//! The FEDF binary encoding of a [`FeatureDataset`].
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "FEDF"
//! version      u32      = 1
//! dim          u32
//! num_classes  u32
//! domain_id    u16 length + UTF-8 bytes
//! record_count u64
//! records      record_count x { label u32, vector dim x f32 }
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FEDF";
pub const VERSION: u32 = 1;

pub fn encode(ds: &FeatureDataset) -> Result<Vec<u8>> {
    let id = ds.domain_id().as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::Malformed("domain id longer than 65535 bytes".into()))?;
    let dim = u32::try_from(ds.dim()).map_err(|_| Error::Malformed("dim exceeds u32".into()))?;
    let classes = u32::try_from(ds.num_classes())
        .map_err(|_| Error::Malformed("num_classes exceeds u32".into()))?;

    let mut out = Vec::with_capacity(26 + id.len() + ds.len() * (4 + 4 * ds.dim()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&classes.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for i in 0..ds.len() {
        out.extend_from_slice(&(ds.label(i) as u32).to_le_bytes());
        for v in ds.vector(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(Error::Truncated {
                section,
                expected: n,
                found: rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, section: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, section)?.try_into().unwrap(),
        ))
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, section)?.try_into().unwrap(),
        ))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, section)?.try_into().unwrap(),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "header")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = r.u32("header")? as usize;
    let num_classes = r.u32("header")? as usize;
    let id_len = r.u16("header")? as usize;
    let id = String::from_utf8(r.take(id_len, "header")?.to_vec())
        .map_err(|_| Error::Malformed("domain id is not UTF-8".into()))?;
    let count = r.u64("header")?;

    let record_len = 4 + 4 * dim;
    let count = usize::try_from(count).map_err(|_| Error::Malformed("record count".into()))?;
    let expected = count
        .checked_mul(record_len)
        .ok_or_else(|| Error::Malformed("record count overflows".into()))?;
    let found = bytes.len() - r.pos;
    if found < expected {
        return Err(Error::Truncated {
            section: "records",
            expected,
            found,
        });
    }
    if found > expected {
        return Err(Error::Malformed("trailing bytes after records".into()));
    }

    let mut labels = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count * dim);
    for _ in 0..count {
        let label = r.u32("records")?;
        if label as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: label as usize,
                num_classes,
            });
        }
        labels.push(label);
        for chunk in r.take(4 * dim, "records")?.chunks_exact(4) {
            features.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    FeatureDataset::new(dim, num_classes, id, features, labels)
}
