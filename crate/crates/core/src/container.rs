//! Versioned little-endian binary container shared by model checkpoints,
//! inverse-dynamics checkpoints and offline datasets.
//!
//! ```text
//! magic        8 bytes  "GFLOWBIN"
//! version      u32
//! kind         u8       0 = flow checkpoint, 1 = dataset, 2 = inverse dynamics
//! header       kind-specific fixed fields
//! sections     repeated { tag: [u8; 4], type: u8 (0 = f64, 1 = u64), len: u64, len values }
//! end          tag "END!", type 1, len 0
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GFLOWBIN";
pub const FORMAT_VERSION: u32 = 1;
const END_TAG: [u8; 4] = *b"END!";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    FlowCheckpoint = 0,
    Dataset = 1,
    InverseDynamics = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: Kind) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u8(kind as u8);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn section_f64(&mut self, tag: &[u8; 4], values: &[f64]) {
        self.buf.extend_from_slice(tag);
        self.u8(0);
        self.u64(values.len() as u64);
        for &v in values {
            self.f64(v);
        }
    }

    pub fn section_u64(&mut self, tag: &[u8; 4], values: &[u64]) {
        self.buf.extend_from_slice(tag);
        self.u8(1);
        self.u64(values.len() as u64);
        for &v in values {
            self.u64(v);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.section_u64(&END_TAG, &[]);
        self.buf
    }
}

pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8], expected: Kind) -> Result<Self> {
        let mut r = Self { data, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = r.u8()?;
        if kind != expected as u8 {
            return Err(Error::Format(format!("expected container kind {}, found {kind}", expected as u8)));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Next section, or `None` at the end marker.
    pub fn section(&mut self) -> Result<Option<([u8; 4], Payload)>> {
        let tag: [u8; 4] = self.take(4)?.try_into().unwrap();
        let ty = self.u8()?;
        let len = self.u64()? as usize;
        if len.checked_mul(8).is_none_or(|b| b > self.data.len() - self.pos) {
            return Err(Error::Format(format!("section {:?} length {len} exceeds file", tag_str(&tag))));
        }
        let payload = match ty {
            0 => Payload::F64((0..len).map(|_| self.f64()).collect::<Result<_>>()?),
            1 => Payload::U64((0..len).map(|_| self.u64()).collect::<Result<_>>()?),
            other => return Err(Error::Format(format!("unknown section type {other}"))),
        };
        if tag == END_TAG {
            if self.pos != self.data.len() {
                return Err(Error::Format("trailing bytes after end marker".into()));
            }
            return Ok(None);
        }
        Ok(Some((tag, payload)))
    }

    /// Next section, which must carry `tag` and `f64` values.
    pub fn expect_f64(&mut self, tag: &[u8; 4]) -> Result<Vec<f64>> {
        match self.section()? {
            Some((t, Payload::F64(v))) if &t == tag => Ok(v),
            Some((t, _)) => Err(Error::Format(format!("expected f64 section {}, found {}", tag_str(tag), tag_str(&t)))),
            None => Err(Error::Format(format!("missing section {}", tag_str(tag)))),
        }
    }

    pub fn expect_u64(&mut self, tag: &[u8; 4]) -> Result<Vec<u64>> {
        match self.section()? {
            Some((t, Payload::U64(v))) if &t == tag => Ok(v),
            Some((t, _)) => Err(Error::Format(format!("expected u64 section {}, found {}", tag_str(tag), tag_str(&t)))),
            None => Err(Error::Format(format!("missing section {}", tag_str(tag)))),
        }
    }
}

pub fn tag_str(tag: &[u8; 4]) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_roundtrip() {
        let mut w = Writer::new(Kind::Dataset);
        w.u32(7);
        w.section_f64(b"ABCD", &[1.5, -0.0, f64::MAX]);
        w.section_u64(b"EFGH", &[u64::MAX, 0]);
        let bytes = w.finish();

        let mut r = Reader::new(&bytes, Kind::Dataset).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.expect_f64(b"ABCD").unwrap(), vec![1.5, -0.0, f64::MAX]);
        assert_eq!(r.expect_u64(b"EFGH").unwrap(), vec![u64::MAX, 0]);
        assert!(r.section().unwrap().is_none());
    }

    #[test]
    fn rejects_wrong_kind_and_truncation() {
        let bytes = Writer::new(Kind::Dataset).finish();
        assert!(Reader::new(&bytes, Kind::FlowCheckpoint).is_err());
        let mut r = Reader::new(&bytes[..bytes.len() - 3], Kind::Dataset).unwrap();
        assert!(r.section().is_err());
        assert!(Reader::new(b"nonsense", Kind::Dataset).is_err());
    }
}
