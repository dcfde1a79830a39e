//! Little-endian binary container shared by the dataset and checkpoint files.
//!
//! Layout: 4 magic bytes, a `u32` format version, then a sequence of
//! primitive fields. Strings and arrays are length-prefixed with `u64`.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).expect("vec write");
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).expect("vec write");
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).expect("vec write");
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn indices(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&i| self.u64(i as u64));
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.indices(t.shape());
        self.u64(t.len() as u64);
        t.data().iter().for_each(|&v| self.f64(v));
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn open(
        bytes: &'a [u8],
        magic: &[u8; 4],
        version: u32,
        what: &'static str,
    ) -> Result<Self> {
        let mut r = Self {
            cur: Cursor::new(bytes),
            what,
        };
        let mut m = [0u8; 4];
        r.cur
            .read_exact(&mut m)
            .map_err(|_| Error::Format(format!("{what}: file too short for header")))?;
        if &m != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let found = r.u32("version")?;
        if found != version {
            return Err(Error::UnsupportedVersion {
                found,
                expected: version,
            });
        }
        Ok(r)
    }

    fn truncated(&self, field: &str) -> Error {
        Error::Format(format!(
            "{}: truncated while reading {field} at byte {}",
            self.what,
            self.cur.position()
        ))
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.truncated(field))
    }

    pub fn u64(&mut self, field: &str) -> Result<u64> {
        self.cur
            .read_u64::<LittleEndian>()
            .map_err(|_| self.truncated(field))
    }

    pub fn f64(&mut self, field: &str) -> Result<f64> {
        self.cur
            .read_f64::<LittleEndian>()
            .map_err(|_| self.truncated(field))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let n = self.u64(field)? as usize;
        let remaining = self.cur.get_ref().len() as u64 - self.cur.position();
        if n as u64 > remaining {
            return Err(self.truncated(field));
        }
        Ok(n)
    }

    pub fn str(&mut self, field: &str) -> Result<String> {
        let n = self.len(field)?;
        let mut bytes = vec![0u8; n];
        self.cur
            .read_exact(&mut bytes)
            .map_err(|_| self.truncated(field))?;
        String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{}: {field} is not UTF-8", self.what)))
    }

    pub fn indices(&mut self, field: &str) -> Result<Vec<usize>> {
        let n = self.len(field)?;
        (0..n).map(|_| Ok(self.u64(field)? as usize)).collect()
    }

    pub fn tensor(&mut self, field: &str) -> Result<Tensor> {
        let shape = self.indices(field)?;
        let n = self.len(field)?;
        let data = (0..n)
            .map(|_| self.f64(field))
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("{}: {field}: {e}", self.what)))
    }

    /// Errors unless every byte was consumed.
    pub fn finish(self) -> Result<()> {
        let pos = self.cur.position();
        let len = self.cur.get_ref().len() as u64;
        if pos != len {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                len - pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_round_trip() {
        let mut w = Writer::new(b"TEST", 3);
        w.str("héllo");
        w.indices(&[4, 0, 9]);
        w.tensor(&Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 7.0]]).unwrap());
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST", 3, "test").unwrap();
        assert_eq!(r.str("s").unwrap(), "héllo");
        assert_eq!(r.indices("i").unwrap(), vec![4, 0, 9]);
        let t = r.tensor("t").unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data()[1].to_bits(), (-0.0f64).to_bits());
        r.finish().unwrap();
    }

    #[test]
    fn header_errors() {
        let bytes = Writer::new(b"TEST", 2).finish();
        assert!(matches!(
            Reader::open(&bytes, b"TEST", 3, "t"),
            Err(Error::UnsupportedVersion { found: 2, expected: 3 })
        ));
        assert!(matches!(Reader::open(&bytes, b"NOPE", 2, "t"), Err(Error::Format(_))));
        assert!(matches!(Reader::open(&bytes[..3], b"TEST", 2, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn huge_length_prefix_is_truncation_not_allocation() {
        let mut w = Writer::new(b"TEST", 1);
        w.u64(u64::MAX);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST", 1, "t").unwrap();
        assert!(matches!(r.str("s"), Err(Error::Format(_))));
    }
}
