//! Little-endian binary containers shared by the model and feature formats.
//!
//! Every container starts with a 4-byte magic followed by `u32` dimensions and
//! a flat payload. Readers check the magic and that the payload length is
//! exactly what the header implies.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Writer { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: usize) -> &mut Self {
        let mut b = [0u8; 4];
        LittleEndian::write_u32(&mut b, u32::try_from(v).expect("dimension exceeds u32"));
        self.buf.extend_from_slice(&b);
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        let mut b = [0u8; 8];
        LittleEndian::write_f64(&mut b, v);
        self.buf.extend_from_slice(&b);
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        let mut b = [0u8; 4];
        LittleEndian::write_f32(&mut b, v);
        self.buf.extend_from_slice(&b);
        self
    }

    pub fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for v in vals {
            self.f64(*v);
        }
        self
    }

    /// Row-major f64 dump of a matrix.
    pub fn matrix(&mut self, m: &DMatrix<f64>) -> &mut Self {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub struct Reader {
    what: String,
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    pub fn open(path: &Path, magic: &[u8; 4]) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path.display().to_string(), buf, magic)
    }

    pub fn from_bytes(what: String, buf: Vec<u8>, magic: &[u8; 4]) -> Result<Self> {
        let mut found = [0u8; 4];
        let n = buf.len().min(4);
        found[..n].copy_from_slice(&buf[..n]);
        if n < 4 || &found != magic {
            return Err(Error::BadMagic {
                what,
                expected: *magic,
                found,
            });
        }
        Ok(Reader { what, buf, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.truncated());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn truncated(&self) -> Error {
        Error::Parse {
            what: self.what.clone(),
            line: 0,
            msg: format!("truncated container at byte {}", self.pos),
        }
    }

    pub fn u32(&mut self) -> Result<usize> {
        Ok(LittleEndian::read_u32(self.take(4)?) as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Checks that exactly `count` values of `width` bytes remain.
    pub fn expect_payload(&self, count: usize, width: usize) -> Result<()> {
        let rem = self.remaining();
        if rem != count * width {
            return Err(Error::PayloadSize {
                what: self.what.clone(),
                expected: count,
                found: rem / width,
            });
        }
        Ok(())
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count * 4)?;
        Ok(bytes.chunks_exact(4).map(LittleEndian::read_f32).collect())
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(count * 8)?;
        Ok(bytes.chunks_exact(8).map(LittleEndian::read_f64).collect())
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let vals = self.f64s(rows * cols)?;
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    pub fn vector(&mut self, len: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.f64s(len)?))
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::PayloadSize {
                what: self.what.clone(),
                expected: self.pos,
                found: self.buf.len(),
            });
        }
        Ok(())
    }
}
