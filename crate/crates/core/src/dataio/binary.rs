//! Little-endian cursor helpers shared by every on-disk format.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], format: &'static str) -> Self {
        Self { buf, pos: 0, format }
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        if self.buf.len() < 4 || &self.buf[..4] != expected {
            let found = &self.buf[..self.buf.len().min(4)];
            return Err(Error::Format {
                offset: 0,
                reason: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        self.pos = 4;
        Ok(())
    }

    /// Fails with `Truncated` unless `n` more bytes are available.
    fn need(&self, n: usize) -> Result<()> {
        if self.buf.len() < self.pos + n {
            return Err(Error::Truncated {
                format: self.format,
                expected: (self.pos + n) as u64,
                found: self.buf.len() as u64,
            });
        }
        Ok(())
    }

    /// Checks that exactly `payload` bytes remain after the header.
    pub(crate) fn expect_remaining(&self, payload: u64) -> Result<()> {
        let remaining = (self.buf.len() - self.pos) as u64;
        let expected = self.pos as u64 + payload;
        if remaining < payload {
            return Err(Error::Truncated {
                format: self.format,
                expected,
                found: self.buf.len() as u64,
            });
        }
        if remaining > payload {
            return Err(Error::Format {
                offset: expected,
                reason: format!(
                    "{} trailing bytes after a payload declared as {payload} bytes",
                    remaining - payload
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        let v = u32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        self.need(4)?;
        let offset = self.pos as u64;
        let v = f32::from_le_bytes(self.buf[self.pos..self.pos + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite { offset });
        }
        self.pos += 4;
        Ok(v)
    }

    pub(crate) fn f32_array(&mut self, n: usize) -> Result<Vec<f64>> {
        self.need(n * 4)?;
        (0..n).map(|_| self.f32().map(f64::from)).collect()
    }

    pub(crate) fn u32_array(&mut self, n: usize) -> Result<Vec<u32>> {
        self.need(n * 4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn with_magic(magic: &[u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    pub(crate) fn f32_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f32(v);
        }
    }

    pub(crate) fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) fn dim_u32(name: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{name} = {v} does not fit in u32")))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
