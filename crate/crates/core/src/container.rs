//! Shared binary framing for checkpoints and demonstration datasets.
//!
//! ```text
//! magic        8 bytes
//! version      u32 LE
//! header_len   u32 LE
//! header       header_len bytes, UTF-8 TOML
//! body         format-specific
//! ```
//!
//! All integers and reals in the body are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 8], version: u32, header: &str) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        Writer { buf }
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// Writes to a sibling temp file and renames it into place, so a failed
    /// write never leaves a partial file at `path`.
    pub(crate) fn finish(self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &self.buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version and returns the reader positioned after the
    /// header, together with the header text.
    pub(crate) fn open(path: &'a Path, data: &'a [u8], magic: &[u8; 8], version: u32) -> Result<(Self, String)> {
        let mut r = Reader { path, data, pos: 0 };
        if r.take(8)? != magic {
            return Err(r.err("bad magic"));
        }
        let v = r.u32()?;
        if v != version {
            return Err(r.err(format!("unsupported version {v}, expected {version}")));
        }
        let n = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.err("header is not UTF-8"))?
            .to_string();
        Ok((r, header))
    }

    pub(crate) fn err(&self, detail: impl Into<String>) -> Error {
        Error::format(self.path, format!("{} (at byte {})", detail.into(), self.pos))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!("truncated: wanted {n} bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
