//! Little-endian byte cursor shared by the binary formats.

use crate::error::Error;

#[derive(Clone, Copy)]
pub(crate) enum FormatKind {
    Embeddings,
    Checkpoint,
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Offset of `bytes[0]` within the enclosing file.
    base: u64,
    kind: FormatKind,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], kind: FormatKind) -> Self {
        Self { bytes, pos: 0, base: 0, kind }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn error_at(&self, offset: u64, message: impl Into<String>) -> Error {
        let message = message.into();
        match self.kind {
            FormatKind::Embeddings => Error::Format { offset, message },
            FormatKind::Checkpoint => Error::Checkpoint { offset, message },
        }
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        self.error_at(self.offset(), message)
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Splits off a sub-reader over the next `n` bytes.
    pub fn sub(&mut self, n: usize, what: &str) -> Result<ByteReader<'a>, Error> {
        let base = self.offset();
        let bytes = self.take(n, what)?;
        Ok(ByteReader { bytes, pos: 0, base, kind: self.kind })
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, Error> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16, Error> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32, Error> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64, Error> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn utf8(&mut self, n: usize, what: &str) -> Result<String, Error> {
        let start = self.offset();
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.error_at(start, format!("{what} is not valid UTF-8")))
    }

    pub fn finish(&self, what: &str) -> Result<(), Error> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} unexpected trailing bytes after {what}", self.remaining())));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so readers never observe a partial file.
pub(crate) fn write_atomically(path: &std::path::Path, bytes: &[u8]) -> Result<(), Error> {
    use std::io::Write;

    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => std::path::Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
