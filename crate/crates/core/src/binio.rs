//! Little-endian framing helpers shared by the checkpoint and embedding
//! formats. Every decode error reports the byte offset where it happened.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) const CHECKSUM_LEN: usize = 8;

pub(crate) fn checksum(bytes: &[u8]) -> [u8; CHECKSUM_LEN] {
    let d = Sha256::digest(bytes);
    d[..CHECKSUM_LEN].try_into().expect("8 bytes")
}

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    /// Length-prefixed JSON.
    pub fn json<T: serde::Serialize>(&mut self, v: &T) -> Result<()> {
        let s = serde_json::to_vec(v)?;
        self.u64(s.len() as u64);
        self.bytes(&s);
        Ok(())
    }

    /// Append the checksum of everything written so far.
    pub fn seal(mut self) -> Vec<u8> {
        let c = checksum(&self.buf);
        self.buf.extend_from_slice(&c);
        self.buf
    }
}

/// Write through a temporary sibling so a crash never leaves a half file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn error(&self, at: usize, msg: impl std::fmt::Display) -> Error {
        Error::format(self.path, format!("at byte offset {at}: {msg}"))
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(
                self.pos,
                format!(
                    "truncated while reading {what} ({n} bytes needed, {} left)",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let got = self.take(expected.len(), "magic")?;
        if got != expected {
            return Err(self.error(0, format!("bad magic {:?}", String::from_utf8_lossy(got))));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.error(at, format!("implausible {what} {v}")))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.error(self.pos, format!("{what} too large")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let n = self.len(what)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        serde_json::from_slice(b).map_err(|e| self.error(at, format!("malformed {what}: {e}")))
    }

    /// Read the trailing checksum, compare it with everything before it and
    /// require that nothing follows.
    pub fn finish_checked(&mut self) -> Result<()> {
        let at = self.pos;
        let expected = checksum(&self.bytes[..at]);
        let got = self.take(CHECKSUM_LEN, "checksum")?;
        if got != expected {
            return Err(self.error(at, "checksum mismatch (file corrupt)"));
        }
        self.finish()
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(
                self.pos,
                format!("{} unexpected trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}
