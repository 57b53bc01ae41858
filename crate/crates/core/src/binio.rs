//! Little-endian primitives shared by the on-disk formats.

use std::io::Write;

use crate::error::{Error, Result};

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
                detail: format!("needed {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// `n` finite f32 values.
    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let start = self.pos;
        let raw = self.take(len, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Corruption(format!(
                    "non-finite value {v} in {what} at byte offset {}",
                    start + 4 * i
                )));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        std::str::from_utf8(raw)
            .map(str::to_string)
            .map_err(|e| Error::Format(format!("{what} is not UTF-8: {e}")))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last block",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn u32_of(v: usize, what: &str) -> std::io::Result<u32> {
    u32::try_from(v).map_err(|_| std::io::Error::other(format!("{what} {v} does not fit in u32")))
}

pub(crate) fn put_u32<W: Write + ?Sized>(w: &mut W, v: usize, what: &str) -> std::io::Result<()> {
    w.write_all(&u32_of(v, what)?.to_le_bytes())
}

pub(crate) fn put_str<W: Write + ?Sized>(w: &mut W, s: &str, what: &str) -> std::io::Result<()> {
    put_u32(w, s.len(), what)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn put_f32s<W: Write + ?Sized>(w: &mut W, v: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}
