//! Length-prefixed field framing shared by every message and hash input.
//!
//! Each field is a 4-byte big-endian length followed by that many bytes.
//! Nested messages are carried as opaque fields and parsed lazily.

use crate::error::{Error, Result};

pub const LEN_PREFIX: usize = 4;

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        let len = u32::try_from(bytes.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.field(&[v])
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.field(&v.to_be_bytes())
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn field(&mut self) -> Result<&'a [u8]> {
        let rest = &self.buf[self.pos..];
        if rest.len() < LEN_PREFIX {
            return Err(Error::Malformed("truncated length prefix"));
        }
        let len = u32::from_be_bytes(rest[..LEN_PREFIX].try_into().unwrap()) as usize;
        let body = rest
            .get(LEN_PREFIX..LEN_PREFIX + len)
            .ok_or(Error::Malformed("truncated field"))?;
        self.pos += LEN_PREFIX + len;
        Ok(body)
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.field()?
            .try_into()
            .map_err(|_| Error::Malformed("fixed-width field has wrong length"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.fixed::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.fixed()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.fixed()?))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_be_bytes(self.fixed()?))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.fixed()
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or(Error::Malformed("truncated raw bytes"))?;
        self.pos += n;
        Ok(out)
    }

    /// Consumes all remaining fields; fails if trailing bytes do not frame cleanly.
    pub fn rest(&mut self) -> Result<Vec<&'a [u8]>> {
        let mut out = Vec::new();
        while !self.is_empty() {
            out.push(self.field()?);
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Malformed("trailing bytes"))
        }
    }
}
