//! Little-endian binary reading with byte-offset error reporting.

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) struct OffsetReader<R> {
    inner: R,
    pub(crate) offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    pub(crate) fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    pub(crate) fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(Error::format(
                        start + read as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::format(start + read as u64, e.to_string())),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take::<4>(what)?))
    }

    /// Reads `out.len()` little-endian f32 values.
    pub(crate) fn f32s(&mut self, out: &mut [f32], what: &str) -> Result<()> {
        let mut bytes = vec![0u8; out.len() * 4];
        self.fill(&mut bytes, what)?;
        for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
            *o = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        Ok(())
    }

    /// Succeeds only at end of stream.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        loop {
            match self.inner.read(&mut b) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(Error::format(self.offset, "trailing bytes after end of record")),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(Error::format(self.offset, e.to_string())),
            }
        }
    }
}
