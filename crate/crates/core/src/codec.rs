//! Little-endian binary helpers shared by checkpoint and dataset files.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("truncated input while reading {context} at byte {offset}")]
    Truncated { context: String, offset: usize },
    #[error("invalid utf-8 in {context}")]
    Utf8 { context: String },
    #[error("{trailing} trailing bytes after last record")]
    Trailing { trailing: usize },
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::Truncated { context: context.to_string(), offset: self.pos });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, context: &str) -> Result<u8, CodecError> {
        Ok(self.take(1, context)?[0])
    }

    pub fn u32(&mut self, context: &str) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, context: &str) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, context: &str) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, context: &str) -> Result<Vec<f64>, CodecError> {
        let raw = self.take(n.saturating_mul(8), context)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn str(&mut self, context: &str) -> Result<String, CodecError> {
        let n = self.u32(context)? as usize;
        let raw = self.take(n, context)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::Utf8 { context: context.to_string() })
    }

    pub fn finish(self) -> Result<(), CodecError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            trailing => Err(CodecError::Trailing { trailing }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_read_reports_context() {
        let mut w = ByteWriter::new();
        w.u32(7);
        w.f64(1.5);
        let bytes = w.into_inner();
        let mut r = ByteReader::new(&bytes[..6]);
        assert_eq!(r.u32("count").unwrap(), 7);
        let err = r.f64("value").unwrap_err();
        assert_eq!(err, CodecError::Truncated { context: "value".into(), offset: 4 });
    }
}
