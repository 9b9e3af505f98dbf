//! Little-endian binary framing shared by every on-disk artifact.
//!
//! A frame is `magic | payload | crc32`, where the CRC covers the magic and
//! the payload. Readers verify the magic and checksum before handing out any
//! payload bytes.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

/// Appends little-endian primitives to an in-memory frame.
pub struct FrameWriter {
    buf: Vec<u8>,
}

impl FrameWriter {
    pub fn new(magic: &[u8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// u32 length prefix followed by the raw bytes.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    /// Seals the frame with the trailing CRC32.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

/// Cursor over a verified frame payload.
pub struct FrameReader<'a> {
    payload: &'a [u8],
    pos: usize,
}

impl<'a> FrameReader<'a> {
    /// Checks magic and CRC and positions the cursor after the magic.
    pub fn open(data: &'a [u8], magic: &[u8]) -> Result<Self, CodecError> {
        if data.len() < magic.len() + 4 {
            return Err(CodecError::Corrupt("file too short".into()));
        }
        if &data[..magic.len()] != magic {
            return Err(CodecError::Corrupt("bad magic bytes".into()));
        }
        let (body, tail) = data.split_at(data.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));
        if crc32fast::hash(body) != stored {
            return Err(CodecError::Corrupt("checksum mismatch".into()));
        }
        Ok(Self {
            payload: &body[magic.len()..],
            pos: 0,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.payload.len())
            .ok_or_else(|| CodecError::Corrupt("unexpected end of payload".into()))?;
        let out = &self.payload[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String, CodecError> {
        let raw = self.bytes()?;
        String::from_utf8(raw.to_vec()).map_err(|_| CodecError::Corrupt("invalid utf-8".into()))
    }

    /// Fails unless every payload byte has been consumed.
    pub fn finish(self) -> Result<(), CodecError> {
        if self.pos != self.payload.len() {
            return Err(CodecError::Corrupt(format!(
                "{} trailing bytes",
                self.payload.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CodecError> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, CodecError> {
    Ok(std::fs::read(path)?)
}
