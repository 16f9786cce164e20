//! Little-endian framing shared by the dataset and checkpoint formats:
//! 4-byte magic, u16 version, payload, trailing CRC32 of the payload.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
    payload_start: usize,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        let payload_start = buf.len();
        Self { buf, payload_start }
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub(crate) fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf[self.payload_start..]);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    payload: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, version and checksum, returning a reader over the
    /// payload.
    pub(crate) fn open(bytes: &'a [u8], magic: &[u8; 4], supported: u16) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated);
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        if bytes.len() < 6 {
            return Err(Error::Truncated);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != supported {
            return Err(Error::Version(version));
        }
        if bytes.len() < 10 {
            return Err(Error::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let payload = &body[6..];
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self { payload, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        if end > self.payload.len() {
            return Err(Error::Truncated);
        }
        let out = &self.payload[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub(crate) fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|e| Error::Malformed(format!("invalid utf-8: {e}")))
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.payload.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.payload.len() - self.pos
            )));
        }
        Ok(())
    }
}
