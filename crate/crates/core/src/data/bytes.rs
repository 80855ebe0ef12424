//! Little-endian cursor with offset-aware errors.

use crate::error::FormatError;

type R<T> = std::result::Result<T, FormatError>;

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Bytes past this point belong to the trailing checksum.
    end: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self {
            buf,
            pos: 0,
            end: buf.len(),
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.end - self.pos
    }

    pub fn take(&mut self, n: usize) -> R<&'a [u8]> {
        if self.pos + n > self.end {
            return Err(FormatError::Truncated {
                expected: self.pos + n + (self.buf.len() - self.end),
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> R<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> R<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> R<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> R<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Invalid {
            offset: self.pos,
            reason: "length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u16s(&mut self, n: usize) -> R<Vec<u16>> {
        let raw = self.take(n * 2)?;
        Ok(raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn string(&mut self, n: usize) -> R<String> {
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| FormatError::Invalid {
            offset: at,
            reason: "string is not valid UTF-8".into(),
        })
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> R<()> {
        if self.buf.len() < 4 {
            return Err(FormatError::Truncated {
                expected: 4,
                actual: self.buf.len(),
            });
        }
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u16) -> R<()> {
        let at = self.pos;
        let v = self.u16()?;
        if v != supported {
            return Err(FormatError::UnsupportedVersion {
                offset: at,
                version: v,
            });
        }
        Ok(())
    }

    /// Checks the trailing CRC32 over everything before it and excludes it
    /// from further reads.
    pub fn verify_crc(&mut self) -> R<()> {
        if self.buf.len() < self.pos + 4 {
            return Err(FormatError::Truncated {
                expected: self.pos + 4,
                actual: self.buf.len(),
            });
        }
        let at = self.buf.len() - 4;
        let stored = u32::from_le_bytes(self.buf[at..].try_into().unwrap());
        let computed = crc32fast::hash(&self.buf[..at]);
        if stored != computed {
            return Err(FormatError::Checksum {
                offset: at,
                stored,
                computed,
            });
        }
        self.end = at;
        Ok(())
    }

    pub fn expect_end(&self) -> R<()> {
        if self.pos != self.end {
            return Err(FormatError::Invalid {
                offset: self.pos,
                reason: format!("{} unexpected trailing bytes", self.end - self.pos),
            });
        }
        Ok(())
    }
}
