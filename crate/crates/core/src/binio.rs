//! Little-endian byte cursor shared by the dataset container and the
//! checkpoint format. Every failure carries the byte offset where it
//! happened.

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ReadFailure {
    pub offset: u64,
    pub msg: String,
}

pub(crate) type ReadResult<T> = Result<T, ReadFailure>;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn fail<T>(&self, msg: impl Into<String>) -> ReadResult<T> {
        Err(ReadFailure { offset: self.offset(), msg: msg.into() })
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> ReadResult<&'a [u8]> {
        if self.remaining() < n {
            return self.fail(format!("truncated {what}: need {n} bytes, {} left", self.remaining()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> ReadResult<u8> {
        Ok(self.bytes(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> ReadResult<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> ReadResult<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> ReadResult<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }

    pub fn string(&mut self, what: &str) -> ReadResult<String> {
        let start = self.offset();
        let len = self.u16(what)? as usize;
        let raw = self.bytes(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| ReadFailure { offset: start, msg: format!("{what} is not valid UTF-8") })
    }
}

/// Splits off and verifies the trailing CRC32. Returns the checked payload.
pub(crate) fn verify_crc(buf: &[u8]) -> ReadResult<&[u8]> {
    if buf.len() < 4 {
        return Err(ReadFailure { offset: 0, msg: "file too short for checksum".into() });
    }
    let (payload, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(ReadFailure {
            offset: payload.len() as u64,
            msg: format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        });
    }
    Ok(payload)
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn append_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}
