//! MSB-first bit packing.

pub(crate) struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    pub(crate) fn new(capacity: usize) -> Self {
        Self {
            out: Vec::with_capacity(capacity),
            acc: 0,
            filled: 0,
        }
    }

    /// Appends the low `len` bits of `code`, `len <= 32`.
    #[inline]
    pub(crate) fn write(&mut self, code: u32, len: u32) {
        self.acc = (self.acc << len) | code as u64;
        self.filled += len;
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
    }

    /// Flushes, zero-padding the last byte.
    pub(crate) fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
        self.out
    }
}

pub(crate) struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    #[inline]
    pub(crate) fn bit(&mut self) -> Option<u32> {
        let byte = *self.bytes.get(self.pos / 8)?;
        let bit = (byte >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Some(bit as u32)
    }

    pub(crate) fn read(&mut self, len: u32) -> Option<u32> {
        let mut v = 0u32;
        for _ in 0..len {
            v = (v << 1) | self.bit()?;
        }
        Some(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_round_trip() {
        let mut w = BitWriter::new(4);
        w.write(0b101, 3);
        w.write(0b1, 1);
        w.write(0x3ff, 10);
        let bytes = w.finish();
        assert_eq!(bytes, vec![0b1011_1111, 0b1111_1100]);
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read(3), Some(0b101));
        assert_eq!(r.read(1), Some(1));
        assert_eq!(r.read(10), Some(0x3ff));
        assert_eq!(r.read(2), Some(0));
        assert_eq!(r.bit(), None);
    }
}
