//! Lossless coding of quantized symbol streams.
//!
//! Huffman payload layout (little-endian):
//!
//! ```text
//! alphabet_size   u16
//! symbol_count    u64
//! frequencies     alphabet_size x LEB128 unsigned varint
//! bitstream       ceil(sum(freq * code_len) / 8) bytes, MSB-first, zero padded
//! ```
//!
//! Code lengths are not stored; the decoder rebuilds them from the
//! frequencies. Lengths come from a Huffman tree (ties broken by symbol
//! value), are limited to 16 bits, and are handed out to symbols in order of
//! decreasing frequency then increasing symbol value. Codes are canonical:
//! sorted by (length, symbol). A stream with a single distinct symbol has an
//! empty bitstream.
//!
//! The packed layout stores the same two header fields followed by every
//! symbol in `log2(alphabet_size)` bits, MSB-first.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};

pub const MAX_CODE_LEN: usize = 16;
const FIXED_HEADER: usize = 2 + 8;

fn check_alphabet(alphabet_size: usize) -> Result<()> {
    if (1..=256).contains(&alphabet_size) {
        Ok(())
    } else {
        Err(Error::Corrupt(format!("alphabet size {alphabet_size} outside 1..=256")))
    }
}

fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *bytes
            .get(*pos)
            .ok_or_else(|| Error::Corrupt("truncated frequency table".into()))?;
        *pos += 1;
        let bits = (byte & 0x7f) as u64;
        if shift == 63 && bits > 1 {
            return Err(Error::Corrupt("varint overflows u64".into()));
        }
        v |= bits << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Corrupt("varint longer than 10 bytes".into()))
}

fn varint_len(v: u64) -> usize {
    (64 - v.leading_zeros() as usize).max(1).div_ceil(7)
}

fn read_fixed(bytes: &[u8]) -> Result<(usize, u64)> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Truncated {
            expected: FIXED_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    let alphabet = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
    let count = u64::from_le_bytes(bytes[2..10].try_into().unwrap());
    check_alphabet(alphabet)?;
    Ok((alphabet, count))
}

/// Huffman-coded symbol stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedPayload {
    pub alphabet_size: usize,
    pub symbol_count: u64,
    pub frequencies: Vec<u64>,
    pub bitstream: Vec<u8>,
}

impl CodedPayload {
    /// Bytes before the bitstream.
    pub fn header_len(&self) -> usize {
        FIXED_HEADER + self.frequencies.iter().map(|&f| varint_len(f)).sum::<usize>()
    }

    pub fn encoded_len(&self) -> usize {
        self.header_len() + self.bitstream.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.alphabet_size as u16).to_le_bytes());
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        for &f in &self.frequencies {
            write_varint(&mut out, f);
        }
        out.extend_from_slice(&self.bitstream);
        out
    }

    /// Parses a payload occupying all of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (alphabet_size, symbol_count) = read_fixed(bytes)?;
        let mut pos = FIXED_HEADER;
        let frequencies = (0..alphabet_size)
            .map(|_| read_varint(bytes, &mut pos))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            alphabet_size,
            symbol_count,
            frequencies,
            bitstream: bytes[pos..].to_vec(),
        })
    }
}

/// Fixed-width bit packing of a symbol stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedPayload {
    pub alphabet_size: usize,
    pub symbol_count: u64,
    pub data: Vec<u8>,
}

impl PackedPayload {
    pub fn bits_per_symbol(alphabet_size: usize) -> u32 {
        (alphabet_size.max(1) as u32).next_power_of_two().trailing_zeros()
    }

    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER + self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.alphabet_size as u16).to_le_bytes());
        out.extend_from_slice(&self.symbol_count.to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (alphabet_size, symbol_count) = read_fixed(bytes)?;
        Ok(Self {
            alphabet_size,
            symbol_count,
            data: bytes[FIXED_HEADER..].to_vec(),
        })
    }
}

/// Code length of every symbol; zero for absent symbols.
pub fn code_lengths(frequencies: &[u64]) -> Vec<u8> {
    let n = frequencies.len();
    let present: Vec<usize> = (0..n).filter(|&s| frequencies[s] > 0).collect();
    let mut lengths = vec![0u8; n];
    if present.len() < 2 {
        return lengths;
    }

    // Huffman tree depths. Leaves use their symbol as tie-break key, internal
    // nodes come after every leaf in creation order.
    let mut parent = vec![usize::MAX; n + present.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> =
        present.iter().map(|&s| Reverse((frequencies[s], s))).collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((wa, a)) = heap.pop().unwrap();
        let Reverse((wb, b)) = heap.pop().unwrap();
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((wa.saturating_add(wb), next)));
        next += 1;
    }
    let mut count_at = vec![0usize; n + 1];
    for &s in &present {
        let mut depth = 0;
        let mut node = s;
        while parent[node] != usize::MAX {
            node = parent[node];
            depth += 1;
        }
        count_at[depth] += 1;
    }

    limit_lengths(&mut count_at);

    let mut order = present;
    order.sort_by_key(|&s| (Reverse(frequencies[s]), s));
    let mut it = order.into_iter();
    for (len, &count) in count_at.iter().enumerate() {
        for s in it.by_ref().take(count) {
            lengths[s] = len as u8;
        }
    }
    lengths
}

/// Folds code-length counts deeper than `MAX_CODE_LEN` back into range while
/// keeping the Kraft sum at one.
fn limit_lengths(count_at: &mut Vec<usize>) {
    if count_at.len() <= MAX_CODE_LEN + 1 {
        count_at.resize(MAX_CODE_LEN + 1, 0);
        return;
    }
    for i in (MAX_CODE_LEN + 1..count_at.len()).rev() {
        while count_at[i] > 0 {
            let mut j = i - 2;
            while count_at[j] == 0 {
                j -= 1;
            }
            count_at[i] -= 2;
            count_at[i - 1] += 1;
            count_at[j + 1] += 2;
            count_at[j] -= 1;
        }
    }
    count_at.truncate(MAX_CODE_LEN + 1);
}

/// Canonical codes, indexed by symbol.
fn canonical_codes(lengths: &[u8]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = vec![0u32; lengths.len()];
    let mut code = 0u32;
    let mut prev = 0u8;
    for s in order {
        code <<= lengths[s] - prev;
        codes[s] = code;
        code += 1;
        prev = lengths[s];
    }
    codes
}

pub fn histogram(symbols: &[u8], alphabet_size: usize) -> Result<Vec<u64>> {
    check_alphabet(alphabet_size)?;
    let mut freq = vec![0u64; alphabet_size];
    for &s in symbols {
        *freq.get_mut(s as usize).ok_or(Error::SymbolRange {
            symbol: s as u32,
            alphabet: alphabet_size,
        })? += 1;
    }
    Ok(freq)
}

pub fn ec_encode(symbols: &[u8], alphabet_size: usize) -> Result<CodedPayload> {
    let frequencies = histogram(symbols, alphabet_size)?;
    let lengths = code_lengths(&frequencies);
    let codes = canonical_codes(&lengths);
    let total_bits: u64 = frequencies
        .iter()
        .zip(&lengths)
        .map(|(&f, &l)| f * l as u64)
        .sum();
    let mut writer = BitWriter::new(total_bits.div_ceil(8) as usize);
    if lengths.iter().any(|&l| l > 0) {
        for &s in symbols {
            writer.write(codes[s as usize], lengths[s as usize] as u32);
        }
    }
    Ok(CodedPayload {
        alphabet_size,
        symbol_count: symbols.len() as u64,
        frequencies,
        bitstream: writer.finish(),
    })
}

pub fn ec_decode(payload: &CodedPayload) -> Result<Vec<u8>> {
    check_alphabet(payload.alphabet_size)?;
    if payload.frequencies.len() != payload.alphabet_size {
        return Err(Error::Corrupt("frequency table length mismatch".into()));
    }
    let sum = payload
        .frequencies
        .iter()
        .try_fold(0u64, |acc, &f| acc.checked_add(f))
        .ok_or_else(|| Error::Corrupt("frequency overflow".into()))?;
    if sum != payload.symbol_count {
        return Err(Error::Corrupt(format!(
            "frequencies sum to {sum}, header says {}",
            payload.symbol_count
        )));
    }
    let lengths = code_lengths(&payload.frequencies);
    let total_bits = payload
        .frequencies
        .iter()
        .zip(&lengths)
        .try_fold(0u64, |acc, (&f, &l)| acc.checked_add(f.checked_mul(l as u64)?))
        .ok_or_else(|| Error::Corrupt("bitstream size overflow".into()))?;
    let expected = total_bits.div_ceil(8);
    if (payload.bitstream.len() as u64) < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.bitstream.len() as u64,
        });
    }
    if payload.bitstream.len() as u64 > expected {
        return Err(Error::Corrupt(format!(
            "{} bytes after the bitstream",
            payload.bitstream.len() as u64 - expected
        )));
    }
    let count = usize::try_from(payload.symbol_count)
        .map_err(|_| Error::Corrupt("symbol count too large".into()))?;

    if total_bits == 0 {
        let only = payload.frequencies.iter().position(|&f| f > 0);
        return Ok(only.map_or_else(Vec::new, |s| vec![s as u8; count]));
    }

    // canonical decode tables
    let mut order: Vec<usize> = (0..lengths.len()).filter(|&s| lengths[s] > 0).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut count_at = [0u32; MAX_CODE_LEN + 1];
    for &s in &order {
        count_at[lengths[s] as usize] += 1;
    }
    let mut first_code = [0u32; MAX_CODE_LEN + 1];
    let mut first_index = [0u32; MAX_CODE_LEN + 1];
    let (mut code, mut index) = (0u32, 0u32);
    for len in 1..=MAX_CODE_LEN {
        code <<= 1;
        first_code[len] = code;
        first_index[len] = index;
        code += count_at[len];
        index += count_at[len];
    }

    let mut reader = BitReader::new(&payload.bitstream);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut code = 0u32;
        let mut found = None;
        for len in 1..=MAX_CODE_LEN {
            let bit = reader
                .bit()
                .ok_or_else(|| Error::Corrupt("bitstream ended mid-symbol".into()))?;
            code = (code << 1) | bit;
            let offset = code.wrapping_sub(first_code[len]);
            if offset < count_at[len] {
                found = Some(order[(first_index[len] + offset) as usize]);
                break;
            }
        }
        let s = found.ok_or_else(|| Error::Corrupt("invalid code".into()))?;
        out.push(s as u8);
    }
    if reader.position() as u64 != total_bits {
        return Err(Error::Corrupt("bitstream length does not match frequencies".into()));
    }
    while let Some(bit) = reader.bit() {
        if bit != 0 {
            return Err(Error::Corrupt("non-zero padding".into()));
        }
    }
    if histogram(&out, payload.alphabet_size)? != payload.frequencies {
        return Err(Error::Corrupt("decoded symbols disagree with frequency table".into()));
    }
    Ok(out)
}

/// Packs every symbol in `log2(alphabet_size)` bits.
pub fn pack_symbols(symbols: &[u8], alphabet_size: usize) -> Result<PackedPayload> {
    check_alphabet(alphabet_size)?;
    let width = PackedPayload::bits_per_symbol(alphabet_size);
    let mut writer = BitWriter::new((symbols.len() * width as usize).div_ceil(8));
    for &s in symbols {
        if s as usize >= alphabet_size {
            return Err(Error::SymbolRange {
                symbol: s as u32,
                alphabet: alphabet_size,
            });
        }
        if width > 0 {
            writer.write(s as u32, width);
        }
    }
    Ok(PackedPayload {
        alphabet_size,
        symbol_count: symbols.len() as u64,
        data: writer.finish(),
    })
}

pub fn unpack_symbols(payload: &PackedPayload) -> Result<Vec<u8>> {
    check_alphabet(payload.alphabet_size)?;
    let width = PackedPayload::bits_per_symbol(payload.alphabet_size);
    let bits = payload
        .symbol_count
        .checked_mul(width as u64)
        .ok_or_else(|| Error::Corrupt("symbol count too large".into()))?;
    let expected = bits.div_ceil(8);
    if payload.data.len() as u64 != expected {
        return Err(if (payload.data.len() as u64) < expected {
            Error::Truncated {
                expected,
                found: payload.data.len() as u64,
            }
        } else {
            Error::Corrupt("trailing bytes after packed symbols".into())
        });
    }
    let mut reader = BitReader::new(&payload.data);
    let mut out = Vec::with_capacity(payload.symbol_count as usize);
    for _ in 0..payload.symbol_count {
        let v = reader.read(width).unwrap();
        if v as usize >= payload.alphabet_size {
            return Err(Error::Corrupt(format!("packed symbol {v} out of range")));
        }
        out.push(v as u8);
    }
    Ok(out)
}
