//! Bit-exact integer coding.
//!
//! Elias gamma codes and the sparse integer vector wire format used by the
//! quantizer:
//!
//! ```text
//! gamma(nnz + 1) | { gamma(gap) sign gamma(|value|) } * nnz
//! ```
//!
//! `gap` is the distance from the previous nonzero position (the first gap
//! is measured from position 0, positions are 1-based), `sign` is one bit
//! with `0` meaning positive. Codes are written most-significant-bit first
//! and concatenated without padding.

use std::fmt;

use crate::error::{Error, Result};

/// An append-only sequence of bits, stored MSB-first in bytes.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitStream {
    bytes: Vec<u8>,
    len: usize,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bits: usize) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8)),
            len: 0,
        }
    }

    /// Parses a string of `'0'`/`'1'` characters. Any other character is an
    /// invalid-input error.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let mut out = Self::with_capacity(s.len());
        for ch in s.chars() {
            match ch {
                '0' => out.push(false),
                '1' => out.push(true),
                other => {
                    return Err(Error::InvalidInput(format!(
                        "unexpected character {other:?} in bit string"
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Rebuilds a stream from its padded byte form and its bit length.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::CorruptStream(format!(
                "{} bytes cannot hold exactly {len} bits",
                bytes.len()
            )));
        }
        let mut bytes = bytes.to_vec();
        if !len.is_multiple_of(8) {
            let last = bytes.len() - 1;
            let keep = 0xFFu8 << (8 - len % 8);
            if bytes[last] & !keep != 0 {
                return Err(Error::CorruptStream("nonzero padding bits".into()));
            }
            bytes[last] &= keep;
        }
        Ok(Self { bytes, len })
    }

    /// Byte form: MSB-first, zero-padded in the final byte. The bit length
    /// is not part of the output and must be stored alongside it.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn push(&mut self, bit: bool) {
        let offset = self.len % 8;
        if offset == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.len() - 1;
            self.bytes[last] |= 0x80 >> offset;
        }
        self.len += 1;
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        for shift in (0..width).rev() {
            self.push((value >> shift) & 1 == 1);
        }
    }

    pub fn get(&self, index: usize) -> Option<bool> {
        (index < self.len).then(|| self.bytes[index / 8] & (0x80 >> (index % 8)) != 0)
    }

    pub fn append(&mut self, other: &BitStream) {
        if self.len.is_multiple_of(8) {
            self.bytes.extend_from_slice(&other.bytes);
            self.len += other.len;
        } else {
            for bit in other.iter() {
                self.push(bit);
            }
        }
    }

    pub fn concat(mut self, other: &BitStream) -> BitStream {
        self.append(other);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.bytes[i / 8] & (0x80 >> (i % 8)) != 0)
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader {
            stream: self,
            cursor: 0,
        }
    }
}

impl fmt::Debug for BitStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitStream(\"{self}\")")
    }
}

impl fmt::Display for BitStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for bit in self.iter() {
            f.write_str(if bit { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Sequential reader over a [`BitStream`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    stream: &'a BitStream,
    cursor: usize,
}

impl<'a> BitReader<'a> {
    pub fn at(stream: &'a BitStream, cursor: usize) -> Self {
        Self { stream, cursor }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.stream.len().saturating_sub(self.cursor)
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        let bit = self
            .stream
            .get(self.cursor)
            .ok_or_else(|| Error::Decode(format!("stream truncated at bit {}", self.cursor)))?;
        self.cursor += 1;
        Ok(bit)
    }

    pub fn read_bits(&mut self, width: u32) -> Result<u64> {
        if self.remaining() < width as usize {
            return Err(Error::Decode(format!(
                "need {width} bits at {}, only {} left",
                self.cursor,
                self.remaining()
            )));
        }
        let mut value = 0u64;
        for _ in 0..width {
            value = (value << 1) | u64::from(self.read_bit()?);
        }
        Ok(value)
    }

    pub fn read_gamma(&mut self) -> Result<u64> {
        let mut zeros = 0u32;
        while !self.read_bit()? {
            zeros += 1;
            if zeros > 63 {
                return Err(Error::CorruptStream(
                    "gamma prefix longer than 63 zeros".into(),
                ));
            }
        }
        let tail = self.read_bits(zeros)?;
        Ok((1u64 << zeros) | tail)
    }
}

/// Length in bits of the gamma code for `n >= 1`: `2*floor(log2 n) + 1`.
pub fn elias_len(n: u64) -> usize {
    debug_assert!(n >= 1);
    2 * (63 - n.leading_zeros() as usize) + 1
}

pub fn write_gamma(out: &mut BitStream, n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput(
            "Elias gamma code is defined for n >= 1".into(),
        ));
    }
    let width = 63 - n.leading_zeros();
    out.push_bits(0, width);
    out.push_bits(n, width + 1);
    Ok(())
}

/// Elias gamma code of a positive integer.
pub fn elias_encode(n: i64) -> Result<BitStream> {
    if n < 1 {
        return Err(Error::InvalidInput(format!(
            "Elias gamma code needs n >= 1, got {n}"
        )));
    }
    let mut out = BitStream::with_capacity(elias_len(n as u64));
    write_gamma(&mut out, n as u64)?;
    Ok(out)
}

/// Decodes one gamma code starting at `cursor`; returns the value and the
/// cursor just past the code.
pub fn elias_decode(stream: &BitStream, cursor: usize) -> Result<(u64, usize)> {
    let mut reader = BitReader::at(stream, cursor);
    let n = reader.read_gamma()?;
    Ok((n, reader.cursor()))
}

/// A sparse vector of nonzero integers with 1-based, strictly increasing
/// positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SparseIntVector {
    dim: usize,
    entries: Vec<(usize, i64)>,
}

impl SparseIntVector {
    pub fn new(dim: usize, entries: Vec<(usize, i64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        let mut prev = 0usize;
        for &(pos, value) in &entries {
            if pos <= prev {
                return Err(Error::InvalidInput(format!(
                    "positions must be strictly increasing and >= 1 (saw {pos} after {prev})"
                )));
            }
            if pos > dim {
                return Err(Error::InvalidInput(format!(
                    "position {pos} exceeds dimension {dim}"
                )));
            }
            if value == 0 {
                return Err(Error::InvalidInput(format!("zero value at position {pos}")));
            }
            if value == i64::MIN {
                return Err(Error::InvalidInput(format!(
                    "value at position {pos} has no representable magnitude"
                )));
            }
            prev = pos;
        }
        Ok(Self { dim, entries })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    /// Collects the nonzero coordinates of a dense integer vector.
    pub fn from_dense(values: &[i64]) -> Result<Self> {
        let entries = values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, &v)| (i + 1, v))
            .collect();
        Self::new(values.len(), entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, i64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Vec<i64> {
        let mut out = vec![0; self.dim];
        for &(pos, value) in &self.entries {
            out[pos - 1] = value;
        }
        out
    }
}

pub fn write_sparse(out: &mut BitStream, v: &SparseIntVector) -> Result<()> {
    write_gamma(out, v.nnz() as u64 + 1)?;
    let mut prev = 0usize;
    for &(pos, value) in v.entries() {
        write_gamma(out, (pos - prev) as u64)?;
        out.push(value < 0);
        write_gamma(out, value.unsigned_abs())?;
        prev = pos;
    }
    Ok(())
}

/// Encoded size in bits, without building the stream.
pub fn sparse_len(v: &SparseIntVector) -> usize {
    let mut bits = elias_len(v.nnz() as u64 + 1);
    let mut prev = 0usize;
    for &(pos, value) in v.entries() {
        bits += elias_len((pos - prev) as u64) + 1 + elias_len(value.unsigned_abs());
        prev = pos;
    }
    bits
}

pub fn encode_sparse(v: &SparseIntVector) -> BitStream {
    let mut out = BitStream::with_capacity(sparse_len(v));
    // entries are validated on construction, so every gamma argument is >= 1
    write_sparse(&mut out, v).expect("validated sparse vector");
    out
}

pub fn read_sparse(reader: &mut BitReader<'_>, dim: usize) -> Result<SparseIntVector> {
    let header = reader.read_gamma()?;
    let nnz = (header - 1) as usize;
    if nnz > dim {
        return Err(Error::CorruptStream(format!(
            "{nnz} nonzeros cannot fit in dimension {dim}"
        )));
    }
    let mut entries = Vec::with_capacity(nnz);
    let mut pos = 0usize;
    for _ in 0..nnz {
        let gap = reader.read_gamma()? as usize;
        pos = pos
            .checked_add(gap)
            .filter(|&p| p <= dim)
            .ok_or_else(|| Error::CorruptStream(format!("position overflows dimension {dim}")))?;
        let negative = reader.read_bit()?;
        let magnitude = reader.read_gamma()?;
        if magnitude > i64::MAX as u64 {
            return Err(Error::CorruptStream(format!(
                "magnitude {magnitude} does not fit a signed 64-bit integer"
            )));
        }
        let value = if negative {
            -(magnitude as i64)
        } else {
            magnitude as i64
        };
        entries.push((pos, value));
    }
    Ok(SparseIntVector { dim, entries })
}

/// Inverse of [`encode_sparse`]. The whole stream must be consumed.
pub fn decode_sparse(stream: &BitStream, dim: usize) -> Result<SparseIntVector> {
    if dim == 0 {
        return Err(Error::InvalidInput("dimension must be positive".into()));
    }
    let mut reader = stream.reader();
    let v = read_sparse(&mut reader, dim)?;
    if reader.remaining() != 0 {
        return Err(Error::CorruptStream(format!(
            "{} trailing bits after sparse vector",
            reader.remaining()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(s: &str) -> BitStream {
        BitStream::from_bit_str(s).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(elias_encode(1).unwrap().to_string(), "1");
        assert_eq!(elias_encode(2).unwrap().to_string(), "010");
        assert_eq!(elias_encode(5).unwrap().to_string(), "00101");
        assert_eq!(elias_encode(i64::MAX).unwrap().len(), 125);
    }

    #[test]
    fn gamma_rejects_nonpositive() {
        assert!(matches!(elias_encode(0), Err(Error::InvalidInput(_))));
        assert!(matches!(elias_encode(-3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gamma_decode_examples() {
        assert_eq!(elias_decode(&bits("1"), 0).unwrap(), (1, 1));
        assert_eq!(elias_decode(&bits("00101"), 0).unwrap(), (5, 5));

        let s = bits("0101");
        let (a, next) = elias_decode(&s, 0).unwrap();
        let (b, end) = elias_decode(&s, next).unwrap();
        assert_eq!((a, b, end), (2, 1, 4));
    }

    #[test]
    fn gamma_decode_truncated() {
        assert!(matches!(elias_decode(&bits("001"), 0), Err(Error::Decode(_))));
        assert!(matches!(elias_decode(&bits(""), 0), Err(Error::Decode(_))));
    }

    #[test]
    fn sparse_examples() {
        let empty = SparseIntVector::empty(4).unwrap();
        assert_eq!(encode_sparse(&empty).to_string(), "1");

        let v = SparseIntVector::new(4, vec![(2, 3), (4, -1)]).unwrap();
        let expected = ["011", "010", "0", "011", "010", "1", "1"].concat();
        let encoded = encode_sparse(&v);
        assert_eq!(encoded.to_string(), expected);
        assert_eq!(encoded.len(), sparse_len(&v));
        assert_eq!(decode_sparse(&encoded, 4).unwrap(), v);
    }

    #[test]
    fn sparse_decode_errors() {
        assert_eq!(decode_sparse(&bits("1"), 7).unwrap(), SparseIntVector::empty(7).unwrap());
        assert!(decode_sparse(&bits("0"), 4).is_err());
        // one entry at gap 5 in a 4-dim vector
        let mut s = BitStream::new();
        write_gamma(&mut s, 2).unwrap();
        write_gamma(&mut s, 5).unwrap();
        s.push(false);
        write_gamma(&mut s, 1).unwrap();
        assert!(matches!(decode_sparse(&s, 4), Err(Error::CorruptStream(_))));
        // trailing garbage
        assert!(matches!(decode_sparse(&bits("11"), 4), Err(Error::CorruptStream(_))));
    }

    #[test]
    fn sparse_vector_invariants() {
        assert!(SparseIntVector::new(3, vec![(2, 1), (2, 1)]).is_err());
        assert!(SparseIntVector::new(3, vec![(0, 1)]).is_err());
        assert!(SparseIntVector::new(3, vec![(4, 1)]).is_err());
        assert!(SparseIntVector::new(3, vec![(1, 0)]).is_err());
        assert!(SparseIntVector::new(0, vec![]).is_err());
    }

    #[test]
    fn byte_form_is_msb_first_and_padded() {
        let s = bits("1010000011");
        assert_eq!(s.as_bytes(), &[0b1010_0000, 0b1100_0000]);
        assert_eq!(BitStream::from_bytes(s.as_bytes(), s.len()).unwrap(), s);
        assert!(BitStream::from_bytes(&[0xFF, 0xFF], 10).is_err());
        assert!(BitStream::from_bytes(&[0xFF], 10).is_err());
    }

    #[test]
    fn concat_is_length_additive() {
        let a = bits("101");
        let b = bits("0011100");
        let c = bits("1");
        let left = a.clone().concat(&b).concat(&c);
        let right = a.clone().concat(&b.clone().concat(&c));
        assert_eq!(left, right);
        assert_eq!(left.len(), 11);
        assert_eq!(left.to_string(), "10100111001");
    }

    #[test]
    fn encoded_length_monotone_in_nnz() {
        let mut entries = Vec::new();
        let mut prev = sparse_len(&SparseIntVector::empty(50).unwrap());
        for pos in (1..=50).step_by(3) {
            entries.push((pos, 7));
            let len = sparse_len(&SparseIntVector::new(50, entries.clone()).unwrap());
            assert!(len >= prev);
            prev = len;
        }
    }

    fn sparse_strategy() -> impl Strategy<Value = SparseIntVector> {
        (1usize..=10_000, 0.0f64..=1.0, any::<u64>()).prop_map(|(dim, density, seed)| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dense: Vec<i64> = (0..dim)
                .map(|_| {
                    if rng.random::<f64>() < density {
                        let mag = 1i64 << rng.random_range(0..40);
                        let v = rng.random_range(1..=mag);
                        if rng.random() { v } else { -v }
                    } else {
                        0
                    }
                })
                .collect();
            SparseIntVector::from_dense(&dense).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sparse_roundtrip(v in sparse_strategy()) {
            let encoded = encode_sparse(&v);
            prop_assert_eq!(encoded.len(), sparse_len(&v));
            prop_assert_eq!(decode_sparse(&encoded, v.dim()).unwrap(), v);
        }

        #[test]
        fn gamma_roundtrip_and_length(n in 1u64..=u64::MAX >> 1) {
            let code = elias_encode(n as i64).unwrap();
            prop_assert_eq!(code.len(), 2 * (63 - n.leading_zeros() as usize) + 1);
            prop_assert_eq!(elias_decode(&code, 0).unwrap(), (n, code.len()));
        }
    }
}
