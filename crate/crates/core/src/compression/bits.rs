//! MSB-first bit packing for the canonical message encoding.
//!
//! Payload fields are packed contiguously with no per-field alignment, so the
//! payload's bit length equals the documented bit-cost formula exactly; only
//! the final byte is zero-padded.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        BitWriter::default()
    }

    /// Append the low `nbits` of `value`, most significant bit first.
    pub fn write_bits(&mut self, value: u64, nbits: usize) {
        debug_assert!(nbits <= 64);
        for i in (0..nbits).rev() {
            let bit = (value >> i) & 1;
            let byte_idx = self.bit_len / 8;
            if byte_idx == self.bytes.len() {
                self.bytes.push(0);
            }
            self.bytes[byte_idx] |= (bit as u8) << (7 - self.bit_len % 8);
            self.bit_len += 1;
        }
    }

    pub fn write_bit(&mut self, bit: bool) {
        self.write_bits(bit as u64, 1);
    }

    pub fn write_f32(&mut self, v: f32) {
        self.write_bits(v.to_bits() as u64, 32);
    }

    pub fn write_f64(&mut self, v: f64) {
        self.write_bits(v.to_bits(), 64);
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }

    pub fn remaining_bits(&self) -> usize {
        self.bytes.len() * 8 - self.pos
    }

    pub fn read_bits(&mut self, nbits: usize) -> Result<u64> {
        debug_assert!(nbits <= 64);
        if nbits > self.remaining_bits() {
            return Err(Error::MalformedPayload(format!(
                "truncated payload: need {nbits} bits, {} left",
                self.remaining_bits()
            )));
        }
        let mut out = 0u64;
        for _ in 0..nbits {
            let byte = self.bytes[self.pos / 8];
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            out = (out << 1) | bit as u64;
            self.pos += 1;
        }
        Ok(out)
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        Ok(self.read_bits(1)? == 1)
    }

    pub fn read_f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.read_bits(32)? as u32))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.read_bits(64)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_widths() {
        let mut w = BitWriter::new();
        w.write_bits(0b101, 3);
        w.write_f32(1.5);
        w.write_bits(0x3ff, 10);
        w.write_f64(-0.25);
        assert_eq!(w.bit_len(), 3 + 32 + 10 + 64);
        let bytes = w.into_bytes();

        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read_bits(3).unwrap(), 0b101);
        assert_eq!(r.read_f32().unwrap(), 1.5);
        assert_eq!(r.read_bits(10).unwrap(), 0x3ff);
        assert_eq!(r.read_f64().unwrap(), -0.25);
    }

    #[test]
    fn truncated_read_is_error() {
        let mut w = BitWriter::new();
        w.write_bits(0b11, 2);
        let bytes = w.into_bytes();
        let mut r = BitReader::new(&bytes);
        assert!(r.read_bits(9).is_err());
    }

    #[test]
    fn zero_width_write_is_noop() {
        let mut w = BitWriter::new();
        w.write_bits(123, 0);
        assert_eq!(w.bit_len(), 0);
        assert!(w.into_bytes().is_empty());
    }
}
