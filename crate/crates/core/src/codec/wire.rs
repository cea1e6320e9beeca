//! Little-endian bit packing. Bit `i` of the stream lives in byte `i / 8`
//! at position `i % 8`, so byte-aligned multi-bit fields read as ordinary
//! little-endian integers.

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: u64) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8) as usize),
            bits: 0,
        }
    }

    pub fn push_bit(&mut self, bit: bool) {
        let off = (self.bits % 8) as u32;
        if off == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().expect("byte allocated") |= 1 << off;
        }
        self.bits += 1;
    }

    /// Appends the low `width` bits of `value`, least significant first.
    pub fn push(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        if self.bits.is_multiple_of(8) && width.is_multiple_of(8) {
            self.bytes
                .extend_from_slice(&value.to_le_bytes()[..(width / 8) as usize]);
            self.bits += u64::from(width);
            return;
        }
        for k in 0..width {
            self.push_bit((value >> k) & 1 == 1);
        }
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        let byte = self
            .bytes
            .get((self.pos / 8) as usize)
            .ok_or_else(|| Error::Wire(format!("truncated at bit {}", self.pos)))?;
        let bit = (byte >> (self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn read(&mut self, width: u32) -> Result<u64> {
        let mut v = 0u64;
        for k in 0..width {
            if self.read_bit()? {
                v |= 1 << k;
            }
        }
        Ok(v)
    }

    /// Checks that only zero padding (less than one byte) remains.
    pub fn finish(mut self) -> Result<()> {
        let total = self.bytes.len() as u64 * 8;
        if total - self.pos >= 8 {
            return Err(Error::Wire(format!("{} trailing bits", total - self.pos)));
        }
        while self.pos < total {
            if self.read_bit()? {
                return Err(Error::Wire("non-zero padding".into()));
            }
        }
        Ok(())
    }
}
