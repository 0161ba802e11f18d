//! Sub-byte code packing: 8/4/2-bit lanes, little-endian within each byte.

use serde::{Deserialize, Serialize};

/// Codes of `bits` each, element `i` at bit offset `i * bits`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackedCodes {
    pub bits: u8,
    pub len: usize,
    #[serde(skip)]
    pub data: Vec<u8>,
}

impl PackedCodes {
    pub fn pack(codes: &[u8], bits: u8) -> PackedCodes {
        assert!(matches!(bits, 2 | 4 | 8), "unsupported lane width {bits}");
        let per_byte = 8 / bits as usize;
        let mask = ((1u16 << bits) - 1) as u8;
        let mut data = vec![0u8; codes.len().div_ceil(per_byte)];
        for (i, &c) in codes.iter().enumerate() {
            debug_assert!(c <= mask, "code {c} does not fit in {bits} bits");
            data[i / per_byte] |= (c & mask) << ((i % per_byte) * bits as usize);
        }
        PackedCodes {
            bits,
            len: codes.len(),
            data,
        }
    }

    pub fn from_bytes(data: Vec<u8>, len: usize, bits: u8) -> Option<PackedCodes> {
        let per_byte = 8 / bits as usize;
        (matches!(bits, 2 | 4 | 8) && data.len() == len.div_ceil(per_byte)).then_some(PackedCodes {
            bits,
            len,
            data,
        })
    }

    pub fn get(&self, i: usize) -> u8 {
        let per_byte = 8 / self.bits as usize;
        let mask = ((1u16 << self.bits) - 1) as u8;
        (self.data[i / per_byte] >> ((i % per_byte) * self.bits as usize)) & mask
    }

    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len()
    }
}
