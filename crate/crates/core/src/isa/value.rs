use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Widest SIMD register the simulator models (AVX-512).
pub const MAX_SIMD_BITS: u32 = 512;

const LANES: usize = (MAX_SIMD_BITS / 64) as usize;

/// Contents of one SIMD register, up to 512 bits, as little-endian 64-bit
/// lanes. Register byte `i` is bits `8i..8i+8`, matching the memory order a
/// `movdqu` load would produce.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SimdValue {
    lanes: [u64; LANES],
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseSimdError {
    #[error("SIMD immediate must start with 0x")]
    MissingPrefix,
    #[error("SIMD immediate has no digits")]
    Empty,
    #[error("SIMD immediate has {0} hex digits, at most 128 fit")]
    TooLong(usize),
    #[error("invalid hex digit `{0}`")]
    BadDigit(char),
}

impl SimdValue {
    pub const ZERO: SimdValue = SimdValue { lanes: [0; LANES] };

    pub fn from_lanes(lanes: [u64; LANES]) -> SimdValue {
        SimdValue { lanes }
    }

    pub fn from_u128(value: u128) -> SimdValue {
        let mut lanes = [0; LANES];
        lanes[0] = value as u64;
        lanes[1] = (value >> 64) as u64;
        SimdValue { lanes }
    }

    /// Loads 16 bytes in memory order into the low 128 bits.
    pub fn from_le_bytes_128(bytes: [u8; 16]) -> SimdValue {
        SimdValue::from_u128(u128::from_le_bytes(bytes))
    }

    pub fn lanes(&self) -> &[u64; LANES] {
        &self.lanes
    }

    pub fn lane(&self, lane: usize) -> u64 {
        self.lanes[lane]
    }

    pub fn set_lane(&mut self, lane: usize, value: u64) {
        self.lanes[lane] = value;
    }

    pub fn low_u128(&self) -> u128 {
        self.lanes[0] as u128 | (self.lanes[1] as u128) << 64
    }

    /// Replaces the low 128 bits, keeping the upper lanes.
    pub fn with_low_u128(mut self, value: u128) -> SimdValue {
        self.lanes[0] = value as u64;
        self.lanes[1] = (value >> 64) as u64;
        self
    }

    pub fn bit(&self, bit: u32) -> bool {
        (self.lanes[(bit / 64) as usize] >> (bit % 64)) & 1 == 1
    }

    /// Extracts `count` (≤ 64) bits starting at `offset`, which must not
    /// straddle a lane boundary.
    pub fn bits(&self, offset: u32, count: u32) -> u64 {
        debug_assert!(count <= 64 && offset % 64 + count <= 64);
        let lane = self.lanes[(offset / 64) as usize] >> (offset % 64);
        if count == 64 {
            lane
        } else {
            lane & ((1u64 << count) - 1)
        }
    }

    /// Writes `count` bits of `value` at `offset` (same lane rule as [`bits`](Self::bits)).
    pub fn set_bits(&mut self, offset: u32, count: u32, value: u64) {
        debug_assert!(count <= 64 && offset % 64 + count <= 64);
        let mask = if count == 64 {
            u64::MAX
        } else {
            (1u64 << count) - 1
        };
        let shift = offset % 64;
        let lane = &mut self.lanes[(offset / 64) as usize];
        *lane = (*lane & !(mask << shift)) | ((value & mask) << shift);
    }

    /// Clears every bit at or above `width`.
    pub fn truncate(mut self, width: u32) -> SimdValue {
        for (i, lane) in self.lanes.iter_mut().enumerate() {
            let lo = i as u32 * 64;
            if lo >= width {
                *lane = 0;
            } else if width - lo < 64 {
                *lane &= (1u64 << (width - lo)) - 1;
            }
        }
        self
    }

    pub fn xor(&self, other: &SimdValue) -> SimdValue {
        let mut lanes = self.lanes;
        for (a, b) in lanes.iter_mut().zip(other.lanes.iter()) {
            *a ^= b;
        }
        SimdValue { lanes }
    }

    pub fn count_ones(&self) -> u32 {
        self.lanes.iter().map(|l| l.count_ones()).sum()
    }

    /// Number of significant bits (0 for zero).
    pub fn significant_bits(&self) -> u32 {
        for i in (0..LANES).rev() {
            if self.lanes[i] != 0 {
                return i as u32 * 64 + 64 - self.lanes[i].leading_zeros();
            }
        }
        0
    }

    /// Hex rendering with exactly `width / 4` digits, most significant first.
    pub fn to_hex(&self, width: u32) -> String {
        let lanes = width.div_ceil(64) as usize;
        let mut s = String::with_capacity(lanes * 16);
        for i in (0..lanes).rev() {
            s.push_str(&format!("{:016x}", self.lanes[i]));
        }
        let digits = (width / 4) as usize;
        s.split_off(s.len() - digits)
    }
}

impl FromStr for SimdValue {
    type Err = ParseSimdError;

    /// Parses `0x`-prefixed hex, most significant digit first.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .strip_prefix("0x")
            .or_else(|| s.strip_prefix("0X"))
            .ok_or(ParseSimdError::MissingPrefix)?;
        let digits: Vec<char> = digits.chars().filter(|&c| c != '_').collect();
        if digits.is_empty() {
            return Err(ParseSimdError::Empty);
        }
        if digits.len() > (MAX_SIMD_BITS / 4) as usize {
            return Err(ParseSimdError::TooLong(digits.len()));
        }
        let mut value = SimdValue::ZERO;
        for (pos, c) in digits.iter().rev().enumerate() {
            let nibble = c.to_digit(16).ok_or(ParseSimdError::BadDigit(*c))? as u64;
            value.lanes[pos / 16] |= nibble << (4 * (pos % 16));
        }
        Ok(value)
    }
}

impl fmt::Display for SimdValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = match self.significant_bits() {
            0..=128 => 128,
            129..=256 => 256,
            _ => 512,
        };
        write!(f, "0x{}", self.to_hex(width))
    }
}

impl fmt::Debug for SimdValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SimdValue({self})")
    }
}

impl Serialize for SimdValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SimdValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_round_trip_and_byte_order() {
        let v: SimdValue = "0x0102030405060708090a0b0c0d0e0f10".parse().unwrap();
        assert_eq!(v.lane(0), 0x090a0b0c0d0e0f10);
        assert_eq!(v.lane(1), 0x0102030405060708);
        assert_eq!(v.low_u128().to_le_bytes()[0], 0x10);
        assert_eq!(v.to_string().parse::<SimdValue>().unwrap(), v);
        assert_eq!("0x0".parse::<SimdValue>().unwrap(), SimdValue::ZERO);
    }

    #[test]
    fn hex_rejects_garbage() {
        assert_eq!(
            "12".parse::<SimdValue>(),
            Err(ParseSimdError::MissingPrefix)
        );
        assert_eq!("0x".parse::<SimdValue>(), Err(ParseSimdError::Empty));
        assert_eq!(
            "0xg".parse::<SimdValue>(),
            Err(ParseSimdError::BadDigit('g'))
        );
        let long = format!("0x{}", "f".repeat(129));
        assert_eq!(long.parse::<SimdValue>(), Err(ParseSimdError::TooLong(129)));
    }

    #[test]
    fn bit_groups() {
        let mut v = SimdValue::ZERO;
        v.set_bits(68, 4, 0xb);
        assert_eq!(v.bits(68, 4), 0xb);
        assert_eq!(v.lane(1), 0xb0);
        assert!(v.bit(68) && v.bit(69) && !v.bit(70) && v.bit(71));
        v.set_bits(64, 64, u64::MAX);
        assert_eq!(v.bits(64, 64), u64::MAX);
    }

    #[test]
    fn truncate_clears_upper_bits() {
        let v = SimdValue::from_lanes([u64::MAX; 8]);
        let t = v.truncate(128);
        assert_eq!(t.lanes(), &[u64::MAX, u64::MAX, 0, 0, 0, 0, 0, 0]);
        assert_eq!(v.truncate(512), v);
        assert_eq!(t.significant_bits(), 128);
    }

    #[test]
    fn to_hex_width() {
        let v = SimdValue::from_u128(0xab);
        assert_eq!(v.to_hex(128).len(), 32);
        assert_eq!(v.to_hex(256).len(), 64);
        assert!(v.to_hex(256).ends_with("ab"));
    }
}
