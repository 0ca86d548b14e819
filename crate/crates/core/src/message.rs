//! Fixed-length bit messages.

use std::fmt;

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MESSAGE_LENGTH: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitMessage {
    bits: Vec<bool>,
}

impl BitMessage {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::InvalidParameter("message must have at least one bit".into()));
        }
        Ok(BitMessage { bits })
    }

    /// Uniform Bernoulli(0.5) bits.
    pub fn random<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        assert!(len > 0, "message length must be positive");
        BitMessage {
            bits: (0..len).map(|_| rng.random_bool(0.5)).collect(),
        }
    }

    /// Thresholds decoder outputs at 0.5.
    pub fn from_soft(soft: ArrayView1<'_, f32>) -> Self {
        BitMessage {
            bits: soft.iter().map(|&v| v >= 0.5).collect(),
        }
    }

    /// Parses a message of exactly `len` bits.
    ///
    /// Accepted forms are a bitstring of `len` characters from `{0, 1}`, or a
    /// hex string prefixed with `0x` holding `ceil(len / 4)` digits. Hex is
    /// read most significant bit first; the surplus leading bits of the first
    /// digit must be zero. Anything else is rejected rather than truncated.
    pub fn parse(text: &str, len: usize) -> Result<Self> {
        let text = text.trim();
        if let Some(hex) = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
            return Self::parse_hex(hex, len);
        }
        if text.len() != len {
            return Err(Error::InvalidParameter(format!(
                "message has {} bits, expected {len}",
                text.chars().count()
            )));
        }
        let bits = text
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::InvalidParameter(format!(
                    "invalid bit `{other}` in message; use 0/1 or 0x-prefixed hex"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        BitMessage::new(bits)
    }

    fn parse_hex(hex: &str, len: usize) -> Result<Self> {
        let digits = len.div_ceil(4);
        if hex.len() != digits {
            return Err(Error::InvalidParameter(format!(
                "hex message has {} digits, expected {digits} for {len} bits",
                hex.len()
            )));
        }
        let mut bits = Vec::with_capacity(digits * 4);
        for c in hex.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::InvalidParameter(format!("invalid hex digit `{c}`")))?;
            bits.extend((0..4).rev().map(|i| (v >> i) & 1 == 1));
        }
        let surplus = digits * 4 - len;
        if bits[..surplus].iter().any(|&b| b) {
            return Err(Error::InvalidParameter(format!(
                "hex message exceeds {len} bits; the leading {surplus} bit(s) must be zero"
            )));
        }
        BitMessage::new(bits.split_off(surplus))
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        BitMessage {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_hex(&self) -> String {
        let digits = self.len().div_ceil(4);
        let mut padded = vec![false; digits * 4 - self.len()];
        padded.extend_from_slice(&self.bits);
        let mut out = String::from("0x");
        for nibble in padded.chunks(4) {
            let v = nibble.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
            out.push(char::from_digit(v, 16).expect("nibble"));
        }
        out
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Stacks messages into a `(n, L)` array of 0/1 values.
pub fn to_array(messages: &[BitMessage]) -> Result<Array2<f32>> {
    let len = messages.first().map(BitMessage::len).unwrap_or(0);
    if messages.iter().any(|m| m.len() != len) {
        return Err(Error::Shape("messages in a batch must share one length".into()));
    }
    Ok(Array2::from_shape_fn((messages.len(), len), |(i, j)| {
        messages[i].bits[j] as u8 as f32
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bitstring_round_trip() {
        let m = BitMessage::parse("101100111000101010101011110000", 30).unwrap();
        assert_eq!(m.len(), 30);
        assert_eq!(BitMessage::parse(&m.to_string(), 30).unwrap(), m);
    }

    #[test]
    fn hex_round_trip_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [1, 4, 8, 30, 31, 32] {
            let m = BitMessage::random(len, &mut rng);
            let hex = m.to_hex();
            assert_eq!(BitMessage::parse(&hex, len).unwrap(), m, "len {len}");
        }
        assert_eq!(BitMessage::parse("0x3fffffff", 30).unwrap().bits(), &[true; 30]);
    }

    #[test]
    fn rejects_wrong_lengths() {
        let err = BitMessage::parse("0101", 30).unwrap_err().to_string();
        assert!(err.contains("expected 30"), "{err}");
        assert!(BitMessage::parse("0x3fff", 30).is_err());
        // 0x7fffffff needs 31 bits
        assert!(BitMessage::parse("0x7fffffff", 30).is_err());
        assert!(BitMessage::parse("01x1", 4).is_err());
        assert!(BitMessage::parse("0xzz", 8).is_err());
    }

    #[test]
    fn soft_threshold() {
        let soft = ndarray::arr1(&[0.1f32, 0.5, 0.9, 0.49]);
        assert_eq!(BitMessage::from_soft(soft.view()).to_string(), "0110");
    }

    #[test]
    fn random_messages_are_balanced_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(BitMessage::random(30, &mut a), BitMessage::random(30, &mut b));
        let ones: usize = (0..100_000)
            .map(|_| BitMessage::random(1, &mut a).bits()[0] as usize)
            .sum();
        let mean = ones as f64 / 1e5;
        assert!((mean - 0.5).abs() <= 0.005, "{mean}");
    }

    #[test]
    fn stacking_checks_lengths() {
        let a = BitMessage::parse("101", 3).unwrap();
        let b = BitMessage::parse("01", 2).unwrap();
        assert!(to_array(&[a.clone(), b]).is_err());
        let arr = to_array(&[a.clone(), a.complement()]).unwrap();
        assert_eq!(arr.row(0).to_vec(), vec![1.0, 0.0, 1.0]);
        assert_eq!(arr.row(1).to_vec(), vec![0.0, 1.0, 0.0]);
    }
}
