//! Exact, order-independent summation of probabilities.
//!
//! Every finite `f64` in `[0, 1]` is an integer multiple of `2^-1074`, so a
//! wide fixed-point integer with that resolution represents sums of such
//! values without rounding. Addition is integer addition, which makes
//! accumulation and merging associative and commutative bit-for-bit.

use std::fmt;

const LIMBS: usize = 18;
/// Bit position of `2^0` inside the accumulator.
const FRACTION_BITS: i64 = 1074;

/// Exact sum of values in `[0, 1]`. Holds at least `2^64` terms.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExactSum {
    limbs: [u64; LIMBS],
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::zero()
    }
}

impl ExactSum {
    pub const fn zero() -> Self {
        Self { limbs: [0; LIMBS] }
    }

    pub fn is_zero(&self) -> bool {
        self.limbs.iter().all(|&l| l == 0)
    }

    /// Adds `x`, which must be finite and in `[0, 1]`.
    pub fn add(&mut self, x: f64) {
        assert!(
            x.is_finite() && (0.0..=1.0).contains(&x),
            "ExactSum::add expects a value in [0, 1], got {x}"
        );
        let bits = x.to_bits();
        let exp = ((bits >> 52) & 0x7ff) as u32;
        let frac = bits & ((1u64 << 52) - 1);
        let (mantissa, shift) = if exp == 0 {
            (frac, 0)
        } else {
            (frac | (1u64 << 52), exp - 1)
        };
        if mantissa == 0 {
            return;
        }
        let idx = (shift / 64) as usize;
        let off = shift % 64;
        let lo = mantissa << off;
        let hi = if off == 0 { 0 } else { mantissa >> (64 - off) };
        self.add_at(idx, lo);
        if hi != 0 {
            self.add_at(idx + 1, hi);
        }
    }

    fn add_at(&mut self, mut idx: usize, value: u64) {
        let (sum, mut carry) = self.limbs[idx].overflowing_add(value);
        self.limbs[idx] = sum;
        while carry {
            idx += 1;
            let (sum, c) = self.limbs[idx].overflowing_add(1);
            self.limbs[idx] = sum;
            carry = c;
        }
    }

    /// Adds another exact sum.
    pub fn merge(&mut self, other: &ExactSum) {
        let mut carry = false;
        for (a, &b) in self.limbs.iter_mut().zip(other.limbs.iter()) {
            let (s1, c1) = a.overflowing_add(b);
            let (s2, c2) = s1.overflowing_add(carry as u64);
            *a = s2;
            carry = c1 || c2;
        }
        assert!(!carry, "ExactSum overflow");
    }

    /// Nearest `f64` to the exact sum (ties to even).
    pub fn to_f64(&self) -> f64 {
        let Some(top_limb) = self.limbs.iter().rposition(|&l| l != 0) else {
            return 0.0;
        };
        let top_bit = 64 * top_limb as i64 + 63 - self.limbs[top_limb].leading_zeros() as i64;
        if top_bit < 64 {
            return self.limbs[0] as f64 * pow2(-FRACTION_BITS);
        }
        let low = top_bit - 63;
        let mut window = self.bits_from(low as usize);
        if self.any_below(low as usize) {
            // sticky bit; the window is wider than 53 + 2 bits so this rounds correctly
            window |= 1;
        }
        window as f64 * pow2(low - FRACTION_BITS)
    }

    /// 64 bits starting at bit position `low`.
    fn bits_from(&self, low: usize) -> u64 {
        let idx = low / 64;
        let off = low % 64;
        let lo = self.limbs[idx] >> off;
        let hi = if off == 0 || idx + 1 >= LIMBS {
            0
        } else {
            self.limbs[idx + 1] << (64 - off)
        };
        lo | hi
    }

    fn any_below(&self, low: usize) -> bool {
        let idx = low / 64;
        let off = low % 64;
        self.limbs[..idx].iter().any(|&l| l != 0) || (off > 0 && self.limbs[idx] << (64 - off) != 0)
    }

    /// Big-endian hexadecimal digits of the fixed-point integer, without leading zeros.
    pub fn to_hex(&self) -> String {
        let mut out = String::new();
        for &limb in self.limbs.iter().rev() {
            if out.is_empty() {
                if limb != 0 {
                    out = format!("{limb:x}");
                }
            } else {
                out.push_str(&format!("{limb:016x}"));
            }
        }
        if out.is_empty() {
            out.push('0');
        }
        out
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.is_empty() || s.len() > LIMBS * 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        let mut limbs = [0u64; LIMBS];
        let bytes = s.as_bytes();
        for (i, chunk) in bytes.rchunks(16).enumerate() {
            let text = std::str::from_utf8(chunk).ok()?;
            limbs[i] = u64::from_str_radix(text, 16).ok()?;
        }
        Some(Self { limbs })
    }
}

impl fmt::Debug for ExactSum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExactSum({:e} = 0x{})", self.to_f64(), self.to_hex())
    }
}

/// `2^k` for `k` in the representable range of `f64`.
fn pow2(k: i64) -> f64 {
    debug_assert!((-1074..=1023).contains(&k));
    if k >= -1022 {
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        f64::from_bits(1u64 << (k + 1074))
    }
}
