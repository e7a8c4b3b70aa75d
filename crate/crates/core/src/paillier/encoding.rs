use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{FromPrimitive, ToPrimitive, Zero};

use super::{reduce_signed, HeError, PublicKey};

/// Exponent (base 2) used for every protocol value.
pub const DEFAULT_EXPONENT: i32 = -40;
/// Protocol values satisfy |x| < 2^VALUE_BOUND_BITS.
pub const VALUE_BOUND_BITS: u32 = 20;
/// Encoded mantissas stay below n / 2^HEADROOM_BITS so sums cannot wrap.
pub const HEADROOM_BITS: u64 = 32;

/// Fixed-point plaintext: value = signed(mantissa) · 2^exponent, where
/// mantissas above n/2 stand for `mantissa − n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedNumber {
    pub mantissa: BigUint,
    pub exponent: i32,
}

impl EncodedNumber {
    pub fn encode(x: f64, pk: &PublicKey) -> Result<Self, HeError> {
        Self::encode_at(x, DEFAULT_EXPONENT, pk)
    }

    /// Rounds `x · 2^-exponent` to the nearest integer (ties away from zero).
    pub fn encode_at(x: f64, exponent: i32, pk: &PublicKey) -> Result<Self, HeError> {
        if !x.is_finite() || x.abs() >= f64::from(1u32 << VALUE_BOUND_BITS) {
            return Err(HeError::Encoding(format!(
                "{x} is outside (-2^{VALUE_BOUND_BITS}, 2^{VALUE_BOUND_BITS})"
            )));
        }
        let scaled = (x * 2f64.powi(-exponent)).round();
        let signed = BigInt::from_f64(scaled)
            .ok_or_else(|| HeError::Encoding(format!("cannot scale {x} to exponent {exponent}")))?;
        Self::from_signed(&signed, exponent, pk)
    }

    /// Encodes an integer mantissa, enforcing the headroom guard.
    pub fn from_signed(signed: &BigInt, exponent: i32, pk: &PublicKey) -> Result<Self, HeError> {
        let limit = &pk.n >> HEADROOM_BITS;
        if signed.magnitude() >= &limit {
            return Err(HeError::Encoding(format!(
                "mantissa of {} bits exceeds headroom bound of {} bits",
                signed.bits(),
                limit.bits()
            )));
        }
        Ok(EncodedNumber {
            mantissa: reduce_signed(signed, &pk.n),
            exponent,
        })
    }

    /// An unchecked residue mod n. Used for decryption results and for
    /// additive masks, which are uniform over all of Z_n.
    pub fn raw(mantissa: BigUint, exponent: i32) -> Self {
        EncodedNumber { mantissa, exponent }
    }

    pub fn signed(&self, pk: &PublicKey) -> BigInt {
        if self.mantissa > pk.half_n() {
            BigInt::from_biguint(Sign::Plus, self.mantissa.clone()) - BigInt::from_biguint(Sign::Plus, pk.n.clone())
        } else {
            BigInt::from_biguint(Sign::Plus, self.mantissa.clone())
        }
    }

    pub fn decode(&self, pk: &PublicKey) -> f64 {
        let signed = self.signed(pk);
        if signed.is_zero() {
            return 0.0;
        }
        signed.to_f64().unwrap_or(f64::NAN) * 2f64.powi(self.exponent)
    }
}
