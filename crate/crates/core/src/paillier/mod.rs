//! Paillier encryption with signed fixed-point encoding.
//!
//! Uses the `g = n + 1` variant. Plaintexts are [`EncodedNumber`]s: an
//! integer mantissa mod `n` (upper half read as negative) and a base-2
//! exponent. Ciphertexts carry the exponent of what they encrypt; adding
//! ciphertexts requires equal exponents and scalar multiplication adds them.

mod encoding;
mod prime;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::One;
use rand::Rng;
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::comms::PartyId;

pub use encoding::{EncodedNumber, DEFAULT_EXPONENT, HEADROOM_BITS, VALUE_BOUND_BITS};
pub use prime::{is_probable_prime, random_prime};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeError {
    #[error("{0}-bit keys are insecure and need an explicit opt-in")]
    InsecureKey(u64),
    #[error("unsupported key size {0} bits (allowed: 128 with opt-in, 1024, 2048)")]
    UnsupportedKeySize(u64),
    #[error("p and q must be distinct primes")]
    EqualPrimes,
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("exponent mismatch: {left} vs {right}")]
    Alignment { left: i32, right: i32 },
    #[error("ciphertext out of range [0, n^2)")]
    Range,
    #[error("malformed encrypted payload: {0}")]
    Malformed(String),
}

/// Allowed key sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySize {
    /// Test-only.
    Insecure128,
    Bits1024,
    Bits2048,
}

impl KeySize {
    pub fn from_bits(bits: u64, insecure_ok: bool) -> Result<Self, HeError> {
        match bits {
            128 if insecure_ok => Ok(KeySize::Insecure128),
            128 => Err(HeError::InsecureKey(128)),
            1024 => Ok(KeySize::Bits1024),
            2048 => Ok(KeySize::Bits2048),
            other => Err(HeError::UnsupportedKeySize(other)),
        }
    }

    pub fn bits(self) -> u64 {
        match self {
            KeySize::Insecure128 => 128,
            KeySize::Bits1024 => 1024,
            KeySize::Bits2048 => 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicKey {
    pub n: BigUint,
    pub n_squared: BigUint,
    pub g: BigUint,
    pub key_bits: u64,
}

impl PublicKey {
    pub fn from_modulus(n: BigUint) -> Self {
        PublicKey {
            n_squared: &n * &n,
            g: &n + 1u32,
            key_bits: n.bits(),
            n,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.n.to_bytes_be()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeError> {
        let n = BigUint::from_bytes_be(bytes);
        if n.is_even() || n.bits() < 8 {
            return Err(HeError::Malformed("public modulus must be odd and nontrivial".into()));
        }
        Ok(Self::from_modulus(n))
    }

    /// `n / 2`, the boundary between positive and negative mantissas.
    pub(crate) fn half_n(&self) -> BigUint {
        &self.n >> 1
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PrivateKey {
    pub lambda: BigUint,
    pub mu: BigUint,
}

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext {
    pub c: BigUint,
    pub exponent: i32,
}

fn l_function(x: &BigUint, n: &BigUint) -> BigUint {
    (x - 1u32) / n
}

/// Builds a keypair from two given primes.
pub fn keypair_from_primes(p: &BigUint, q: &BigUint) -> Result<(PublicKey, PrivateKey), HeError> {
    if p == q {
        return Err(HeError::EqualPrimes);
    }
    let pk = PublicKey::from_modulus(p * q);
    let lambda = (p - 1u32).lcm(&(q - 1u32));
    let u = pk.g.modpow(&lambda, &pk.n_squared);
    let mu = l_function(&u, &pk.n)
        .modinv(&pk.n)
        .ok_or_else(|| HeError::Encoding("L(g^lambda) is not invertible mod n".into()))?;
    Ok((pk, PrivateKey { lambda, mu }))
}

/// Deterministic key generation from a seed.
pub fn keygen(size: KeySize, seed: u64) -> (PublicKey, PrivateKey) {
    let mut rng = rng::stream(seed, Purpose::Keygen, PartyId::arbiter());
    let half = size.bits() / 2;
    loop {
        let p = random_prime(half, &mut rng);
        let q = random_prime(half, &mut rng);
        if let Ok(keys) = keypair_from_primes(&p, &q) {
            return keys;
        }
    }
}

pub fn encrypt(e: &EncodedNumber, pk: &PublicKey, rng: &mut impl Rng) -> Ciphertext {
    let r = loop {
        let r = rng.gen_biguint_range(&BigUint::one(), &pk.n);
        if r.gcd(&pk.n).is_one() {
            break r;
        }
    };
    encrypt_with_nonce(e, pk, &r)
}

/// `c = g^m · r^n mod n²`, with `g^m = 1 + m·n` for `g = n + 1`.
pub fn encrypt_with_nonce(e: &EncodedNumber, pk: &PublicKey, r: &BigUint) -> Ciphertext {
    let gm = (BigUint::one() + &e.mantissa * &pk.n) % &pk.n_squared;
    let rn = r.modpow(&pk.n, &pk.n_squared);
    Ciphertext {
        c: gm * rn % &pk.n_squared,
        exponent: e.exponent,
    }
}

pub fn decrypt(ct: &Ciphertext, sk: &PrivateKey, pk: &PublicKey) -> Result<EncodedNumber, HeError> {
    if ct.c >= pk.n_squared {
        return Err(HeError::Range);
    }
    let u = ct.c.modpow(&sk.lambda, &pk.n_squared);
    let m = l_function(&u, &pk.n) * &sk.mu % &pk.n;
    Ok(EncodedNumber::raw(m, ct.exponent))
}

pub fn add_cipher(a: &Ciphertext, b: &Ciphertext, pk: &PublicKey) -> Result<Ciphertext, HeError> {
    if a.exponent != b.exponent {
        return Err(HeError::Alignment {
            left: a.exponent,
            right: b.exponent,
        });
    }
    Ok(Ciphertext {
        c: &a.c * &b.c % &pk.n_squared,
        exponent: a.exponent,
    })
}

/// Multiplies the plaintext under `a` by the plaintext scalar `k`.
///
/// The product of an in-range ciphertext value (|x| < 2^20 at its exponent)
/// and `k` must stay below n/2 or the result would wrap. Negative scalars
/// are applied as the inverse of `a^|k|`, which decrypts the same as
/// `a^(n-|k|)` with a much shorter exponent.
pub fn mul_scalar(a: &Ciphertext, k: &EncodedNumber, pk: &PublicKey) -> Result<Ciphertext, HeError> {
    let signed = k.signed(pk);
    let magnitude = signed.magnitude();
    let value_bits = i64::from(VALUE_BOUND_BITS) - i64::from(a.exponent);
    let product_bits = magnitude.bits() as i64 + value_bits.max(0);
    if product_bits > pk.key_bits as i64 - 2 {
        return Err(HeError::Encoding(format!(
            "scalar product may need {product_bits} bits, key has {}",
            pk.key_bits
        )));
    }
    let exponent = a
        .exponent
        .checked_add(k.exponent)
        .ok_or_else(|| HeError::Encoding("exponent overflow".into()))?;
    let powered = a.c.modpow(magnitude, &pk.n_squared);
    let c = if signed.sign() == Sign::Minus {
        powered
            .modinv(&pk.n_squared)
            .ok_or_else(|| HeError::Encoding("ciphertext not invertible".into()))?
    } else {
        powered
    };
    Ok(Ciphertext { c, exponent })
}

// Wire layout, shared by ciphertexts and encoded numbers:
// u32 LE magnitude length | i32 LE exponent | big-endian magnitude.

fn put_big(out: &mut Vec<u8>, value: &BigUint, exponent: i32) {
    let bytes = value.to_bytes_be();
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&exponent.to_le_bytes());
    out.extend_from_slice(&bytes);
}

fn take_big(input: &mut &[u8]) -> Result<(BigUint, i32), HeError> {
    if input.len() < 8 {
        return Err(HeError::Malformed(format!("need 8 header bytes, have {}", input.len())));
    }
    let len = u32::from_le_bytes(input[..4].try_into().unwrap()) as usize;
    let exponent = i32::from_le_bytes(input[4..8].try_into().unwrap());
    let rest = &input[8..];
    if rest.len() < len {
        return Err(HeError::Malformed(format!("need {len} magnitude bytes, have {}", rest.len())));
    }
    let value = BigUint::from_bytes_be(&rest[..len]);
    *input = &rest[len..];
    Ok((value, exponent))
}

impl Ciphertext {
    pub fn write_to(&self, out: &mut Vec<u8>) {
        put_big(out, &self.c, self.exponent);
    }
}

pub fn encode_ciphertexts(cts: &[Ciphertext]) -> Vec<u8> {
    let mut out = Vec::new();
    for ct in cts {
        ct.write_to(&mut out);
    }
    out
}

pub fn decode_ciphertexts(mut bytes: &[u8]) -> Result<Vec<Ciphertext>, HeError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (c, exponent) = take_big(&mut bytes)?;
        out.push(Ciphertext { c, exponent });
    }
    Ok(out)
}

pub fn encode_numbers(values: &[EncodedNumber]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        put_big(&mut out, &v.mantissa, v.exponent);
    }
    out
}

pub fn decode_numbers(mut bytes: &[u8]) -> Result<Vec<EncodedNumber>, HeError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (m, e) = take_big(&mut bytes)?;
        out.push(EncodedNumber::raw(m, e));
    }
    Ok(out)
}

/// Reduces a signed integer into `[0, n)`.
pub(crate) fn reduce_signed(v: &BigInt, n: &BigUint) -> BigUint {
    let n = BigInt::from(n.clone());
    v.mod_floor(&n).to_biguint().expect("mod_floor is non-negative")
}
