//! Paillier cryptosystem (`g = n + 1` variant) and a signed fixed-point codec.
//!
//! Ciphertexts carry the id of the key that produced them and a [`Scale`]
//! recording how many fixed-point factors the plaintext holds. A fresh
//! encryption of an encoded real is [`Scale::Single`]; multiplying it by one
//! encoded scalar yields [`Scale::Double`], after which no further scalar
//! product is allowed. Dividing the extra factor back out happens on plaintext
//! after decryption, see [`FixedPointCodec::rescale_after_product`].

use std::fmt;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use rand::RngCore;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default number of fractional bits in the fixed-point encoding.
pub const DEFAULT_FRAC_BITS: u32 = 32;

const MILLER_RABIN_ROUNDS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PaillierError {
    #[error("unsupported key size {bits} bits (test keys allowed: {test_mode})")]
    UnsupportedKeySize { bits: u64, test_mode: bool },
    #[error("plaintext outside [0, n)")]
    PlaintextOutOfRange,
    #[error("ciphertext key {found} does not match key {expected}")]
    KeyMismatch { expected: KeyId, found: KeyId },
    #[error("cannot combine ciphertexts of scale {0:?} and {1:?}")]
    ScaleMismatch(Scale, Scale),
    #[error("ciphertext already carries a scalar product; another would exceed the codec headroom")]
    DepthExceeded,
    #[error("value {0} exceeds the fixed-point headroom")]
    Overflow(f64),
    #[error("cannot encode non-finite value")]
    NonFinite,
    #[error("malformed ciphertext bytes: {0}")]
    Malformed(&'static str),
}

pub type Result<T> = std::result::Result<T, PaillierError>;

/// Supported modulus sizes. 512-bit keys exist for fast tests and desk-scale
/// experiments only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KeySize {
    Test512,
    Bits1024,
    Bits2048,
}

impl KeySize {
    pub fn from_bits(bits: u64, test_mode: bool) -> Result<Self> {
        match (bits, test_mode) {
            (512, true) => Ok(Self::Test512),
            (1024, _) => Ok(Self::Bits1024),
            (2048, _) => Ok(Self::Bits2048),
            _ => Err(PaillierError::UnsupportedKeySize { bits, test_mode }),
        }
    }

    pub fn bits(self) -> u64 {
        match self {
            Self::Test512 => 512,
            Self::Bits1024 => 1024,
            Self::Bits2048 => 2048,
        }
    }
}

/// 8-byte key tag derived from the modulus.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyId(pub [u8; 8]);

impl KeyId {
    fn of_modulus(n: &BigUint) -> Self {
        let digest = Sha256::digest(n.to_bytes_be());
        let mut tag = [0u8; 8];
        tag.copy_from_slice(&digest[..8]);
        Self(tag)
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({self})")
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// Number of fixed-point factors folded into a plaintext.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Single,
    Double,
}

impl Scale {
    fn factors(self) -> u32 {
        match self {
            Scale::Single => 1,
            Scale::Double => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    n: BigUint,
    nn: BigUint,
    g: BigUint,
    key_id: KeyId,
}

#[derive(Clone)]
pub struct SecretKey {
    lambda: BigUint,
    mu: BigUint,
    key_id: KeyId,
    crt: CrtParams,
}

#[derive(Clone)]
struct CrtParams {
    p: BigUint,
    q: BigUint,
    pp: BigUint,
    qq: BigUint,
    hp: BigUint,
    hq: BigUint,
    q_inv_p: BigUint,
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey").field("key_id", &self.key_id).finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext {
    value: BigUint,
    key_id: KeyId,
    scale: Scale,
}

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    /// Rebuild a ciphertext received off the wire; the key id and scale are
    /// implied by the enclosing message.
    pub fn from_parts(value: BigUint, key_id: KeyId, scale: Scale) -> Self {
        Self { value, key_id, scale }
    }
}

fn random_prime<R: RngCore + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut candidate = rng.gen_biguint(bits);
        candidate.set_bit(bits - 1, true);
        candidate.set_bit(bits - 2, true);
        candidate.set_bit(0, true);
        if is_probable_prime(&candidate, rng) {
            return candidate;
        }
    }
}

const SMALL_PRIMES: [u32; 24] =
    [3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97];

/// Trial division by small primes followed by Miller-Rabin with random bases.
pub fn is_probable_prime<R: RngCore + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    if n.is_even() {
        return *n == two;
    }
    for &p in &SMALL_PRIMES {
        let p = BigUint::from(p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Generate a key pair. Deterministic for a seeded `rng`.
pub fn keygen<R: RngCore + ?Sized>(size: KeySize, rng: &mut R) -> (PublicKey, SecretKey) {
    let half = size.bits() / 2;
    loop {
        let p = random_prime(half, rng);
        let q = random_prime(half, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        debug_assert_eq!(n.bits(), size.bits());
        let nn = &n * &n;
        let g = &n + 1u32;
        let lambda = (&p - 1u32).lcm(&(&q - 1u32));
        // with g = n + 1, L(g^λ mod n²) = λ mod n
        let mu = (&lambda % &n).modinv(&n).expect("λ invertible mod n for distinct primes");
        let key_id = KeyId::of_modulus(&n);
        let crt = CrtParams::new(&p, &q, &g);
        let pk = PublicKey { n, nn, g, key_id };
        let sk = SecretKey { lambda, mu, key_id, crt };
        return (pk, sk);
    }
}

impl CrtParams {
    fn new(p: &BigUint, q: &BigUint, g: &BigUint) -> Self {
        let pp = p * p;
        let qq = q * q;
        let hp = l_func(&g.modpow(&(p - 1u32), &pp), p).modinv(p).expect("hp invertible");
        let hq = l_func(&g.modpow(&(q - 1u32), &qq), q).modinv(q).expect("hq invertible");
        let q_inv_p = q.modinv(p).expect("distinct primes");
        Self { p: p.clone(), q: q.clone(), pp, qq, hp, hq, q_inv_p }
    }
}

fn l_func(x: &BigUint, d: &BigUint) -> BigUint {
    (x - 1u32) / d
}

impl PublicKey {
    /// Rebuild a public key from its modulus, e.g. after receiving it.
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n.bits() < 16 || n.is_even() {
            return Err(PaillierError::Malformed("modulus must be odd and non-trivial"));
        }
        let nn = &n * &n;
        let g = &n + 1u32;
        let key_id = KeyId::of_modulus(&n);
        Ok(Self { n, nn, g, key_id })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.nn
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn bits(&self) -> u64 {
        self.n.bits()
    }

    fn random_unit<R: RngCore + ?Sized>(&self, rng: &mut R) -> BigUint {
        loop {
            let r = rng.gen_biguint_below(&self.n);
            if !r.is_zero() && r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    fn check_plaintext(&self, m: &BigUint) -> Result<()> {
        if m >= &self.n {
            Err(PaillierError::PlaintextOutOfRange)
        } else {
            Ok(())
        }
    }

    fn check_key(&self, ct: &Ciphertext) -> Result<()> {
        if ct.key_id != self.key_id {
            return Err(PaillierError::KeyMismatch { expected: self.key_id, found: ct.key_id });
        }
        Ok(())
    }

    /// `g^m · r^n mod n²` with `g^m = 1 + m·n mod n²`.
    fn encrypt_with_nonce(&self, m: &BigUint, r: &BigUint, scale: Scale) -> Ciphertext {
        let gm = (BigUint::one() + m * &self.n) % &self.nn;
        let rn = r.modpow(&self.n, &self.nn);
        Ciphertext { value: (gm * rn) % &self.nn, key_id: self.key_id, scale }
    }

    pub fn encrypt<R: RngCore + ?Sized>(&self, m: &BigUint, rng: &mut R) -> Result<Ciphertext> {
        self.encrypt_scaled(m, Scale::Single, rng)
    }

    /// Encrypt a plaintext already encoded at `scale`.
    pub fn encrypt_scaled<R: RngCore + ?Sized>(&self, m: &BigUint, scale: Scale, rng: &mut R) -> Result<Ciphertext> {
        self.check_plaintext(m)?;
        let r = self.random_unit(rng);
        Ok(self.encrypt_with_nonce(m, &r, scale))
    }

    /// Encrypt many plaintexts. Nonces are drawn from `rng` in order, so the
    /// output is deterministic for a seeded rng; the exponentiations run on the
    /// rayon pool.
    pub fn encrypt_batch<R: RngCore + ?Sized>(
        &self,
        ms: &[BigUint],
        scale: Scale,
        rng: &mut R,
    ) -> Result<Vec<Ciphertext>> {
        ms.iter().try_for_each(|m| self.check_plaintext(m))?;
        let nonces: Vec<BigUint> = ms.iter().map(|_| self.random_unit(rng)).collect();
        Ok(ms.par_iter().zip(nonces.par_iter()).map(|(m, r)| self.encrypt_with_nonce(m, r, scale)).collect())
    }

    /// Homomorphic addition: `Dec(x ⊕ y) = Dec(x) + Dec(y) mod n`.
    pub fn add_ct(&self, x: &Ciphertext, y: &Ciphertext) -> Result<Ciphertext> {
        self.check_key(x)?;
        self.check_key(y)?;
        if x.scale != y.scale {
            return Err(PaillierError::ScaleMismatch(x.scale, y.scale));
        }
        Ok(Ciphertext { value: (&x.value * &y.value) % &self.nn, key_id: self.key_id, scale: x.scale })
    }

    /// Add a known plaintext without fresh randomness: `x · (1 + m·n)`.
    pub fn add_plain(&self, x: &Ciphertext, m: &BigUint) -> Result<Ciphertext> {
        self.check_key(x)?;
        self.check_plaintext(m)?;
        let gm = (BigUint::one() + m * &self.n) % &self.nn;
        Ok(Ciphertext { value: (&x.value * gm) % &self.nn, key_id: self.key_id, scale: x.scale })
    }

    /// Homomorphic scalar product `x^s mod n²`, decrypting to `m·s mod n`.
    pub fn mul_scalar(&self, x: &Ciphertext, s: &BigUint) -> Result<Ciphertext> {
        self.check_key(x)?;
        self.check_plaintext(s)?;
        let scale = Self::product_scale(x)?;
        Ok(Ciphertext { value: x.value.modpow(s, &self.nn), key_id: self.key_id, scale })
    }

    /// Scalar product by a signed integer. Negative factors exponentiate by
    /// `|s|` and invert, which avoids a full-width exponent for `n - |s|`; the
    /// result decrypts to the same residue as `mul_scalar(x, s mod n)`.
    pub fn mul_signed(&self, x: &Ciphertext, s: &BigInt) -> Result<Ciphertext> {
        self.check_key(x)?;
        let scale = Self::product_scale(x)?;
        let mag = s.magnitude();
        if mag >= &self.n {
            return Err(PaillierError::PlaintextOutOfRange);
        }
        let mut value = x.value.modpow(mag, &self.nn);
        if s.sign() == Sign::Minus {
            value = value.modinv(&self.nn).expect("ciphertexts are units mod n²");
        }
        Ok(Ciphertext { value, key_id: self.key_id, scale })
    }

    /// `Σ s_i·[[x_i]]` at double scale. The exponentiations share their
    /// squarings and the negative terms are inverted once, so this is much
    /// cheaper than folding [`Self::mul_signed`] over the terms.
    pub fn dot_signed<'a>(&self, terms: impl IntoIterator<Item = (&'a Ciphertext, &'a BigInt)>) -> Result<Ciphertext> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (x, s) in terms {
            self.check_key(x)?;
            Self::product_scale(x)?;
            if s.magnitude() >= &self.n {
                return Err(PaillierError::PlaintextOutOfRange);
            }
            match s.sign() {
                Sign::Plus => pos.push((&x.value, s.magnitude())),
                Sign::Minus => neg.push((&x.value, s.magnitude())),
                Sign::NoSign => {}
            }
        }
        let mut value = multi_pow(&pos, &self.nn);
        if !neg.is_empty() {
            let inv = multi_pow(&neg, &self.nn).modinv(&self.nn).expect("ciphertexts are units mod n²");
            value = value * inv % &self.nn;
        }
        Ok(Ciphertext { value, key_id: self.key_id, scale: Scale::Double })
    }

    fn product_scale(x: &Ciphertext) -> Result<Scale> {
        match x.scale {
            Scale::Single => Ok(Scale::Double),
            Scale::Double => Err(PaillierError::DepthExceeded),
        }
    }

    /// Ciphertext of zero with no randomness; identity for [`Self::add_ct`].
    pub fn zero(&self, scale: Scale) -> Ciphertext {
        Ciphertext { value: BigUint::one(), key_id: self.key_id, scale }
    }
}

/// `Π b_i^{e_i} mod m` by one left-to-right pass over the exponent bits.
fn multi_pow(terms: &[(&BigUint, &BigUint)], m: &BigUint) -> BigUint {
    let bits = terms.iter().map(|(_, e)| e.bits()).max().unwrap_or(0);
    let mut acc = BigUint::one();
    for b in (0..bits).rev() {
        acc = &acc * &acc % m;
        for (base, e) in terms {
            if e.bit(b) {
                acc = acc * *base % m;
            }
        }
    }
    acc
}

impl SecretKey {
    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    fn check_key(&self, ct: &Ciphertext) -> Result<()> {
        if ct.key_id != self.key_id {
            return Err(PaillierError::KeyMismatch { expected: self.key_id, found: ct.key_id });
        }
        Ok(())
    }

    /// Decrypt via CRT over `p²` and `q²`.
    pub fn decrypt(&self, ct: &Ciphertext) -> Result<BigUint> {
        self.check_key(ct)?;
        let c = &self.crt;
        let mp = (l_func(&ct.value.modpow(&(&c.p - 1u32), &c.pp), &c.p) * &c.hp) % &c.p;
        let mq = (l_func(&ct.value.modpow(&(&c.q - 1u32), &c.qq), &c.q) * &c.hq) % &c.q;
        // m = mq + q·((mp - mq)·q⁻¹ mod p)
        let diff = (&mp + &c.p - (&mq % &c.p)) % &c.p;
        let h = (diff * &c.q_inv_p) % &c.p;
        Ok(mq + h * &c.q)
    }

    /// Textbook decryption `L(c^λ mod n²)·μ mod n`; slower than [`Self::decrypt`].
    pub fn decrypt_textbook(&self, pk: &PublicKey, ct: &Ciphertext) -> Result<BigUint> {
        self.check_key(ct)?;
        let u = ct.value.modpow(&self.lambda, &pk.nn);
        Ok((l_func(&u, &pk.n) * &self.mu) % &pk.n)
    }

    pub fn decrypt_batch(&self, cts: &[Ciphertext]) -> Result<Vec<BigUint>> {
        cts.par_iter().map(|ct| self.decrypt(ct)).collect()
    }
}

/// Signed fixed-point encoding of reals into `Z_n`: `v ↦ round(v·2^f) mod n`,
/// with the upper half of `[0, n)` read as negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedPointCodec {
    frac_bits: u32,
    modulus: BigUint,
    half: BigUint,
    limit: BigUint,
}

impl FixedPointCodec {
    pub fn new(modulus: BigUint, frac_bits: u32) -> Self {
        let half = &modulus >> 1u32;
        let limit = &modulus >> 2u32;
        Self { frac_bits, modulus, half, limit }
    }

    pub fn for_key(pk: &PublicKey, frac_bits: u32) -> Self {
        Self::new(pk.n.clone(), frac_bits)
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    /// Smallest positive step at single scale, `2^-frac_bits`.
    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    /// Largest magnitude accepted by [`Self::encode`]: `n / 2^(frac_bits + 2)`.
    pub fn headroom(&self) -> f64 {
        self.modulus.to_f64().unwrap_or(f64::INFINITY) / (self.frac_bits as f64 + 2.0).exp2()
    }

    pub fn encode(&self, v: f64) -> Result<BigUint> {
        self.encode_scaled(v, Scale::Single)
    }

    /// `round(v · 2^(k·frac_bits)) mod n` for `k` = number of scale factors.
    pub fn encode_scaled(&self, v: f64, scale: Scale) -> Result<BigUint> {
        if !v.is_finite() {
            return Err(PaillierError::NonFinite);
        }
        let bits = (self.frac_bits * scale.factors()) as i32;
        let scaled = (v * 2f64.powi(bits)).round();
        let int = BigInt::from_f64(scaled).ok_or(PaillierError::NonFinite)?;
        self.wrap_signed(&int).map_err(|_| PaillierError::Overflow(v))
    }

    /// `round(v · 2^frac_bits)` as a signed integer, for [`PublicKey::mul_signed`].
    pub fn encode_int(&self, v: f64) -> Result<BigInt> {
        if !v.is_finite() {
            return Err(PaillierError::NonFinite);
        }
        let int = BigInt::from_f64((v * 2f64.powi(self.frac_bits as i32)).round()).ok_or(PaillierError::NonFinite)?;
        if int.magnitude() >= &self.limit {
            return Err(PaillierError::Overflow(v));
        }
        Ok(int)
    }

    /// Map a signed integer into `[0, n)`, rejecting magnitudes beyond `n/4`.
    pub fn wrap_signed(&self, int: &BigInt) -> Result<BigUint> {
        if int.magnitude() >= &self.limit {
            return Err(PaillierError::Overflow(int.to_f64().unwrap_or(f64::INFINITY)));
        }
        Ok(self.wrap_unchecked(int))
    }

    fn wrap_unchecked(&self, int: &BigInt) -> BigUint {
        let n = BigInt::from_biguint(Sign::Plus, self.modulus.clone());
        int.mod_floor(&n).to_biguint().expect("mod_floor is non-negative")
    }

    /// Residue in `[0, n)` to signed integer in `(-n/2, n/2]`.
    pub fn to_signed(&self, m: &BigUint) -> BigInt {
        let m = BigInt::from_biguint(Sign::Plus, m % &self.modulus);
        if m.magnitude() > &self.half {
            m - BigInt::from_biguint(Sign::Plus, self.modulus.clone())
        } else {
            m
        }
    }

    pub fn decode(&self, m: &BigUint) -> f64 {
        self.decode_scaled(m, Scale::Single)
    }

    pub fn decode_scaled(&self, m: &BigUint, scale: Scale) -> f64 {
        let bits = (self.frac_bits * scale.factors()) as i32;
        let signed = self.to_signed(m);
        signed.to_f64().unwrap_or(f64::NAN) * 2f64.powi(-bits)
    }

    /// Signed division by `2^frac_bits`, rounding to nearest (ties away from
    /// zero), re-wrapped mod n. Turns a decrypted double-scale product back
    /// into a single-scale residue.
    pub fn rescale_after_product(&self, m: &BigUint) -> BigUint {
        let signed = self.to_signed(m);
        let half = BigInt::one() << (self.frac_bits - 1);
        let mag = signed.magnitude().clone();
        let rounded = (BigInt::from_biguint(Sign::Plus, mag) + half) >> self.frac_bits;
        let rounded = if signed.is_negative() { -rounded } else { rounded };
        self.wrap_unchecked(&rounded)
    }
}

/// Append `4-byte BE length | big-endian magnitude` (zero encodes as length 0).
pub fn write_biguint(buf: &mut Vec<u8>, v: &BigUint) {
    let bytes = if v.is_zero() { Vec::new() } else { v.to_bytes_be() };
    buf.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    buf.extend_from_slice(&bytes);
}

/// Inverse of [`write_biguint`]; returns the value and bytes consumed.
pub fn read_biguint(buf: &[u8]) -> Result<(BigUint, usize)> {
    if buf.len() < 4 {
        return Err(PaillierError::Malformed("truncated length prefix"));
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    let body = buf.get(4..4 + len).ok_or(PaillierError::Malformed("truncated integer body"))?;
    if len > 0 && body[0] == 0 {
        return Err(PaillierError::Malformed("non-minimal integer encoding"));
    }
    Ok((BigUint::from_bytes_be(body), 4 + len))
}
