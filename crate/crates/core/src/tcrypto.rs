//! Threshold signatures for VCBC proofs and the common coin.
//!
//! The scheme is Shamir sharing in the exponent of the order-`q` subgroup of
//! quadratic residues modulo the safe prime `p = 2q + 1`. A signer holding
//! share `x_i` signs `H(m)^x_i`; any `t` shares combine by Lagrange
//! interpolation in the exponent to `H(m)^x`, where `x` is the dealt secret.
//! Signatures are therefore unique: the combined value does not depend on which
//! `t` shares were used, which the coin and proof comparison rely on.
//!
//! Verification is dealer-assisted. The [`PublicKey`] keeps the dealer's
//! verification table and recomputes the expected value, standing in for the
//! pairing check a production scheme would perform. It is meant for
//! simulation, where faulty replicas are modelled behaviours rather than
//! adversaries holding key material.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::types::{Digest, ReplicaId};

/// Safe prime modulus.
const P: u64 = 4_611_686_018_427_377_339;
/// Order of the quadratic-residue subgroup, `(P - 1) / 2`.
const Q: u64 = 2_305_843_009_213_688_669;

/// Size in bytes of a share or combined signature.
pub const SIGNATURE_BYTES: usize = 8;

/// Domain tag prefixed to coin names.
const COIN_TAG: u8 = 0xC0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("threshold {t} is invalid for {n} parties")]
    InvalidThreshold { n: usize, t: usize },
    #[error("need {needed} distinct valid shares, got {got}")]
    ThresholdNotMet { needed: usize, got: usize },
    #[error("key material is malformed")]
    Malformed,
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

fn inv_mod_q(a: u64) -> u64 {
    pow_mod(a, Q - 2, Q)
}

/// Hash onto the quadratic-residue subgroup.
fn hash_to_group(message: &[u8]) -> u64 {
    let d = Digest::of(message);
    let mut w = [0u8; 8];
    w.copy_from_slice(&d.0[..8]);
    let mut h = u64::from_be_bytes(w) % P;
    if h < 2 {
        h += 2;
    }
    mul_mod(h, h, P)
}

/// Evaluation point of a signer's polynomial share.
fn point(signer: ReplicaId) -> u64 {
    signer.0 as u64 + 1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignatureShare {
    pub signer: ReplicaId,
    pub value: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ThresholdSignature {
    pub value: Vec<u8>,
}

impl ThresholdSignature {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

fn element_bytes(x: u64) -> Vec<u8> {
    x.to_be_bytes().to_vec()
}

fn element_from(bytes: &[u8]) -> Option<u64> {
    let arr: [u8; 8] = bytes.try_into().ok()?;
    let x = u64::from_be_bytes(arr);
    (x > 0 && x < P).then_some(x)
}

/// A replica's secret signing share.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretKeyShare {
    signer: ReplicaId,
    exponent: u64,
}

impl SecretKeyShare {
    pub fn signer(&self) -> ReplicaId {
        self.signer
    }

    pub fn sign(&self, message: &[u8]) -> SignatureShare {
        let h = hash_to_group(message);
        SignatureShare { signer: self.signer, value: element_bytes(pow_mod(h, self.exponent, P)) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.signer.0.to_be_bytes().to_vec();
        out.extend_from_slice(&self.exponent.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 12 {
            return Err(CryptoError::Malformed);
        }
        let signer = ReplicaId(u32::from_be_bytes(bytes[..4].try_into().unwrap()));
        let exponent = u64::from_be_bytes(bytes[4..].try_into().unwrap());
        if exponent >= Q {
            return Err(CryptoError::Malformed);
        }
        Ok(SecretKeyShare { signer, exponent })
    }
}

/// Verification key for one dealing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PublicKey {
    threshold: usize,
    master: u64,
    share_exponents: Vec<u64>,
}

impl PublicKey {
    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn parties(&self) -> usize {
        self.share_exponents.len()
    }

    pub fn verify_share(&self, signer: ReplicaId, message: &[u8], share: &SignatureShare) -> bool {
        if share.signer != signer {
            return false;
        }
        let Some(&x_i) = self.share_exponents.get(signer.index()) else {
            return false;
        };
        match element_from(&share.value) {
            Some(v) => v == pow_mod(hash_to_group(message), x_i, P),
            None => false,
        }
    }

    /// Combines the first `t` distinct valid shares (by signer id). The result is
    /// the same for every qualifying subset.
    pub fn combine(
        &self,
        message: &[u8],
        shares: &[SignatureShare],
    ) -> Result<ThresholdSignature, CryptoError> {
        let mut chosen: Vec<(u64, u64)> = Vec::with_capacity(self.threshold);
        let mut sorted: Vec<&SignatureShare> = shares.iter().collect();
        sorted.sort_by_key(|s| s.signer);
        for s in sorted {
            if chosen.len() == self.threshold {
                break;
            }
            let x = point(s.signer);
            if chosen.iter().any(|(px, _)| *px == x) || !self.verify_share(s.signer, message, s) {
                continue;
            }
            chosen.push((x, element_from(&s.value).expect("verified share")));
        }
        if chosen.len() < self.threshold {
            return Err(CryptoError::ThresholdNotMet { needed: self.threshold, got: chosen.len() });
        }
        Ok(ThresholdSignature { value: element_bytes(interpolate(&chosen)) })
    }

    pub fn verify(&self, message: &[u8], sig: &ThresholdSignature) -> bool {
        match element_from(&sig.value) {
            Some(v) => v == pow_mod(hash_to_group(message), self.master, P),
            None => false,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.share_exponents.len());
        out.extend_from_slice(&(self.threshold as u32).to_be_bytes());
        out.extend_from_slice(&(self.share_exponents.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.master.to_be_bytes());
        for x in &self.share_exponents {
            out.extend_from_slice(&x.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() < 16 || !(bytes.len() - 16).is_multiple_of(8) {
            return Err(CryptoError::Malformed);
        }
        let threshold = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let master = u64::from_be_bytes(bytes[8..16].try_into().unwrap());
        let share_exponents: Vec<u64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
            .collect();
        if share_exponents.len() != n || threshold == 0 || threshold > n {
            return Err(CryptoError::Malformed);
        }
        Ok(PublicKey { threshold, master, share_exponents })
    }
}

/// Lagrange interpolation at zero, performed in the exponent.
fn interpolate(points: &[(u64, u64)]) -> u64 {
    let mut acc = 1u64;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut num = 1u64;
        let mut den = 1u64;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                num = mul_mod(num, xj, Q);
                den = mul_mod(den, (xj + Q - xi) % Q, Q);
            }
        }
        let lambda = mul_mod(num, inv_mod_q(den), Q);
        acc = mul_mod(acc, pow_mod(yi, lambda, P), P);
    }
    acc
}

/// Output of the trusted dealer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DealerOutput {
    pub public_key: PublicKey,
    pub shares: Vec<SecretKeyShare>,
    pub threshold: usize,
}

/// Deals a `t`-of-`n` key deterministically from `seed`.
pub fn deal(n: usize, t: usize, seed: u64) -> Result<DealerOutput, CryptoError> {
    if t == 0 || t > n {
        return Err(CryptoError::InvalidThreshold { n, t });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let coeffs: Vec<u64> = (0..t).map(|_| rng.gen_range(1..Q)).collect();
    let eval = |x: u64| coeffs.iter().rev().fold(0u64, |acc, c| (mul_mod(acc, x, Q) + c) % Q);
    let share_exponents: Vec<u64> = (0..n as u32).map(|i| eval(point(ReplicaId(i)))).collect();
    let shares = share_exponents
        .iter()
        .enumerate()
        .map(|(i, &exponent)| SecretKeyShare { signer: ReplicaId(i as u32), exponent })
        .collect();
    Ok(DealerOutput {
        public_key: PublicKey { threshold: t, master: coeffs[0], share_exponents },
        shares,
        threshold: t,
    })
}

/// Names one common coin: one per (agreement round, internal ABA round).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CoinName {
    pub aba_round: u64,
    pub coin_round: u32,
}

impl CoinName {
    /// Signed bytes: tag, agreement round and internal round, big-endian.
    pub fn to_bytes(&self) -> [u8; 13] {
        let mut out = [0u8; 13];
        out[0] = COIN_TAG;
        out[1..9].copy_from_slice(&self.aba_round.to_be_bytes());
        out[9..].copy_from_slice(&self.coin_round.to_be_bytes());
        out
    }
}

/// The coin value: low-order bit of the signature digest.
pub fn coin_bit(sig: &ThresholdSignature) -> bool {
    Digest::of(&sig.value).0[31] & 1 == 1
}

/// Key material one replica needs: its shares and the verification keys for
/// both the VCBC proof dealing and the coin dealing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaKeys {
    pub vcbc_key: PublicKey,
    pub vcbc_share: SecretKeyShare,
    pub coin_key: PublicKey,
    pub coin_share: SecretKeyShare,
}

/// Both dealings for a whole system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySet {
    pub vcbc: DealerOutput,
    pub coin: DealerOutput,
}

impl KeySet {
    /// Deals keys for `n` parties with the given VCBC and coin thresholds.
    pub fn deal(n: usize, vcbc_threshold: usize, coin_threshold: usize, seed: u64) -> Result<Self, CryptoError> {
        Ok(KeySet {
            vcbc: deal(n, vcbc_threshold, seed)?,
            coin: deal(n, coin_threshold, seed ^ 0x9e37_79b9_7f4a_7c15)?,
        })
    }

    pub fn for_config(cfg: &crate::types::Config, seed: u64) -> Result<Self, CryptoError> {
        KeySet::deal(cfg.n, cfg.vcbc_threshold(), cfg.coin_threshold(), seed)
    }

    pub fn replica(&self, id: ReplicaId) -> Option<ReplicaKeys> {
        Some(ReplicaKeys {
            vcbc_key: self.vcbc.public_key.clone(),
            vcbc_share: self.vcbc.shares.get(id.index())?.clone(),
            coin_key: self.coin.public_key.clone(),
            coin_share: self.coin.shares.get(id.index())?.clone(),
        })
    }

    /// Serialized key file: magic, then both dealings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"ABKS\x01".to_vec();
        for d in [&self.vcbc, &self.coin] {
            let pk = d.public_key.to_bytes();
            out.extend_from_slice(&(pk.len() as u32).to_be_bytes());
            out.extend_from_slice(&pk);
            out.extend_from_slice(&(d.shares.len() as u32).to_be_bytes());
            for s in &d.shares {
                out.extend_from_slice(&s.to_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let rest = bytes.strip_prefix(b"ABKS\x01").ok_or(CryptoError::Malformed)?;
        let (vcbc, rest) = read_dealing(rest)?;
        let (coin, rest) = read_dealing(rest)?;
        if !rest.is_empty() {
            return Err(CryptoError::Malformed);
        }
        Ok(KeySet { vcbc, coin })
    }
}

fn read_dealing(bytes: &[u8]) -> Result<(DealerOutput, &[u8]), CryptoError> {
    let take = |b: &[u8], k: usize| -> Result<(Vec<u8>, usize), CryptoError> {
        b.get(..k).map(|s| (s.to_vec(), k)).ok_or(CryptoError::Malformed)
    };
    let (len, _) = take(bytes, 4)?;
    let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
    let (pk, _) = take(&bytes[4..], len)?;
    let public_key = PublicKey::from_bytes(&pk)?;
    let mut pos = 4 + len;
    let (count, _) = take(&bytes[pos..], 4)?;
    let count = u32::from_be_bytes(count.try_into().unwrap()) as usize;
    pos += 4;
    let mut shares = Vec::with_capacity(count);
    for _ in 0..count {
        let (s, _) = take(&bytes[pos..], 12)?;
        shares.push(SecretKeyShare::from_bytes(&s)?);
        pos += 12;
    }
    let threshold = public_key.threshold();
    Ok((DealerOutput { public_key, shares, threshold }, &bytes[pos..]))
}
