//! Hashing, salting and signing primitives.
//!
//! Every digest in the ledger is SHA-256. A written value is never hashed
//! bare: it is prefixed with a 32-byte random salt, and the resulting
//! `salt ‖ value` string is the preimage stored in a block's preimage space.
//! Signatures are Ed25519.

use std::fmt;

use ed25519_dalek::{Signer, Verifier};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const SALT_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("salt must be {SALT_LEN} bytes, got {0}")]
    SaltLength(usize),
    #[error("preimage shorter than the {SALT_LEN}-byte salt prefix ({0} bytes)")]
    PreimageTooShort(usize),
    #[error("malformed public key")]
    MalformedPublicKey,
    #[error("expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("invalid hex: {0}")]
    Hex(String),
}

/// A 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// The all-zero digest. Used as the genesis `prev_hash` and as the
    /// digest carried by deletion writes.
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; DIGEST_LEN]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        Ok(Digest(decode_hex_array(s)?))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// 32 uniformly random bytes mixed into a written value before hashing.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Salt(pub [u8; SALT_LEN]);

impl Salt {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; SALT_LEN];
        rng.fill_bytes(&mut bytes);
        Salt(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SALT_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::SaltLength(bytes.len()))?;
        Ok(Salt(arr))
    }

    pub fn as_bytes(&self) -> &[u8; SALT_LEN] {
        &self.0
    }
}

impl fmt::Debug for Salt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Salt({})", &hex::encode(self.0)[..16])
    }
}

pub fn hash(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Hash of several byte strings concatenated, without materializing the
/// concatenation.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// `hash(salt ‖ value)`. Rejects salts that are not exactly 32 bytes.
pub fn hash_preimage(salt: &[u8], value: &[u8]) -> Result<Digest, CryptoError> {
    if salt.len() != SALT_LEN {
        return Err(CryptoError::SaltLength(salt.len()));
    }
    Ok(hash_parts(&[salt, value]))
}

/// Builds the stored preimage string `salt ‖ value`.
pub fn make_preimage(salt: &Salt, value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(SALT_LEN + value.len());
    out.extend_from_slice(&salt.0);
    out.extend_from_slice(value);
    out
}

/// Splits a stored preimage into its salt and value.
pub fn split_preimage(preimage: &[u8]) -> Result<(Salt, &[u8]), CryptoError> {
    if preimage.len() < SALT_LEN {
        return Err(CryptoError::PreimageTooShort(preimage.len()));
    }
    let (salt, value) = preimage.split_at(SALT_LEN);
    Ok((Salt::from_slice(salt)?, value))
}

/// An Ed25519 verifying key. Doubles as the identity of endorsers, orderers
/// and redaction requesters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = bytes.try_into().map_err(|_| CryptoError::Length {
            expected: PUBLIC_KEY_LEN,
            got: bytes.len(),
        })?;
        ed25519_dalek::VerifyingKey::from_bytes(&arr)
            .map_err(|_| CryptoError::MalformedPublicKey)?;
        Ok(PublicKey(arr))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        let arr: [u8; PUBLIC_KEY_LEN] = decode_hex_array(s)?;
        Self::from_bytes(&arr)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl TryFrom<String> for PublicKey {
    type Error = CryptoError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        PublicKey::from_hex(&s)
    }
}

impl From<PublicKey> for String {
    fn from(pk: PublicKey) -> String {
        pk.to_hex()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    /// Placeholder carried by blocks before the orderer signs them.
    pub const EMPTY: Signature = Signature([0u8; SIGNATURE_LEN]);
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", &hex::encode(self.0)[..16])
    }
}

/// An Ed25519 signing identity.
#[derive(Clone)]
pub struct KeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl KeyPair {
    /// Deterministic key from a 32-byte secret seed.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair {
            signing: ed25519_dalek::SigningKey::from_bytes(&seed),
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        Signature(self.signing.sign(msg).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public())
            .finish()
    }
}

pub fn sign(key: &KeyPair, msg: &[u8]) -> Signature {
    key.sign(msg)
}

/// Strict Ed25519 verification. Malformed keys or signatures verify as false.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    vk.verify(msg, &sig).is_ok()
}

fn decode_hex_array<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let bytes = hex::decode(s.trim()).map_err(|e| CryptoError::Hex(e.to_string()))?;
    let got = bytes.len();
    bytes
        .try_into()
        .map_err(|_| CryptoError::Length { expected: N, got })
}

/// Minimal FIPS 180-4 SHA-256, written from the standard. Used only as an
/// independent cross-check of the production hasher.
#[cfg(test)]
pub(crate) mod reference_sha256 {
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2,
    ];

    pub fn sha256(msg: &[u8]) -> [u8; 32] {
        let mut h: [u32; 8] = [
            0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab,
            0x5be0cd19,
        ];
        let mut padded = msg.to_vec();
        padded.push(0x80);
        while padded.len() % 64 != 56 {
            padded.push(0);
        }
        padded.extend_from_slice(&((msg.len() as u64) * 8).to_be_bytes());

        for chunk in padded.chunks(64) {
            let mut w = [0u32; 64];
            for (i, word) in chunk.chunks(4).enumerate() {
                w[i] = u32::from_be_bytes([word[0], word[1], word[2], word[3]]);
            }
            for i in 16..64 {
                let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
                let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
                w[i] = w[i - 16]
                    .wrapping_add(s0)
                    .wrapping_add(w[i - 7])
                    .wrapping_add(s1);
            }
            let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh] = h;
            for i in 0..64 {
                let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
                let ch = (e & f) ^ (!e & g);
                let t1 = hh
                    .wrapping_add(s1)
                    .wrapping_add(ch)
                    .wrapping_add(K[i])
                    .wrapping_add(w[i]);
                let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
                let maj = (a & b) ^ (a & c) ^ (b & c);
                let t2 = s0.wrapping_add(maj);
                hh = g;
                g = f;
                f = e;
                e = d.wrapping_add(t1);
                d = c;
                c = b;
                b = a;
                a = t1.wrapping_add(t2);
            }
            for (slot, v) in h.iter_mut().zip([a, b, c, d, e, f, g, hh]) {
                *slot = slot.wrapping_add(v);
            }
        }
        let mut out = [0u8; 32];
        for (i, word) in h.iter().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&word.to_be_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[test]
    fn sha256_published_vectors() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(
            hash(b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq").to_hex(),
            "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"
        );
    }

    #[test]
    fn reference_oracle_matches_vectors() {
        assert_eq!(
            hex::encode(reference_sha256::sha256(b"")),
            hash(b"").to_hex()
        );
        assert_eq!(
            hex::encode(reference_sha256::sha256(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_is_deterministic() {
        let x = b"some fixed input";
        assert_eq!(hash(x), hash(x));
    }

    #[test]
    fn preimage_with_empty_value_hashes_salt_only() {
        let d = hash_preimage(&[0u8; 32], b"").unwrap();
        assert_eq!(d, hash(&[0u8; 32]));
        assert_eq!(
            d.to_hex(),
            "66687aadf862bd776c8fc18b8e9f8e20089714856ee233b3902a591d0d5f2925"
        );
    }

    #[test]
    fn preimage_matches_independent_reference() {
        let salt = [0x01u8; 32];
        let d = hash_preimage(&salt, &[0x02]).unwrap();
        let mut concat = salt.to_vec();
        concat.push(0x02);
        assert_eq!(d.0, reference_sha256::sha256(&concat));
        assert_eq!(
            d.to_hex(),
            "2badbd7659924f488790ab577a29bcbe865e43492ca4ee5f651c5efe0d870492"
        );
    }

    #[test]
    fn malformed_salt_is_rejected() {
        assert_eq!(
            hash_preimage(&[0u8; 31], b"v"),
            Err(CryptoError::SaltLength(31))
        );
        assert_eq!(
            hash_preimage(&[0u8; 33], b"v"),
            Err(CryptoError::SaltLength(33))
        );
        assert!(Salt::from_slice(&[1u8; 5]).is_err());
    }

    #[test]
    fn distinct_salts_give_distinct_digests() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let value = b"the same value";
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let salt = Salt::random(&mut rng);
            assert!(seen.insert(hash_preimage(&salt.0, value).unwrap()));
        }
    }

    #[test]
    fn no_collisions_over_a_million_preimages() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut seen = HashSet::with_capacity(1_000_000);
        for i in 0u64..1_000_000 {
            let salt = Salt::random(&mut rng);
            assert!(seen.insert(hash_preimage(&salt.0, &i.to_le_bytes()).unwrap()));
        }
    }

    #[test]
    fn split_and_make_preimage_agree() {
        let salt = Salt([9u8; 32]);
        let p = make_preimage(&salt, b"value");
        let (s, v) = split_preimage(&p).unwrap();
        assert_eq!(s, salt);
        assert_eq!(v, b"value");
        assert_eq!(hash(&p), hash_preimage(&salt.0, b"value").unwrap());
        assert!(split_preimage(&[0u8; 10]).is_err());
    }

    #[test]
    fn signature_round_trip_and_key_mismatch() {
        let k1 = KeyPair::from_seed([1u8; 32]);
        let k2 = KeyPair::from_seed([2u8; 32]);
        let m = b"read and write sets";
        let sig = sign(&k1, m);
        assert!(verify(&k1.public(), m, &sig));
        assert!(!verify(&k2.public(), m, &sig));
    }

    #[test]
    fn malformed_public_key_is_an_error() {
        assert!(PublicKey::from_bytes(&[0u8; 31]).is_err());
        // y = 2 does not decompress to a curve point.
        let mut bad = [0u8; 32];
        bad[0] = 2;
        assert_eq!(
            PublicKey::from_bytes(&bad),
            Err(CryptoError::MalformedPublicKey)
        );
        assert!(!verify(&PublicKey(bad), b"m", &Signature::EMPTY));
    }

    #[test]
    fn public_key_hex_round_trip() {
        let pk = KeyPair::from_seed([3u8; 32]).public();
        assert_eq!(PublicKey::from_hex(&pk.to_hex()).unwrap(), pk);
        let json = serde_json::to_string(&pk).unwrap();
        assert_eq!(serde_json::from_str::<PublicKey>(&json).unwrap(), pk);
    }

    #[test]
    fn thousand_random_messages_round_trip_and_mutations_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let key = KeyPair::generate(&mut rng);
        let pk = key.public();
        for _ in 0..1_000 {
            let len = (rng.next_u32() % 200 + 1) as usize;
            let mut msg = vec![0u8; len];
            rng.fill_bytes(&mut msg);
            let sig = key.sign(&msg);
            assert!(verify(&pk, &msg, &sig));

            let bit = rng.next_u32() as usize % (len * 8);
            let mut flipped = msg.clone();
            flipped[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&pk, &flipped, &sig));

            let sbit = rng.next_u32() as usize % (SIGNATURE_LEN * 8);
            let mut bad_sig = sig;
            bad_sig.0[sbit / 8] ^= 1 << (sbit % 8);
            assert!(!verify(&pk, &msg, &bad_sig));
        }
    }

    proptest! {
        #[test]
        fn production_hash_matches_reference(data in proptest::collection::vec(any::<u8>(), 0..300)) {
            prop_assert_eq!(hash(&data).0, reference_sha256::sha256(&data));
        }
    }
}
