//! Deterministic Schnorr signatures over a fixed prime-order subgroup.
//!
//! Desk-scale parameters: a 512-bit safe prime `p = 2q + 1` with generator
//! `g = 4` of the order-`q` quadratic-residue subgroup. Key generation is
//! seedable and the signing nonce is derived from the secret key and the
//! message, so the whole scheme is deterministic. Not sized for production
//! use; the simulator only needs unforgeability against the mutation and
//! forgery checks in its test suites.
//!
//! Registry leaves store `sha256(pubkey)` rather than the 64-byte key
//! itself, so a key fits the fixed 32-byte leaf width; tickets carry the
//! full key and verifiers check it against the opened commitment.

use crate::hash::{sha256, Digest};
use num_bigint::BigUint;
use once_cell::sync::Lazy;
use std::collections::HashMap;
use std::fmt;
use std::sync::Mutex;

const P_HEX: &str = "9bba1d8368fafb02888ec9b8cc109e6d72e2c00bbb981f654fe2922fc33e8da16a30c95e8513de71971f951769440bc94c884d07609b1513161843f02341e8f7";
const Q_HEX: &str = "4ddd0ec1b47d7d81444764dc66084f36b9716005ddcc0fb2a7f14917e19f46d0b51864af4289ef38cb8fca8bb4a205e4a6442683b04d8a898b0c21f811a0f47b";

/// Serialized width of group elements and scalars.
pub const ELEM_BYTES: usize = 64;
/// Serialized signature width: challenge then response scalar.
pub const SIG_BYTES: usize = 2 * ELEM_BYTES;

struct Group {
    p: BigUint,
    q: BigUint,
    g: BigUint,
}

static GROUP: Lazy<Group> = Lazy::new(|| Group {
    p: BigUint::parse_bytes(P_HEX.as_bytes(), 16).unwrap(),
    q: BigUint::parse_bytes(Q_HEX.as_bytes(), 16).unwrap(),
    g: BigUint::from(4u8),
});

// Verification is pure, and the same tickets get re-verified many times
// across rounds, chains and explored interleavings; memoize by input hash.
static VERIFY_CACHE: Lazy<Mutex<HashMap<Digest, bool>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn to_fixed(v: &BigUint) -> [u8; ELEM_BYTES] {
    let bytes = v.to_bytes_be();
    assert!(bytes.len() <= ELEM_BYTES);
    let mut out = [0u8; ELEM_BYTES];
    out[ELEM_BYTES - bytes.len()..].copy_from_slice(&bytes);
    out
}

/// Reduce a hash stream into a nonzero scalar mod q.
fn scalar_from_hash(parts: &[&[u8]]) -> BigUint {
    let mut acc = Vec::new();
    // Two hash blocks give 512 bits of material against the 511-bit q.
    for ctr in 0u8..2 {
        let mut buf = vec![ctr];
        for p in parts {
            buf.extend_from_slice(p);
        }
        acc.extend_from_slice(&sha256(&buf).0);
    }
    let q = &GROUP.q;
    let one = BigUint::from(1u8);
    (BigUint::from_bytes_be(&acc) % (q - &one)) + one
}

/// Public verification key (group element `g^x`).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; ELEM_BYTES]);

impl PublicKey {
    /// 32-byte commitment stored in registry leaves.
    pub fn commitment(&self) -> Digest {
        sha256(&self.0)
    }

    pub fn from_bytes(b: &[u8]) -> Option<PublicKey> {
        if b.len() != ELEM_BYTES {
            return None;
        }
        Some(PublicKey(b.try_into().unwrap()))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.commitment().short_hex())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Signature(pub [u8; SIG_BYTES]);

impl Signature {
    pub fn from_bytes(b: &[u8]) -> Option<Signature> {
        if b.len() != SIG_BYTES {
            return None;
        }
        Some(Signature(b.try_into().unwrap()))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", sha256(&self.0).short_hex())
    }
}

/// Signing key plus cached public key.
#[derive(Clone)]
pub struct Keypair {
    secret: BigUint,
    public: PublicKey,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Keypair(pub={})", self.public.commitment().short_hex())
    }
}

impl Keypair {
    /// Deterministic key generation from an arbitrary seed.
    pub fn from_seed(seed: &[u8]) -> Keypair {
        let x = scalar_from_hash(&[b"keygen:", seed]);
        let y = GROUP.g.modpow(&x, &GROUP.p);
        Keypair {
            secret: x,
            public: PublicKey(to_fixed(&y)),
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    /// Deterministic Schnorr signature: nonce derived from key and message.
    pub fn sign(&self, msg: &[u8]) -> Signature {
        let g = &GROUP.g;
        let p = &GROUP.p;
        let q = &GROUP.q;
        let secret_bytes = to_fixed(&self.secret);
        let k = scalar_from_hash(&[b"nonce:", &secret_bytes, msg]);
        let r = g.modpow(&k, p);
        let e = scalar_from_hash(&[b"chal:", &to_fixed(&r), &self.public.0, msg]);
        let s = (&k + &e * &self.secret) % q;
        let mut out = [0u8; SIG_BYTES];
        out[..ELEM_BYTES].copy_from_slice(&to_fixed(&e));
        out[ELEM_BYTES..].copy_from_slice(&to_fixed(&s));
        Signature(out)
    }
}

/// Schnorr verification: recompute `R' = g^s · y^(q-e)` and check that the
/// challenge binds. Results are memoized.
pub fn verify_signature(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let mut key_material = Vec::with_capacity(ELEM_BYTES + SIG_BYTES + msg.len());
    key_material.extend_from_slice(&public.0);
    key_material.extend_from_slice(&sig.0);
    key_material.extend_from_slice(msg);
    let cache_key = sha256(&key_material);
    if let Some(&hit) = VERIFY_CACHE.lock().unwrap().get(&cache_key) {
        return hit;
    }
    let ok = verify_uncached(public, msg, sig);
    VERIFY_CACHE.lock().unwrap().insert(cache_key, ok);
    ok
}

fn verify_uncached(public: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let g = &GROUP.g;
    let p = &GROUP.p;
    let q = &GROUP.q;
    let e = BigUint::from_bytes_be(&sig.0[..ELEM_BYTES]);
    let s = BigUint::from_bytes_be(&sig.0[ELEM_BYTES..]);
    if e.bits() == 0 || s >= *q || e >= *q {
        return false;
    }
    let y = BigUint::from_bytes_be(&public.0);
    if y >= *p {
        return false;
    }
    // R' = g^s * y^(q - e); y has order q so y^(q-e) = y^(-e).
    let r = (g.modpow(&s, p) * y.modpow(&(q - &e), p)) % p;
    let expect = scalar_from_hash(&[b"chal:", &to_fixed(&r), &public.0, msg]);
    expect == e
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_verify_roundtrip() {
        let kp = Keypair::from_seed(b"node-0");
        let sig = kp.sign(b"hello");
        assert!(verify_signature(kp.public(), b"hello", &sig));
        assert!(!verify_signature(kp.public(), b"hellp", &sig));
    }

    #[test]
    fn deterministic_keygen_and_signing() {
        let a = Keypair::from_seed(b"seed");
        let b = Keypair::from_seed(b"seed");
        assert_eq!(a.public(), b.public());
        assert_eq!(a.sign(b"m").0.to_vec(), b.sign(b"m").0.to_vec());
    }

    #[test]
    fn wrong_key_rejected() {
        let a = Keypair::from_seed(b"a");
        let b = Keypair::from_seed(b"b");
        let sig = a.sign(b"msg");
        assert!(!verify_signature(b.public(), b"msg", &sig));
    }

    #[test]
    fn mutated_signature_rejected() {
        let kp = Keypair::from_seed(b"m");
        let sig = kp.sign(b"payload");
        for byte in [0usize, 17, 63, 64, 90, 127] {
            let mut bad = sig.clone();
            bad.0[byte] ^= 0x40;
            assert!(!verify_signature(kp.public(), b"payload", &bad));
        }
    }

    // Pinned vector: any change to the group constants, hashing order or
    // nonce derivation shows up here.
    #[test]
    fn pinned_fixture() {
        let kp = Keypair::from_seed(b"fixture-seed");
        assert_eq!(
            kp.public().commitment().to_hex(),
            PINNED_PUBKEY_COMMITMENT
        );
        let sig = kp.sign(b"fixture-message");
        assert_eq!(sha256(&sig.0).to_hex(), PINNED_SIG_DIGEST);
        assert!(verify_signature(kp.public(), b"fixture-message", &sig));
    }

    const PINNED_PUBKEY_COMMITMENT: &str =
        "0694ed65457d2da074869cb2663f6a6c55bedcb52c08b9337e7cf881dec84ed2";
    const PINNED_SIG_DIGEST: &str =
        "e1fb0e886030536d7343d4f556e6c334054a6c3c890e5a6b62c2afa14e486b1e";
}
