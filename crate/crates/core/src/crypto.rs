// SPDX-License-Identifier: Apache-2.0

//! Primitive wrappers shared by the enclave, attestation and KMS layers.
//!
//! AEAD ciphertexts produced here are laid out as `iv (12) || ciphertext || tag (16)`.
//! The key length selects the cipher: 16 bytes for AES-128-GCM (session keys),
//! 32 bytes for AES-256-GCM (KEK, seal keys).

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Aes256Gcm, Nonce};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const IV_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("aead authentication failed")]
pub struct AeadError;

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// HKDF-SHA-256 expand into a fixed-size output.
pub fn hkdf_sha256<const N: usize>(salt: Option<&[u8]>, ikm: &[u8], info: &[u8]) -> [u8; N] {
    let mut out = [0u8; N];
    Hkdf::<Sha256>::new(salt, ikm)
        .expand(info, &mut out)
        .expect("output length within HKDF bound");
    out
}

pub fn hmac_sha256(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

pub fn hmac_verify(key: &[u8], parts: &[&[u8]], tag: &[u8]) -> bool {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.verify_slice(tag).is_ok()
}

/// Verifies an HMAC-SHA-256 tag truncated to its leftmost `tag.len()` bytes.
pub fn hmac_verify_truncated(key: &[u8], parts: &[&[u8]], tag: &[u8]) -> bool {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.verify_truncated_left(tag).is_ok()
}

pub fn random_array<const N: usize, R: RngCore + CryptoRng + ?Sized>(rng: &mut R) -> [u8; N] {
    let mut out = [0u8; N];
    rng.fill_bytes(&mut out);
    out
}

pub fn aead_seal<R: RngCore + CryptoRng + ?Sized>(
    key: &[u8],
    plaintext: &[u8],
    aad: &[u8],
    rng: &mut R,
) -> Vec<u8> {
    let iv: [u8; IV_LEN] = random_array(rng);
    aead_seal_with_iv(key, &iv, plaintext, aad)
}

pub fn aead_seal_with_iv(key: &[u8], iv: &[u8; IV_LEN], plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let payload = Payload { msg: plaintext, aad };
    let nonce = Nonce::from_slice(iv);
    let ct = match key.len() {
        16 => Aes128Gcm::new_from_slice(key).unwrap().encrypt(nonce, payload),
        32 => Aes256Gcm::new_from_slice(key).unwrap().encrypt(nonce, payload),
        n => panic!("unsupported AEAD key length {n}"),
    }
    .expect("in-memory encryption cannot fail");
    let mut out = Vec::with_capacity(IV_LEN + ct.len());
    out.extend_from_slice(iv);
    out.extend_from_slice(&ct);
    out
}

pub fn aead_open(key: &[u8], data: &[u8], aad: &[u8]) -> Result<Vec<u8>, AeadError> {
    if data.len() < IV_LEN + TAG_LEN {
        return Err(AeadError);
    }
    let (iv, ct) = data.split_at(IV_LEN);
    let nonce = Nonce::from_slice(iv);
    let payload = Payload { msg: ct, aad };
    match key.len() {
        16 => Aes128Gcm::new_from_slice(key).unwrap().decrypt(nonce, payload),
        32 => Aes256Gcm::new_from_slice(key).unwrap().decrypt(nonce, payload),
        _ => return Err(AeadError),
    }
    .map_err(|_| AeadError)
}

/// Serde adapters for binary fields carried as standard base64 strings.
pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(s)
    }

    pub fn serialize<S: Serializer, T: AsRef<[u8]>>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v.as_ref()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        decode(&s).map_err(de::Error::custom)
    }

    /// Fixed-length variant.
    pub mod array {
        use super::*;

        pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(&encode(v))
        }

        pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
            let s = String::deserialize(d)?;
            let v = decode(&s).map_err(de::Error::custom)?;
            v.try_into()
                .map_err(|v: Vec<u8>| de::Error::custom(format!("expected {N} bytes, got {}", v.len())))
        }
    }
}

/// Serde adapters for fixed-length digests carried as lowercase hex.
pub mod hex_array {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, const N: usize>(v: &[u8; N], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, const N: usize>(d: D) -> Result<[u8; N], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; N];
        hex::decode_to_slice(&s, &mut out).map_err(de::Error::custom)?;
        Ok(out)
    }
}
