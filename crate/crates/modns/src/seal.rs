//! End-to-end sealing of DNS messages between client and target resolver.
//!
//! Payloads are encrypted and authenticated under a shared secret derived
//! by X25519 key agreement, using XChaCha20-Poly1305 with a 192-bit nonce.
//! Relays only ever see `suite ‖ sender_public ‖ nonce ‖ ciphertext` and
//! hold no resolver secrets, so nothing on the path can be opened in
//! transit.
//!
//! Before encryption the plaintext is padded to the next multiple of
//! [`PAD_BLOCK`] bytes with a single `0x80` byte followed by zeros, which
//! hides exact message lengths. The direction of a message (query vs
//! response) is bound as associated data so a captured query can never be
//! replayed back to a client as a response.

use std::fmt;
use std::path::Path;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::XChaCha20Poly1305;
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

/// Suite identifier for X25519 + XChaCha20-Poly1305, the only suite
/// currently defined. Prefixes every serialized [`SealedMessage`].
pub const SUITE_XCHACHA20POLY1305: u8 = 0x01;
pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 24;
pub const TAG_LEN: usize = 16;
/// Padding block size; ciphertexts are always `tag + k * 64` bytes.
pub const PAD_BLOCK: usize = 64;
/// Datagram budget for one padded plaintext. Generous for DNS messages
/// while keeping the envelope within a single UDP datagram.
pub const MAX_PADDED_LEN: usize = 8192;
/// Serialized overhead before the ciphertext starts.
pub const HEADER_LEN: usize = 1 + KEY_LEN + NONCE_LEN;

pub type Nonce = [u8; NONCE_LEN];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SealError {
    #[error("plaintext pads to {padded} bytes, over the {budget}-byte budget")]
    PlaintextTooLarge { padded: usize, budget: usize },
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("malformed padding")]
    MalformedPadding,
    #[error("sealed message too short: {0} bytes")]
    Truncated(usize),
    #[error("unknown cipher suite {0:#04x}")]
    UnknownSuite(u8),
    #[error("bad key material: {0}")]
    BadKey(&'static str),
}

/// Message direction, bound into the AEAD as associated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Query,
    Response,
}

impl Direction {
    fn aad(self) -> [u8; 2] {
        match self {
            Direction::Query => [SUITE_XCHACHA20POLY1305, 0x00],
            Direction::Response => [SUITE_XCHACHA20POLY1305, 0x01],
        }
    }
}

/// A 32-byte X25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PublicKey(pub [u8; KEY_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    pub fn from_hex(s: &str) -> Result<Self, SealError> {
        let bytes = hex::decode(s.trim()).map_err(|_| SealError::BadKey("invalid hex"))?;
        let arr: [u8; KEY_LEN] =
            bytes.try_into().map_err(|_| SealError::BadKey("expected 32 bytes"))?;
        Ok(PublicKey(arr))
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl From<PublicKey> for String {
    fn from(k: PublicKey) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for PublicKey {
    type Error = SealError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        PublicKey::from_hex(&s)
    }
}

/// An X25519 key pair. The public half is derived from the secret.
#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    secret: x25519_dalek::StaticSecret,
}

impl KeyPair {
    pub fn generate(rng: &mut (impl RngCore + CryptoRng)) -> Self {
        let secret = x25519_dalek::StaticSecret::random_from_rng(rng);
        let public = PublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes());
        KeyPair { public, secret }
    }

    pub fn from_secret_bytes(bytes: [u8; KEY_LEN]) -> Self {
        let secret = x25519_dalek::StaticSecret::from(bytes);
        let public = PublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes());
        KeyPair { public, secret }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn secret_bytes(&self) -> [u8; KEY_LEN] {
        self.secret.to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

/// A sealed DNS payload as exchanged between client and target resolver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub sender_public: PublicKey,
    pub nonce: Nonce,
    pub ciphertext: Vec<u8>,
}

impl SealedMessage {
    /// `suite ‖ sender_public ‖ nonce ‖ ciphertext`, all widths fixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len());
        out.push(SUITE_XCHACHA20POLY1305);
        out.extend_from_slice(&self.sender_public.0);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, SealError> {
        if raw.is_empty() {
            return Err(SealError::Truncated(0));
        }
        if raw[0] != SUITE_XCHACHA20POLY1305 {
            return Err(SealError::UnknownSuite(raw[0]));
        }
        // Minimum ciphertext is one padding block plus the tag.
        if raw.len() < HEADER_LEN + TAG_LEN + PAD_BLOCK {
            return Err(SealError::Truncated(raw.len()));
        }
        let mut public = [0u8; KEY_LEN];
        public.copy_from_slice(&raw[1..1 + KEY_LEN]);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&raw[1 + KEY_LEN..HEADER_LEN]);
        Ok(SealedMessage {
            sender_public: PublicKey(public),
            nonce,
            ciphertext: raw[HEADER_LEN..].to_vec(),
        })
    }
}

fn padded_len(plain_len: usize) -> usize {
    (plain_len / PAD_BLOCK + 1) * PAD_BLOCK
}

fn pad(plaintext: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(padded_len(plaintext.len()));
    out.extend_from_slice(plaintext);
    out.push(0x80);
    out.resize(padded_len(plaintext.len()), 0x00);
    out
}

fn unpad(mut padded: Vec<u8>) -> Result<Vec<u8>, SealError> {
    loop {
        match padded.pop() {
            Some(0x00) => continue,
            Some(0x80) => return Ok(padded),
            _ => return Err(SealError::MalformedPadding),
        }
    }
}

/// Non-interactive key agreement: X25519 shared secret expanded through
/// HKDF-SHA256 into the AEAD key. Both sides derive the same key from
/// their own secret and the peer's public key.
fn derive_key(secret: &x25519_dalek::StaticSecret, peer: &PublicKey) -> [u8; KEY_LEN] {
    let shared = secret.diffie_hellman(&x25519_dalek::PublicKey::from(peer.0));
    let hk = Hkdf::<Sha256>::new(None, shared.as_bytes());
    let mut okm = [0u8; KEY_LEN];
    hk.expand(b"modns-seal-v1", &mut okm).expect("32 bytes is a valid HKDF output length");
    okm
}

/// Pads and seals `plaintext` toward `receiver_public`. The nonce must be
/// unique per key pair and direction; callers draw 192 random bits per
/// message, which guarantees no reuse within a process lifetime.
pub fn seal(
    sender: &KeyPair,
    receiver_public: &PublicKey,
    direction: Direction,
    plaintext: &[u8],
    nonce: Nonce,
) -> Result<SealedMessage, SealError> {
    let padded = padded_len(plaintext.len());
    if padded > MAX_PADDED_LEN {
        return Err(SealError::PlaintextTooLarge { padded, budget: MAX_PADDED_LEN });
    }
    let key = derive_key(&sender.secret, receiver_public);
    let ciphertext = XChaCha20Poly1305::new((&key).into())
        .encrypt((&nonce).into(), Payload { msg: &pad(plaintext), aad: &direction.aad() })
        .map_err(|_| SealError::AuthenticationFailure)?;
    Ok(SealedMessage { sender_public: sender.public, nonce, ciphertext })
}

/// Authenticates and decrypts a sealed message, then strips the padding.
pub fn open(
    receiver: &KeyPair,
    msg: &SealedMessage,
    direction: Direction,
) -> Result<Vec<u8>, SealError> {
    let key = derive_key(&receiver.secret, &msg.sender_public);
    let padded = XChaCha20Poly1305::new((&key).into())
        .decrypt(
            (&msg.nonce).into(),
            Payload { msg: &msg.ciphertext[..], aad: &direction.aad() },
        )
        .map_err(|_| SealError::AuthenticationFailure)?;
    unpad(padded)
}

/// Derives the response nonce for a query nonce by flipping the role bit
/// in the final byte. Deterministic and injective, so a client can match
/// responses to pending queries without extra state on the wire.
pub fn response_nonce(query_nonce: &Nonce) -> Nonce {
    let mut out = *query_nonce;
    out[NONCE_LEN - 1] ^= 0x80;
    out
}

/// Reads a key file: either exactly 32 raw bytes or hex-encoded text.
pub fn load_key_bytes(path: &Path) -> Result<[u8; KEY_LEN], std::io::Error> {
    let data = std::fs::read(path)?;
    if data.len() == KEY_LEN {
        return Ok(data.try_into().expect("length checked"));
    }
    let text = String::from_utf8(data)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "not raw or hex"))?;
    let bytes = hex::decode(text.trim())
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    bytes
        .try_into()
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "expected 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rng() -> StdRng {
        StdRng::seed_from_u64(7)
    }

    fn draw_nonce(rng: &mut StdRng) -> Nonce {
        let mut n = [0u8; NONCE_LEN];
        rng.fill(&mut n);
        n
    }

    #[test]
    fn roundtrip_over_assorted_lengths() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        for len in [0usize, 1, 63, 64, 65, 512, 1024] {
            let mut plain = vec![0u8; len];
            rng.fill(&mut plain[..]);
            let msg =
                seal(&client, &resolver.public(), Direction::Query, &plain, draw_nonce(&mut rng))
                    .unwrap();
            assert_eq!(open(&resolver, &msg, Direction::Query).unwrap(), plain);
        }
    }

    #[test]
    fn padded_ciphertext_lengths_follow_the_block_rule() {
        // Independent statement of the rule: the smallest multiple of 64
        // that fits the plaintext plus the mandatory 0x80 marker.
        fn expected(len: usize) -> usize {
            let mut padded = PAD_BLOCK;
            while padded < len + 1 {
                padded += PAD_BLOCK;
            }
            padded
        }
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        for len in 0..=256usize {
            let plain = vec![0xabu8; len];
            let msg =
                seal(&client, &resolver.public(), Direction::Query, &plain, draw_nonce(&mut rng))
                    .unwrap();
            assert_eq!(msg.ciphertext.len() - TAG_LEN, expected(len), "len {len}");
            assert_eq!((msg.ciphertext.len() - TAG_LEN) % PAD_BLOCK, 0);
        }
    }

    #[test]
    fn bit_flips_anywhere_fail_authentication() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        let msg = seal(&client, &resolver.public(), Direction::Query, b"flip me", draw_nonce(&mut rng))
            .unwrap();
        for byte in 0..msg.ciphertext.len() {
            let mut tampered = msg.clone();
            tampered.ciphertext[byte] ^= 1 << (byte % 8);
            assert_eq!(
                open(&resolver, &tampered, Direction::Query),
                Err(SealError::AuthenticationFailure)
            );
        }
    }

    #[test]
    fn direction_is_bound_as_associated_data() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        let msg =
            seal(&client, &resolver.public(), Direction::Query, b"q", draw_nonce(&mut rng)).unwrap();
        assert_eq!(
            open(&resolver, &msg, Direction::Response),
            Err(SealError::AuthenticationFailure)
        );
    }

    #[test]
    fn wrong_receiver_cannot_open() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver_a = KeyPair::generate(&mut rng);
        let resolver_b = KeyPair::generate(&mut rng);
        let msg =
            seal(&client, &resolver_a.public(), Direction::Query, b"q", draw_nonce(&mut rng))
                .unwrap();
        assert_eq!(
            open(&resolver_b, &msg, Direction::Query),
            Err(SealError::AuthenticationFailure)
        );
    }

    #[test]
    fn plaintext_over_budget_is_rejected() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        let plain = vec![0u8; MAX_PADDED_LEN];
        assert!(matches!(
            seal(&client, &resolver.public(), Direction::Query, &plain, draw_nonce(&mut rng)),
            Err(SealError::PlaintextTooLarge { .. })
        ));
    }

    #[test]
    fn serialization_round_trips_with_fixed_widths() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        let msg = seal(&client, &resolver.public(), Direction::Query, b"abc", draw_nonce(&mut rng))
            .unwrap();
        let bytes = msg.to_bytes();
        assert_eq!(bytes[0], SUITE_XCHACHA20POLY1305);
        assert_eq!(bytes.len(), HEADER_LEN + msg.ciphertext.len());
        assert_eq!(SealedMessage::from_bytes(&bytes).unwrap(), msg);

        assert_eq!(SealedMessage::from_bytes(&[0x02; 200]), Err(SealError::UnknownSuite(0x02)));
        assert_eq!(SealedMessage::from_bytes(&bytes[..40]), Err(SealError::Truncated(40)));
    }

    #[test]
    fn equal_padded_lengths_are_indistinguishable_by_size() {
        let mut rng = rng();
        let client = KeyPair::generate(&mut rng);
        let resolver = KeyPair::generate(&mut rng);
        let a = seal(&client, &resolver.public(), Direction::Query, b"short", draw_nonce(&mut rng))
            .unwrap();
        let b = seal(
            &client,
            &resolver.public(),
            Direction::Query,
            &[0x77u8; 63],
            draw_nonce(&mut rng),
        )
        .unwrap();
        assert_eq!(a.to_bytes().len(), b.to_bytes().len());
    }

    #[test]
    fn response_nonce_is_deterministic_injective_and_distinct() {
        let mut rng = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..100_000 {
            let n = draw_nonce(&mut rng);
            let r = response_nonce(&n);
            assert_ne!(r, n);
            assert_eq!(r, response_nonce(&n));
            assert!(seen.insert(r), "collision in response nonces");
        }
    }

    #[test]
    fn key_files_accept_raw_and_hex() {
        let mut rng = rng();
        let pair = KeyPair::generate(&mut rng);
        let dir = tempfile::tempdir().unwrap();

        let raw = dir.path().join("raw.key");
        std::fs::write(&raw, pair.secret_bytes()).unwrap();
        assert_eq!(load_key_bytes(&raw).unwrap(), pair.secret_bytes());

        let hexf = dir.path().join("hex.key");
        std::fs::write(&hexf, format!("{}\n", hex::encode(pair.secret_bytes()))).unwrap();
        assert_eq!(load_key_bytes(&hexf).unwrap(), pair.secret_bytes());

        assert_eq!(
            KeyPair::from_secret_bytes(pair.secret_bytes()).public(),
            pair.public()
        );
    }
}
