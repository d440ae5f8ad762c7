//! Hybrid broadcast encryption and recursive onion encryption.
//!
//! A layer of candidate relays shares one symmetric key per message. The key
//! is wrapped once per layer member in an [`Envelope`]; the payload itself is
//! encrypted once into a [`Ciphertext`]. Any member holding one of the
//! matching secret keys can open the envelope and then the cipher.
//!
//! # Primitives
//!
//! * Symmetric: ChaCha20-Poly1305 with a random 96-bit nonce. A ciphertext is
//!   `nonce || ct || tag`, so it is always [`CIPHERTEXT_OVERHEAD`] bytes longer
//!   than its plaintext.
//! * Asymmetric: X25519 key agreement with an ephemeral key, the agreed secret
//!   hashed with both public keys (SHA-256) into a one-time ChaCha20-Poly1305
//!   key. An entry is `ephemeral_pk || wrapped_key || tag`, always
//!   [`ENVELOPE_ENTRY_LEN`] bytes.
//!
//! All entries of one envelope share the same ephemeral key, so a member pays
//! a single Diffie-Hellman per envelope however many entries it has to try.
//! Every random value (keys, nonces, ephemerals) comes from the caller's
//! random source, which makes encryption reproducible under a seeded RNG.

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::CryptoRng;
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;
use x25519_dalek::StaticSecret;

use crate::por::{Plaintext, PorMessage};
use crate::routes::Layer;

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SYMMETRIC_KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// Bytes added by [`symmetric_encrypt`] on top of the plaintext.
pub const CIPHERTEXT_OVERHEAD: usize = NONCE_LEN + TAG_LEN;
/// Size of one envelope entry.
pub const ENVELOPE_ENTRY_LEN: usize = PUBLIC_KEY_LEN + SYMMETRIC_KEY_LEN + TAG_LEN;

const ENTRY_KDF_LABEL: &[u8] = b"spores/envelope-entry/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("broadcast encryption needs at least one recipient key")]
    NoRecipients,
    #[error("cannot onion-encrypt over an empty layer list")]
    NoLayers,
    #[error("layer {0} has no members")]
    EmptyLayer(usize),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: [u8; PUBLIC_KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "…)")
    }
}

/// An X25519 secret together with its public half.
#[derive(Clone)]
pub struct SecretKey {
    secret: StaticSecret,
    public: PublicKey,
}

impl SecretKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = PublicKey(x25519_dalek::PublicKey::from(&secret).to_bytes());
        Self { secret, public }
    }

    pub fn public_key(&self) -> PublicKey {
        self.public
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub pk: PublicKey,
    pub sk: SecretKey,
}

impl KeyPair {
    pub fn generate<R: CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        let sk = SecretKey::from_bytes(bytes);
        Self {
            pk: sk.public_key(),
            sk,
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; SYMMETRIC_KEY_LEN]);

impl SymmetricKey {
    pub fn generate<R: CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut k = [0u8; SYMMETRIC_KEY_LEN];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    pub fn from_bytes(bytes: [u8; SYMMETRIC_KEY_LEN]) -> Self {
        Self(bytes)
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// Authenticated symmetric ciphertext: `nonce || ct || tag`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext(Vec<u8>);

impl Ciphertext {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn symmetric_encrypt<R: CryptoRng + ?Sized>(
    payload: &[u8],
    key: &SymmetricKey,
    rng: &mut R,
) -> Ciphertext {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let aead = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    let sealed = aead
        .encrypt(Nonce::from_slice(&nonce), payload)
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = Vec::with_capacity(NONCE_LEN + sealed.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    Ciphertext(out)
}

/// `None` when the key is wrong or the ciphertext was tampered with.
pub fn symmetric_decrypt(c: &Ciphertext, key: &SymmetricKey) -> Option<Vec<u8>> {
    if c.0.len() < CIPHERTEXT_OVERHEAD {
        return None;
    }
    let (nonce, sealed) = c.0.split_at(NONCE_LEN);
    let aead = ChaCha20Poly1305::new(Key::from_slice(&key.0));
    aead.decrypt(Nonce::from_slice(nonce), sealed).ok()
}

fn entry_key(shared: &[u8; 32], ephemeral: &PublicKey, recipient: &PublicKey) -> Key {
    let mut h = Sha256::new();
    h.update(ENTRY_KDF_LABEL);
    h.update(shared);
    h.update(ephemeral.0);
    h.update(recipient.0);
    let digest = h.finalize();
    *Key::from_slice(&digest)
}

/// One wrapped copy of a symmetric key.
pub type EnvelopeEntry = [u8; ENVELOPE_ENTRY_LEN];

fn seal_entry(ephemeral: &StaticSecret, eph_pk: &PublicKey, to: &PublicKey, key: &SymmetricKey) -> EnvelopeEntry {
    let shared = ephemeral.diffie_hellman(&x25519_dalek::PublicKey::from(to.0));
    let aead = ChaCha20Poly1305::new(&entry_key(shared.as_bytes(), eph_pk, to));
    // Every entry key is used exactly once, so a fixed nonce is fine.
    let sealed = aead
        .encrypt(&Nonce::default(), key.0.as_slice())
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut entry = [0u8; ENVELOPE_ENTRY_LEN];
    entry[..PUBLIC_KEY_LEN].copy_from_slice(&eph_pk.0);
    entry[PUBLIC_KEY_LEN..].copy_from_slice(&sealed);
    entry
}

fn open_entry(entry: &EnvelopeEntry, shared: &[u8; 32], sk: &SecretKey) -> Option<SymmetricKey> {
    let eph_pk = PublicKey(entry[..PUBLIC_KEY_LEN].try_into().ok()?);
    let aead = ChaCha20Poly1305::new(&entry_key(shared, &eph_pk, &sk.public));
    let opened = aead
        .decrypt(&Nonce::default(), &entry[PUBLIC_KEY_LEN..])
        .ok()?;
    Some(SymmetricKey(opened.try_into().ok()?))
}

/// Wrap `key` for a single recipient (AE).
pub fn asymmetric_encrypt<R: CryptoRng + ?Sized>(
    key: &SymmetricKey,
    pk: &PublicKey,
    rng: &mut R,
) -> EnvelopeEntry {
    let eph = KeyPair::generate(rng);
    seal_entry(&eph.sk.secret, &eph.pk, pk, key)
}

/// Unwrap one entry (AD); `None` if it was not sealed for `sk`.
pub fn asymmetric_decrypt(entry: &EnvelopeEntry, sk: &SecretKey) -> Option<SymmetricKey> {
    let shared = agree(entry, sk)?;
    open_entry(entry, &shared, sk)
}

fn agree(entry: &EnvelopeEntry, sk: &SecretKey) -> Option<[u8; 32]> {
    let eph: [u8; 32] = entry[..PUBLIC_KEY_LEN].try_into().ok()?;
    let shared = sk.secret.diffie_hellman(&x25519_dalek::PublicKey::from(eph));
    shared.was_contributory().then(|| *shared.as_bytes())
}

/// Per-layer list of wrapped symmetric keys, one per member, in member order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    entries: Vec<EnvelopeEntry>,
}

impl Envelope {
    pub fn from_entries(entries: Vec<EnvelopeEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[EnvelopeEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[cfg(test)]
    pub(crate) fn entries_mut(&mut self) -> &mut Vec<EnvelopeEntry> {
        &mut self.entries
    }
}

/// BE: encrypt `payload` once and wrap the fresh key for every `layer_pks`.
pub fn broadcast_encrypt<R: CryptoRng + ?Sized>(
    payload: &[u8],
    layer_pks: &[PublicKey],
    rng: &mut R,
) -> Result<(Envelope, Ciphertext), CryptoError> {
    if layer_pks.is_empty() {
        return Err(CryptoError::NoRecipients);
    }
    let key = SymmetricKey::generate(rng);
    let cipher = symmetric_encrypt(payload, &key, rng);
    let eph = KeyPair::generate(rng);
    let entries = layer_pks
        .iter()
        .map(|pk| seal_entry(&eph.sk.secret, &eph.pk, pk, &key))
        .collect();
    Ok((Envelope { entries }, cipher))
}

/// BD: try each entry in order until one opens, then decrypt the cipher.
pub fn broadcast_decrypt(envelope: &Envelope, cipher: &Ciphertext, sk: &SecretKey) -> Option<Vec<u8>> {
    let mut cached: Option<([u8; 32], Option<[u8; 32]>)> = None;
    for entry in &envelope.entries {
        let eph: [u8; 32] = entry[..PUBLIC_KEY_LEN].try_into().ok()?;
        let shared = match cached {
            Some((seen, shared)) if seen == eph => shared,
            _ => {
                let shared = agree(entry, sk);
                cached = Some((eph, shared));
                shared
            }
        };
        let Some(shared) = shared else { continue };
        if let Some(key) = open_entry(entry, &shared, sk) {
            return symmetric_decrypt(cipher, &key);
        }
    }
    None
}

/// ME: onion-encrypt `payload` for `layers`, innermost (last) layer first.
///
/// The returned message is addressed to the first layer. Each level's
/// plaintext carries a one-byte tag telling the holder whether it unwraps to
/// another [`PorMessage`] or to the application payload.
pub fn message_encrypt<R: CryptoRng + ?Sized>(
    payload: &[u8],
    layers: &[Layer],
    rng: &mut R,
) -> Result<PorMessage, CryptoError> {
    if layers.is_empty() {
        return Err(CryptoError::NoLayers);
    }
    if let Some(i) = layers.iter().position(|l| l.is_empty()) {
        return Err(CryptoError::EmptyLayer(i));
    }
    let mut inner: Option<PorMessage> = None;
    for layer in layers.iter().rev() {
        let plaintext = match inner.take() {
            None => Plaintext::encode_app(payload),
            Some(m) => Plaintext::encode_inner(&m),
        };
        let (envelope, cipher) = broadcast_encrypt(&plaintext, &layer.public_keys(), rng)?;
        inner = Some(PorMessage {
            addrs: layer.addresses(),
            envelope,
            cipher,
        });
    }
    Ok(inner.expect("at least one layer"))
}

/// MD: returns the tagged plaintext, or `None` if `sk` is not a member.
pub fn message_decrypt(m: &PorMessage, sk: &SecretKey) -> Option<Vec<u8>> {
    broadcast_decrypt(&m.envelope, &m.cipher, sk)
}
