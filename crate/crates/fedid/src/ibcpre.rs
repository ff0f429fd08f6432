//! Identity-based conditional proxy re-encryption.
//!
//! Hybrid construction over secp256k1 + ChaCha20-Poly1305:
//!
//! * A trusted setup derives a master scalar `ms` and publishes
//!   `master_public = ms * G`. The secret key for identity `id` is
//!   `ms * h1(id)`, so anyone holding the public params can compute the
//!   matching public key `h1(id) * master_public` from the identity string
//!   alone.
//! * Encryption is a KEM/DEM: an ephemeral scalar `r` yields a key-wrapping
//!   key from `r * pk_id`; a fresh content key seals the payload. The
//!   condition commitment `H(condition, recipient)` rides as associated data
//!   on both layers, so decrypting or re-encrypting under a different tag
//!   fails authentication.
//! * A re-encryption key from `a` to `b` under condition `c` is
//!   `sk_a * t^-1` where `t` is derived from the a<->b Diffie-Hellman secret
//!   and `c`. The proxy multiplies the ephemeral point by the token; only
//!   `b` can reconstruct `t` and undo it. The proxy alone never learns the
//!   key-wrapping key. Payload bytes are untouched by re-encryption.
//!
//! Single hop only: a re-encrypted envelope cannot be re-encrypted again.
//! Every decryption failure collapses into one opaque error so callers
//! cannot be used as padding or identity oracles.
//!
//! Caveat, documented and deliberate: this hybrid backend does not resist
//! delegatee-proxy collusion. A delegatee who also obtains the proxy's
//! re-encryption key can reconstruct the delegator's identity secret
//! (token * factor = sk). Pairing-based constructions close that gap and
//! can be swapped in behind this exact interface; nothing in the system's
//! protocol flows or tests depends on collusion resistance.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use k256::elliptic_curve::group::Group;
use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, EncodedPoint, ProjectivePoint, Scalar, U256};
use rand_core::RngCore;
use sha2::{Digest, Sha256};

/// Hard cap on plaintext size; identity documents are small.
pub const MAX_PLAINTEXT: usize = 16 * 1024 * 1024;

const ENVELOPE_VERSION: u8 = 1;
const TAG_LEN: usize = 16;

const LABEL_H1: &[u8] = b"fedid/ibcpre/h1/v1";
const LABEL_MASTER: &[u8] = b"fedid/ibcpre/master/v1";
const LABEL_KEK: &[u8] = b"fedid/ibcpre/kek/v1";
const LABEL_RK: &[u8] = b"fedid/ibcpre/rk/v1";
const LABEL_CC: &[u8] = b"fedid/ibcpre/cc/v1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("unsupported security parameter {0} (expected 128 or 256)")]
    UnsupportedParameter(u32),
    #[error("identity must be a nonempty string of at most 1024 bytes")]
    BadIdentity,
    #[error("condition tag must be 1..=256 bytes")]
    BadCondition,
    #[error("plaintext exceeds {MAX_PLAINTEXT} bytes")]
    OversizePlaintext,
    #[error("cannot delegate to self")]
    SelfDelegation,
    #[error("envelope is not at the original level")]
    LevelMismatch,
    #[error("re-encryption key does not match envelope recipient")]
    IdentityMismatch,
    #[error("re-encryption key condition does not match envelope commitment")]
    ConditionMismatch,
    #[error("decryption failed")]
    DecryptionFailed,
    #[error("malformed envelope: {0}")]
    BadEncoding(String),
}

/// Public deployment parameters shared by every party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemParams {
    pub security_parameter: u32,
    master_public: ProjectivePoint,
}

/// The setup secret. Never serialized into any message envelope.
#[derive(Clone)]
pub struct MasterSecret {
    scalar: Scalar,
}

impl std::fmt::Debug for MasterSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MasterSecret([redacted])")
    }
}

/// Long-term secret key bound to one identity string.
#[derive(Clone)]
pub struct IdentitySecretKey {
    pub identity: String,
    scalar: Scalar,
    master_public: ProjectivePoint,
}

impl std::fmt::Debug for IdentitySecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "IdentitySecretKey({:?}, [redacted])", self.identity)
    }
}

/// A condition tag scoping which re-encryption keys apply to an envelope.
/// Compared byte-exact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConditionTag(String);

impl ConditionTag {
    pub fn new(tag: impl Into<String>) -> Result<Self, Error> {
        let tag = tag.into();
        if tag.is_empty() || tag.len() > 256 {
            return Err(Error::BadCondition);
        }
        Ok(ConditionTag(tag))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }
}

impl TryFrom<String> for ConditionTag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self, Error> {
        ConditionTag::new(s)
    }
}

impl From<ConditionTag> for String {
    fn from(tag: ConditionTag) -> String {
        tag.0
    }
}

/// Whether an envelope is as produced by `encrypt` or has been translated
/// once by a proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvelopeLevel {
    Original,
    Reencrypted,
}

/// A sealed document addressed to one identity under one condition tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CiphertextEnvelope {
    pub level: EnvelopeLevel,
    pub recipient_identity: String,
    pub condition_commitment: [u8; 32],
    pub ephemeral_public: [u8; 33],
    pub wrapped_key: Vec<u8>,
    pub payload: Vec<u8>,
    pub auth_tag: [u8; 16],
}

/// Lets a proxy translate envelopes for `delegator_identity` under
/// `condition` into envelopes for `delegatee_identity`.
#[derive(Clone)]
pub struct ReEncryptionKey {
    pub delegator_identity: String,
    pub delegatee_identity: String,
    pub condition: ConditionTag,
    translation_token: Scalar,
}

impl std::fmt::Debug for ReEncryptionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ReEncryptionKey({:?} -> {:?} when {:?}, [token])",
            self.delegator_identity, self.delegatee_identity, self.condition
        )
    }
}

impl ReEncryptionKey {
    /// Wire form: delegator, delegatee, condition (each u16-length-prefixed)
    /// followed by the 32-byte token.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for field in [
            self.delegator_identity.as_bytes(),
            self.delegatee_identity.as_bytes(),
            self.condition.as_bytes(),
        ] {
            out.extend_from_slice(&(field.len() as u16).to_be_bytes());
            out.extend_from_slice(field);
        }
        out.extend_from_slice(&self.translation_token.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let mut fields = Vec::with_capacity(3);
        for _ in 0..3 {
            let len = cursor.take_u16()? as usize;
            let text = std::str::from_utf8(cursor.take(len)?)
                .map_err(|_| Error::BadEncoding("non-UTF-8 field".into()))?;
            fields.push(text.to_string());
        }
        let token_bytes: [u8; 32] = cursor
            .take(32)?
            .try_into()
            .expect("sized");
        if cursor.pos != bytes.len() {
            return Err(Error::BadEncoding("trailing bytes".into()));
        }
        let token: Option<Scalar> = Option::from(Scalar::from_repr(token_bytes.into()));
        let token = token.filter(|t| !bool::from(t.is_zero()))
            .ok_or_else(|| Error::BadEncoding("invalid token scalar".into()))?;
        let condition = ConditionTag::new(fields[2].clone())?;
        check_identity(&fields[0])?;
        check_identity(&fields[1])?;
        Ok(ReEncryptionKey {
            delegator_identity: fields[0].clone(),
            delegatee_identity: fields[1].clone(),
            condition,
            translation_token: token,
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, Error> {
        let bytes = hex::decode(s).map_err(|e| Error::BadEncoding(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

fn hash_to_scalar(label: &[u8], chunks: &[&[u8]]) -> Scalar {
    for counter in 0u32.. {
        let mut hasher = Sha256::new();
        hasher.update(label);
        for chunk in chunks {
            hasher.update((chunk.len() as u64).to_be_bytes());
            hasher.update(chunk);
        }
        hasher.update(counter.to_be_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let scalar = <Scalar as Reduce<U256>>::reduce_bytes(&digest.into());
        if !bool::from(scalar.is_zero()) {
            return scalar;
        }
    }
    unreachable!("hash-to-scalar never yields zero 2^32 times in a row")
}

fn identity_factor(identity: &str) -> Scalar {
    hash_to_scalar(LABEL_H1, &[identity.as_bytes()])
}

fn compress(point: &ProjectivePoint) -> [u8; 33] {
    point
        .to_affine()
        .to_encoded_point(true)
        .as_bytes()
        .try_into()
        .expect("compressed point is 33 bytes")
}

fn decompress(bytes: &[u8; 33]) -> Option<ProjectivePoint> {
    let encoded = EncodedPoint::from_bytes(bytes).ok()?;
    let affine: Option<AffinePoint> = Option::from(AffinePoint::from_encoded_point(&encoded));
    let point = ProjectivePoint::from(affine?);
    if bool::from(point.is_identity()) {
        return None;
    }
    Some(point)
}

/// Commitment binding a condition tag to a recipient identity.
pub fn condition_commitment(condition: &ConditionTag, recipient_identity: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(LABEL_CC);
    hasher.update((condition.as_bytes().len() as u16).to_be_bytes());
    hasher.update(condition.as_bytes());
    hasher.update(recipient_identity.as_bytes());
    hasher.finalize().into()
}

fn kek_for(shared: &ProjectivePoint, recipient: &str, commitment: &[u8; 32]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(LABEL_KEK);
    hasher.update(compress(shared));
    hasher.update((recipient.len() as u16).to_be_bytes());
    hasher.update(recipient.as_bytes());
    hasher.update(commitment);
    hasher.finalize().into()
}

fn rk_factor(dh: &ProjectivePoint, delegator: &str, delegatee: &str, condition: &ConditionTag) -> Scalar {
    hash_to_scalar(
        LABEL_RK,
        &[&compress(dh), delegator.as_bytes(), delegatee.as_bytes(), condition.as_bytes()],
    )
}

fn seal(key: &[u8; 32], plaintext: &[u8], aad: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    // Keys are single-use, so the fixed nonce is never repeated under a key.
    cipher
        .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: plaintext, aad })
        .expect("encryption is infallible for in-memory buffers")
}

fn open(key: &[u8; 32], sealed: &[u8], aad: &[u8]) -> Option<Vec<u8>> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key));
    cipher.decrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: sealed, aad }).ok()
}

fn random_nonzero_scalar(rng: &mut dyn RngCore) -> Scalar {
    loop {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        let scalar = <Scalar as Reduce<U256>>::reduce_bytes(&bytes.into());
        if !bool::from(scalar.is_zero()) {
            return scalar;
        }
    }
}

fn check_identity(identity: &str) -> Result<(), Error> {
    if identity.is_empty() || identity.len() > 1024 {
        return Err(Error::BadIdentity);
    }
    Ok(())
}

/// Generate deployment parameters and the master secret. Deterministic for
/// a given seed so tests can reproduce whole deployments.
pub fn setup(security_parameter: u32, seed: &[u8; 32]) -> Result<(SystemParams, MasterSecret), Error> {
    if security_parameter != 128 && security_parameter != 256 {
        return Err(Error::UnsupportedParameter(security_parameter));
    }
    let scalar = hash_to_scalar(LABEL_MASTER, &[seed, &security_parameter.to_be_bytes()]);
    let master_public = ProjectivePoint::GENERATOR * scalar;
    Ok((SystemParams { security_parameter, master_public }, MasterSecret { scalar }))
}

/// Derive the secret key for an identity. Deterministic per (master, identity).
pub fn extract(ms: &MasterSecret, identity: &str) -> Result<IdentitySecretKey, Error> {
    check_identity(identity)?;
    let scalar = ms.scalar * identity_factor(identity);
    Ok(IdentitySecretKey {
        identity: identity.to_string(),
        scalar,
        master_public: ProjectivePoint::GENERATOR * ms.scalar,
    })
}

/// Public key for an identity, computable by anyone holding the params.
fn identity_public(master_public: &ProjectivePoint, identity: &str) -> ProjectivePoint {
    *master_public * identity_factor(identity)
}

/// Encrypt `plaintext` to `recipient_identity` under `condition`. Fresh
/// randomness is drawn from `rng` for the ephemeral scalar and content key,
/// so two calls on identical inputs produce different envelopes.
pub fn encrypt(
    params: &SystemParams,
    recipient_identity: &str,
    condition: &ConditionTag,
    plaintext: &[u8],
    rng: &mut dyn RngCore,
) -> Result<CiphertextEnvelope, Error> {
    check_identity(recipient_identity)?;
    if plaintext.len() > MAX_PLAINTEXT {
        return Err(Error::OversizePlaintext);
    }
    let commitment = condition_commitment(condition, recipient_identity);

    let ephemeral = random_nonzero_scalar(rng);
    let ephemeral_public = ProjectivePoint::GENERATOR * ephemeral;
    let shared = identity_public(&params.master_public, recipient_identity) * ephemeral;
    let kek = kek_for(&shared, recipient_identity, &commitment);

    let mut content_key = [0u8; 32];
    rng.fill_bytes(&mut content_key);

    let wrapped_key = seal(&kek, &content_key, &commitment);
    let mut sealed_payload = seal(&content_key, plaintext, &commitment);
    let tag_start = sealed_payload.len() - TAG_LEN;
    let auth_tag: [u8; 16] = sealed_payload[tag_start..].try_into().expect("tag is 16 bytes");
    sealed_payload.truncate(tag_start);

    Ok(CiphertextEnvelope {
        level: EnvelopeLevel::Original,
        recipient_identity: recipient_identity.to_string(),
        condition_commitment: commitment,
        ephemeral_public: compress(&ephemeral_public),
        wrapped_key,
        payload: sealed_payload,
        auth_tag,
    })
}

/// Mint a re-encryption key delegating envelopes of `delegator` under
/// `condition` to `delegatee_identity`.
pub fn rkgen(
    delegator: &IdentitySecretKey,
    delegatee_identity: &str,
    condition: &ConditionTag,
) -> Result<ReEncryptionKey, Error> {
    check_identity(delegatee_identity)?;
    if delegatee_identity == delegator.identity {
        return Err(Error::SelfDelegation);
    }
    let dh = identity_public(&delegator.master_public, delegatee_identity) * delegator.scalar;
    let factor = rk_factor(&dh, &delegator.identity, delegatee_identity, condition);
    let factor_inv = factor.invert().expect("factor is nonzero");
    Ok(ReEncryptionKey {
        delegator_identity: delegator.identity.clone(),
        delegatee_identity: delegatee_identity.to_string(),
        condition: condition.clone(),
        translation_token: delegator.scalar * factor_inv,
    })
}

/// Translate an original envelope for the delegator into one decryptable by
/// the delegatee. Payload bytes are unchanged; only key material moves.
pub fn reencrypt(rk: &ReEncryptionKey, ct: &CiphertextEnvelope) -> Result<CiphertextEnvelope, Error> {
    if ct.level != EnvelopeLevel::Original {
        return Err(Error::LevelMismatch);
    }
    if ct.recipient_identity != rk.delegator_identity {
        return Err(Error::IdentityMismatch);
    }
    if condition_commitment(&rk.condition, &ct.recipient_identity) != ct.condition_commitment {
        return Err(Error::ConditionMismatch);
    }
    let ephemeral = decompress(&ct.ephemeral_public)
        .ok_or_else(|| Error::BadEncoding("invalid ephemeral point".into()))?;
    let translated = ephemeral * rk.translation_token;

    // Prefix the delegator identity so the delegatee can rebuild the
    // original commitment and DH transcript.
    let mut wrapped = Vec::with_capacity(2 + rk.delegator_identity.len() + ct.wrapped_key.len());
    wrapped.extend_from_slice(&(rk.delegator_identity.len() as u16).to_be_bytes());
    wrapped.extend_from_slice(rk.delegator_identity.as_bytes());
    wrapped.extend_from_slice(&ct.wrapped_key);

    Ok(CiphertextEnvelope {
        level: EnvelopeLevel::Reencrypted,
        recipient_identity: rk.delegatee_identity.clone(),
        condition_commitment: condition_commitment(&rk.condition, &rk.delegatee_identity),
        ephemeral_public: compress(&translated),
        wrapped_key: wrapped,
        payload: ct.payload.clone(),
        auth_tag: ct.auth_tag,
    })
}

/// Recover the plaintext. Succeeds only when `sk` matches the envelope's
/// recipient at its level and `condition` matches the commitment. All
/// failure causes collapse into [`Error::DecryptionFailed`].
pub fn decrypt(
    sk: &IdentitySecretKey,
    ct: &CiphertextEnvelope,
    condition: &ConditionTag,
) -> Result<Vec<u8>, Error> {
    decrypt_inner(sk, ct, condition).ok_or(Error::DecryptionFailed)
}

fn decrypt_inner(sk: &IdentitySecretKey, ct: &CiphertextEnvelope, condition: &ConditionTag) -> Option<Vec<u8>> {
    if ct.recipient_identity != sk.identity {
        return None;
    }
    if condition_commitment(condition, &ct.recipient_identity) != ct.condition_commitment {
        return None;
    }
    let ephemeral = decompress(&ct.ephemeral_public)?;

    let (kek, original_commitment, sealed_key) = match ct.level {
        EnvelopeLevel::Original => {
            let shared = ephemeral * sk.scalar;
            (
                kek_for(&shared, &sk.identity, &ct.condition_commitment),
                ct.condition_commitment,
                ct.wrapped_key.as_slice(),
            )
        }
        EnvelopeLevel::Reencrypted => {
            if ct.wrapped_key.len() < 2 {
                return None;
            }
            let id_len = u16::from_be_bytes(ct.wrapped_key[..2].try_into().ok()?) as usize;
            let rest = &ct.wrapped_key[2..];
            if rest.len() < id_len {
                return None;
            }
            let delegator = std::str::from_utf8(&rest[..id_len]).ok()?;
            if delegator.is_empty() || delegator == sk.identity {
                return None;
            }
            let sealed_key = &rest[id_len..];
            let original_commitment = condition_commitment(condition, delegator);

            let dh = identity_public(&sk.master_public, delegator) * sk.scalar;
            let factor = rk_factor(&dh, delegator, &sk.identity, condition);
            // The envelope's point is token * r * G; multiplying by the
            // factor restores r * pk_delegator, the original KEM secret.
            let shared = ephemeral * factor;
            (kek_for(&shared, delegator, &original_commitment), original_commitment, sealed_key)
        }
    };

    let content_key: [u8; 32] = open(&kek, sealed_key, &original_commitment)?.try_into().ok()?;

    let mut sealed_payload = Vec::with_capacity(ct.payload.len() + TAG_LEN);
    sealed_payload.extend_from_slice(&ct.payload);
    sealed_payload.extend_from_slice(&ct.auth_tag);
    open(&content_key, &sealed_payload, &original_commitment)
}

impl CiphertextEnvelope {
    /// Binary layout: version(1) | level(1) | recipient-id-len(2)+bytes |
    /// condition_commitment(32) | ephemeral_public(33) |
    /// wrapped_key-len(2)+bytes | payload-len(4)+bytes | auth_tag(16).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            89 + self.recipient_identity.len() + self.wrapped_key.len() + self.payload.len(),
        );
        out.push(ENVELOPE_VERSION);
        out.push(match self.level {
            EnvelopeLevel::Original => 0,
            EnvelopeLevel::Reencrypted => 1,
        });
        out.extend_from_slice(&(self.recipient_identity.len() as u16).to_be_bytes());
        out.extend_from_slice(self.recipient_identity.as_bytes());
        out.extend_from_slice(&self.condition_commitment);
        out.extend_from_slice(&self.ephemeral_public);
        out.extend_from_slice(&(self.wrapped_key.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.wrapped_key);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.auth_tag);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let version = cursor.take_u8()?;
        if version != ENVELOPE_VERSION {
            return Err(Error::BadEncoding(format!("unsupported version {version}")));
        }
        let level = match cursor.take_u8()? {
            0 => EnvelopeLevel::Original,
            1 => EnvelopeLevel::Reencrypted,
            other => return Err(Error::BadEncoding(format!("unknown level {other}"))),
        };
        let id_len = cursor.take_u16()? as usize;
        let id_bytes = cursor.take(id_len)?;
        let recipient_identity = std::str::from_utf8(id_bytes)
            .map_err(|_| Error::BadEncoding("recipient identity is not UTF-8".into()))?
            .to_string();
        if recipient_identity.is_empty() {
            return Err(Error::BadEncoding("empty recipient identity".into()));
        }
        let condition_commitment: [u8; 32] = cursor.take(32)?.try_into().expect("sized");
        let ephemeral_public: [u8; 33] = cursor.take(33)?.try_into().expect("sized");
        let wrapped_len = cursor.take_u16()? as usize;
        let wrapped_key = cursor.take(wrapped_len)?.to_vec();
        let payload_len = cursor.take_u32()? as usize;
        let payload = cursor.take(payload_len)?.to_vec();
        let auth_tag: [u8; 16] = cursor.take(16)?.try_into().expect("sized");
        if cursor.pos != bytes.len() {
            return Err(Error::BadEncoding(format!("{} trailing bytes", bytes.len() - cursor.pos)));
        }
        Ok(CiphertextEnvelope {
            level,
            recipient_identity,
            condition_commitment,
            ephemeral_public,
            wrapped_key,
            payload,
            auth_tag,
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, Error> {
        let bytes = hex::decode(s).map_err(|e| Error::BadEncoding(e.to_string()))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::BadEncoding(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u8(&mut self) -> Result<u8, Error> {
        Ok(self.take(1)?[0])
    }

    fn take_u16(&mut self) -> Result<u16, Error> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("sized")))
    }

    fn take_u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("sized")))
    }
}
