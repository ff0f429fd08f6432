//! Hierarchical deterministic key trees over secp256k1.
//!
//! Implements extended private/public keys with two child-derivation modes:
//!
//! * `Additive` — the classic BIP-32 rule `child = parent + tweak (mod n)`,
//!   kept bit-compatible with the published reference vectors so the whole
//!   pipeline can be cross-checked against them.
//! * `Multiplicative` — `child = parent * tweak (mod n)`, the re-randomized
//!   variant used as the default mode for all identities in this system.
//!
//! A node carries its derivation mode and children inherit it, so a tree
//! never mixes modes. Every pseudonymous identity in the system (data owner
//! keys, login keys, blockchain transaction keys) is a node of one of two
//! trees rooted at the user's Data Access Key and Data Authorization Key.
//!
//! Also provides a deterministic ECDSA signer (nonce derived by keyed hash
//! of key and message, low-s normalized) used for login challenge-response
//! and ledger endorsements.

use hmac::{Hmac, Mac};
use k256::elliptic_curve::group::Group;
use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::point::AffineCoordinates;
use k256::elliptic_curve::scalar::IsHigh;
use k256::elliptic_curve::sec1::{FromEncodedPoint, ToEncodedPoint};
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, EncodedPoint, ProjectivePoint, Scalar, U256};
use ripemd::Ripemd160;
use sha2::{Digest, Sha256, Sha512};

type HmacSha512 = Hmac<Sha512>;
type HmacSha256 = Hmac<Sha256>;

/// Key for the master-key HMAC, per the BIP-32 convention.
const MASTER_HMAC_KEY: &[u8] = b"Bitcoin seed";

/// Offset marking hardened child indices in the raw 32-bit encoding.
pub const HARDENED_OFFSET: u32 = 1 << 31;

/// Serialized extended keys are always 78 bytes.
pub const SERIALIZED_LEN: usize = 78;

// Version bytes. Additive mode uses the standard xprv/xpub constants so
// additive serializations match the published vectors byte for byte;
// multiplicative mode gets its own constants one step up.
const VERSION_ADD_PRIVATE: [u8; 4] = [0x04, 0x88, 0xAD, 0xE4];
const VERSION_ADD_PUBLIC: [u8; 4] = [0x04, 0x88, 0xB2, 0x1E];
const VERSION_MUL_PRIVATE: [u8; 4] = [0x04, 0x89, 0xAD, 0xE4];
const VERSION_MUL_PUBLIC: [u8; 4] = [0x04, 0x89, 0xB2, 0x1E];

/// Errors from key derivation and codec operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("seed length {0} outside 16..=64 bytes")]
    SeedLength(usize),
    #[error("derivation would exceed maximum depth 255")]
    DepthOverflow,
    #[error("hardened derivation requested on an extended public key")]
    HardenedFromPublic,
    #[error("path length {len} exceeds remaining depth {remaining}")]
    PathTooLong { len: usize, remaining: usize },
    #[error("invalid derivation path: {0}")]
    BadPath(String),
    #[error("invalid extended key encoding: {0}")]
    BadEncoding(String),
    #[error("child index {0} out of range (must be < 2^31)")]
    IndexOutOfRange(u32),
}

/// Child derivation rule for a key tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivationMode {
    Additive,
    Multiplicative,
}

/// A single step in a derivation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildNumber {
    /// Index within `[0, 2^31)`.
    pub index: u32,
    pub hardened: bool,
}

impl ChildNumber {
    pub fn normal(index: u32) -> Result<Self, Error> {
        if index >= HARDENED_OFFSET {
            return Err(Error::IndexOutOfRange(index));
        }
        Ok(ChildNumber { index, hardened: false })
    }

    pub fn hardened(index: u32) -> Result<Self, Error> {
        if index >= HARDENED_OFFSET {
            return Err(Error::IndexOutOfRange(index));
        }
        Ok(ChildNumber { index, hardened: true })
    }

    /// The raw 32-bit value as serialized (hardened bit folded in).
    pub fn raw(self) -> u32 {
        if self.hardened {
            self.index | HARDENED_OFFSET
        } else {
            self.index
        }
    }

    fn from_raw(raw: u32) -> Self {
        ChildNumber { index: raw & !HARDENED_OFFSET, hardened: raw >= HARDENED_OFFSET }
    }

    fn next(self) -> Result<Self, Error> {
        let index = self.index + 1;
        if index >= HARDENED_OFFSET {
            return Err(Error::IndexOutOfRange(index));
        }
        Ok(ChildNumber { index, hardened: self.hardened })
    }
}

impl std::fmt::Display for ChildNumber {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.hardened {
            write!(f, "{}'", self.index)
        } else {
            write!(f, "{}", self.index)
        }
    }
}

/// An ordered sequence of child-derivation steps, e.g. `m/1'/2/3`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DerivationPath(pub Vec<ChildNumber>);

impl DerivationPath {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

impl std::str::FromStr for DerivationPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let mut parts = s.split('/');
        match parts.next() {
            Some("m") | Some("M") => {}
            _ => return Err(Error::BadPath(format!("path must start with 'm': {s:?}"))),
        }
        let mut steps = Vec::new();
        for part in parts {
            if part.is_empty() {
                return Err(Error::BadPath(format!("empty component in {s:?}")));
            }
            let (digits, hardened) = match part.strip_suffix(['\'', 'h', 'H']) {
                Some(d) => (d, true),
                None => (part, false),
            };
            let index: u32 = digits
                .parse()
                .map_err(|_| Error::BadPath(format!("bad index {part:?} in {s:?}")))?;
            if index >= HARDENED_OFFSET {
                return Err(Error::IndexOutOfRange(index));
            }
            steps.push(ChildNumber { index, hardened });
        }
        Ok(DerivationPath(steps))
    }
}

impl std::fmt::Display for DerivationPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "m")?;
        for step in &self.0 {
            write!(f, "/{step}")?;
        }
        Ok(())
    }
}

/// 32 bytes of per-node entropy threaded through child derivation.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ChainCode(pub [u8; 32]);

impl std::fmt::Debug for ChainCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ChainCode({})", hex::encode(self.0))
    }
}

/// First four bytes of hash160 of the compressed public key.
#[derive(Clone, Copy, PartialEq, Eq, Default)]
pub struct Fingerprint(pub [u8; 4]);

impl std::fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fingerprint({})", hex::encode(self.0))
    }
}

/// A private node of an HD key tree.
#[derive(Clone, PartialEq, Eq)]
pub struct ExtendedPrivateKey {
    scalar: Scalar,
    pub chain_code: ChainCode,
    pub depth: u8,
    pub child_number: ChildNumber,
    pub parent_fingerprint: Fingerprint,
    pub mode: DerivationMode,
}

impl std::fmt::Debug for ExtendedPrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtendedPrivateKey")
            .field("scalar", &"[redacted]")
            .field("depth", &self.depth)
            .field("child_number", &self.child_number)
            .field("parent_fingerprint", &self.parent_fingerprint)
            .field("mode", &self.mode)
            .finish()
    }
}

/// A public node of an HD key tree. Supports child derivation only for
/// non-hardened indices.
#[derive(Clone, PartialEq, Eq)]
pub struct ExtendedPublicKey {
    point: ProjectivePoint,
    pub chain_code: ChainCode,
    pub depth: u8,
    pub child_number: ChildNumber,
    pub parent_fingerprint: Fingerprint,
    pub mode: DerivationMode,
}

impl std::fmt::Debug for ExtendedPublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtendedPublicKey")
            .field("point", &hex::encode(self.point_bytes()))
            .field("depth", &self.depth)
            .field("child_number", &self.child_number)
            .field("parent_fingerprint", &self.parent_fingerprint)
            .field("mode", &self.mode)
            .finish()
    }
}

fn hmac512(key: &[u8], data: &[u8]) -> ([u8; 32], [u8; 32]) {
    let mut mac = HmacSha512::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(data);
    let out = mac.finalize().into_bytes();
    let mut left = [0u8; 32];
    let mut right = [0u8; 32];
    left.copy_from_slice(&out[..32]);
    right.copy_from_slice(&out[32..]);
    (left, right)
}

fn hash160(data: &[u8]) -> [u8; 20] {
    Ripemd160::digest(Sha256::digest(data)).into()
}

fn scalar_from_bytes(bytes: &[u8; 32]) -> Option<Scalar> {
    Option::from(Scalar::from_repr((*bytes).into()))
}

fn point_from_compressed(bytes: &[u8]) -> Option<ProjectivePoint> {
    if bytes.len() != 33 {
        return None;
    }
    let encoded = EncodedPoint::from_bytes(bytes).ok()?;
    let affine: Option<AffinePoint> = Option::from(AffinePoint::from_encoded_point(&encoded));
    let point = ProjectivePoint::from(affine?);
    if bool::from(point.is_identity()) {
        return None;
    }
    Some(point)
}

/// Generate the master (depth-0) key of a tree from 16-64 bytes of seed
/// material. Deterministic; if the candidate scalar is zero or out of range
/// the HMAC is retried with a counter byte appended.
pub fn master_from_seed(seed: &[u8], mode: DerivationMode) -> Result<ExtendedPrivateKey, Error> {
    if !(16..=64).contains(&seed.len()) {
        return Err(Error::SeedLength(seed.len()));
    }
    for attempt in 0u8..=255 {
        let mut data = seed.to_vec();
        if attempt > 0 {
            data.push(attempt);
        }
        let (left, right) = hmac512(MASTER_HMAC_KEY, &data);
        if let Some(scalar) = scalar_from_bytes(&left) {
            if !bool::from(scalar.is_zero()) {
                return Ok(ExtendedPrivateKey {
                    scalar,
                    chain_code: ChainCode(right),
                    depth: 0,
                    child_number: ChildNumber { index: 0, hardened: false },
                    parent_fingerprint: Fingerprint::default(),
                    mode,
                });
            }
        }
    }
    unreachable!("256 consecutive invalid master candidates")
}

impl ExtendedPrivateKey {
    /// The private scalar as 32 big-endian bytes.
    pub fn scalar_bytes(&self) -> [u8; 32] {
        self.scalar.to_bytes().into()
    }

    fn public_point(&self) -> ProjectivePoint {
        ProjectivePoint::GENERATOR * self.scalar
    }

    /// Drop the private half, keeping all metadata.
    pub fn neuter(&self) -> ExtendedPublicKey {
        ExtendedPublicKey {
            point: self.public_point(),
            chain_code: self.chain_code,
            depth: self.depth,
            child_number: self.child_number,
            parent_fingerprint: self.parent_fingerprint,
            mode: self.mode,
        }
    }

    /// Fingerprint of this node (identifies it as a parent).
    pub fn fingerprint(&self) -> Fingerprint {
        self.neuter().fingerprint()
    }

    /// Derive the child private key at `child`. If the tweak at an index is
    /// invalid, derivation deterministically retries at the next index; the
    /// index actually used is surfaced as `child_number` on the result.
    pub fn ckd_priv(&self, child: ChildNumber) -> Result<ExtendedPrivateKey, Error> {
        if self.depth == u8::MAX {
            return Err(Error::DepthOverflow);
        }
        let parent_pub = self.neuter();
        let parent_fingerprint = parent_pub.fingerprint();
        let mut num = child;
        loop {
            let mut data = Vec::with_capacity(37);
            if num.hardened {
                data.push(0);
                data.extend_from_slice(&self.scalar_bytes());
            } else {
                data.extend_from_slice(&parent_pub.point_bytes());
            }
            data.extend_from_slice(&num.raw().to_be_bytes());
            let (left, right) = hmac512(&self.chain_code.0, &data);
            if let Some(scalar) = combine_priv(self.mode, &self.scalar, &left) {
                return Ok(ExtendedPrivateKey {
                    scalar,
                    chain_code: ChainCode(right),
                    depth: self.depth + 1,
                    child_number: num,
                    parent_fingerprint,
                    mode: self.mode,
                });
            }
            num = num.next()?;
        }
    }

    /// Left-fold of [`ckd_priv`](Self::ckd_priv) over a path.
    pub fn derive_path(&self, path: &DerivationPath) -> Result<ExtendedPrivateKey, Error> {
        let remaining = (u8::MAX - self.depth) as usize;
        if path.len() > remaining {
            return Err(Error::PathTooLong { len: path.len(), remaining });
        }
        let mut key = self.clone();
        for step in &path.0 {
            key = key.ckd_priv(*step)?;
        }
        Ok(key)
    }

    /// 78-byte extended-key serialization.
    pub fn to_bytes(&self) -> [u8; SERIALIZED_LEN] {
        let version = match self.mode {
            DerivationMode::Additive => VERSION_ADD_PRIVATE,
            DerivationMode::Multiplicative => VERSION_MUL_PRIVATE,
        };
        let mut out = [0u8; SERIALIZED_LEN];
        out[0..4].copy_from_slice(&version);
        out[4] = self.depth;
        out[5..9].copy_from_slice(&self.parent_fingerprint.0);
        out[9..13].copy_from_slice(&self.child_number.raw().to_be_bytes());
        out[13..45].copy_from_slice(&self.chain_code.0);
        out[45] = 0;
        out[46..78].copy_from_slice(&self.scalar_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let (mode, key_material, common) = split_serialized(bytes, false)?;
        if key_material[0] != 0 {
            return Err(Error::BadEncoding("private key material must start with 0x00".into()));
        }
        let mut scalar_bytes = [0u8; 32];
        scalar_bytes.copy_from_slice(&key_material[1..]);
        let scalar = scalar_from_bytes(&scalar_bytes)
            .filter(|s| !bool::from(s.is_zero()))
            .ok_or_else(|| Error::BadEncoding("private scalar out of range".into()))?;
        Ok(ExtendedPrivateKey {
            scalar,
            chain_code: common.chain_code,
            depth: common.depth,
            child_number: common.child_number,
            parent_fingerprint: common.parent_fingerprint,
            mode,
        })
    }

    pub fn to_base58(&self) -> String {
        bs58::encode(self.to_bytes()).with_check().into_string()
    }

    pub fn from_base58(s: &str) -> Result<Self, Error> {
        Self::from_bytes(&decode_base58(s)?)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, Error> {
        let bytes = hex::decode(s).map_err(|e| Error::BadEncoding(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// Deterministic ECDSA over SHA-256 of the message; low-s normalized.
    /// Signing the same message with the same key yields identical bytes.
    pub fn sign(&self, message: &[u8]) -> Signature {
        let digest: [u8; 32] = Sha256::digest(message).into();
        let z = <Scalar as Reduce<U256>>::reduce_bytes(&digest.into());
        for counter in 0u32.. {
            let mut mac = HmacSha256::new_from_slice(&self.scalar_bytes()).expect("any key length");
            mac.update(&digest);
            mac.update(&counter.to_be_bytes());
            let nonce_bytes: [u8; 32] = mac.finalize().into_bytes().into();
            let k = <Scalar as Reduce<U256>>::reduce_bytes(&nonce_bytes.into());
            if bool::from(k.is_zero()) {
                continue;
            }
            let point = (ProjectivePoint::GENERATOR * k).to_affine();
            let r = <Scalar as Reduce<U256>>::reduce_bytes(&point.x());
            if bool::from(r.is_zero()) {
                continue;
            }
            let k_inv = k.invert().expect("k is nonzero");
            let mut s = k_inv * (z + r * self.scalar);
            if bool::from(s.is_zero()) {
                continue;
            }
            if bool::from(s.is_high()) {
                s = -s;
            }
            return Signature { r, s };
        }
        unreachable!("nonce search space exhausted")
    }
}

fn combine_priv(mode: DerivationMode, parent: &Scalar, tweak_bytes: &[u8; 32]) -> Option<Scalar> {
    let tweak = scalar_from_bytes(tweak_bytes)?;
    match mode {
        DerivationMode::Additive => {
            let child = tweak + parent;
            if bool::from(child.is_zero()) {
                return None;
            }
            Some(child)
        }
        DerivationMode::Multiplicative => {
            if bool::from(tweak.is_zero()) {
                return None;
            }
            Some(tweak * parent)
        }
    }
}

fn combine_pub(
    mode: DerivationMode,
    parent: &ProjectivePoint,
    tweak_bytes: &[u8; 32],
) -> Option<ProjectivePoint> {
    let tweak = scalar_from_bytes(tweak_bytes)?;
    match mode {
        DerivationMode::Additive => {
            let child = *parent + ProjectivePoint::GENERATOR * tweak;
            if bool::from(child.is_identity()) {
                return None;
            }
            Some(child)
        }
        DerivationMode::Multiplicative => {
            if bool::from(tweak.is_zero()) {
                return None;
            }
            Some(*parent * tweak)
        }
    }
}

impl ExtendedPublicKey {
    /// The compressed SEC1 encoding of the public point (33 bytes).
    pub fn point_bytes(&self) -> [u8; 33] {
        let encoded = self.point.to_affine().to_encoded_point(true);
        encoded.as_bytes().try_into().expect("compressed point is 33 bytes")
    }

    pub fn fingerprint(&self) -> Fingerprint {
        let mut out = [0u8; 4];
        out.copy_from_slice(&hash160(&self.point_bytes())[..4]);
        Fingerprint(out)
    }

    /// Derive the child public key at a non-hardened index. Invalid tweaks
    /// retry at the next index exactly as the private side does, so the
    /// commutation identity holds index for index.
    pub fn ckd_pub(&self, child: ChildNumber) -> Result<ExtendedPublicKey, Error> {
        if child.hardened {
            return Err(Error::HardenedFromPublic);
        }
        if self.depth == u8::MAX {
            return Err(Error::DepthOverflow);
        }
        let parent_bytes = self.point_bytes();
        let parent_fingerprint = self.fingerprint();
        let mut num = child;
        loop {
            let mut data = Vec::with_capacity(37);
            data.extend_from_slice(&parent_bytes);
            data.extend_from_slice(&num.raw().to_be_bytes());
            let (left, right) = hmac512(&self.chain_code.0, &data);
            if let Some(point) = combine_pub(self.mode, &self.point, &left) {
                return Ok(ExtendedPublicKey {
                    point,
                    chain_code: ChainCode(right),
                    depth: self.depth + 1,
                    child_number: num,
                    parent_fingerprint,
                    mode: self.mode,
                });
            }
            num = num.next()?;
        }
    }

    /// Left-fold of [`ckd_pub`](Self::ckd_pub) over a fully non-hardened path.
    pub fn derive_path(&self, path: &DerivationPath) -> Result<ExtendedPublicKey, Error> {
        let remaining = (u8::MAX - self.depth) as usize;
        if path.len() > remaining {
            return Err(Error::PathTooLong { len: path.len(), remaining });
        }
        let mut key = self.clone();
        for step in &path.0 {
            key = key.ckd_pub(*step)?;
        }
        Ok(key)
    }

    pub fn to_bytes(&self) -> [u8; SERIALIZED_LEN] {
        let version = match self.mode {
            DerivationMode::Additive => VERSION_ADD_PUBLIC,
            DerivationMode::Multiplicative => VERSION_MUL_PUBLIC,
        };
        let mut out = [0u8; SERIALIZED_LEN];
        out[0..4].copy_from_slice(&version);
        out[4] = self.depth;
        out[5..9].copy_from_slice(&self.parent_fingerprint.0);
        out[9..13].copy_from_slice(&self.child_number.raw().to_be_bytes());
        out[13..45].copy_from_slice(&self.chain_code.0);
        out[45..78].copy_from_slice(&self.point_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, Error> {
        let (mode, key_material, common) = split_serialized(bytes, true)?;
        let point = point_from_compressed(key_material)
            .ok_or_else(|| Error::BadEncoding("invalid public point".into()))?;
        Ok(ExtendedPublicKey {
            point,
            chain_code: common.chain_code,
            depth: common.depth,
            child_number: common.child_number,
            parent_fingerprint: common.parent_fingerprint,
            mode,
        })
    }

    pub fn to_base58(&self) -> String {
        bs58::encode(self.to_bytes()).with_check().into_string()
    }

    pub fn from_base58(s: &str) -> Result<Self, Error> {
        Self::from_bytes(&decode_base58(s)?)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, Error> {
        let bytes = hex::decode(s).map_err(|e| Error::BadEncoding(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    /// ECDSA verification. Returns false on any malformed input; never panics.
    pub fn verify(&self, message: &[u8], sig: &Signature) -> bool {
        if bool::from(sig.r.is_zero()) || bool::from(sig.s.is_zero()) {
            return false;
        }
        let digest: [u8; 32] = Sha256::digest(message).into();
        let z = <Scalar as Reduce<U256>>::reduce_bytes(&digest.into());
        let s_inv: Option<Scalar> = Option::from(sig.s.invert());
        let s_inv = match s_inv {
            Some(v) => v,
            None => return false,
        };
        let u1 = z * s_inv;
        let u2 = sig.r * s_inv;
        let candidate = ProjectivePoint::GENERATOR * u1 + self.point * u2;
        if bool::from(candidate.is_identity()) {
            return false;
        }
        let v = <Scalar as Reduce<U256>>::reduce_bytes(&candidate.to_affine().x());
        v == sig.r
    }
}

struct CommonFields {
    chain_code: ChainCode,
    depth: u8,
    child_number: ChildNumber,
    parent_fingerprint: Fingerprint,
}

fn split_serialized(
    bytes: &[u8],
    expect_public: bool,
) -> Result<(DerivationMode, &[u8], CommonFields), Error> {
    if bytes.len() != SERIALIZED_LEN {
        return Err(Error::BadEncoding(format!("expected 78 bytes, got {}", bytes.len())));
    }
    let version: [u8; 4] = bytes[0..4].try_into().expect("sliced");
    let (mode, is_public) = match version {
        VERSION_ADD_PRIVATE => (DerivationMode::Additive, false),
        VERSION_ADD_PUBLIC => (DerivationMode::Additive, true),
        VERSION_MUL_PRIVATE => (DerivationMode::Multiplicative, false),
        VERSION_MUL_PUBLIC => (DerivationMode::Multiplicative, true),
        other => return Err(Error::BadEncoding(format!("unknown version {}", hex::encode(other)))),
    };
    if is_public != expect_public {
        return Err(Error::BadEncoding("private/public version mismatch".into()));
    }
    let depth = bytes[4];
    let mut fp = [0u8; 4];
    fp.copy_from_slice(&bytes[5..9]);
    let raw_index = u32::from_be_bytes(bytes[9..13].try_into().expect("sliced"));
    let mut cc = [0u8; 32];
    cc.copy_from_slice(&bytes[13..45]);
    if depth == 0 && (fp != [0u8; 4] || raw_index != 0) {
        return Err(Error::BadEncoding("master key must have zero parent fingerprint and index".into()));
    }
    Ok((
        mode,
        &bytes[45..78],
        CommonFields {
            chain_code: ChainCode(cc),
            depth,
            child_number: ChildNumber::from_raw(raw_index),
            parent_fingerprint: Fingerprint(fp),
        },
    ))
}

fn decode_base58(s: &str) -> Result<Vec<u8>, Error> {
    bs58::decode(s)
        .with_check(None)
        .into_vec()
        .map_err(|e| Error::BadEncoding(e.to_string()))
}

/// An ECDSA signature with low-s normalization for stable serialization.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature {
    r: Scalar,
    s: Scalar,
}

impl Signature {
    /// Fixed 64-byte encoding: r (32, big-endian) then s (32, big-endian).
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.r.to_bytes());
        out[32..].copy_from_slice(&self.s.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 64 {
            return None;
        }
        let r = scalar_from_bytes(bytes[..32].try_into().ok()?)?;
        let s = scalar_from_bytes(bytes[32..].try_into().ok()?)?;
        if bool::from(r.is_zero()) || bool::from(s.is_zero()) {
            return None;
        }
        Some(Signature { r, s })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        Self::from_bytes(&hex::decode(s).ok()?)
    }

    /// True when s is in the lower half of the scalar range.
    pub fn is_low_s(&self) -> bool {
        !bool::from(self.s.is_high())
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({})", self.to_hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    const VECTOR1_SEED: &str = "000102030405060708090a0b0c0d0e0f";

    fn master_additive() -> ExtendedPrivateKey {
        let seed = hex::decode(VECTOR1_SEED).unwrap();
        master_from_seed(&seed, DerivationMode::Additive).unwrap()
    }

    fn master_multiplicative() -> ExtendedPrivateKey {
        let seed = hex::decode(VECTOR1_SEED).unwrap();
        master_from_seed(&seed, DerivationMode::Multiplicative).unwrap()
    }

    // Published BIP-32 test vector 1, all chains.
    const VECTOR1: &[(&str, &str, &str)] = &[
        (
            "m",
            "xprv9s21ZrQH143K3QTDL4LXw2F7HEK3wJUD2nW2nRk4stbPy6cq3jPPqjiChkVvvNKmPGJxWUtg6LnF5kejMRNNU3TGtRBeJgk33yuGBxrMPHi",
            "xpub661MyMwAqRbcFtXgS5sYJABqqG9YLmC4Q1Rdap9gSE8NqtwybGhePY2gZ29ESFjqJoCu1Rupje8YtGqsefD265TMg7usUDFdp6W1EGMcet8",
        ),
        (
            "m/0'",
            "xprv9uHRZZhk6KAJC1avXpDAp4MDc3sQKNxDiPvvkX8Br5ngLNv1TxvUxt4cV1rGL5hj6KCesnDYUhd7oWgT11eZG7XnxHrnYeSvkzY7d2bhkJ7",
            "xpub68Gmy5EdvgibQVfPdqkBBCHxA5htiqg55crXYuXoQRKfDBFA1WEjWgP6LHhwBZeNK1VTsfTFUHCdrfp1bgwQ9xv5ski8PX9rL2dZXvgGDnw",
        ),
        (
            "m/0'/1",
            "xprv9wTYmMFdV23N2TdNG573QoEsfRrWKQgWeibmLntzniatZvR9BmLnvSxqu53Kw1UmYPxLgboyZQaXwTCg8MSY3H2EU4pWcQDnRnrVA1xe8fs",
            "xpub6ASuArnXKPbfEwhqN6e3mwBcDTgzisQN1wXN9BJcM47sSikHjJf3UFHKkNAWbWMiGj7Wf5uMash7SyYq527Hqck2AxYysAA7xmALppuCkwQ",
        ),
        (
            "m/0'/1/2'",
            "xprv9z4pot5VBttmtdRTWfWQmoH1taj2axGVzFqSb8C9xaxKymcFzXBDptWmT7FwuEzG3ryjH4ktypQSAewRiNMjANTtpgP4mLTj34bhnZX7UiM",
            "xpub6D4BDPcP2GT577Vvch3R8wDkScZWzQzMMUm3PWbmWvVJrZwQY4VUNgqFJPMM3No2dFDFGTsxxpG5uJh7n7epu4trkrX7x7DogT5Uv6fcLW5",
        ),
        (
            "m/0'/1/2'/2",
            "xprvA2JDeKCSNNZky6uBCviVfJSKyQ1mDYahRjijr5idH2WwLsEd4Hsb2Tyh8RfQMuPh7f7RtyzTtdrbdqqsunu5Mm3wDvUAKRHSC34sJ7in334",
            "xpub6FHa3pjLCk84BayeJxFW2SP4XRrFd1JYnxeLeU8EqN3vDfZmbqBqaGJAyiLjTAwm6ZLRQUMv1ZACTj37sR62cfN7fe5JnJ7dh8zL4fiyLHV",
        ),
        (
            "m/0'/1/2'/2/1000000000",
            "xprvA41z7zogVVwxVSgdKUHDy1SKmdb533PjDz7J6N6mV6uS3ze1ai8FHa8kmHScGpWmj4WggLyQjgPie1rFSruoUihUZREPSL39UNdE3BBDu76",
            "xpub6H1LXWLaKsWFhvm6RVpEL9P4KfRZSW7abD2ttkWP3SSQvnyA8FSVqNTEcYFgJS2UaFcxupHiYkro49S8yGasTvXEYBVPamhGW6cFJodrTHy",
        ),
    ];

    #[test]
    fn additive_mode_reproduces_published_vectors() {
        let master = master_additive();
        for (path, want_priv, want_pub) in VECTOR1 {
            let path = DerivationPath::from_str(path).unwrap();
            let key = master.derive_path(&path).unwrap();
            assert_eq!(key.to_base58(), *want_priv, "private chain {path}");
            assert_eq!(key.neuter().to_base58(), *want_pub, "public chain {path}");
        }
    }

    #[test]
    fn master_is_deterministic() {
        assert_eq!(master_additive(), master_additive());
        assert_eq!(master_multiplicative(), master_multiplicative());
    }

    #[test]
    fn short_seed_rejected() {
        let err = master_from_seed(&[0u8; 8], DerivationMode::Additive).unwrap_err();
        assert_eq!(err, Error::SeedLength(8));
        assert!(master_from_seed(&[0u8; 65], DerivationMode::Additive).is_err());
        assert!(master_from_seed(&[0u8; 16], DerivationMode::Additive).is_ok());
        assert!(master_from_seed(&[0u8; 64], DerivationMode::Additive).is_ok());
    }

    #[test]
    fn ckd_priv_is_deterministic() {
        let key = master_multiplicative();
        let a = key.ckd_priv(ChildNumber::normal(5).unwrap()).unwrap();
        let b = key.ckd_priv(ChildNumber::normal(5).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiplicative_child_matches_modular_arithmetic_oracle() {
        // Oracle: recompute the tweak with raw HMAC-SHA512 and check
        // child * parent^-1 == tweak (mod n).
        let parent = master_multiplicative();
        for index in [0u32, 1, 7, 1000, HARDENED_OFFSET - 1] {
            let child = parent.ckd_priv(ChildNumber::normal(index).unwrap()).unwrap();
            assert_eq!(child.child_number.index, index, "no retry expected");

            let mut data = Vec::new();
            data.extend_from_slice(&parent.neuter().point_bytes());
            data.extend_from_slice(&index.to_be_bytes());
            let (left, _) = hmac512(&parent.chain_code.0, &data);
            let tweak = scalar_from_bytes(&left).unwrap();

            let parent_inv = parent.scalar.invert().unwrap();
            let recovered = child.scalar * parent_inv;
            assert_eq!(recovered, tweak);
        }
    }

    #[test]
    fn commutation_holds_for_both_modes() {
        for mode in [DerivationMode::Additive, DerivationMode::Multiplicative] {
            let seed = hex::decode(VECTOR1_SEED).unwrap();
            let key = master_from_seed(&seed, mode).unwrap();
            for index in [0u32, 1, HARDENED_OFFSET - 1] {
                let num = ChildNumber::normal(index).unwrap();
                let left = key.ckd_priv(num).unwrap().neuter();
                let right = key.neuter().ckd_pub(num).unwrap();
                assert_eq!(left, right, "mode {mode:?} index {index}");
            }
        }
    }

    #[test]
    fn hardened_from_public_fails() {
        let xpub = master_multiplicative().neuter();
        let err = xpub.ckd_pub(ChildNumber::hardened(0).unwrap()).unwrap_err();
        assert_eq!(err, Error::HardenedFromPublic);
    }

    #[test]
    fn hundred_children_pairwise_distinct() {
        let xpub = master_multiplicative().neuter();
        let mut points = Vec::new();
        for i in 0..100 {
            points.push(xpub.ckd_pub(ChildNumber::normal(i).unwrap()).unwrap().point_bytes());
        }
        for i in 0..points.len() {
            for j in 0..i {
                assert_ne!(points[i], points[j], "children {i} and {j} collide");
            }
        }
    }

    #[test]
    fn empty_path_is_identity() {
        let key = master_multiplicative();
        assert_eq!(key.derive_path(&DerivationPath::default()).unwrap(), key);
    }

    #[test]
    fn path_fold_matches_stepwise() {
        let key = master_multiplicative();
        let path = DerivationPath::from_str("m/1'/2").unwrap();
        let via_path = key.derive_path(&path).unwrap();
        let step1 = key.ckd_priv(ChildNumber::hardened(1).unwrap()).unwrap();
        let step2 = step1.ckd_priv(ChildNumber::normal(2).unwrap()).unwrap();
        assert_eq!(via_path, step2);
    }

    #[test]
    fn private_path_neutered_equals_public_suffix_derivation() {
        let key = master_multiplicative();
        let hardened_part = key.derive_path(&DerivationPath::from_str("m/3'").unwrap()).unwrap();
        let suffix = DerivationPath::from_str("m/4/9").unwrap();
        let via_private = hardened_part.derive_path(&suffix).unwrap().neuter();
        let via_public = hardened_part.neuter().derive_path(&suffix).unwrap();
        assert_eq!(via_private, via_public);
    }

    #[test]
    fn public_root_rejects_hardened_path() {
        let xpub = master_multiplicative().neuter();
        let path = DerivationPath::from_str("m/1'/2").unwrap();
        assert_eq!(xpub.derive_path(&path).unwrap_err(), Error::HardenedFromPublic);
    }

    #[test]
    fn depth_overflow_detected() {
        let key = master_multiplicative();
        let long = DerivationPath(vec![ChildNumber::normal(0).unwrap(); 256]);
        assert!(matches!(key.derive_path(&long).unwrap_err(), Error::PathTooLong { .. }));
        let mut deep = key;
        for _ in 0..255 {
            deep = deep.ckd_priv(ChildNumber::normal(0).unwrap()).unwrap();
        }
        assert_eq!(deep.depth, 255);
        assert_eq!(deep.ckd_priv(ChildNumber::normal(0).unwrap()).unwrap_err(), Error::DepthOverflow);
    }

    #[test]
    fn sign_verify_round_trip() {
        let key = master_multiplicative();
        let msg = b"challenge nonce 42";
        let sig = key.sign(msg);
        assert!(key.neuter().verify(msg, &sig));
        assert!(sig.is_low_s());

        let mut flipped = msg.to_vec();
        flipped[0] ^= 1;
        assert!(!key.neuter().verify(&flipped, &sig));

        // A different key (a child of the signer) must not verify.
        let other = key.ckd_priv(ChildNumber::normal(1).unwrap()).unwrap();
        assert!(!other.neuter().verify(msg, &sig));
    }

    #[test]
    fn signing_is_deterministic() {
        let key = master_multiplicative();
        let msg = b"same message";
        assert_eq!(key.sign(msg).to_bytes(), key.sign(msg).to_bytes());
    }

    #[test]
    fn signature_codec_round_trip() {
        let sig = master_additive().sign(b"x");
        let back = Signature::from_bytes(&sig.to_bytes()).unwrap();
        assert_eq!(sig, back);
        assert!(Signature::from_bytes(&[0u8; 64]).is_none());
        assert!(Signature::from_bytes(&[1u8; 63]).is_none());
    }

    #[test]
    fn serialization_round_trips() {
        for mode in [DerivationMode::Additive, DerivationMode::Multiplicative] {
            let seed = hex::decode(VECTOR1_SEED).unwrap();
            let key = master_from_seed(&seed, mode)
                .unwrap()
                .ckd_priv(ChildNumber::hardened(9).unwrap())
                .unwrap();
            let back = ExtendedPrivateKey::from_bytes(&key.to_bytes()).unwrap();
            assert_eq!(key, back);
            assert_eq!(ExtendedPrivateKey::from_base58(&key.to_base58()).unwrap(), key);
            assert_eq!(ExtendedPrivateKey::from_hex(&key.to_hex()).unwrap(), key);

            let xpub = key.neuter();
            assert_eq!(ExtendedPublicKey::from_bytes(&xpub.to_bytes()).unwrap(), xpub);
            assert_eq!(ExtendedPublicKey::from_base58(&xpub.to_base58()).unwrap(), xpub);
            // Mode survives the round trip through the version field.
            assert_eq!(ExtendedPublicKey::from_base58(&xpub.to_base58()).unwrap().mode, mode);
        }
    }

    #[test]
    fn serialization_rejects_garbage() {
        assert!(ExtendedPrivateKey::from_bytes(&[0u8; 77]).is_err());
        assert!(ExtendedPrivateKey::from_bytes(&[0u8; 78]).is_err());
        assert!(ExtendedPublicKey::from_base58("not a key").is_err());
        // A public serialization fed to the private decoder is rejected.
        let xpub = master_additive().neuter();
        assert!(ExtendedPrivateKey::from_bytes(&xpub.to_bytes()).is_err());
    }

    #[test]
    fn path_parse_and_display() {
        let path = DerivationPath::from_str("m/1'/2/3").unwrap();
        assert_eq!(path.to_string(), "m/1'/2/3");
        assert_eq!(path.len(), 3);
        assert!(path.0[0].hardened && !path.0[1].hardened);
        assert_eq!(DerivationPath::from_str("m").unwrap(), DerivationPath::default());
        assert_eq!(DerivationPath::from_str("m/4h").unwrap(), DerivationPath::from_str("m/4'").unwrap());
        assert!(DerivationPath::from_str("1/2").is_err());
        assert!(DerivationPath::from_str("m//2").is_err());
        assert!(DerivationPath::from_str("m/kaboom").is_err());
        assert!(DerivationPath::from_str("m/2147483648").is_err());
    }

    #[test]
    fn neuter_metadata_and_point() {
        let key = master_multiplicative();
        let xpub = key.neuter();
        assert_eq!(xpub, key.neuter());
        assert_eq!(xpub.depth, 0);
        assert_eq!(xpub.mode, key.mode);
        assert!(!bool::from(xpub.point.is_identity()));
    }
}
