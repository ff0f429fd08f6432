//! Credential verification at the identity provider: salted iterated
//! password hashing and an RFC 6238 TOTP second factor with a replay guard.

use hmac::{Hmac, Mac};
use sha1::Sha1;
use sha2::Sha256;
use std::collections::BTreeSet;

type HmacSha1 = Hmac<Sha1>;
type HmacSha256 = Hmac<Sha256>;

/// NIST-style policy: length only, no composition rules.
pub const MIN_PASSWORD_LEN: usize = 8;
pub const MIN_ITERATIONS: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("password shorter than {MIN_PASSWORD_LEN} characters")]
    PasswordTooShort,
    #[error("iteration count below the minimum of 10000")]
    TooFewIterations,
    #[error("TOTP digits must be 6 or 8, got {0}")]
    BadDigits(u32),
}

/// Stored verifier for one password. Holds no recoverable password bytes.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PasswordRecord {
    #[serde(with = "hex_array_16")]
    pub salt: [u8; 16],
    pub iterations: u32,
    #[serde(with = "hex_array_32")]
    pub digest: [u8; 32],
}

/// Iterated HMAC-SHA256 chain over (salt, password).
fn password_digest(password: &str, salt: &[u8; 16], iterations: u32) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(salt).expect("any key length");
    mac.update(password.as_bytes());
    let mut state: [u8; 32] = mac.finalize().into_bytes().into();
    for _ in 1..iterations {
        let mut mac = HmacSha256::new_from_slice(salt).expect("any key length");
        mac.update(&state);
        state = mac.finalize().into_bytes().into();
    }
    state
}

/// Hash a password into a stored record. Enforces the length policy.
pub fn hash_password(password: &str, salt: [u8; 16], iterations: u32) -> Result<PasswordRecord, Error> {
    if password.chars().count() < MIN_PASSWORD_LEN {
        return Err(Error::PasswordTooShort);
    }
    if iterations < MIN_ITERATIONS {
        return Err(Error::TooFewIterations);
    }
    Ok(PasswordRecord { salt, iterations, digest: password_digest(password, &salt, iterations) })
}

/// Constant-time comparison over the fixed-length digests.
pub fn verify_password(record: &PasswordRecord, candidate: &str) -> bool {
    let candidate_digest = password_digest(candidate, &record.salt, record.iterations);
    let mut diff = 0u8;
    for (a, b) in record.digest.iter().zip(candidate_digest.iter()) {
        diff |= a ^ b;
    }
    diff == 0
}

/// Which hash backs the TOTP HMAC. SHA-1 is the default for reference-vector
/// compatibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TotpAlgorithm {
    Sha1,
    Sha256,
}

/// Shared secret and parameters for one TOTP enrollment.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TotpSecret {
    #[serde(with = "hex_array_20")]
    pub key: [u8; 20],
    pub step_seconds: u64,
    pub digits: u32,
    pub skew_windows: u64,
    pub algorithm: TotpAlgorithm,
}

impl TotpSecret {
    pub fn new(key: [u8; 20]) -> Self {
        TotpSecret { key, step_seconds: 30, digits: 6, skew_windows: 1, algorithm: TotpAlgorithm::Sha1 }
    }

    pub fn with_digits(mut self, digits: u32) -> Result<Self, Error> {
        if digits != 6 && digits != 8 {
            return Err(Error::BadDigits(digits));
        }
        self.digits = digits;
        Ok(self)
    }

    pub fn with_algorithm(mut self, algorithm: TotpAlgorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    /// Base32 text form, the authenticator-app provisioning convention.
    pub fn to_base32(&self) -> String {
        data_encoding::BASE32_NOPAD.encode(&self.key)
    }

    pub fn key_from_base32(s: &str) -> Option<[u8; 20]> {
        data_encoding::BASE32_NOPAD.decode(s.as_bytes()).ok()?.try_into().ok()
    }
}

fn hotp(secret: &TotpSecret, counter: u64) -> String {
    let digest: Vec<u8> = match secret.algorithm {
        TotpAlgorithm::Sha1 => {
            let mut mac = HmacSha1::new_from_slice(&secret.key).expect("any key length");
            mac.update(&counter.to_be_bytes());
            mac.finalize().into_bytes().to_vec()
        }
        TotpAlgorithm::Sha256 => {
            let mut mac = HmacSha256::new_from_slice(&secret.key).expect("any key length");
            mac.update(&counter.to_be_bytes());
            mac.finalize().into_bytes().to_vec()
        }
    };
    // Dynamic truncation per RFC 4226.
    let offset = (digest[digest.len() - 1] & 0x0f) as usize;
    let code = (u32::from(digest[offset] & 0x7f) << 24)
        | (u32::from(digest[offset + 1]) << 16)
        | (u32::from(digest[offset + 2]) << 8)
        | u32::from(digest[offset + 3]);
    let modulus = 10u32.pow(secret.digits);
    format!("{:0width$}", code % modulus, width = secret.digits as usize)
}

/// The code for the window containing `unix_time`, zero-padded to `digits`.
pub fn totp_code(secret: &TotpSecret, unix_time: u64) -> String {
    hotp(secret, unix_time / secret.step_seconds)
}

/// Tracks which (principal, window) pairs have already been accepted so a
/// code can be used at most once per window.
#[derive(Debug, Default, Clone)]
pub struct ReplayGuard {
    used: BTreeSet<(String, u64)>,
}

impl ReplayGuard {
    pub fn new() -> Self {
        Self::default()
    }

    fn mark(&mut self, principal: &str, window: u64) -> bool {
        self.used.insert((principal.to_string(), window))
    }
}

/// Verify a candidate code at `unix_time`, accepting any window within
/// `±skew_windows`. A matching (principal, window) is consumed: submitting
/// the same code again returns false.
pub fn totp_verify(
    secret: &TotpSecret,
    unix_time: u64,
    code: &str,
    principal: &str,
    guard: &mut ReplayGuard,
) -> bool {
    let center = unix_time / secret.step_seconds;
    let lo = center.saturating_sub(secret.skew_windows);
    let hi = center.saturating_add(secret.skew_windows);
    for window in lo..=hi {
        if hotp(secret, window) == code {
            return guard.mark(principal, window);
        }
    }
    false
}

macro_rules! hex_array_mod {
    ($name:ident, $len:expr) => {
        mod $name {
            pub fn serialize<S: serde::Serializer>(v: &[u8; $len], s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&hex::encode(v))
            }
            pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<[u8; $len], D::Error> {
                let text: String = serde::Deserialize::deserialize(d)?;
                let bytes = hex::decode(&text).map_err(serde::de::Error::custom)?;
                bytes.try_into().map_err(|_| serde::de::Error::custom("wrong length"))
            }
        }
    };
}

hex_array_mod!(hex_array_16, 16);
hex_array_mod!(hex_array_20, 20);
hex_array_mod!(hex_array_32, 32);

#[cfg(test)]
mod tests {
    use super::*;

    fn secret_8_digits() -> TotpSecret {
        // The reference secret: ASCII "12345678901234567890".
        let key: [u8; 20] = *b"12345678901234567890";
        TotpSecret::new(key).with_digits(8).unwrap()
    }

    // Independent oracle: HMAC-SHA1 dynamic truncation written out from
    // scratch, sharing no code with the production path above.
    fn oracle_totp_sha1_8(key: &[u8], unix_time: u64) -> String {
        use hmac::Mac;
        let counter = unix_time / 30;
        let mut mac = hmac::Hmac::<sha1::Sha1>::new_from_slice(key).unwrap();
        mac.update(&counter.to_be_bytes());
        let h = mac.finalize().into_bytes();
        let o = (h[19] & 0xf) as usize;
        let dbc = ((h[o] as u32 & 0x7f) << 24)
            | ((h[o + 1] as u32) << 16)
            | ((h[o + 2] as u32) << 8)
            | (h[o + 3] as u32);
        format!("{:08}", dbc % 100_000_000)
    }

    // The six published RFC 6238 SHA-1 reference rows.
    const REFERENCE_ROWS: &[(u64, &str)] = &[
        (59, "94287082"),
        (1111111109, "07081804"),
        (1111111111, "14050471"),
        (1234567890, "89005924"),
        (2000000000, "69279037"),
        (20000000000, "65353130"),
    ];

    #[test]
    fn reference_rows_match_oracle_and_implementation() {
        let secret = secret_8_digits();
        for (time, expected) in REFERENCE_ROWS {
            assert_eq!(oracle_totp_sha1_8(&secret.key, *time), *expected, "oracle at t={time}");
            assert_eq!(totp_code(&secret, *time), *expected, "implementation at t={time}");
        }
    }

    #[test]
    fn same_window_same_code() {
        let secret = TotpSecret::new(*b"12345678901234567890");
        assert_eq!(totp_code(&secret, 0), totp_code(&secret, 29));
        assert_ne!(totp_code(&secret, 29), totp_code(&secret, 30));
    }

    #[test]
    fn verify_accepts_within_skew_and_blocks_replay() {
        let secret = TotpSecret::new(*b"12345678901234567890");
        let mut guard = ReplayGuard::new();
        let now = 1_000_000u64;
        let code = totp_code(&secret, now);
        assert!(totp_verify(&secret, now, &code, "alice", &mut guard));
        // Replay of the same code is rejected.
        assert!(!totp_verify(&secret, now, &code, "alice", &mut guard));
        // A different principal has its own replay space.
        assert!(totp_verify(&secret, now, &code, "bob", &mut guard));
    }

    #[test]
    fn verify_respects_skew_bounds() {
        let secret = TotpSecret::new(*b"12345678901234567890");
        let now = 10_000u64;
        // Code from the previous window is inside the default ±1 skew.
        let mut guard = ReplayGuard::new();
        let prev = totp_code(&secret, now - 30);
        assert!(totp_verify(&secret, now, &prev, "alice", &mut guard));
        // Code from two windows back is outside ±1.
        let mut guard = ReplayGuard::new();
        let stale = totp_code(&secret, now - 60);
        assert!(!totp_verify(&secret, now, &stale, "alice", &mut guard));
    }

    #[test]
    fn code_changes_across_windows_statistically() {
        let secret = TotpSecret::new(*b"12345678901234567890");
        let mut changes = 0u32;
        let total = 10_000u32;
        let mut prev = totp_code(&secret, 0);
        for w in 1..=total {
            let next = totp_code(&secret, u64::from(w) * 30);
            if next != prev {
                changes += 1;
            }
            prev = next;
        }
        // Collision chance per step is 1e-6; over 1e4 windows expect ~0.01
        // collisions. Demand at least 99.9% changes.
        assert!(changes as f64 >= f64::from(total) * 0.999, "{changes}/{total}");
    }

    #[test]
    fn password_round_trip_and_policy() {
        let record = hash_password("correct horse", [1u8; 16], 10_000).unwrap();
        assert!(verify_password(&record, "correct horse"));
        assert!(!verify_password(&record, "correct horsex"));
        assert_eq!(hash_password("short", [0u8; 16], 10_000).unwrap_err(), Error::PasswordTooShort);
        assert_eq!(
            hash_password("long enough", [0u8; 16], 9_999).unwrap_err(),
            Error::TooFewIterations
        );
    }

    #[test]
    fn distinct_salts_distinct_digests() {
        let a = hash_password("same password", [1u8; 16], 10_000).unwrap();
        let b = hash_password("same password", [2u8; 16], 10_000).unwrap();
        assert_ne!(a.digest, b.digest);
    }

    #[test]
    fn totp_secret_base32_round_trip() {
        let secret = TotpSecret::new(*b"12345678901234567890");
        let text = secret.to_base32();
        assert_eq!(TotpSecret::key_from_base32(&text).unwrap(), secret.key);
    }

    #[test]
    fn digits_validation() {
        assert!(TotpSecret::new([0u8; 20]).with_digits(6).is_ok());
        assert!(TotpSecret::new([0u8; 20]).with_digits(8).is_ok());
        assert_eq!(TotpSecret::new([0u8; 20]).with_digits(7).unwrap_err(), Error::BadDigits(7));
    }

    #[test]
    fn sha256_variant_differs() {
        let sha1 = TotpSecret::new(*b"12345678901234567890");
        let sha256 = TotpSecret::new(*b"12345678901234567890").with_algorithm(TotpAlgorithm::Sha256);
        assert_ne!(totp_code(&sha1, 59), totp_code(&sha256, 59));
    }
}
