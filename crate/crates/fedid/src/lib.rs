//! Federated identity management simulator.
//!
//! The pieces, bottom up:
//!
//! * [`hdkeys`] — hierarchical deterministic key trees (additive and
//!   multiplicative derivation) used for every pseudonymous identity in the
//!   system, plus a deterministic ECDSA signer for login challenges and
//!   ledger endorsements.
//! * [`ibcpre`] — identity-based conditional proxy re-encryption: encrypt a
//!   document to an identity, then delegate decryption to another identity
//!   under a condition tag without the proxy ever seeing plaintext.
//! * [`auth`] — salted password records and RFC 6238 TOTP second factor.
//! * [`trust`] — time-decaying trust scores with noisy-or aggregation,
//!   threshold policies, and data-source recommendation.
//! * [`ledger`] — permissioned append-only hash-chained ledger recording
//!   data-access and re-certification events under per-transaction keys.
//! * [`netsim`] — deterministic in-memory message bus with fault injection
//!   and full transcript capture.
//! * [`actors`] — the five protocol roles (user agent, identity provider,
//!   service provider, data owner, communication server) as message-driven
//!   state machines.
//! * [`scenario`] — declarative scenario files, the end-to-end runner, and
//!   the audit report.

pub mod actors;
pub mod auth;
pub mod hdkeys;
pub mod ibcpre;
pub mod ledger;
pub mod netsim;
pub mod scenario;
pub mod trust;
