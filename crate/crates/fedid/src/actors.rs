//! The five protocol roles as message-driven state machines.
//!
//! * [`UserAgent`] — holds the two HD master keys (Data Access Key for data
//!   owners, Data Authorization Key for identity providers) and the user's
//!   IBCPRE identity key. Initiates every flow; private key material never
//!   leaves it.
//! * [`IdentityProvider`] — authenticates users (password, TOTP, HD login
//!   key challenge), proxies encrypted documents it cannot read, and
//!   computes trust-scored attribute assertions once the user delegates
//!   decryption.
//! * [`ServiceProvider`] — issues claims requests and grants access when
//!   every mandatory claim clears its threshold.
//! * [`DataOwner`] — custodian of identity documents; verifies claims
//!   against its records and writes data-access and re-certification
//!   transactions to the consortium ledger.
//! * [`CommServer`] — the consortium gateway. All identity-provider <->
//!   data-owner traffic passes through it; the bus rejects direct sends.
//!
//! Flow message kinds carry their protocol phase prefix (`sp1_`..`sp9_`),
//! which is what transcript-level structure checks key on.
//!
//! Registration with a data owner and re-certification happen offline, as
//! direct calls rather than bus messages.

use crate::auth::{self, PasswordRecord, ReplayGuard, TotpSecret};
use crate::hdkeys::{ChildNumber, DerivationMode, ExtendedPrivateKey, ExtendedPublicKey, Signature};
use crate::ibcpre::{
    self, CiphertextEnvelope, ConditionTag, IdentitySecretKey, ReEncryptionKey, SystemParams,
};
use crate::ledger::{self, AccessOutcome, Ledger};
use crate::netsim::{Bus, BusCtx, Envelope, DELIVERY_FAILURE_KIND};
use crate::trust::{
    self, AttributeAssertion, ServicePolicy, SourceClass, SourceObservation, SourceWeightTable,
    TrustParams,
};
use rand_core::RngCore;
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("duplicate registration for this owner key")]
    DuplicateRegistration,
    #[error("unknown pseudo-identifier at this data owner")]
    UnknownPseudoIdentifier,
    #[error("user has no session with identity provider {0:?}")]
    NoSession(String),
    #[error("user is not registered with {0:?}")]
    NotRegistered(String),
    #[error("no stored document at {idp:?} for owner {owner:?}")]
    NoStoredDocument { idp: String, owner: String },
    #[error("a flow is already in progress for this user")]
    FlowInProgress,
    #[error(transparent)]
    Keys(#[from] crate::hdkeys::Error),
    #[error(transparent)]
    Crypto(#[from] ibcpre::Error),
    #[error(transparent)]
    Ledger(#[from] ledger::Error),
    #[error(transparent)]
    Auth(#[from] auth::Error),
    #[error(transparent)]
    Bus(#[from] crate::netsim::Error),
}

// ---------------------------------------------------------------------------
// Wire messages
// ---------------------------------------------------------------------------

/// A claim demanded by a service provider.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RequiredClaim {
    pub attribute: String,
    pub threshold: f64,
    pub mandatory: bool,
}

/// Redirect parameters a service provider hands the user for the identity
/// provider. The nonce doubles as the flow id and is single-use.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClaimsRequest {
    pub sp_id: String,
    pub required: Vec<RequiredClaim>,
    pub nonce: String,
}

/// One attribute inside an encrypted identity document.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttributeEntry {
    pub value: String,
    pub last_recert: u64,
}

/// Plaintext of the envelopes a user sends: the pseudo-identifier plus the
/// claimed attributes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IdentityClaim {
    pub owner_key_xpub: String,
    pub attributes: BTreeMap<String, AttributeEntry>,
}

/// Latest re-certification info a data owner reports with a green signal.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RecertInfo {
    pub attribute: String,
    pub timestamp: u64,
    pub block_height: u64,
}

/// Data-owner verdict on one verification request. Decryption failures,
/// unknown keys, and malformed claims are deliberately indistinct.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum VerifyOutcome {
    Verified { owner_class: SourceClass, latest_recert: Option<RecertInfo> },
    Mismatch { owner_class: SourceClass },
    Error,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VerificationResult {
    pub owner_id: String,
    pub flow: String,
    pub idp_id: String,
    pub verdict: VerifyOutcome,
    pub recorded_height: Option<u64>,
}

/// Why a flow asks an owner to verify: a service-provider login, or a
/// store-at-identity-provider request (which suppresses re-cert info).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyPurpose {
    SpLogin,
    Store,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "msg")]
pub enum Message {
    // --- signup (user <-> identity provider) ---
    SignupRequest { username: String, password: String, idp_xpub: String },
    SignupOk { username: String, totp_secret_base32: String },
    SignupFailed { username: String, reason: String },

    // --- three-stage login ---
    LoginPassword { username: String, password: String },
    Login1Ok { username: String },
    LoginTotp { username: String, code: String },
    Login2Ok { username: String, challenge: String },
    LoginKeyProof {
        username: String,
        login_index: u32,
        signature_hex: Option<String>,
        pubkey_b58: Option<String>,
    },
    Login3Ok { username: String, session: String },
    LoginFailed { username: String, stage: u8 },

    // --- service-provider login flow, phases 1..9 ---
    AccessRequest { user_id: String },
    ClaimsRedirect { claims: ClaimsRequest },
    ClaimsSubmit { session: String, claims: ClaimsRequest },
    OwnerSelect { flow: String, owners: Vec<String> },
    UseStored { flow: String, owner_id: String, attributes: Vec<String> },
    Documents {
        flow: String,
        condition: String,
        claimed_attributes: Vec<String>,
        envelopes: BTreeMap<String, String>,
    },
    OwnerRekeys { flow: String, rekeys: BTreeMap<String, String> },
    VerifyRequest {
        flow: String,
        owner_id: String,
        idp_id: String,
        sp_id: String,
        purpose: VerifyPurpose,
        condition: String,
        claimed_attributes: Vec<String>,
        envelope_hex: String,
    },
    VerifyResult(VerificationResult),
    OwnerUnavailable { flow: String, owner_id: String },
    LedgerCommitted { flow: String, owner_id: String, height: u64 },
    GreenSignal { flow: String, verified_owners: Vec<String> },
    IdpRekey { flow: String, rekey_hex: String },
    Assertion { flow: String, assertions: Vec<AttributeAssertion> },
    Decision {
        flow: String,
        granted: bool,
        failed_claims: Vec<String>,
        scores: BTreeMap<String, f64>,
    },
    FlowDenied { flow: String, reason: String },

    // --- store-identity flow (user <-> identity provider <-> owner) ---
    StoreRequest {
        flow: String,
        session: String,
        owner_id: String,
        condition: String,
        claimed_attributes: Vec<String>,
        envelope_hex: String,
    },
    StoreOwnerRekey { flow: String, rekey_hex: String },
    Stored { flow: String, owner_id: String },
    StoreFailed { flow: String, reason: String },
}

impl Message {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("messages serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Message> {
        serde_json::from_slice(bytes).ok()
    }

    /// Transcript kind. Flow messages carry their protocol phase prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::SignupRequest { .. } => "signup_request",
            Message::SignupOk { .. } => "signup_ok",
            Message::SignupFailed { .. } => "signup_failed",
            Message::LoginPassword { .. } => "login1_password",
            Message::Login1Ok { .. } => "login1_ok",
            Message::LoginTotp { .. } => "login2_totp",
            Message::Login2Ok { .. } => "login2_ok",
            Message::LoginKeyProof { .. } => "login3_key_proof",
            Message::Login3Ok { .. } => "login3_ok",
            Message::LoginFailed { .. } => "login_failed",
            Message::AccessRequest { .. } => "sp1_access_request",
            Message::ClaimsRedirect { .. } => "sp1_claims_redirect",
            Message::ClaimsSubmit { .. } => "sp1_claims_submit",
            Message::OwnerSelect { .. } => "sp2_owner_select",
            Message::UseStored { .. } => "sp2_use_stored",
            Message::Documents { .. } => "sp3_documents",
            Message::OwnerRekeys { .. } => "sp4_owner_rekeys",
            Message::VerifyRequest { .. } => "sp4_verify_request",
            Message::VerifyResult { .. } => "sp5_verify_result",
            Message::OwnerUnavailable { .. } => "sp5_owner_unavailable",
            Message::LedgerCommitted { .. } => "sp6_ledger_commit",
            Message::GreenSignal { .. } => "sp7_green_signal",
            Message::IdpRekey { .. } => "sp7_rekey_idp",
            Message::Assertion { .. } => "sp8_assertion",
            Message::Decision { .. } => "sp9_decision",
            Message::FlowDenied { .. } => "flow_denied",
            Message::StoreRequest { .. } => "st1_store_request",
            Message::StoreOwnerRekey { .. } => "st2_owner_rekey",
            Message::Stored { .. } => "st3_stored",
            Message::StoreFailed { .. } => "st_failed",
        }
    }
}

fn send_msg(ctx: &mut BusCtx<'_>, to: &str, msg: &Message) {
    // Routing violations would be wiring bugs; handlers must not panic, so
    // a refused send simply leaves no transcript entry.
    let _ = ctx.send(to, msg.kind(), msg.to_bytes());
}

fn rng_hex(rng: &mut dyn RngCore, bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rng.fill_bytes(&mut buf);
    hex::encode(buf)
}

/// Condition-tag convention binding every envelope to one flow:
/// `verify:<sorted attributes>:<flow nonce>` (or `store:` for store flows).
pub fn flow_condition(
    purpose: VerifyPurpose,
    attributes: &BTreeSet<String>,
    nonce: &str,
) -> ConditionTag {
    let prefix = match purpose {
        VerifyPurpose::SpLogin => "verify",
        VerifyPurpose::Store => "store",
    };
    let joined = attributes.iter().cloned().collect::<Vec<_>>().join(",");
    ConditionTag::new(format!("{prefix}:{joined}:{nonce}")).expect("flow tags are short")
}

// ---------------------------------------------------------------------------
// Consortium: shared ledger plus member endorsement keys
// ---------------------------------------------------------------------------

/// The consortium's shared state. The bus is single-threaded, so access
/// through the shared handle is serialized; the communication server and the
/// data owners are the only holders.
pub struct Consortium {
    pub ledger: Ledger,
    signing_keys: BTreeMap<String, ExtendedPrivateKey>,
}

pub type ConsortiumHandle = Rc<RefCell<Consortium>>;

impl Consortium {
    pub fn new(
        channel_id: &str,
        member_keys: Vec<(String, ExtendedPrivateKey)>,
        quorum: u32,
        timestamp: u64,
    ) -> Result<ConsortiumHandle, Error> {
        let members = member_keys
            .iter()
            .map(|(id, key)| ledger::Member { id: id.clone(), key: key.neuter() })
            .collect();
        let ledger = ledger::genesis(
            ledger::ChannelConfig { channel_id: channel_id.to_string(), members, quorum },
            timestamp,
        )?;
        Ok(Rc::new(RefCell::new(Consortium {
            ledger,
            signing_keys: member_keys.into_iter().collect(),
        })))
    }

    /// Endorse and commit everything pending, signing with every member key
    /// (the simulator's stand-in for the endorsement round).
    pub fn commit(&mut self, timestamp: u64) -> Result<u64, Error> {
        let signers: Vec<(&str, &ExtendedPrivateKey)> =
            self.signing_keys.iter().map(|(id, key)| (id.as_str(), key)).collect();
        let block = self.ledger.commit_block(&signers, timestamp)?;
        Ok(block.height)
    }
}

// ---------------------------------------------------------------------------
// Data owner
// ---------------------------------------------------------------------------

/// A data owner's record of one registered user.
#[derive(Debug, Clone)]
pub struct IdentityDocument {
    pub registered_owner_key: ExtendedPublicKey,
    pub attributes: BTreeMap<String, AttributeEntry>,
    pub owner_class: SourceClass,
    /// attribute -> (timestamp, block height) of its latest re-certification.
    recert_log: BTreeMap<String, (u64, u64)>,
    next_txn_index: u32,
}

pub struct DataOwner {
    pub id: String,
    pub class: SourceClass,
    sk: IdentitySecretKey,
    consortium: ConsortiumHandle,
    comm_id: String,
    documents: BTreeMap<Vec<u8>, IdentityDocument>,
}

impl DataOwner {
    pub fn new(
        id: &str,
        class: SourceClass,
        sk: IdentitySecretKey,
        consortium: ConsortiumHandle,
        comm_id: &str,
    ) -> Self {
        DataOwner {
            id: id.to_string(),
            class,
            sk,
            consortium,
            comm_id: comm_id.to_string(),
            documents: BTreeMap::new(),
        }
    }

    /// Offline registration: store the identity document under the user's
    /// pseudo-identifier and write one re-certification record per attribute.
    pub fn register_user(
        &mut self,
        owner_key: &ExtendedPublicKey,
        attributes: BTreeMap<String, String>,
        now: u64,
    ) -> Result<u64, Error> {
        let key_bytes = owner_key.to_bytes().to_vec();
        if self.documents.contains_key(&key_bytes) {
            return Err(Error::DuplicateRegistration);
        }
        let mut doc = IdentityDocument {
            registered_owner_key: owner_key.clone(),
            attributes: attributes
                .iter()
                .map(|(name, value)| {
                    (name.clone(), AttributeEntry { value: value.clone(), last_recert: now })
                })
                .collect(),
            owner_class: self.class,
            recert_log: BTreeMap::new(),
            next_txn_index: 0,
        };
        let mut consortium = self.consortium.borrow_mut();
        for name in attributes.keys() {
            let index = doc.next_txn_index;
            doc.next_txn_index += 1;
            consortium.ledger.record_recertification(owner_key, index, &self.id, name, now)?;
        }
        let height = consortium.commit(now)?;
        for name in attributes.keys() {
            doc.recert_log.insert(name.clone(), (now, height));
        }
        drop(consortium);
        self.documents.insert(key_bytes, doc);
        Ok(height)
    }

    /// Refresh one attribute's certification, recording it on the ledger.
    pub fn recertify(
        &mut self,
        owner_key: &ExtendedPublicKey,
        attribute: &str,
        now: u64,
    ) -> Result<u64, Error> {
        let key_bytes = owner_key.to_bytes().to_vec();
        let doc = self.documents.get_mut(&key_bytes).ok_or(Error::UnknownPseudoIdentifier)?;
        if !doc.attributes.contains_key(attribute) {
            return Err(Error::UnknownPseudoIdentifier);
        }
        let index = doc.next_txn_index;
        doc.next_txn_index += 1;
        let mut consortium = self.consortium.borrow_mut();
        consortium.ledger.record_recertification(owner_key, index, &self.id, attribute, now)?;
        let height = consortium.commit(now)?;
        drop(consortium);
        doc.attributes.get_mut(attribute).expect("checked").last_recert = now;
        doc.recert_log.insert(attribute.to_string(), (now, height));
        Ok(height)
    }

    pub fn document_count(&self) -> usize {
        self.documents.len()
    }

    pub fn lookup(&self, owner_key: &ExtendedPublicKey) -> Option<&IdentityDocument> {
        self.documents.get(&owner_key.to_bytes().to_vec())
    }

    /// Decrypt a delegated envelope and compare every attribute value in the
    /// claim byte for byte against the stored document. A verification
    /// (matched or mismatched) is recorded on the ledger under a fresh
    /// transaction key; failures to even decrypt or identify the user record
    /// nothing.
    fn verify_claim(
        &mut self,
        envelope_hex: &str,
        condition: &str,
        purpose: VerifyPurpose,
        idp_id: &str,
        sp_id: &str,
        now: u64,
    ) -> (VerifyOutcome, Option<u64>) {
        let Ok(condition) = ConditionTag::new(condition) else {
            return (VerifyOutcome::Error, None);
        };
        let Ok(envelope) = CiphertextEnvelope::from_hex(envelope_hex) else {
            return (VerifyOutcome::Error, None);
        };
        let Ok(plaintext) = ibcpre::decrypt(&self.sk, &envelope, &condition) else {
            return (VerifyOutcome::Error, None);
        };
        let Ok(claim) = serde_json::from_slice::<IdentityClaim>(&plaintext) else {
            return (VerifyOutcome::Error, None);
        };
        if claim.attributes.is_empty() {
            return (VerifyOutcome::Error, None);
        }
        let Ok(owner_key) = ExtendedPublicKey::from_base58(&claim.owner_key_xpub) else {
            return (VerifyOutcome::Error, None);
        };
        let key_bytes = owner_key.to_bytes().to_vec();
        let Some(doc) = self.documents.get_mut(&key_bytes) else {
            // Unknown pseudo-identifier: nothing reaches the ledger.
            return (VerifyOutcome::Error, None);
        };

        // The user claims exactly what the envelope carries.
        let claimed_names: Vec<String> = claim.attributes.keys().cloned().collect();
        let mut all_match = true;
        for (name, claimed) in &claim.attributes {
            match doc.attributes.get(name) {
                Some(stored) if claimed.value == stored.value => {}
                _ => {
                    all_match = false;
                    break;
                }
            }
        }
        let latest_recert = claimed_names
            .iter()
            .filter_map(|name| {
                doc.recert_log.get(name).map(|(ts, height)| RecertInfo {
                    attribute: name.clone(),
                    timestamp: *ts,
                    block_height: *height,
                })
            })
            .max_by_key(|info| info.timestamp);
        let txn_index = doc.next_txn_index;
        doc.next_txn_index += 1;

        let outcome = if all_match { AccessOutcome::Verified } else { AccessOutcome::Mismatch };
        let mut consortium = self.consortium.borrow_mut();
        if consortium
            .ledger
            .record_data_access(
                &owner_key,
                txn_index,
                &self.id,
                idp_id,
                sp_id,
                claimed_names,
                outcome,
                now,
            )
            .is_err()
        {
            return (VerifyOutcome::Error, None);
        }
        let Ok(height) = consortium.commit(now) else {
            return (VerifyOutcome::Error, None);
        };

        let verdict = if all_match {
            VerifyOutcome::Verified {
                owner_class: self.class,
                latest_recert: match purpose {
                    VerifyPurpose::SpLogin => latest_recert,
                    // A store request does not ask for re-cert info.
                    VerifyPurpose::Store => None,
                },
            }
        } else {
            VerifyOutcome::Mismatch { owner_class: self.class }
        };
        (verdict, Some(height))
    }
}

impl crate::netsim::Actor for DataOwner {
    fn on_message(&mut self, env: &Envelope, ctx: &mut BusCtx<'_>) {
        let Some(message) = Message::from_bytes(&env.payload) else { return };
        if let Message::VerifyRequest {
            flow,
            owner_id,
            idp_id,
            sp_id,
            purpose,
            condition,
            claimed_attributes: _,
            envelope_hex,
        } = message
        {
            if owner_id != self.id {
                return;
            }
            let now = ctx.now();
            let (verdict, recorded_height) = self.verify_claim(
                &envelope_hex,
                &condition,
                purpose,
                &idp_id,
                &sp_id,
                now,
            );
            let result = VerificationResult {
                owner_id: self.id.clone(),
                flow: flow.clone(),
                idp_id,
                verdict,
                recorded_height,
            };
            send_msg(ctx, &self.comm_id, &Message::VerifyResult(result));
            if let Some(height) = recorded_height {
                send_msg(
                    ctx,
                    &self.comm_id,
                    &Message::LedgerCommitted { flow, owner_id: self.id.clone(), height },
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Communication server
// ---------------------------------------------------------------------------

/// Consortium gateway: relays verification traffic between identity
/// providers and data owners unmodified, and reports owner outages back.
pub struct CommServer {
    pub id: String,
    #[allow(dead_code)]
    consortium: ConsortiumHandle,
    /// forwarded seq -> (flow, owner, idp) for failure correlation.
    pending_forwards: BTreeMap<u64, (String, String, String)>,
    pub ledger_notices: Vec<(String, String, u64)>,
    pub forwarded: u64,
}

impl CommServer {
    pub fn new(id: &str, consortium: ConsortiumHandle) -> Self {
        CommServer {
            id: id.to_string(),
            consortium,
            pending_forwards: BTreeMap::new(),
            ledger_notices: Vec::new(),
            forwarded: 0,
        }
    }
}

impl crate::netsim::Actor for CommServer {
    fn on_message(&mut self, env: &Envelope, ctx: &mut BusCtx<'_>) {
        if env.kind == DELIVERY_FAILURE_KIND {
            let Ok(failure) =
                serde_json::from_slice::<crate::netsim::DeliveryFailure>(&env.payload)
            else {
                return;
            };
            if let Some((flow, owner_id, idp_id)) =
                self.pending_forwards.remove(&failure.original_seq)
            {
                send_msg(ctx, &idp_id, &Message::OwnerUnavailable { flow, owner_id });
            }
            return;
        }
        let Some(message) = Message::from_bytes(&env.payload) else { return };
        match message {
            Message::VerifyRequest { ref flow, ref owner_id, ref idp_id, .. } => {
                let key = (flow.clone(), owner_id.clone(), idp_id.clone());
                if let Ok(seq) = ctx.send(owner_id, "sp4_verify_forward", env.payload.clone()) {
                    self.forwarded += 1;
                    self.pending_forwards.insert(seq, key);
                }
            }
            Message::VerifyResult(ref result) => {
                let _ = ctx.send(&result.idp_id, "sp5_verify_relay", env.payload.clone());
            }
            Message::LedgerCommitted { flow, owner_id, height } => {
                self.ledger_notices.push((flow, owner_id, height));
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Service provider
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub flow: String,
    pub user_id: String,
    pub granted: bool,
    pub failed_claims: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    pub assertions: Vec<AttributeAssertion>,
}

pub struct ServiceProvider {
    pub id: String,
    pub policy: ServicePolicy,
    issued: BTreeMap<String, String>,
    used: BTreeSet<String>,
    pub decisions: Vec<DecisionRecord>,
}

impl ServiceProvider {
    pub fn new(id: &str, policy: ServicePolicy) -> Self {
        ServiceProvider {
            id: id.to_string(),
            policy,
            issued: BTreeMap::new(),
            used: BTreeSet::new(),
            decisions: Vec::new(),
        }
    }

    fn required_claims(&self) -> Vec<RequiredClaim> {
        self.policy
            .claims
            .iter()
            .map(|(attribute, req)| RequiredClaim {
                attribute: attribute.clone(),
                threshold: req.threshold,
                mandatory: req.mandatory,
            })
            .collect()
    }
}

impl crate::netsim::Actor for ServiceProvider {
    fn on_message(&mut self, env: &Envelope, ctx: &mut BusCtx<'_>) {
        let Some(message) = Message::from_bytes(&env.payload) else { return };
        match message {
            Message::AccessRequest { user_id } => {
                if user_id != env.from {
                    return;
                }
                let nonce = rng_hex(ctx.rng(), 16);
                self.issued.insert(nonce.clone(), user_id);
                let claims = ClaimsRequest {
                    sp_id: self.id.clone(),
                    required: self.required_claims(),
                    nonce,
                };
                send_msg(ctx, &env.from, &Message::ClaimsRedirect { claims });
            }
            Message::Assertion { flow, assertions } => {
                let Some(user_id) = self.issued.get(&flow).cloned() else { return };
                if !self.used.insert(flow.clone()) {
                    // Nonce replay: a second assertion for the flow is refused.
                    return;
                }
                let mut failed = Vec::new();
                let mut scores = BTreeMap::new();
                for assertion in &assertions {
                    scores.insert(assertion.attribute_name.clone(), assertion.score.value());
                }
                for (attribute, requirement) in &self.policy.claims {
                    let ok = assertions.iter().any(|a| {
                        &a.attribute_name == attribute && a.score.value() >= requirement.threshold
                    });
                    if !ok && requirement.mandatory {
                        failed.push(attribute.clone());
                    }
                }
                let granted = failed.is_empty();
                self.decisions.push(DecisionRecord {
                    flow: flow.clone(),
                    user_id: user_id.clone(),
                    granted,
                    failed_claims: failed.clone(),
                    scores: scores.clone(),
                    assertions,
                });
                send_msg(
                    ctx,
                    &user_id,
                    &Message::Decision { flow, granted, failed_claims: failed, scores },
                );
            }
            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// Identity provider
// ---------------------------------------------------------------------------

/// What the provider persists per user: the password verifier, the TOTP
/// secret, the registered extended *public* key, the spent login indices,
/// and (optionally) still-encrypted stored documents. No user private
/// material, no attribute values.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct UserProfile {
    pub username: String,
    pub password: PasswordRecord,
    pub totp: TotpSecret,
    pub registered_idp_xpub: String,
    pub used_login_indices: BTreeSet<u32>,
    pub stored_documents: Vec<StoredDocument>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StoredDocument {
    pub owner_id: String,
    pub owner_class: SourceClass,
    pub envelope_hex: String,
    pub condition: String,
    pub stored_at: u64,
}

/// How the provider reacts when a data owner is offline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineBehavior {
    HardBlock,
    DegradeScore,
}

#[derive(Debug, Clone, PartialEq)]
enum OwnerResolution {
    Verified { class: SourceClass, latest_recert: Option<RecertInfo> },
    Mismatch,
    Unavailable,
    Failed,
}

#[derive(Debug, Clone)]
struct IdpFlow {
    username: String,
    sp_id: String,
    claims: ClaimsRequest,
    purpose: VerifyPurpose,
    owners: Vec<String>,
    condition: Option<String>,
    envelopes: BTreeMap<String, CiphertextEnvelope>,
    claimed_names: Vec<String>,
    results: BTreeMap<String, OwnerResolution>,
    user_id: String,
    use_stored: Option<String>,
}

pub struct IdentityProvider {
    pub id: String,
    #[allow(dead_code)]
    params: SystemParams,
    sk: IdentitySecretKey,
    comm_id: String,
    pub weight_table: SourceWeightTable,
    pub trust_params: TrustParams,
    pub paper_literal_login: bool,
    pub offline_behavior: OfflineBehavior,
    /// Consortium directory: owner id -> class, for scoring sources that
    /// could not answer themselves.
    pub owner_directory: BTreeMap<String, SourceClass>,
    profiles: BTreeMap<String, UserProfile>,
    sessions: BTreeMap<String, String>,
    pending_challenges: BTreeMap<String, String>,
    replay_guard: ReplayGuard,
    flows: BTreeMap<String, IdpFlow>,
}

impl IdentityProvider {
    pub fn new(id: &str, params: SystemParams, sk: IdentitySecretKey, comm_id: &str) -> Self {
        IdentityProvider {
            id: id.to_string(),
            params,
            sk,
            comm_id: comm_id.to_string(),
            weight_table: SourceWeightTable::default(),
            trust_params: TrustParams::default(),
            paper_literal_login: false,
            offline_behavior: OfflineBehavior::HardBlock,
            owner_directory: BTreeMap::new(),
            profiles: BTreeMap::new(),
            sessions: BTreeMap::new(),
            pending_challenges: BTreeMap::new(),
            replay_guard: ReplayGuard::new(),
            flows: BTreeMap::new(),
        }
    }

    pub fn profiles(&self) -> &BTreeMap<String, UserProfile> {
        &self.profiles
    }

    /// Everything the provider would write to disk, as JSON. The privacy
    /// audit scans this: it must never contain user private keys or
    /// attribute values.
    pub fn persisted_state_json(&self) -> String {
        serde_json::to_string_pretty(&self.profiles).expect("profiles serialize")
    }

    /// Envelopes (and their conditions) held for an in-progress flow,
    /// exposed so tests can assert the provider cannot decrypt anything
    /// before the user delegates in phase 7.
    pub fn held_flow_envelopes(&self, flow: &str) -> Vec<(String, CiphertextEnvelope, String)> {
        let Some(state) = self.flows.get(flow) else { return Vec::new() };
        let Some(condition) = &state.condition else { return Vec::new() };
        state
            .envelopes
            .iter()
            .map(|(owner, envelope)| (owner.clone(), envelope.clone(), condition.clone()))
            .collect()
    }

    /// Same, across every in-progress flow.
    pub fn held_flow_envelopes_all(&self) -> Vec<(String, CiphertextEnvelope, String)> {
        self.flows.keys().flat_map(|flow| self.held_flow_envelopes(flow)).collect()
    }

    pub fn ibcpre_key(&self) -> &IdentitySecretKey {
        &self.sk
    }

    fn fail_login(&self, ctx: &mut BusCtx<'_>, user: &str, username: &str, stage: u8) {
        send_msg(ctx, user, &Message::LoginFailed { username: username.to_string(), stage });
    }

    fn deny(&mut self, ctx: &mut BusCtx<'_>, flow_id: &str, reason: &str) {
        let Some(flow) = self.flows.remove(flow_id) else { return };
        let denial = match flow.purpose {
            VerifyPurpose::SpLogin => {
                Message::FlowDenied { flow: flow_id.to_string(), reason: reason.to_string() }
            }
            VerifyPurpose::Store => {
                Message::StoreFailed { flow: flow_id.to_string(), reason: reason.to_string() }
            }
        };
        send_msg(ctx, &flow.user_id, &denial);
    }

    /// Called whenever an owner result lands; acts once all owners resolved.
    fn resolve_flow(&mut self, ctx: &mut BusCtx<'_>, flow_id: &str) {
        let Some(flow) = self.flows.get(flow_id) else { return };
        if flow.results.len() < flow.owners.len() {
            return;
        }
        let any_failed = flow.results.values().any(|r| *r == OwnerResolution::Failed);
        let any_mismatch = flow.results.values().any(|r| *r == OwnerResolution::Mismatch);
        let verified: Vec<String> = flow
            .results
            .iter()
            .filter(|(_, r)| matches!(r, OwnerResolution::Verified { .. }))
            .map(|(id, _)| id.clone())
            .collect();
        let any_unavailable = flow.results.values().any(|r| *r == OwnerResolution::Unavailable);
        let user_id = flow.user_id.clone();
        let purpose = flow.purpose;

        if any_failed {
            self.deny(ctx, flow_id, "verification error");
            return;
        }
        if any_mismatch {
            self.deny(ctx, flow_id, "attribute mismatch");
            return;
        }
        let degraded_ok =
            any_unavailable && self.offline_behavior == OfflineBehavior::DegradeScore;
        if verified.is_empty() && !degraded_ok {
            self.deny(ctx, flow_id, "no owner verified");
            return;
        }

        match purpose {
            VerifyPurpose::SpLogin => {
                send_msg(
                    ctx,
                    &user_id,
                    &Message::GreenSignal { flow: flow_id.to_string(), verified_owners: verified },
                );
            }
            VerifyPurpose::Store => {
                let flow = self.flows.get(flow_id).expect("present");
                let owner_id = flow.owners.first().cloned().unwrap_or_default();
                let (Some(envelope), Some(OwnerResolution::Verified { class, .. })) =
                    (flow.envelopes.get(&owner_id), flow.results.get(&owner_id))
                else {
                    self.deny(ctx, flow_id, "no verified document to store");
                    return;
                };
                let stored = StoredDocument {
                    owner_id: owner_id.clone(),
                    owner_class: *class,
                    envelope_hex: envelope.to_hex(),
                    condition: flow.condition.clone().unwrap_or_default(),
                    stored_at: ctx.now(),
                };
                let username = flow.username.clone();
                if let Some(profile) = self.profiles.get_mut(&username) {
                    // Only original-level envelopes addressed to the user's
                    // own identity are ever stored.
                    profile.stored_documents.push(stored);
                }
                send_msg(ctx, &user_id, &Message::Stored { flow: flow_id.to_string(), owner_id });
                self.flows.remove(flow_id);
            }
        }
    }

    fn open_envelope(&self, envelope: &CiphertextEnvelope, rekey: &ReEncryptionKey) -> Option<IdentityClaim> {
        let translated = ibcpre::reencrypt(rekey, envelope).ok()?;
        let plaintext = ibcpre::decrypt(&self.sk, &translated, &rekey.condition).ok()?;
        serde_json::from_slice(&plaintext).ok()
    }

    /// Phase 7-9: decrypt the flow's envelopes with the user-minted
    /// re-encryption key, build trust-scored assertions, send them to the
    /// service provider.
    fn assert_and_answer(&mut self, ctx: &mut BusCtx<'_>, flow_id: &str, rekey_hex: &str) {
        let Some(flow) = self.flows.get(flow_id).cloned() else { return };
        let Ok(rekey) = ReEncryptionKey::from_hex(rekey_hex) else {
            self.deny(ctx, flow_id, "bad re-encryption key");
            return;
        };
        let now = ctx.now();
        let stored_path = flow.use_stored.is_some();

        // Decrypt what the user delegated.
        let mut decrypted: BTreeMap<String, IdentityClaim> = BTreeMap::new();
        let mut stored_classes: BTreeMap<String, SourceClass> = BTreeMap::new();
        if let Some(stored_owner) = &flow.use_stored {
            let Some(profile) = self.profiles.get(&flow.username) else {
                self.deny(ctx, flow_id, "unknown profile");
                return;
            };
            let Some(doc) =
                profile.stored_documents.iter().find(|d| &d.owner_id == stored_owner)
            else {
                self.deny(ctx, flow_id, "no stored document");
                return;
            };
            stored_classes.insert(doc.owner_id.clone(), doc.owner_class);
            if let Some(claim) = CiphertextEnvelope::from_hex(&doc.envelope_hex)
                .ok()
                .and_then(|envelope| self.open_envelope(&envelope, &rekey))
            {
                decrypted.insert(stored_owner.clone(), claim);
            }
        } else {
            for (owner_id, envelope) in &flow.envelopes {
                if let Some(claim) = self.open_envelope(envelope, &rekey) {
                    decrypted.insert(owner_id.clone(), claim);
                }
            }
        }
        if decrypted.is_empty() {
            self.deny(ctx, flow_id, "decryption failed");
            return;
        }

        let mut policy = ServicePolicy::default();
        for claim in &flow.claims.required {
            let _ = policy.require(&claim.attribute, claim.threshold, claim.mandatory);
        }

        let allowed: BTreeSet<&String> = flow.claimed_names.iter().collect();
        let mut assertions = Vec::new();
        for required in &flow.claims.required {
            let attribute = &required.attribute;
            if !allowed.contains(attribute) {
                // Outside the user's consent: never asserted.
                continue;
            }
            let mut value: Option<String> = None;
            let mut sources: Vec<SourceObservation> = Vec::new();
            for (owner_id, claim) in &decrypted {
                let Some(entry) = claim.attributes.get(attribute) else { continue };
                if value.as_deref().is_some_and(|v| v != entry.value) {
                    continue;
                }
                value = Some(entry.value.clone());
                let (class, available, last_recert) = if stored_path {
                    let class = stored_classes.get(owner_id).copied().unwrap_or(SourceClass::Other);
                    (class, true, entry.last_recert)
                } else {
                    match flow.results.get(owner_id) {
                        Some(OwnerResolution::Verified { class, latest_recert }) => (
                            *class,
                            true,
                            latest_recert.as_ref().map(|r| r.timestamp).unwrap_or(entry.last_recert),
                        ),
                        Some(OwnerResolution::Unavailable) => {
                            // No authoritative answer: no decay reference, so
                            // decay from now and take the penalty instead.
                            let class = self
                                .owner_directory
                                .get(owner_id)
                                .copied()
                                .unwrap_or(SourceClass::Other);
                            (class, false, now)
                        }
                        _ => continue,
                    }
                };
                sources.push(SourceObservation {
                    owner_id: owner_id.clone(),
                    class,
                    last_recert,
                    available,
                });
            }
            let Some(value) = value else { continue };
            if sources.is_empty() {
                continue;
            }
            let Ok((mut assertion, _)) = trust::assert_attribute(
                attribute,
                &value,
                &sources,
                &self.weight_table,
                &self.trust_params,
                now,
                &policy,
            ) else {
                continue;
            };
            if stored_path {
                // Scores from provider-stored documents carry the staleness
                // factor: no fresh re-certification evidence backs them.
                let penalized = assertion.score.value() * self.trust_params.staleness_factor;
                if let Ok(score) = trust::TrustScore::new(penalized) {
                    assertion.score = score;
                }
            }
            assertions.push(assertion);
        }

        send_msg(ctx, &flow.sp_id, &Message::Assertion { flow: flow_id.to_string(), assertions });
        self.flows.remove(flow_id);
    }
}

impl crate::netsim::Actor for IdentityProvider {
    fn on_message(&mut self, env: &Envelope, ctx: &mut BusCtx<'_>) {
        let Some(message) = Message::from_bytes(&env.payload) else { return };
        match message {
            Message::SignupRequest { username, password, idp_xpub } => {
                if self.profiles.contains_key(&username) {
                    send_msg(
                        ctx,
                        &env.from,
                        &Message::SignupFailed { username, reason: "username taken".into() },
                    );
                    return;
                }
                if ExtendedPublicKey::from_base58(&idp_xpub).is_err() {
                    send_msg(
                        ctx,
                        &env.from,
                        &Message::SignupFailed { username, reason: "invalid key".into() },
                    );
                    return;
                }
                let mut salt = [0u8; 16];
                ctx.rng().fill_bytes(&mut salt);
                let record = match auth::hash_password(&password, salt, auth::MIN_ITERATIONS) {
                    Ok(record) => record,
                    Err(e) => {
                        send_msg(
                            ctx,
                            &env.from,
                            &Message::SignupFailed { username, reason: e.to_string() },
                        );
                        return;
                    }
                };
                let mut totp_key = [0u8; 20];
                ctx.rng().fill_bytes(&mut totp_key);
                let totp = TotpSecret::new(totp_key);
                let secret_b32 = totp.to_base32();
                self.profiles.insert(
                    username.clone(),
                    UserProfile {
                        username: username.clone(),
                        password: record,
                        totp,
                        registered_idp_xpub: idp_xpub,
                        used_login_indices: BTreeSet::new(),
                        stored_documents: Vec::new(),
                    },
                );
                send_msg(
                    ctx,
                    &env.from,
                    &Message::SignupOk { username, totp_secret_base32: secret_b32 },
                );
            }

            Message::LoginPassword { username, password } => {
                let ok = self
                    .profiles
                    .get(&username)
                    .is_some_and(|p| auth::verify_password(&p.password, &password));
                if ok {
                    send_msg(ctx, &env.from, &Message::Login1Ok { username });
                } else {
                    self.fail_login(ctx, &env.from, &username, 1);
                }
            }

            Message::LoginTotp { username, code } => {
                let now = ctx.now();
                let ok = match self.profiles.get(&username) {
                    Some(profile) => auth::totp_verify(
                        &profile.totp,
                        now,
                        &code,
                        &username,
                        &mut self.replay_guard,
                    ),
                    None => false,
                };
                if ok {
                    let challenge = rng_hex(ctx.rng(), 16);
                    self.pending_challenges.insert(username.clone(), challenge.clone());
                    send_msg(ctx, &env.from, &Message::Login2Ok { username, challenge });
                } else {
                    self.fail_login(ctx, &env.from, &username, 2);
                }
            }

            Message::LoginKeyProof { username, login_index, signature_hex, pubkey_b58 } => {
                let Some(profile) = self.profiles.get(&username) else {
                    self.fail_login(ctx, &env.from, &username, 3);
                    return;
                };
                if profile.used_login_indices.contains(&login_index) {
                    self.fail_login(ctx, &env.from, &username, 3);
                    return;
                }
                let expected = ExtendedPublicKey::from_base58(&profile.registered_idp_xpub)
                    .ok()
                    .and_then(|registered| {
                        ChildNumber::normal(login_index)
                            .ok()
                            .and_then(|index| registered.ckd_pub(index).ok())
                    });
                let Some(expected) = expected else {
                    self.fail_login(ctx, &env.from, &username, 3);
                    return;
                };
                let ok = if self.paper_literal_login {
                    // Fidelity mode: the user transmits the derived login key
                    // and the provider compares equality. Replayable by
                    // design; the spent-index set is the only guard.
                    pubkey_b58
                        .and_then(|b58| ExtendedPublicKey::from_base58(&b58).ok())
                        .is_some_and(|sent| sent == expected)
                } else {
                    // Default: challenge-response signature with the child
                    // private key; no key material crosses the wire.
                    let challenge = self.pending_challenges.remove(&username);
                    let signature = signature_hex.and_then(|h| Signature::from_hex(&h));
                    match (challenge, signature) {
                        (Some(challenge), Some(signature)) => {
                            expected.verify(challenge.as_bytes(), &signature)
                        }
                        _ => false,
                    }
                };
                if !ok {
                    self.fail_login(ctx, &env.from, &username, 3);
                    return;
                }
                let profile = self.profiles.get_mut(&username).expect("present");
                profile.used_login_indices.insert(login_index);
                let session = rng_hex(ctx.rng(), 16);
                self.sessions.insert(session.clone(), username.clone());
                send_msg(ctx, &env.from, &Message::Login3Ok { username, session });
            }

            Message::ClaimsSubmit { session, claims } => {
                let Some(username) = self.sessions.get(&session).cloned() else {
                    send_msg(
                        ctx,
                        &env.from,
                        &Message::FlowDenied { flow: claims.nonce, reason: "no session".into() },
                    );
                    return;
                };
                if self.flows.contains_key(&claims.nonce) {
                    return;
                }
                self.flows.insert(
                    claims.nonce.clone(),
                    IdpFlow {
                        username,
                        sp_id: claims.sp_id.clone(),
                        claims,
                        purpose: VerifyPurpose::SpLogin,
                        owners: Vec::new(),
                        condition: None,
                        envelopes: BTreeMap::new(),
                        claimed_names: Vec::new(),
                        results: BTreeMap::new(),
                        user_id: env.from.clone(),
                        use_stored: None,
                    },
                );
            }

            Message::OwnerSelect { flow, owners } => {
                if let Some(state) = self.flows.get_mut(&flow) {
                    state.owners = owners;
                }
            }

            Message::UseStored { flow, owner_id, attributes } => {
                if let Some(state) = self.flows.get_mut(&flow) {
                    state.use_stored = Some(owner_id);
                    state.claimed_names = attributes;
                }
            }

            Message::Documents { flow, condition, claimed_attributes, envelopes } => {
                if let Some(state) = self.flows.get_mut(&flow) {
                    state.condition = Some(condition);
                    state.claimed_names = claimed_attributes;
                    for (owner_id, hex_text) in envelopes {
                        if let Ok(envelope) = CiphertextEnvelope::from_hex(&hex_text) {
                            state.envelopes.insert(owner_id, envelope);
                        }
                    }
                }
            }

            Message::OwnerRekeys { flow, rekeys } => {
                let Some(state) = self.flows.get(&flow).cloned() else { return };
                let Some(condition) = state.condition.clone() else {
                    self.deny(ctx, &flow, "documents missing");
                    return;
                };
                for owner_id in &state.owners {
                    let translated = state.envelopes.get(owner_id).and_then(|envelope| {
                        rekeys
                            .get(owner_id)
                            .and_then(|h| ReEncryptionKey::from_hex(h).ok())
                            .and_then(|rk| ibcpre::reencrypt(&rk, envelope).ok())
                    });
                    match translated {
                        Some(translated) => {
                            send_msg(
                                ctx,
                                &self.comm_id,
                                &Message::VerifyRequest {
                                    flow: flow.clone(),
                                    owner_id: owner_id.clone(),
                                    idp_id: self.id.clone(),
                                    sp_id: state.sp_id.clone(),
                                    purpose: state.purpose,
                                    condition: condition.clone(),
                                    claimed_attributes: state.claimed_names.clone(),
                                    envelope_hex: translated.to_hex(),
                                },
                            );
                        }
                        None => {
                            if let Some(s) = self.flows.get_mut(&flow) {
                                s.results.insert(owner_id.clone(), OwnerResolution::Failed);
                            }
                        }
                    }
                }
                self.resolve_flow(ctx, &flow);
            }

            Message::VerifyResult(result) => {
                let resolution = match &result.verdict {
                    VerifyOutcome::Verified { owner_class, latest_recert } => {
                        OwnerResolution::Verified {
                            class: *owner_class,
                            latest_recert: latest_recert.clone(),
                        }
                    }
                    VerifyOutcome::Mismatch { .. } => OwnerResolution::Mismatch,
                    VerifyOutcome::Error => OwnerResolution::Failed,
                };
                if let Some(state) = self.flows.get_mut(&result.flow) {
                    state.results.insert(result.owner_id.clone(), resolution);
                }
                self.resolve_flow(ctx, &result.flow);
            }

            Message::OwnerUnavailable { flow, owner_id } => match self.offline_behavior {
                OfflineBehavior::HardBlock => {
                    self.deny(ctx, &flow, &format!("data owner {owner_id} offline"));
                }
                OfflineBehavior::DegradeScore => {
                    if let Some(state) = self.flows.get_mut(&flow) {
                        state.results.insert(owner_id, OwnerResolution::Unavailable);
                    }
                    self.resolve_flow(ctx, &flow);
                }
            },

            Message::IdpRekey { flow, rekey_hex } => {
                self.assert_and_answer(ctx, &flow, &rekey_hex);
            }

            Message::StoreRequest {
                flow,
                session,
                owner_id,
                condition,
                claimed_attributes,
                envelope_hex,
            } => {
                let Some(username) = self.sessions.get(&session).cloned() else {
                    send_msg(
                        ctx,
                        &env.from,
                        &Message::StoreFailed { flow, reason: "no session".into() },
                    );
                    return;
                };
                let Ok(envelope) = CiphertextEnvelope::from_hex(&envelope_hex) else {
                    send_msg(
                        ctx,
                        &env.from,
                        &Message::StoreFailed { flow, reason: "bad envelope".into() },
                    );
                    return;
                };
                self.flows.insert(
                    flow.clone(),
                    IdpFlow {
                        username,
                        sp_id: String::new(),
                        claims: ClaimsRequest {
                            sp_id: String::new(),
                            required: Vec::new(),
                            nonce: flow.clone(),
                        },
                        purpose: VerifyPurpose::Store,
                        owners: vec![owner_id.clone()],
                        condition: Some(condition),
                        envelopes: BTreeMap::from([(owner_id, envelope)]),
                        claimed_names: claimed_attributes,
                        results: BTreeMap::new(),
                        user_id: env.from.clone(),
                        use_stored: None,
                    },
                );
            }

            Message::StoreOwnerRekey { flow, rekey_hex } => {
                let Some(state) = self.flows.get(&flow).cloned() else { return };
                let Some(condition) = state.condition.clone() else { return };
                let owner_id = state.owners.first().cloned().unwrap_or_default();
                let Some(envelope) = state.envelopes.get(&owner_id) else { return };
                let translated = ReEncryptionKey::from_hex(&rekey_hex)
                    .ok()
                    .and_then(|rk| ibcpre::reencrypt(&rk, envelope).ok());
                match translated {
                    Some(translated) => {
                        send_msg(
                            ctx,
                            &self.comm_id,
                            &Message::VerifyRequest {
                                flow,
                                owner_id,
                                idp_id: self.id.clone(),
                                sp_id: String::new(),
                                purpose: VerifyPurpose::Store,
                                condition,
                                claimed_attributes: state.claimed_names.clone(),
                                envelope_hex: translated.to_hex(),
                            },
                        );
                    }
                    None => {
                        self.deny(ctx, &flow, "re-encryption failed");
                    }
                }
            }

            _ => {}
        }
    }
}

// ---------------------------------------------------------------------------
// User agent
// ---------------------------------------------------------------------------

/// The user's record of one data-owner registration: the hardened child
/// index under the Data Access Key and a copy of the registered attributes.
#[derive(Debug, Clone)]
pub struct OwnerRegistration {
    pub index: u32,
    pub attributes: BTreeMap<String, AttributeEntry>,
}

/// The user's record of one identity-provider signup.
#[derive(Debug, Clone)]
pub struct IdpRegistration {
    pub index: u32,
    pub username: String,
    password: String,
    totp: Option<TotpSecret>,
    pub next_login_index: u32,
    pub session: Option<String>,
    /// owner id -> condition tag of the document stored at this provider.
    pub stored: BTreeMap<String, String>,
}

/// What a user is willing to disclose to one service provider.
#[derive(Debug, Clone, Default)]
pub struct ConsentRule {
    pub attributes: BTreeSet<String>,
    pub owners: BTreeSet<String>,
}

/// Knobs for driving login-failure scenarios.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoginOptions {
    pub wrong_password: bool,
    pub wrong_totp: bool,
    pub reuse_index: Option<u32>,
}

/// What a completed (or failed) flow looked like from the user's side.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutcome {
    pub context: String,
    pub flow: String,
    pub ok: bool,
    pub detail: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
enum FlowPurpose {
    Verify,
    UseStored { owner_id: String },
}

#[derive(Debug, Clone)]
struct UserFlow {
    nonce: Option<String>,
    sp_id: String,
    idp_id: String,
    purpose: FlowPurpose,
    owners: Vec<String>,
    condition: Option<ConditionTag>,
    attributes: BTreeSet<String>,
}

#[derive(Debug, Clone)]
struct PendingLogin {
    idp_id: String,
    username: String,
    options: LoginOptions,
}

#[derive(Debug, Clone)]
struct PendingSignup {
    idp_id: String,
    username: String,
    password: String,
    index: u32,
}

#[derive(Debug, Clone)]
struct PendingStore {
    idp_id: String,
    owner_id: String,
    nonce: String,
    condition: ConditionTag,
}

pub struct UserAgent {
    pub id: String,
    access_root: ExtendedPrivateKey,
    auth_root: ExtendedPrivateKey,
    sk: IdentitySecretKey,
    params: SystemParams,
    pub consent: BTreeMap<String, ConsentRule>,
    pub paper_literal_login: bool,
    owners: BTreeMap<String, OwnerRegistration>,
    idps: BTreeMap<String, IdpRegistration>,
    active_flow: Option<UserFlow>,
    pending_login: Option<PendingLogin>,
    pending_signup: Option<PendingSignup>,
    pending_store: Option<PendingStore>,
    pub outcomes: Vec<FlowOutcome>,
}

impl UserAgent {
    /// Derive both master roots from one seed. The Data Access Key and Data
    /// Authorization Key are separate trees salted differently, so neither
    /// is computable from the other.
    pub fn new(
        id: &str,
        seed: &[u8],
        mode: DerivationMode,
        params: SystemParams,
        sk: IdentitySecretKey,
    ) -> Result<Self, Error> {
        let access_seed: [u8; 32] = Sha256::digest([seed, b"/data-access"].concat()).into();
        let auth_seed: [u8; 32] = Sha256::digest([seed, b"/data-authorization"].concat()).into();
        Ok(UserAgent {
            id: id.to_string(),
            access_root: crate::hdkeys::master_from_seed(&access_seed, mode)?,
            auth_root: crate::hdkeys::master_from_seed(&auth_seed, mode)?,
            sk,
            params,
            consent: BTreeMap::new(),
            paper_literal_login: false,
            owners: BTreeMap::new(),
            idps: BTreeMap::new(),
            active_flow: None,
            pending_login: None,
            pending_signup: None,
            pending_store: None,
            outcomes: Vec::new(),
        })
    }

    /// The Data Access Key. Stays on the agent; tests and the user's own
    /// audit tooling use it to trace ledger transactions.
    pub fn access_root(&self) -> &ExtendedPrivateKey {
        &self.access_root
    }

    pub fn owner_registration(&self, owner_id: &str) -> Option<&OwnerRegistration> {
        self.owners.get(owner_id)
    }

    pub fn session(&self, idp_id: &str) -> Option<&str> {
        self.idps.get(idp_id).and_then(|r| r.session.as_deref())
    }

    pub fn stored_condition(&self, idp_id: &str, owner_id: &str) -> Option<&str> {
        self.idps.get(idp_id).and_then(|r| r.stored.get(owner_id)).map(|s| s.as_str())
    }

    /// The most recently spent login index at a provider, if any.
    pub fn last_login_index(&self, idp_id: &str) -> Option<u32> {
        self.idps.get(idp_id).and_then(|r| r.next_login_index.checked_sub(1))
    }

    /// Test hook: make the local copy of an attribute diverge from the data
    /// owner's record, so the next verification mismatches.
    pub fn alter_local_attribute(
        &mut self,
        owner_id: &str,
        attribute: &str,
        value: &str,
    ) -> Result<(), Error> {
        let registration =
            self.owners.get_mut(owner_id).ok_or_else(|| Error::NotRegistered(owner_id.into()))?;
        let entry = registration
            .attributes
            .get_mut(attribute)
            .ok_or_else(|| Error::NotRegistered(attribute.into()))?;
        entry.value = value.to_string();
        Ok(())
    }

    fn owner_priv(&self, index: u32) -> Result<ExtendedPrivateKey, Error> {
        Ok(self.access_root.ckd_priv(ChildNumber::hardened(index)?)?)
    }

    /// The pseudo-identifier registered with a data owner.
    pub fn owner_xpub(&self, owner_id: &str) -> Result<ExtendedPublicKey, Error> {
        let registration =
            self.owners.get(owner_id).ok_or_else(|| Error::NotRegistered(owner_id.into()))?;
        Ok(self.owner_priv(registration.index)?.neuter())
    }

    fn idp_priv(&self, index: u32) -> Result<ExtendedPrivateKey, Error> {
        Ok(self.auth_root.ckd_priv(ChildNumber::hardened(index)?)?)
    }

    /// Hex-encoded secrets that must never appear in any other actor's
    /// persisted state: the two master scalars and every derived owner and
    /// identity-provider scalar currently in use.
    pub fn private_scalar_hexes(&self) -> Vec<String> {
        let mut out = vec![
            hex::encode(self.access_root.scalar_bytes()),
            hex::encode(self.auth_root.scalar_bytes()),
        ];
        for registration in self.owners.values() {
            if let Ok(key) = self.owner_priv(registration.index) {
                out.push(hex::encode(key.scalar_bytes()));
            }
        }
        for registration in self.idps.values() {
            if let Ok(key) = self.idp_priv(registration.index) {
                out.push(hex::encode(key.scalar_bytes()));
            }
        }
        out
    }

    // --- offline phase: registration with data owners ---

    /// Offline registration: derive the next hardened owner key and register it,
    /// with the attribute map, at the data owner. Offline: no bus traffic.
    pub fn register_with_owner(
        &mut self,
        owner: &mut DataOwner,
        attributes: BTreeMap<String, String>,
        now: u64,
    ) -> Result<u64, Error> {
        if self.owners.contains_key(&owner.id) {
            return Err(Error::DuplicateRegistration);
        }
        let index = self.owners.len() as u32;
        let key = self.owner_priv(index)?.neuter();
        let height = owner.register_user(&key, attributes.clone(), now)?;
        self.owners.insert(
            owner.id.clone(),
            OwnerRegistration {
                index,
                attributes: attributes
                    .into_iter()
                    .map(|(name, value)| (name, AttributeEntry { value, last_recert: now }))
                    .collect(),
            },
        );
        Ok(height)
    }

    /// Ask the owner to re-certify one attribute; keeps the local copy's
    /// re-certification timestamp in sync.
    pub fn recertify_with_owner(
        &mut self,
        owner: &mut DataOwner,
        attribute: &str,
        now: u64,
    ) -> Result<u64, Error> {
        let key = self.owner_xpub(&owner.id)?;
        let height = owner.recertify(&key, attribute, now)?;
        if let Some(registration) = self.owners.get_mut(&owner.id) {
            if let Some(entry) = registration.attributes.get_mut(attribute) {
                entry.last_recert = now;
            }
        }
        Ok(height)
    }

    // --- flow initiation (called by the scenario runner between bus runs) ---

    pub fn begin_signup(
        &mut self,
        bus: &mut Bus,
        idp_id: &str,
        username: &str,
        password: &str,
    ) -> Result<(), Error> {
        let index = self.idps.len() as u32 + self.pending_signup.iter().count() as u32;
        let xpub = self.idp_priv(index)?.neuter().to_base58();
        self.pending_signup = Some(PendingSignup {
            idp_id: idp_id.to_string(),
            username: username.to_string(),
            password: password.to_string(),
            index,
        });
        let msg = Message::SignupRequest {
            username: username.to_string(),
            password: password.to_string(),
            idp_xpub: xpub,
        };
        bus.send(&self.id, idp_id, msg.kind(), msg.to_bytes())?;
        Ok(())
    }

    pub fn begin_login(
        &mut self,
        bus: &mut Bus,
        idp_id: &str,
        options: LoginOptions,
    ) -> Result<(), Error> {
        let registration =
            self.idps.get(idp_id).ok_or_else(|| Error::NotRegistered(idp_id.into()))?;
        let username = registration.username.clone();
        let mut password = registration.password.clone();
        if options.wrong_password {
            password.push_str("-wrong");
        }
        self.pending_login =
            Some(PendingLogin { idp_id: idp_id.to_string(), username: username.clone(), options });
        let msg = Message::LoginPassword { username, password };
        bus.send(&self.id, idp_id, msg.kind(), msg.to_bytes())?;
        Ok(())
    }

    pub fn begin_sp_login(
        &mut self,
        bus: &mut Bus,
        sp_id: &str,
        idp_id: &str,
        owners: &[String],
        use_stored: Option<&str>,
    ) -> Result<(), Error> {
        if self.active_flow.is_some() {
            return Err(Error::FlowInProgress);
        }
        if self.session(idp_id).is_none() {
            return Err(Error::NoSession(idp_id.into()));
        }
        let purpose = match use_stored {
            Some(owner_id) => {
                if self.stored_condition(idp_id, owner_id).is_none() {
                    return Err(Error::NoStoredDocument {
                        idp: idp_id.into(),
                        owner: owner_id.into(),
                    });
                }
                FlowPurpose::UseStored { owner_id: owner_id.to_string() }
            }
            None => {
                for owner_id in owners {
                    if !self.owners.contains_key(owner_id) {
                        return Err(Error::NotRegistered(owner_id.clone()));
                    }
                }
                FlowPurpose::Verify
            }
        };
        self.active_flow = Some(UserFlow {
            nonce: None,
            sp_id: sp_id.to_string(),
            idp_id: idp_id.to_string(),
            purpose,
            owners: owners.to_vec(),
            condition: None,
            attributes: BTreeSet::new(),
        });
        let msg = Message::AccessRequest { user_id: self.id.clone() };
        bus.send(&self.id, sp_id, msg.kind(), msg.to_bytes())?;
        Ok(())
    }

    pub fn begin_store_identity(
        &mut self,
        bus: &mut Bus,
        idp_id: &str,
        owner_id: &str,
    ) -> Result<(), Error> {
        let session = self
            .session(idp_id)
            .ok_or_else(|| Error::NoSession(idp_id.into()))?
            .to_string();
        let registration = self
            .owners
            .get(owner_id)
            .ok_or_else(|| Error::NotRegistered(owner_id.into()))?
            .clone();
        let nonce = rng_hex(bus.rng(), 16);
        let attributes: BTreeSet<String> = registration.attributes.keys().cloned().collect();
        let condition = flow_condition(VerifyPurpose::Store, &attributes, &nonce);

        let claim = IdentityClaim {
            owner_key_xpub: self.owner_priv(registration.index)?.neuter().to_base58(),
            attributes: registration.attributes.clone(),
        };
        let plaintext = serde_json::to_vec(&claim).expect("claims serialize");
        let envelope =
            ibcpre::encrypt(&self.params, &self.sk.identity, &condition, &plaintext, bus.rng())?;
        let rekey = ibcpre::rkgen(&self.sk, owner_id, &condition)?;

        self.pending_store = Some(PendingStore {
            idp_id: idp_id.to_string(),
            owner_id: owner_id.to_string(),
            nonce: nonce.clone(),
            condition: condition.clone(),
        });

        let request = Message::StoreRequest {
            flow: nonce.clone(),
            session,
            owner_id: owner_id.to_string(),
            condition: condition.as_str().to_string(),
            claimed_attributes: attributes.iter().cloned().collect(),
            envelope_hex: envelope.to_hex(),
        };
        bus.send(&self.id, idp_id, request.kind(), request.to_bytes())?;
        let rekey_msg = Message::StoreOwnerRekey { flow: nonce, rekey_hex: rekey.to_hex() };
        bus.send(&self.id, idp_id, rekey_msg.kind(), rekey_msg.to_bytes())?;
        Ok(())
    }

    fn record_outcome(&mut self, context: &str, flow: &str, ok: bool, detail: &str) {
        self.outcomes.push(FlowOutcome {
            context: context.to_string(),
            flow: flow.to_string(),
            ok,
            detail: detail.to_string(),
            scores: BTreeMap::new(),
        });
    }

    /// User-side phase 2-4 work once the redirect arrives: consent
    /// filtering, envelope encryption, re-encryption keys for the owners.
    fn continue_flow(&mut self, ctx: &mut BusCtx<'_>, claims: ClaimsRequest) {
        let Some(mut flow) = self.active_flow.take() else { return };
        if claims.sp_id != flow.sp_id {
            self.active_flow = Some(flow);
            return;
        }
        let session = match self.session(&flow.idp_id) {
            Some(session) => session.to_string(),
            None => {
                self.record_outcome("sp_login", &claims.nonce, false, "no session");
                return;
            }
        };

        let consent = self.consent.get(&flow.sp_id).cloned().unwrap_or_default();
        let requested: BTreeSet<String> =
            claims.required.iter().map(|c| c.attribute.clone()).collect();
        let attributes: BTreeSet<String> =
            requested.intersection(&consent.attributes).cloned().collect();
        flow.nonce = Some(claims.nonce.clone());
        flow.attributes = attributes.clone();

        let submit = Message::ClaimsSubmit { session, claims: claims.clone() };
        send_msg(ctx, &flow.idp_id, &submit);

        match &flow.purpose {
            FlowPurpose::Verify => {
                let chosen: Vec<String> = flow
                    .owners
                    .iter()
                    .filter(|o| consent.owners.contains(*o))
                    .cloned()
                    .collect();
                let condition =
                    flow_condition(VerifyPurpose::SpLogin, &attributes, &claims.nonce);
                flow.condition = Some(condition.clone());
                flow.owners = chosen.clone();

                send_msg(
                    ctx,
                    &flow.idp_id,
                    &Message::OwnerSelect { flow: claims.nonce.clone(), owners: chosen.clone() },
                );

                let mut envelopes = BTreeMap::new();
                let mut rekeys = BTreeMap::new();
                for owner_id in &chosen {
                    let Some(registration) = self.owners.get(owner_id) else { continue };
                    let shared: BTreeMap<String, AttributeEntry> = registration
                        .attributes
                        .iter()
                        .filter(|(name, _)| attributes.contains(*name))
                        .map(|(name, entry)| (name.clone(), entry.clone()))
                        .collect();
                    let Ok(owner_key) = self.owner_priv(registration.index) else { continue };
                    let claim = IdentityClaim {
                        owner_key_xpub: owner_key.neuter().to_base58(),
                        attributes: shared,
                    };
                    let plaintext = serde_json::to_vec(&claim).expect("claims serialize");
                    if let Ok(envelope) = ibcpre::encrypt(
                        &self.params,
                        &self.sk.identity,
                        &condition,
                        &plaintext,
                        ctx.rng(),
                    ) {
                        envelopes.insert(owner_id.clone(), envelope.to_hex());
                    }
                    if let Ok(rekey) = ibcpre::rkgen(&self.sk, owner_id, &condition) {
                        rekeys.insert(owner_id.clone(), rekey.to_hex());
                    }
                }
                send_msg(
                    ctx,
                    &flow.idp_id,
                    &Message::Documents {
                        flow: claims.nonce.clone(),
                        condition: condition.as_str().to_string(),
                        claimed_attributes: attributes.iter().cloned().collect(),
                        envelopes,
                    },
                );
                send_msg(
                    ctx,
                    &flow.idp_id,
                    &Message::OwnerRekeys { flow: claims.nonce.clone(), rekeys },
                );
            }
            FlowPurpose::UseStored { owner_id } => {
                let owner_id = owner_id.clone();
                let stored = self
                    .stored_condition(&flow.idp_id, &owner_id)
                    .and_then(|c| ConditionTag::new(c).ok());
                let Some(condition) = stored else {
                    self.record_outcome("sp_login", &claims.nonce, false, "no stored document");
                    return;
                };
                flow.condition = Some(condition.clone());
                send_msg(
                    ctx,
                    &flow.idp_id,
                    &Message::UseStored {
                        flow: claims.nonce.clone(),
                        owner_id,
                        attributes: attributes.iter().cloned().collect(),
                    },
                );
                if let Ok(rekey) = ibcpre::rkgen(&self.sk, &flow.idp_id, &condition) {
                    send_msg(
                        ctx,
                        &flow.idp_id,
                        &Message::IdpRekey { flow: claims.nonce.clone(), rekey_hex: rekey.to_hex() },
                    );
                }
            }
        }
        self.active_flow = Some(flow);
    }
}

impl crate::netsim::Actor for UserAgent {
    fn on_message(&mut self, env: &Envelope, ctx: &mut BusCtx<'_>) {
        let Some(message) = Message::from_bytes(&env.payload) else { return };
        match message {
            Message::SignupOk { username, totp_secret_base32 } => {
                let Some(pending) = self.pending_signup.take() else { return };
                if pending.username != username {
                    return;
                }
                let totp = TotpSecret::key_from_base32(&totp_secret_base32).map(TotpSecret::new);
                self.idps.insert(
                    pending.idp_id.clone(),
                    IdpRegistration {
                        index: pending.index,
                        username,
                        password: pending.password,
                        totp,
                        next_login_index: 0,
                        session: None,
                        stored: BTreeMap::new(),
                    },
                );
                self.record_outcome(&format!("signup:{}", pending.idp_id), "-", true, "");
            }
            Message::SignupFailed { reason, .. } => {
                let Some(pending) = self.pending_signup.take() else { return };
                self.record_outcome(&format!("signup:{}", pending.idp_id), "-", false, &reason);
            }

            Message::Login1Ok { username } => {
                let Some(pending) = self.pending_login.clone() else { return };
                if pending.username != username {
                    return;
                }
                let Some(registration) = self.idps.get(&pending.idp_id) else { return };
                let code = match (&registration.totp, pending.options.wrong_totp) {
                    (_, true) => "000000".to_string(),
                    (Some(secret), false) => auth::totp_code(secret, ctx.now()),
                    (None, false) => "000000".to_string(),
                };
                send_msg(ctx, &pending.idp_id, &Message::LoginTotp { username, code });
            }

            Message::Login2Ok { username, challenge } => {
                let Some(pending) = self.pending_login.clone() else { return };
                if pending.username != username {
                    return;
                }
                let Some(registration) = self.idps.get(&pending.idp_id) else { return };
                let login_index =
                    pending.options.reuse_index.unwrap_or(registration.next_login_index);
                let Ok(idp_key) = self.idp_priv(registration.index) else { return };
                let Ok(child_number) = ChildNumber::normal(login_index) else { return };
                let Ok(login_key) = idp_key.ckd_priv(child_number) else { return };
                let proof = if self.paper_literal_login {
                    Message::LoginKeyProof {
                        username,
                        login_index,
                        signature_hex: None,
                        pubkey_b58: Some(login_key.neuter().to_base58()),
                    }
                } else {
                    let signature = login_key.sign(challenge.as_bytes());
                    Message::LoginKeyProof {
                        username,
                        login_index,
                        signature_hex: Some(signature.to_hex()),
                        pubkey_b58: None,
                    }
                };
                send_msg(ctx, &pending.idp_id, &proof);
            }

            Message::Login3Ok { username, session } => {
                let Some(pending) = self.pending_login.take() else { return };
                if pending.username != username {
                    return;
                }
                if let Some(registration) = self.idps.get_mut(&pending.idp_id) {
                    let used =
                        pending.options.reuse_index.unwrap_or(registration.next_login_index);
                    registration.next_login_index = registration.next_login_index.max(used + 1);
                    registration.session = Some(session);
                }
                self.record_outcome(&format!("login:{}", pending.idp_id), "-", true, "");
            }

            Message::LoginFailed { stage, .. } => {
                let Some(pending) = self.pending_login.take() else { return };
                self.record_outcome(
                    &format!("login:{}", pending.idp_id),
                    "-",
                    false,
                    &format!("stage {stage}"),
                );
            }

            Message::ClaimsRedirect { claims } => {
                self.continue_flow(ctx, claims);
            }

            Message::GreenSignal { flow, .. } => {
                let Some(state) = self.active_flow.as_ref() else { return };
                if state.nonce.as_deref() != Some(flow.as_str()) {
                    return;
                }
                let Some(condition) = state.condition.clone() else { return };
                let idp_id = state.idp_id.clone();
                if let Ok(rekey) = ibcpre::rkgen(&self.sk, &idp_id, &condition) {
                    send_msg(ctx, &idp_id, &Message::IdpRekey { flow, rekey_hex: rekey.to_hex() });
                }
            }

            Message::Decision { flow, granted, failed_claims, scores } => {
                let Some(state) = self.active_flow.take() else { return };
                if state.nonce.as_deref() != Some(flow.as_str()) {
                    self.active_flow = Some(state);
                    return;
                }
                let detail = if granted {
                    String::new()
                } else {
                    format!("failed claims: {}", failed_claims.join(","))
                };
                self.outcomes.push(FlowOutcome {
                    context: format!("sp_login:{}", state.sp_id),
                    flow,
                    ok: granted,
                    detail,
                    scores,
                });
            }

            Message::FlowDenied { flow, reason } => {
                let Some(state) = self.active_flow.take() else { return };
                self.outcomes.push(FlowOutcome {
                    context: format!("sp_login:{}", state.sp_id),
                    flow,
                    ok: false,
                    detail: reason,
                    scores: BTreeMap::new(),
                });
            }

            Message::Stored { flow, owner_id } => {
                let Some(pending) = self.pending_store.take() else { return };
                if pending.nonce != flow || pending.owner_id != owner_id {
                    return;
                }
                if let Some(registration) = self.idps.get_mut(&pending.idp_id) {
                    registration
                        .stored
                        .insert(owner_id, pending.condition.as_str().to_string());
                }
                self.record_outcome(&format!("store:{}", pending.idp_id), &flow, true, "");
            }

            Message::StoreFailed { flow, reason } => {
                let Some(pending) = self.pending_store.take() else { return };
                self.record_outcome(&format!("store:{}", pending.idp_id), &flow, false, &reason);
            }

            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdkeys::master_from_seed;

    fn test_setup() -> (SystemParams, ibcpre::MasterSecret) {
        ibcpre::setup(128, &[3u8; 32]).unwrap()
    }

    fn consortium_with(owner_ids: &[&str]) -> ConsortiumHandle {
        let keys: Vec<(String, ExtendedPrivateKey)> = owner_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                (
                    id.to_string(),
                    master_from_seed(&[40 + i as u8; 32], DerivationMode::Multiplicative).unwrap(),
                )
            })
            .collect();
        Consortium::new("test-channel", keys, owner_ids.len() as u32, 0).unwrap()
    }

    fn user(params: &SystemParams, ms: &ibcpre::MasterSecret, id: &str) -> UserAgent {
        UserAgent::new(
            id,
            &[9u8; 16],
            DerivationMode::Multiplicative,
            params.clone(),
            ibcpre::extract(ms, id).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn registration_stores_document_and_recert_records() {
        let (params, ms) = test_setup();
        let consortium = consortium_with(&["dmv"]);
        let mut owner = DataOwner::new(
            "dmv",
            SourceClass::Government,
            ibcpre::extract(&ms, "dmv").unwrap(),
            consortium.clone(),
            "comm",
        );
        let mut alice = user(&params, &ms, "alice");
        let attributes = BTreeMap::from([
            ("dob".to_string(), "1990-04-02".to_string()),
            ("name".to_string(), "Alice Example".to_string()),
        ]);
        alice.register_with_owner(&mut owner, attributes, 100).unwrap();

        assert_eq!(owner.document_count(), 1);
        let key = alice.owner_xpub("dmv").unwrap();
        let doc = owner.lookup(&key).unwrap();
        assert_eq!(doc.attributes.len(), 2);
        // One re-certification record per attribute.
        let ledger = &consortium.borrow().ledger;
        assert_eq!(ledger.records().count(), 2);
        assert!(ledger.verify_chain());
    }

    #[test]
    fn duplicate_registration_rejected() {
        let (params, ms) = test_setup();
        let consortium = consortium_with(&["dmv"]);
        let mut owner = DataOwner::new(
            "dmv",
            SourceClass::Government,
            ibcpre::extract(&ms, "dmv").unwrap(),
            consortium,
            "comm",
        );
        let mut alice = user(&params, &ms, "alice");
        let attrs = BTreeMap::from([("dob".to_string(), "1990".to_string())]);
        alice.register_with_owner(&mut owner, attrs.clone(), 0).unwrap();
        assert_eq!(
            alice.register_with_owner(&mut owner, attrs, 1).unwrap_err(),
            Error::DuplicateRegistration
        );
    }

    #[test]
    fn two_users_get_distinct_pseudo_identifiers() {
        let (params, ms) = test_setup();
        let consortium = consortium_with(&["dmv"]);
        let mut owner = DataOwner::new(
            "dmv",
            SourceClass::Government,
            ibcpre::extract(&ms, "dmv").unwrap(),
            consortium,
            "comm",
        );
        let mut alice = user(&params, &ms, "alice");
        let mut bob = {
            let sk = ibcpre::extract(&ms, "bob").unwrap();
            UserAgent::new("bob", &[10u8; 16], DerivationMode::Multiplicative, params.clone(), sk)
                .unwrap()
        };
        let attrs = BTreeMap::from([("dob".to_string(), "1990".to_string())]);
        alice.register_with_owner(&mut owner, attrs.clone(), 0).unwrap();
        bob.register_with_owner(&mut owner, attrs, 0).unwrap();
        assert_eq!(owner.document_count(), 2);
        assert_ne!(
            alice.owner_xpub("dmv").unwrap().point_bytes(),
            bob.owner_xpub("dmv").unwrap().point_bytes()
        );
    }

    #[test]
    fn profile_audit_holds_no_private_material() {
        // Build a profile exactly the way signup does and harvest the JSON.
        let (params, ms) = test_setup();
        let alice = user(&params, &ms, "alice");
        let mut idp = IdentityProvider::new(
            "idp-1",
            params.clone(),
            ibcpre::extract(&ms, "idp-1").unwrap(),
            "comm",
        );
        let xpub = alice.idp_priv(0).unwrap().neuter().to_base58();
        idp.profiles.insert(
            "alice".into(),
            UserProfile {
                username: "alice".into(),
                password: auth::hash_password("a strong password", [1; 16], 10_000).unwrap(),
                totp: TotpSecret::new([7u8; 20]),
                registered_idp_xpub: xpub,
                used_login_indices: BTreeSet::new(),
                stored_documents: Vec::new(),
            },
        );
        let state = idp.persisted_state_json();
        for secret in alice.private_scalar_hexes() {
            assert!(!state.contains(&secret), "private scalar leaked into profile state");
        }
        assert!(!state.contains("a strong password"), "plaintext password leaked");
        // The registered key is the public serialization prefix, not xprv.
        assert!(!state.contains("xprv"));
    }

    #[test]
    fn flow_condition_is_order_insensitive_and_bound_to_nonce() {
        let mut a = BTreeSet::new();
        a.insert("dob".to_string());
        a.insert("name".to_string());
        let c1 = flow_condition(VerifyPurpose::SpLogin, &a, "n1");
        assert_eq!(c1.as_str(), "verify:dob,name:n1");
        let c2 = flow_condition(VerifyPurpose::SpLogin, &a, "n2");
        assert_ne!(c1, c2);
        let c3 = flow_condition(VerifyPurpose::Store, &a, "n1");
        assert_eq!(c3.as_str(), "store:dob,name:n1");
    }

    #[test]
    fn verify_claim_detects_value_mismatch() {
        let (params, ms) = test_setup();
        let consortium = consortium_with(&["dmv"]);
        let mut owner = DataOwner::new(
            "dmv",
            SourceClass::Government,
            ibcpre::extract(&ms, "dmv").unwrap(),
            consortium.clone(),
            "comm",
        );
        let mut alice = user(&params, &ms, "alice");
        alice
            .register_with_owner(
                &mut owner,
                BTreeMap::from([("dob".to_string(), "1990-04-02".to_string())]),
                50,
            )
            .unwrap();

        let mut rng = <rand_chacha::ChaCha20Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(5);
        let condition = ConditionTag::new("verify:dob:n").unwrap();
        let registration = alice.owner_registration("dmv").unwrap().clone();

        // Claim with the wrong value.
        let bad_claim = IdentityClaim {
            owner_key_xpub: alice.owner_xpub("dmv").unwrap().to_base58(),
            attributes: BTreeMap::from([(
                "dob".to_string(),
                AttributeEntry { value: "1999-09-09".to_string(), last_recert: 50 },
            )]),
        };
        let envelope = ibcpre::encrypt(
            &params,
            "alice",
            &condition,
            &serde_json::to_vec(&bad_claim).unwrap(),
            &mut rng,
        )
        .unwrap();
        let rekey = ibcpre::rkgen(
            &ibcpre::extract(&ms, "alice").unwrap(),
            "dmv",
            &condition,
        )
        .unwrap();
        let translated = ibcpre::reencrypt(&rekey, &envelope).unwrap();
        let (verdict, height) = owner.verify_claim(
            &translated.to_hex(),
            condition.as_str(),
            VerifyPurpose::SpLogin,
            "idp-1",
            "sp-1",
            60,
        );
        assert!(matches!(verdict, VerifyOutcome::Mismatch { .. }));
        assert!(height.is_some(), "mismatch is still recorded");

        // Claim with the right value.
        let good_claim = IdentityClaim {
            owner_key_xpub: alice.owner_xpub("dmv").unwrap().to_base58(),
            attributes: BTreeMap::from([(
                "dob".to_string(),
                AttributeEntry { value: "1990-04-02".to_string(), last_recert: 50 },
            )]),
        };
        let envelope = ibcpre::encrypt(
            &params,
            "alice",
            &condition,
            &serde_json::to_vec(&good_claim).unwrap(),
            &mut rng,
        )
        .unwrap();
        let translated = ibcpre::reencrypt(&rekey, &envelope).unwrap();
        let (verdict, _) = owner.verify_claim(
            &translated.to_hex(),
            condition.as_str(),
            VerifyPurpose::SpLogin,
            "idp-1",
            "sp-1",
            61,
        );
        match verdict {
            VerifyOutcome::Verified { latest_recert, .. } => {
                let info = latest_recert.expect("recert info for sp-login purpose");
                assert_eq!(info.timestamp, 50);
                assert_eq!(info.attribute, "dob");
            }
            other => panic!("expected verified, got {other:?}"),
        }
        let _ = registration;
    }

    #[test]
    fn unknown_pseudo_identifier_writes_nothing() {
        let (params, ms) = test_setup();
        let consortium = consortium_with(&["dmv"]);
        let mut owner = DataOwner::new(
            "dmv",
            SourceClass::Government,
            ibcpre::extract(&ms, "dmv").unwrap(),
            consortium.clone(),
            "comm",
        );
        let alice = user(&params, &ms, "alice");
        let mut rng = <rand_chacha::ChaCha20Rng as rand_chacha::rand_core::SeedableRng>::seed_from_u64(6);
        let condition = ConditionTag::new("verify:dob:n").unwrap();
        let claim = IdentityClaim {
            // A key the owner has never seen.
            owner_key_xpub: alice.owner_priv(7).unwrap().neuter().to_base58(),
            attributes: BTreeMap::from([(
                "dob".to_string(),
                AttributeEntry { value: "1990".to_string(), last_recert: 0 },
            )]),
        };
        let envelope = ibcpre::encrypt(
            &params,
            "alice",
            &condition,
            &serde_json::to_vec(&claim).unwrap(),
            &mut rng,
        )
        .unwrap();
        let rekey =
            ibcpre::rkgen(&ibcpre::extract(&ms, "alice").unwrap(), "dmv", &condition).unwrap();
        let translated = ibcpre::reencrypt(&rekey, &envelope).unwrap();
        let before = consortium.borrow().ledger.records().count();
        let (verdict, height) = owner.verify_claim(
            &translated.to_hex(),
            condition.as_str(),
            VerifyPurpose::SpLogin,
            "idp-1",
            "sp-1",
            10,
        );
        assert_eq!(verdict, VerifyOutcome::Error);
        assert!(height.is_none());
        assert_eq!(consortium.borrow().ledger.records().count(), before);
    }
}
