//! Permissioned append-only hash-chained ledger.
//!
//! One ledger per consortium channel. Data owners queue transaction records
//! (data-access requests and attribute re-certifications) under fresh
//! per-transaction public keys derived from the user's registered owner key;
//! blocks are committed with an endorsement quorum of consortium members.
//!
//! Records never contain attribute values, only attribute names and request
//! metadata. Endorsement digests bind the channel id and the member
//! configuration, so any byte of a persisted ledger that is mutated shows up
//! as a parse error, a broken hash link, a wrong transaction root, or a
//! failed endorsement.

use crate::hdkeys::{ChildNumber, ExtendedPrivateKey, ExtendedPublicKey, Signature};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

const LABEL_TXROOT: &[u8] = b"fedid/ledger/txroot/v1";
const LABEL_ENDORSE: &[u8] = b"fedid/ledger/endorse/v1";
const LABEL_BLOCK: &[u8] = b"fedid/ledger/block/v1";
const LABEL_CONFIG: &[u8] = b"fedid/ledger/config/v1";

const FILE_MAGIC: &str = "FEDLEDGER";
const FILE_VERSION: &str = "v1";

/// Consecutive unused child indices tolerated while tracing, mirroring the
/// HD-wallet scanning convention.
pub const DEFAULT_GAP_LIMIT: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("quorum {quorum} out of range for {members} members")]
    QuorumOutOfRange { quorum: u32, members: usize },
    #[error("duplicate member id {0:?}")]
    DuplicateMember(String),
    #[error("transaction counter {index} already used under this owner key")]
    CounterReuse { index: u32 },
    #[error("{got} endorsements, quorum is {quorum}")]
    InsufficientEndorsements { got: usize, quorum: u32 },
    #[error("signer {0:?} is not a consortium member")]
    SignerNotMember(String),
    #[error("ledger file header: {0}")]
    ParseHeader(String),
    #[error("ledger block {height}: {reason}")]
    ParseBlock { height: u64, reason: String },
    #[error(transparent)]
    Keys(#[from] crate::hdkeys::Error),
    #[error("i/o: {0}")]
    Io(String),
}

/// What a transaction records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TxPayload {
    DataAccess {
        idp_id: String,
        sp_id: String,
        /// Attribute names only, never values.
        requested_attributes: Vec<String>,
        outcome: AccessOutcome,
    },
    Recertification { attribute_name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    Verified,
    Mismatch,
}

/// One ledger entry, keyed by a single-use transaction public key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransactionRecord {
    pub timestamp: u64,
    pub txn_pubkey: [u8; 33],
    pub data_owner_id: String,
    pub payload: TxPayload,
}

/// A committed block: hash-linked to its predecessor and endorsed by a
/// quorum of members (the genesis block is fixed by configuration instead).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: [u8; 32],
    pub timestamp: u64,
    pub tx_list: Vec<TransactionRecord>,
    pub tx_root: [u8; 32],
    pub endorsements: Vec<(String, Signature)>,
}

/// A consortium member able to endorse blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub id: String,
    pub key: ExtendedPublicKey,
}

/// Channel membership and endorsement quorum.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub channel_id: String,
    pub members: Vec<Member>,
    pub quorum: u32,
}

impl ChannelConfig {
    fn validate(&self) -> Result<(), Error> {
        if self.quorum == 0 || self.quorum as usize > self.members.len() {
            return Err(Error::QuorumOutOfRange { quorum: self.quorum, members: self.members.len() });
        }
        let mut seen = BTreeSet::new();
        for member in &self.members {
            if !seen.insert(member.id.as_str()) {
                return Err(Error::DuplicateMember(member.id.clone()));
            }
        }
        Ok(())
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_str(&mut out, &self.channel_id);
        out.extend_from_slice(&self.quorum.to_be_bytes());
        out.extend_from_slice(&(self.members.len() as u16).to_be_bytes());
        for member in &self.members {
            put_str(&mut out, &member.id);
            out.extend_from_slice(&member.key.to_bytes());
        }
        out
    }

    fn from_canonical(bytes: &[u8]) -> Result<Self, String> {
        let mut cur = Cur { bytes, pos: 0 };
        let channel_id = cur.take_str()?;
        let quorum = cur.take_u32()?;
        let member_count = cur.take_u16()? as usize;
        let mut members = Vec::with_capacity(member_count);
        for _ in 0..member_count {
            let id = cur.take_str()?;
            let key_bytes = cur.take(crate::hdkeys::SERIALIZED_LEN)?;
            let key = ExtendedPublicKey::from_bytes(key_bytes).map_err(|e| e.to_string())?;
            members.push(Member { id, key });
        }
        cur.finish()?;
        Ok(ChannelConfig { channel_id, members, quorum })
    }

    fn hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(LABEL_CONFIG);
        hasher.update(self.canonical_bytes());
        hasher.finalize().into()
    }
}

/// The append-only chain plus the queue of not-yet-committed records.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    cfg: ChannelConfig,
    config_hash: [u8; 32],
    blocks: Vec<Block>,
    pending: Vec<TransactionRecord>,
}

/// Build a channel with its genesis block. Deterministic: the same config
/// and timestamp always produce the same genesis hash.
pub fn genesis(cfg: ChannelConfig, timestamp: u64) -> Result<Ledger, Error> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let tx_list = Vec::new();
    let genesis_block = Block {
        height: 0,
        prev_hash: [0u8; 32],
        timestamp,
        tx_root: tx_root(&tx_list),
        tx_list,
        endorsements: Vec::new(),
    };
    Ok(Ledger { cfg, config_hash, blocks: vec![genesis_block], pending: Vec::new() })
}

impl Ledger {
    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn height_of_tip(&self) -> u64 {
        self.blocks.last().expect("chain is never empty").height
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Every committed record, in chain order.
    pub fn records(&self) -> impl Iterator<Item = &TransactionRecord> {
        self.blocks.iter().flat_map(|b| b.tx_list.iter())
    }

    fn txn_pubkey_in_use(&self, pubkey: &[u8; 33]) -> bool {
        self.records().any(|r| &r.txn_pubkey == pubkey)
            || self.pending.iter().any(|r| &r.txn_pubkey == pubkey)
    }

    fn derive_txn_pubkey(&self, owner_key_of_user: &ExtendedPublicKey, index: u32) -> Result<[u8; 33], Error> {
        let child = owner_key_of_user.ckd_pub(ChildNumber::normal(index)?)?;
        Ok(child.point_bytes())
    }

    /// Queue a data-access record. The per-transaction key is the child of
    /// the user's registered owner key at `index`; an index already seen
    /// under that key is refused.
    pub fn record_data_access(
        &mut self,
        owner_key_of_user: &ExtendedPublicKey,
        index: u32,
        data_owner_id: &str,
        idp_id: &str,
        sp_id: &str,
        requested_attributes: Vec<String>,
        outcome: AccessOutcome,
        timestamp: u64,
    ) -> Result<&TransactionRecord, Error> {
        let txn_pubkey = self.derive_txn_pubkey(owner_key_of_user, index)?;
        if self.txn_pubkey_in_use(&txn_pubkey) {
            return Err(Error::CounterReuse { index });
        }
        self.pending.push(TransactionRecord {
            timestamp,
            txn_pubkey,
            data_owner_id: data_owner_id.to_string(),
            payload: TxPayload::DataAccess {
                idp_id: idp_id.to_string(),
                sp_id: sp_id.to_string(),
                requested_attributes,
                outcome,
            },
        });
        Ok(self.pending.last().expect("just pushed"))
    }

    /// Queue a re-certification record for one attribute.
    pub fn record_recertification(
        &mut self,
        owner_key_of_user: &ExtendedPublicKey,
        index: u32,
        data_owner_id: &str,
        attribute_name: &str,
        timestamp: u64,
    ) -> Result<&TransactionRecord, Error> {
        let txn_pubkey = self.derive_txn_pubkey(owner_key_of_user, index)?;
        if self.txn_pubkey_in_use(&txn_pubkey) {
            return Err(Error::CounterReuse { index });
        }
        self.pending.push(TransactionRecord {
            timestamp,
            txn_pubkey,
            data_owner_id: data_owner_id.to_string(),
            payload: TxPayload::Recertification { attribute_name: attribute_name.to_string() },
        });
        Ok(self.pending.last().expect("just pushed"))
    }

    /// Commit all pending records as one block endorsed by `signers`.
    /// Requires at least `quorum` distinct members whose keys match the
    /// channel configuration.
    pub fn commit_block(
        &mut self,
        signers: &[(&str, &ExtendedPrivateKey)],
        timestamp: u64,
    ) -> Result<&Block, Error> {
        let mut endorser_ids = BTreeSet::new();
        for (id, key) in signers {
            let member = self
                .cfg
                .members
                .iter()
                .find(|m| m.id == *id)
                .ok_or_else(|| Error::SignerNotMember(id.to_string()))?;
            if member.key != key.neuter() {
                return Err(Error::SignerNotMember(id.to_string()));
            }
            endorser_ids.insert(*id);
        }
        if endorser_ids.len() < self.cfg.quorum as usize {
            return Err(Error::InsufficientEndorsements {
                got: endorser_ids.len(),
                quorum: self.cfg.quorum,
            });
        }

        let tip = self.blocks.last().expect("chain is never empty");
        let height = tip.height + 1;
        let prev_hash = block_hash(tip);
        let tx_list = std::mem::take(&mut self.pending);
        let root = tx_root(&tx_list);
        let digest = endorsement_digest(&self.cfg.channel_id, &self.config_hash, height, &prev_hash, timestamp, &root);

        let mut endorsements = Vec::new();
        let mut seen = BTreeSet::new();
        for (id, key) in signers {
            if seen.insert(*id) {
                endorsements.push((id.to_string(), key.sign(&digest)));
            }
        }

        self.blocks.push(Block { height, prev_hash, timestamp, tx_list, tx_root: root, endorsements });
        Ok(self.blocks.last().expect("just pushed"))
    }

    /// Full structural re-verification: hash links, heights, transaction
    /// roots, and endorsement quorums all the way down. Cheap structural
    /// checks run first so most inconsistencies are caught before any
    /// signature verification. Returns false on the first inconsistency;
    /// never panics.
    pub fn verify_chain(&self) -> bool {
        let Some(first) = self.blocks.first() else { return false };
        if first.height != 0 || first.prev_hash != [0u8; 32] || !first.tx_list.is_empty() {
            return false;
        }
        if self.cfg.validate().is_err() || self.config_hash != self.cfg.hash() {
            return false;
        }
        let mut prev: Option<&Block> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.height != i as u64 {
                return false;
            }
            if let Some(prev) = prev {
                if block.prev_hash != block_hash(prev) {
                    return false;
                }
            }
            if block.tx_root != tx_root(&block.tx_list) {
                return false;
            }
            prev = Some(block);
        }
        for block in self.blocks.iter().skip(1) {
            let digest = endorsement_digest(
                &self.cfg.channel_id,
                &self.config_hash,
                block.height,
                &block.prev_hash,
                block.timestamp,
                &block.tx_root,
            );
            let mut distinct = BTreeSet::new();
            for (id, sig) in &block.endorsements {
                let Some(member) = self.cfg.members.iter().find(|m| &m.id == id) else {
                    return false;
                };
                if !member.key.verify(&digest, sig) {
                    return false;
                }
                distinct.insert(id.as_str());
            }
            if distinct.len() < self.cfg.quorum as usize {
                return false;
            }
        }
        true
    }

    /// Collect every committed record whose transaction key is a
    /// non-hardened child of `parent`, scanning indices upward and stopping
    /// after `gap_limit` consecutive misses. Results come back in chain
    /// order.
    pub fn trace_by_parent_key(
        &self,
        parent: &ExtendedPublicKey,
        gap_limit: u32,
    ) -> Vec<&TransactionRecord> {
        let gap_limit = gap_limit.max(1);
        let mut by_key: BTreeMap<[u8; 33], Vec<usize>> = BTreeMap::new();
        let all: Vec<&TransactionRecord> = self.records().collect();
        for (pos, record) in all.iter().enumerate() {
            by_key.entry(record.txn_pubkey).or_default().push(pos);
        }

        let mut hit_positions = Vec::new();
        let mut misses = 0u32;
        let mut index = 0u32;
        while misses < gap_limit && index < crate::hdkeys::HARDENED_OFFSET {
            match parent.ckd_pub(ChildNumber { index, hardened: false }) {
                Ok(child) => match by_key.get(&child.point_bytes()) {
                    Some(positions) => {
                        hit_positions.extend_from_slice(positions);
                        misses = 0;
                    }
                    None => misses += 1,
                },
                Err(_) => break,
            }
            index += 1;
        }
        hit_positions.sort_unstable();
        hit_positions.dedup();
        hit_positions.into_iter().map(|p| all[p]).collect()
    }

    /// Trace a whole user: scan hardened owner-key indices under the user's
    /// Data Access root, and for each derived owner key scan its transaction
    /// children. The same gap rule applies at both levels.
    pub fn trace_from_access_root(
        &self,
        access_root: &ExtendedPrivateKey,
        gap_limit: u32,
    ) -> Vec<&TransactionRecord> {
        let gap_limit = gap_limit.max(1);
        let mut found: Vec<&TransactionRecord> = Vec::new();
        let mut owner_misses = 0u32;
        let mut owner_index = 0u32;
        while owner_misses < gap_limit && owner_index < crate::hdkeys::HARDENED_OFFSET {
            let Ok(owner_key) = access_root.ckd_priv(ChildNumber { index: owner_index, hardened: true })
            else {
                break;
            };
            let records = self.trace_by_parent_key(&owner_key.neuter(), gap_limit);
            if records.is_empty() {
                owner_misses += 1;
            } else {
                found.extend(records);
                owner_misses = 0;
            }
            owner_index += 1;
        }
        // Chain order across owners.
        let order: BTreeMap<*const TransactionRecord, usize> =
            self.records().enumerate().map(|(i, r)| (r as *const _, i)).collect();
        found.sort_by_key(|r| order[&(*r as *const _)]);
        found.dedup_by_key(|r| *r as *const TransactionRecord);
        found
    }

    /// Write the ledger as a header line, a config line, and one hex line
    /// per block.
    pub fn persist(&self, sink: &mut dyn Write) -> Result<(), Error> {
        let io = |e: std::io::Error| Error::Io(e.to_string());
        writeln!(sink, "{FILE_MAGIC} {FILE_VERSION} {}", self.cfg.channel_id).map_err(io)?;
        writeln!(sink, "{}", hex::encode(self.cfg.canonical_bytes())).map_err(io)?;
        for block in &self.blocks {
            writeln!(sink, "{}", hex::encode(block.canonical_bytes())).map_err(io)?;
        }
        Ok(())
    }

    /// Parse a persisted ledger. Structural errors carry the height of the
    /// offending block.
    pub fn load(source: &mut dyn BufRead) -> Result<Ledger, Error> {
        let mut lines = source.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::ParseHeader("empty file".into()))?
            .map_err(|e| Error::Io(e.to_string()))?;
        let mut parts = header.splitn(3, ' ');
        let magic = parts.next().unwrap_or_default();
        let version = parts.next().unwrap_or_default();
        let channel_id = parts.next().unwrap_or_default().to_string();
        if magic != FILE_MAGIC {
            return Err(Error::ParseHeader(format!("bad magic {magic:?}")));
        }
        if version != FILE_VERSION {
            return Err(Error::ParseHeader(format!("unsupported version {version:?}")));
        }
        if channel_id.is_empty() {
            return Err(Error::ParseHeader("missing channel id".into()));
        }

        let config_line = lines
            .next()
            .ok_or_else(|| Error::ParseHeader("missing config line".into()))?
            .map_err(|e| Error::Io(e.to_string()))?;
        let config_bytes =
            hex::decode(&config_line).map_err(|e| Error::ParseHeader(format!("config hex: {e}")))?;
        let cfg = ChannelConfig::from_canonical(&config_bytes)
            .map_err(|reason| Error::ParseHeader(format!("config: {reason}")))?;
        if cfg.channel_id != channel_id {
            return Err(Error::ParseHeader(format!(
                "channel id mismatch: header {channel_id:?}, config {:?}",
                cfg.channel_id
            )));
        }

        let config_hash = cfg.hash();
        let mut blocks = Vec::new();
        for (i, line) in lines.enumerate() {
            let height = i as u64;
            let line = line.map_err(|e| Error::Io(e.to_string()))?;
            if line.is_empty() {
                return Err(Error::ParseBlock { height, reason: "blank line".into() });
            }
            let bytes = hex::decode(&line)
                .map_err(|e| Error::ParseBlock { height, reason: format!("hex: {e}") })?;
            let block = Block::from_canonical(&bytes)
                .map_err(|reason| Error::ParseBlock { height, reason })?;
            blocks.push(block);
        }
        if blocks.is_empty() {
            return Err(Error::ParseBlock { height: 0, reason: "no blocks".into() });
        }
        Ok(Ledger { cfg, config_hash, blocks, pending: Vec::new() })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn tx_root(txs: &[TransactionRecord]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(LABEL_TXROOT);
    hasher.update((txs.len() as u32).to_be_bytes());
    for tx in txs {
        let bytes = tx.canonical_bytes();
        hasher.update((bytes.len() as u32).to_be_bytes());
        hasher.update(&bytes);
    }
    hasher.finalize().into()
}

fn endorsement_digest(
    channel_id: &str,
    config_hash: &[u8; 32],
    height: u64,
    prev_hash: &[u8; 32],
    timestamp: u64,
    tx_root: &[u8; 32],
) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(LABEL_ENDORSE);
    hasher.update((channel_id.len() as u16).to_be_bytes());
    hasher.update(channel_id.as_bytes());
    hasher.update(config_hash);
    hasher.update(height.to_be_bytes());
    hasher.update(prev_hash);
    hasher.update(timestamp.to_be_bytes());
    hasher.update(tx_root);
    hasher.finalize().into()
}

/// Hash of a block's full canonical serialization, used as the successor's
/// `prev_hash`.
pub fn block_hash(block: &Block) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(LABEL_BLOCK);
    hasher.update(block.canonical_bytes());
    hasher.finalize().into()
}

impl TransactionRecord {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.txn_pubkey);
        put_str(&mut out, &self.data_owner_id);
        match &self.payload {
            TxPayload::DataAccess { idp_id, sp_id, requested_attributes, outcome } => {
                out.push(0);
                put_str(&mut out, idp_id);
                put_str(&mut out, sp_id);
                out.extend_from_slice(&(requested_attributes.len() as u16).to_be_bytes());
                for attr in requested_attributes {
                    put_str(&mut out, attr);
                }
                out.push(match outcome {
                    AccessOutcome::Verified => 0,
                    AccessOutcome::Mismatch => 1,
                });
            }
            TxPayload::Recertification { attribute_name } => {
                out.push(1);
                put_str(&mut out, attribute_name);
            }
        }
        out
    }

    fn from_canonical_cur(cur: &mut Cur<'_>) -> Result<Self, String> {
        let timestamp = cur.take_u64()?;
        let txn_pubkey: [u8; 33] = cur.take(33)?.try_into().expect("sized");
        let data_owner_id = cur.take_str()?;
        let payload = match cur.take_u8()? {
            0 => {
                let idp_id = cur.take_str()?;
                let sp_id = cur.take_str()?;
                let count = cur.take_u16()? as usize;
                let mut requested_attributes = Vec::with_capacity(count);
                for _ in 0..count {
                    requested_attributes.push(cur.take_str()?);
                }
                let outcome = match cur.take_u8()? {
                    0 => AccessOutcome::Verified,
                    1 => AccessOutcome::Mismatch,
                    other => return Err(format!("unknown outcome {other}")),
                };
                TxPayload::DataAccess { idp_id, sp_id, requested_attributes, outcome }
            }
            1 => TxPayload::Recertification { attribute_name: cur.take_str()? },
            other => return Err(format!("unknown tx kind {other}")),
        };
        Ok(TransactionRecord { timestamp, txn_pubkey, data_owner_id, payload })
    }
}

impl Block {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&(self.tx_list.len() as u32).to_be_bytes());
        for tx in &self.tx_list {
            let bytes = tx.canonical_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out.extend_from_slice(&self.tx_root);
        out.extend_from_slice(&(self.endorsements.len() as u16).to_be_bytes());
        for (id, sig) in &self.endorsements {
            put_str(&mut out, id);
            out.extend_from_slice(&sig.to_bytes());
        }
        out
    }

    fn from_canonical(bytes: &[u8]) -> Result<Self, String> {
        let mut cur = Cur { bytes, pos: 0 };
        let height = cur.take_u64()?;
        let prev_hash: [u8; 32] = cur.take(32)?.try_into().expect("sized");
        let timestamp = cur.take_u64()?;
        let tx_count = cur.take_u32()? as usize;
        let mut tx_list = Vec::with_capacity(tx_count.min(1024));
        for _ in 0..tx_count {
            let len = cur.take_u32()? as usize;
            let tx_bytes = cur.take(len)?;
            let mut tx_cur = Cur { bytes: tx_bytes, pos: 0 };
            let tx = TransactionRecord::from_canonical_cur(&mut tx_cur)?;
            tx_cur.finish()?;
            tx_list.push(tx);
        }
        let tx_root: [u8; 32] = cur.take(32)?.try_into().expect("sized");
        let endorsement_count = cur.take_u16()? as usize;
        let mut endorsements = Vec::with_capacity(endorsement_count.min(1024));
        for _ in 0..endorsement_count {
            let id = cur.take_str()?;
            let sig_bytes = cur.take(64)?;
            let sig = Signature::from_bytes(sig_bytes).ok_or("invalid endorsement signature")?;
            endorsements.push((id, sig));
        }
        cur.finish()?;
        Ok(Block { height, prev_hash, timestamp, tx_list, tx_root, endorsements })
    }
}

struct Cur<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cur<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!("truncated at offset {} (wanted {n} bytes)", self.pos));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn take_u16(&mut self) -> Result<u16, String> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().expect("sized")))
    }

    fn take_u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn take_u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("sized")))
    }

    fn take_str(&mut self) -> Result<String, String> {
        let len = self.take_u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| "invalid utf-8 string".to_string())
    }

    fn finish(&self) -> Result<(), String> {
        if self.pos != self.bytes.len() {
            return Err(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hdkeys::{master_from_seed, ChildNumber, DerivationMode};

    fn member_key(tag: u8) -> ExtendedPrivateKey {
        master_from_seed(&[tag; 32], DerivationMode::Multiplicative).unwrap()
    }

    fn two_member_config() -> (ChannelConfig, ExtendedPrivateKey, ExtendedPrivateKey) {
        let gov = member_key(1);
        let dmv = member_key(2);
        let cfg = ChannelConfig {
            channel_id: "gov-channel".into(),
            members: vec![
                Member { id: "gov-root".into(), key: gov.neuter() },
                Member { id: "dmv".into(), key: dmv.neuter() },
            ],
            quorum: 2,
        };
        (cfg, gov, dmv)
    }

    fn user_owner_key() -> ExtendedPublicKey {
        master_from_seed(&[9; 32], DerivationMode::Multiplicative)
            .unwrap()
            .ckd_priv(ChildNumber::hardened(0).unwrap())
            .unwrap()
            .neuter()
    }

    #[test]
    fn genesis_shape() {
        let (cfg, _, _) = two_member_config();
        let ledger = genesis(cfg, 1000).unwrap();
        assert_eq!(ledger.height_of_tip(), 0);
        assert_eq!(ledger.blocks()[0].prev_hash, [0u8; 32]);
        assert!(ledger.blocks()[0].tx_list.is_empty());
        assert!(ledger.verify_chain());
    }

    #[test]
    fn genesis_is_deterministic() {
        let (cfg, _, _) = two_member_config();
        let a = genesis(cfg.clone(), 1000).unwrap();
        let b = genesis(cfg, 1000).unwrap();
        assert_eq!(block_hash(&a.blocks()[0]), block_hash(&b.blocks()[0]));
    }

    #[test]
    fn genesis_rejects_bad_quorum() {
        let (mut cfg, _, _) = two_member_config();
        cfg.quorum = 3;
        assert!(matches!(genesis(cfg, 0).unwrap_err(), Error::QuorumOutOfRange { .. }));
        let (mut cfg, _, _) = two_member_config();
        cfg.quorum = 0;
        assert!(matches!(genesis(cfg, 0).unwrap_err(), Error::QuorumOutOfRange { .. }));
    }

    #[test]
    fn records_get_distinct_transaction_keys() {
        let (cfg, _, _) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let owner_key = user_owner_key();
        let a = ledger
            .record_data_access(&owner_key, 0, "dmv", "idp-1", "sp-1", vec!["dob".into()], AccessOutcome::Verified, 10)
            .unwrap()
            .clone();
        let b = ledger
            .record_data_access(&owner_key, 1, "dmv", "idp-1", "sp-1", vec!["dob".into()], AccessOutcome::Verified, 11)
            .unwrap()
            .clone();
        assert_ne!(a.txn_pubkey, b.txn_pubkey);
    }

    #[test]
    fn counter_reuse_is_refused() {
        let (cfg, _, _) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let owner_key = user_owner_key();
        ledger.record_recertification(&owner_key, 0, "dmv", "dob", 5).unwrap();
        let err = ledger.record_recertification(&owner_key, 0, "dmv", "address", 6).unwrap_err();
        assert_eq!(err, Error::CounterReuse { index: 0 });
    }

    #[test]
    fn record_payload_has_names_not_values() {
        let (cfg, _, _) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let owner_key = user_owner_key();
        let record = ledger
            .record_data_access(&owner_key, 0, "dmv", "idp-1", "sp-1", vec!["dob".into()], AccessOutcome::Verified, 10)
            .unwrap();
        let bytes = record.canonical_bytes();
        let haystack = String::from_utf8_lossy(&bytes).to_string();
        assert!(haystack.contains("dob"));
        assert!(!haystack.contains("1990"), "attribute values must never reach the ledger");
    }

    #[test]
    fn user_can_recompute_transaction_key() {
        let (cfg, _, _) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let root = master_from_seed(&[9; 32], DerivationMode::Multiplicative).unwrap();
        let owner_priv = root.ckd_priv(ChildNumber::hardened(0).unwrap()).unwrap();
        let record = ledger
            .record_recertification(&owner_priv.neuter(), 3, "dmv", "dob", 5)
            .unwrap()
            .clone();
        // The user holds the private side and derives the same child.
        let recomputed = owner_priv.ckd_priv(ChildNumber::normal(3).unwrap()).unwrap();
        assert_eq!(recomputed.neuter().point_bytes(), record.txn_pubkey);
    }

    fn committed_ledger(blocks: usize) -> (Ledger, ExtendedPrivateKey, ExtendedPrivateKey) {
        let (cfg, gov, dmv) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let owner_key = user_owner_key();
        for i in 0..blocks {
            ledger
                .record_data_access(
                    &owner_key,
                    i as u32,
                    "dmv",
                    "idp-1",
                    "sp-1",
                    vec!["dob".into(), "name".into()],
                    AccessOutcome::Verified,
                    100 + i as u64,
                )
                .unwrap();
            ledger.commit_block(&[("gov-root", &gov), ("dmv", &dmv)], 100 + i as u64).unwrap();
        }
        (ledger, gov, dmv)
    }

    #[test]
    fn commit_extends_chain_and_verifies() {
        let (ledger, _, _) = committed_ledger(3);
        assert_eq!(ledger.height_of_tip(), 3);
        assert!(ledger.verify_chain());
        assert_eq!(ledger.records().count(), 3);
    }

    #[test]
    fn commit_below_quorum_fails() {
        let (cfg, gov, _) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let err = ledger.commit_block(&[("gov-root", &gov)], 1).unwrap_err();
        assert_eq!(err, Error::InsufficientEndorsements { got: 1, quorum: 2 });
        // Duplicated signer does not inflate the quorum.
        let err = ledger.commit_block(&[("gov-root", &gov), ("gov-root", &gov)], 1).unwrap_err();
        assert_eq!(err, Error::InsufficientEndorsements { got: 1, quorum: 2 });
    }

    #[test]
    fn commit_rejects_non_members_and_wrong_keys() {
        let (cfg, gov, _) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let stranger = member_key(42);
        let err = ledger.commit_block(&[("gov-root", &gov), ("stranger", &stranger)], 1).unwrap_err();
        assert_eq!(err, Error::SignerNotMember("stranger".into()));
        // Right id, wrong key.
        let err = ledger.commit_block(&[("gov-root", &gov), ("dmv", &stranger)], 1).unwrap_err();
        assert_eq!(err, Error::SignerNotMember("dmv".into()));
    }

    #[test]
    fn reordering_transactions_breaks_verification() {
        let (cfg, gov, dmv) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let owner_key = user_owner_key();
        ledger.record_recertification(&owner_key, 0, "dmv", "dob", 1).unwrap();
        ledger.record_recertification(&owner_key, 1, "dmv", "name", 2).unwrap();
        ledger.commit_block(&[("gov-root", &gov), ("dmv", &dmv)], 3).unwrap();
        assert!(ledger.verify_chain());
        let mut tampered = ledger.clone();
        tampered.blocks[1].tx_list.swap(0, 1);
        assert!(!tampered.verify_chain());
    }

    #[test]
    fn persist_load_round_trip() {
        let (ledger, _, _) = committed_ledger(10);
        let mut buf = Vec::new();
        ledger.persist(&mut buf).unwrap();
        let loaded = Ledger::load(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.cfg, ledger.cfg);
        assert_eq!(loaded.blocks, ledger.blocks);
        assert!(loaded.verify_chain());
    }

    #[test]
    fn truncated_file_names_the_height() {
        let (ledger, _, _) = committed_ledger(5);
        let mut buf = Vec::new();
        ledger.persist(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // Cut block 3 (line index 5: header, config, then blocks 0..) in half.
        let mut mangled: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        let target = 5;
        mangled[target] = mangled[target][..mangled[target].len() / 2].to_string();
        let joined = mangled.join("\n");
        let err = Ledger::load(&mut joined.as_bytes()).unwrap_err();
        match err {
            Error::ParseBlock { height, .. } => assert_eq!(height, 3),
            other => panic!("expected ParseBlock, got {other:?}"),
        }
    }

    #[test]
    fn single_byte_mutations_are_detected() {
        // Compact version of the exhaustive acceptance sweep: every 7th byte.
        let (ledger, _, _) = committed_ledger(4);
        let mut buf = Vec::new();
        ledger.persist(&mut buf).unwrap();
        for i in (0..buf.len()).step_by(7) {
            let mut corrupt = buf.clone();
            corrupt[i] ^= 0x01;
            let detected = match Ledger::load(&mut corrupt.as_slice()) {
                Err(_) => true,
                Ok(loaded) => !loaded.verify_chain(),
            };
            assert!(detected, "mutation at byte {i} went undetected");
        }
    }

    #[test]
    fn trace_finds_exactly_the_users_records() {
        let (cfg, gov, dmv) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let root_a = master_from_seed(&[7; 32], DerivationMode::Multiplicative).unwrap();
        let root_b = master_from_seed(&[8; 32], DerivationMode::Multiplicative).unwrap();
        let owner_a = root_a.ckd_priv(ChildNumber::hardened(0).unwrap()).unwrap().neuter();
        let owner_b = root_b.ckd_priv(ChildNumber::hardened(0).unwrap()).unwrap().neuter();
        for i in 0..3 {
            ledger.record_recertification(&owner_a, i, "dmv", "dob", i as u64).unwrap();
        }
        ledger.record_recertification(&owner_b, 0, "dmv", "dob", 50).unwrap();
        ledger.commit_block(&[("gov-root", &gov), ("dmv", &dmv)], 60).unwrap();

        let mine = ledger.trace_by_parent_key(&owner_a, DEFAULT_GAP_LIMIT);
        assert_eq!(mine.len(), 3);
        let theirs = ledger.trace_by_parent_key(&owner_b, DEFAULT_GAP_LIMIT);
        assert_eq!(theirs.len(), 1);
        assert!(mine.iter().all(|r| !theirs.contains(r)));

        // An unrelated key sees nothing.
        let unrelated = member_key(77).neuter();
        assert!(ledger.trace_by_parent_key(&unrelated, DEFAULT_GAP_LIMIT).is_empty());
    }

    #[test]
    fn trace_stops_at_gap_limit() {
        let (cfg, gov, dmv) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let root = master_from_seed(&[7; 32], DerivationMode::Multiplicative).unwrap();
        let owner = root.ckd_priv(ChildNumber::hardened(0).unwrap()).unwrap().neuter();
        ledger.record_recertification(&owner, 0, "dmv", "dob", 1).unwrap();
        // Index 25 sits beyond a gap of 24 unused indices.
        ledger.record_recertification(&owner, 25, "dmv", "dob", 2).unwrap();
        ledger.commit_block(&[("gov-root", &gov), ("dmv", &dmv)], 3).unwrap();

        let with_gap_20 = ledger.trace_by_parent_key(&owner, 20);
        assert_eq!(with_gap_20.len(), 1, "index 25 is invisible at gap limit 20");
        let with_gap_30 = ledger.trace_by_parent_key(&owner, 30);
        assert_eq!(with_gap_30.len(), 2);
    }

    #[test]
    fn trace_from_root_spans_owners() {
        let (cfg, gov, dmv) = two_member_config();
        let mut ledger = genesis(cfg, 0).unwrap();
        let root = master_from_seed(&[7; 32], DerivationMode::Multiplicative).unwrap();
        let owner0 = root.ckd_priv(ChildNumber::hardened(0).unwrap()).unwrap().neuter();
        let owner1 = root.ckd_priv(ChildNumber::hardened(1).unwrap()).unwrap().neuter();
        ledger.record_recertification(&owner0, 0, "dmv", "dob", 1).unwrap();
        ledger.record_recertification(&owner1, 0, "equifax", "ssn", 2).unwrap();
        ledger.commit_block(&[("gov-root", &gov), ("dmv", &dmv)], 3).unwrap();

        let all = ledger.trace_from_access_root(&root, DEFAULT_GAP_LIMIT);
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].data_owner_id, "dmv");
        assert_eq!(all[1].data_owner_id, "equifax");
    }
}
