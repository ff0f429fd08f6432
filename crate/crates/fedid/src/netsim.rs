//! Deterministic in-memory message bus.
//!
//! Single FIFO queue, monotone sequence numbers, a logical clock advanced
//! explicitly by scenario steps, and a seeded RNG shared by every actor for
//! their cryptographic randomness. A transcript entry is recorded for every
//! envelope as it is processed: delivered, dropped by a fault rule, or
//! failed because the destination is offline (in which case the sender
//! receives a `delivery_failure` notice from the reserved `!bus` id).
//!
//! Identity providers and data owners may never message each other
//! directly; all such traffic goes through a communication-server actor.
//! The bus enforces that rule at send time.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

pub type ActorId = String;

/// Sender id used for bus-generated notices.
pub const BUS_ID: &str = "!bus";
/// Message kind of bus-generated failure notices.
pub const DELIVERY_FAILURE_KIND: &str = "delivery_failure";

pub const DEFAULT_MAX_STEPS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("actor id {0:?} already registered")]
    DuplicateActor(String),
    #[error("unknown actor id {0:?}")]
    UnknownActor(String),
    #[error("{from:?} may not message {to:?} directly; route via the communication server")]
    RoutingViolation { from: String, to: String },
    #[error("bus did not quiesce within {0} steps")]
    Livelock(u64),
}

/// Protocol role, used only for the comm-server routing rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActorRole {
    User,
    IdentityProvider,
    ServiceProvider,
    DataOwner,
    CommServer,
}

/// A queued message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub seq: u64,
    pub from: ActorId,
    pub to: ActorId,
    pub kind: String,
    pub payload: Vec<u8>,
    pub delivered: bool,
}

/// What the bus did with an envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryStatus {
    Delivered,
    Dropped,
    DestinationOffline,
}

impl DeliveryStatus {
    fn as_str(self) -> &'static str {
        match self {
            DeliveryStatus::Delivered => "delivered",
            DeliveryStatus::Dropped => "dropped",
            DeliveryStatus::DestinationOffline => "offline",
        }
    }
}

/// One processed envelope: sequence number, endpoints, message kind, a
/// short payload digest, and the outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub from: ActorId,
    pub to: ActorId,
    pub kind: String,
    pub digest: String,
    pub status: DeliveryStatus,
}

impl TranscriptEntry {
    /// Tab-separated line form used by transcript files.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.seq,
            self.from,
            self.to,
            self.kind,
            self.digest,
            self.status.as_str()
        )
    }
}

/// Render a whole transcript as the line-delimited text format.
pub fn transcript_text(entries: &[TranscriptEntry]) -> String {
    let mut out = String::new();
    for entry in entries {
        out.push_str(&entry.to_line());
        out.push('\n');
    }
    out
}

fn payload_digest(payload: &[u8]) -> String {
    hex::encode(&Sha256::digest(payload)[..8])
}

/// Matches envelopes by sender, receiver, and/or kind; `None` matches all.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MatchRule {
    pub from: Option<ActorId>,
    pub to: Option<ActorId>,
    pub kind: Option<String>,
}

impl MatchRule {
    fn matches(&self, env: &Envelope) -> bool {
        self.from.as_ref().is_none_or(|f| *f == env.from)
            && self.to.as_ref().is_none_or(|t| *t == env.to)
            && self.kind.as_ref().is_none_or(|k| *k == env.kind)
    }
}

/// Flip one payload byte (XOR 0x01 at `byte_index`, wrapped to the payload
/// length) of every envelope the rule matches. With `from_end` the index
/// counts backward from the last byte, which makes rules robust against
/// variable-length payload heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TamperRule {
    pub rule: MatchRule,
    pub byte_index: usize,
    pub from_end: bool,
}

/// Fault injection: offline actors, byte tampering, and drops.
#[derive(Debug, Clone, Default)]
pub struct FaultConfig {
    pub offline_actors: BTreeSet<ActorId>,
    pub tamper_rules: Vec<TamperRule>,
    pub drop_rules: Vec<MatchRule>,
}

/// Body of a `delivery_failure` notice sent back to the original sender.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DeliveryFailure {
    pub original_seq: u64,
    pub original_kind: String,
    pub destination: ActorId,
}

/// A message-driven state machine attached to the bus.
pub trait Actor {
    fn on_message(&mut self, env: &Envelope, ctx: &mut BusCtx<'_>);
}

/// What an actor may do while handling a message: send envelopes, read the
/// logical clock, draw randomness.
pub struct BusCtx<'a> {
    current: &'a str,
    roles: &'a BTreeMap<ActorId, ActorRole>,
    queue: &'a mut VecDeque<Envelope>,
    next_seq: &'a mut u64,
    clock: u64,
    rng: &'a mut ChaCha20Rng,
}

impl BusCtx<'_> {
    pub fn send(&mut self, to: &str, kind: &str, payload: Vec<u8>) -> Result<u64, Error> {
        enqueue(self.roles, self.queue, self.next_seq, self.current, to, kind, payload)
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        self.rng
    }

    pub fn self_id(&self) -> &str {
        self.current
    }
}

fn enqueue(
    roles: &BTreeMap<ActorId, ActorRole>,
    queue: &mut VecDeque<Envelope>,
    next_seq: &mut u64,
    from: &str,
    to: &str,
    kind: &str,
    payload: Vec<u8>,
) -> Result<u64, Error> {
    if from != BUS_ID && !roles.contains_key(from) {
        return Err(Error::UnknownActor(from.to_string()));
    }
    let Some(to_role) = roles.get(to) else {
        return Err(Error::UnknownActor(to.to_string()));
    };
    if from != BUS_ID {
        let from_role = roles[from];
        let direct_idp_owner = matches!(
            (from_role, to_role),
            (ActorRole::IdentityProvider, ActorRole::DataOwner)
                | (ActorRole::DataOwner, ActorRole::IdentityProvider)
        );
        if direct_idp_owner {
            return Err(Error::RoutingViolation { from: from.to_string(), to: to.to_string() });
        }
    }
    let seq = *next_seq;
    *next_seq += 1;
    queue.push_back(Envelope {
        seq,
        from: from.to_string(),
        to: to.to_string(),
        kind: kind.to_string(),
        payload,
        delivered: false,
    });
    Ok(seq)
}

/// The simulated network connecting all actors.
pub struct Bus {
    actors: BTreeMap<ActorId, Rc<RefCell<dyn Actor>>>,
    roles: BTreeMap<ActorId, ActorRole>,
    queue: VecDeque<Envelope>,
    next_seq: u64,
    clock: u64,
    rng: ChaCha20Rng,
    pub faults: FaultConfig,
    transcript: Vec<TranscriptEntry>,
    max_steps: u64,
}

impl Bus {
    pub fn new(seed: u64) -> Self {
        Bus {
            actors: BTreeMap::new(),
            roles: BTreeMap::new(),
            queue: VecDeque::new(),
            next_seq: 0,
            clock: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
            faults: FaultConfig::default(),
            transcript: Vec::new(),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    pub fn with_max_steps(mut self, max_steps: u64) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn register_actor(
        &mut self,
        id: &str,
        role: ActorRole,
        actor: Rc<RefCell<dyn Actor>>,
    ) -> Result<(), Error> {
        if id == BUS_ID || self.roles.contains_key(id) {
            return Err(Error::DuplicateActor(id.to_string()));
        }
        self.roles.insert(id.to_string(), role);
        self.actors.insert(id.to_string(), actor);
        Ok(())
    }

    /// Enqueue a message on behalf of `from`; used by the scenario runner to
    /// kick off flows. Actors use [`BusCtx::send`] instead.
    pub fn send(&mut self, from: &str, to: &str, kind: &str, payload: Vec<u8>) -> Result<u64, Error> {
        enqueue(&self.roles, &mut self.queue, &mut self.next_seq, from, to, kind, payload)
    }

    pub fn now(&self) -> u64 {
        self.clock
    }

    pub fn advance_clock(&mut self, seconds: u64) {
        self.clock += seconds;
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    /// Process the queue to quiescence. Each processed envelope appends one
    /// transcript entry. Fails if the queue does not drain within the step
    /// budget.
    pub fn run_until_idle(&mut self) -> Result<(), Error> {
        let mut steps = 0u64;
        while let Some(mut env) = self.queue.pop_front() {
            steps += 1;
            if steps > self.max_steps {
                return Err(Error::Livelock(self.max_steps));
            }

            if self.faults.drop_rules.iter().any(|r| r.matches(&env)) {
                self.transcript.push(TranscriptEntry {
                    seq: env.seq,
                    from: env.from.clone(),
                    to: env.to.clone(),
                    kind: env.kind.clone(),
                    digest: payload_digest(&env.payload),
                    status: DeliveryStatus::Dropped,
                });
                continue;
            }

            if self.faults.offline_actors.contains(&env.to) {
                self.transcript.push(TranscriptEntry {
                    seq: env.seq,
                    from: env.from.clone(),
                    to: env.to.clone(),
                    kind: env.kind.clone(),
                    digest: payload_digest(&env.payload),
                    status: DeliveryStatus::DestinationOffline,
                });
                // Notify the sender unless the notice itself cannot land.
                if env.from != BUS_ID && !self.faults.offline_actors.contains(&env.from) {
                    let notice = DeliveryFailure {
                        original_seq: env.seq,
                        original_kind: env.kind.clone(),
                        destination: env.to.clone(),
                    };
                    let payload = serde_json::to_vec(&notice).expect("failure notice serializes");
                    enqueue(
                        &self.roles,
                        &mut self.queue,
                        &mut self.next_seq,
                        BUS_ID,
                        &env.from,
                        DELIVERY_FAILURE_KIND,
                        payload,
                    )?;
                }
                continue;
            }

            for tamper in &self.faults.tamper_rules {
                if tamper.rule.matches(&env) && !env.payload.is_empty() {
                    let len = env.payload.len();
                    let offset = tamper.byte_index % len;
                    let index = if tamper.from_end { len - 1 - offset } else { offset };
                    env.payload[index] ^= 0x01;
                }
            }

            env.delivered = true;
            self.transcript.push(TranscriptEntry {
                seq: env.seq,
                from: env.from.clone(),
                to: env.to.clone(),
                kind: env.kind.clone(),
                digest: payload_digest(&env.payload),
                status: DeliveryStatus::Delivered,
            });

            let actor = self.actors.get(&env.to).expect("validated at send").clone();
            let mut ctx = BusCtx {
                current: &env.to,
                roles: &self.roles,
                queue: &mut self.queue,
                next_seq: &mut self.next_seq,
                clock: self.clock,
                rng: &mut self.rng,
            };
            actor.borrow_mut().on_message(&env, &mut ctx);
        }
        Ok(())
    }
}
