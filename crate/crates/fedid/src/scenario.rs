//! Declarative scenario files and the end-to-end runner.
//!
//! A scenario is a TOML document (schema version pinned in its header)
//! declaring the deployment — data owners with classes, identity providers,
//! service providers with their claim policies, users with seed material and
//! consent rules, trust parameters, fault injection — followed by an ordered
//! step list. Steps mirror the protocol phases: register, signup, login,
//! sp_login, store_identity, plus clock control, re-certification, tracing,
//! and chain verification.
//!
//! Running a scenario produces a deterministic transcript, a persisted
//! ledger, per-provider state dumps, and an audit report. The exit
//! contract: step expectation failures are distinguishable from parse/IO
//! errors so the command line can map them to different codes.

use crate::actors::{
    CommServer, Consortium, ConsortiumHandle, DataOwner, DecisionRecord, FlowOutcome,
    IdentityProvider, LoginOptions, OfflineBehavior, ServiceProvider, UserAgent,
};
use crate::hdkeys::{DerivationMode, ExtendedPrivateKey};
use crate::ibcpre;
use crate::ledger::{Ledger, DEFAULT_GAP_LIMIT};
use crate::netsim::{ActorRole, Bus, MatchRule, TamperRule};
use crate::trust::{SourceClass, SourceWeightTable, TrustParams};
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

pub const SCHEMA_VERSION: u32 = 1;
/// Reserved actor id of the communication server.
pub const COMM_ID: &str = "comm";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// The file did not parse or declares an unsupported schema. The
    /// message carries the TOML line/column context.
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("scenario invalid: {0}")]
    Validation(String),
    #[error("step {index} ({kind}): {message}")]
    Step { index: usize, kind: String, message: String },
    #[error("i/o: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema: u32,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: DerivationMode,
    #[serde(default)]
    pub paper_literal_login: bool,
    #[serde(default = "default_offline_behavior")]
    pub owner_offline_behavior: OfflineBehaviorConfig,
    #[serde(default = "default_channel")]
    pub channel_id: String,
    #[serde(default)]
    pub trust: TrustConfig,
    pub owners: Vec<OwnerConfig>,
    pub idps: Vec<IdpConfig>,
    #[serde(default)]
    pub sps: Vec<SpConfig>,
    pub users: Vec<UserConfig>,
    #[serde(default)]
    pub faults: FaultsConfig,
    #[serde(default)]
    pub steps: Vec<Step>,
}

fn default_mode() -> DerivationMode {
    DerivationMode::Multiplicative
}

fn default_offline_behavior() -> OfflineBehaviorConfig {
    OfflineBehaviorConfig::HardBlock
}

fn default_channel() -> String {
    "consortium-1".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineBehaviorConfig {
    HardBlock,
    DegradeScore,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustConfig {
    pub half_life_days: Option<f64>,
    pub unavailability_penalty: Option<f64>,
    pub staleness_factor: Option<f64>,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnerConfig {
    pub id: String,
    pub class: SourceClass,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdpConfig {
    pub id: String,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpConfig {
    pub id: String,
    #[serde(default)]
    pub claims: Vec<ClaimConfig>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimConfig {
    pub attribute: String,
    pub threshold: f64,
    #[serde(default = "default_true")]
    pub mandatory: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub id: String,
    pub seed_hex: String,
    #[serde(default)]
    pub consent: Vec<ConsentConfig>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsentConfig {
    pub sp: String,
    pub attributes: Vec<String>,
    pub owners: Vec<String>,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultsConfig {
    #[serde(default)]
    pub offline: Vec<String>,
    #[serde(default)]
    pub tamper: Vec<TamperConfig>,
    #[serde(default)]
    pub drop: Vec<DropConfig>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperConfig {
    pub from: Option<String>,
    pub to: Option<String>,
    pub kind: Option<String>,
    #[serde(default)]
    pub byte_index: usize,
    /// Count from the payload tail instead of the head.
    #[serde(default)]
    pub from_end: bool,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropConfig {
    pub from: Option<String>,
    pub to: Option<String>,
    pub kind: Option<String>,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum Step {
    Register {
        user: String,
        owner: String,
        attributes: BTreeMap<String, String>,
        #[serde(default)]
        expect: Option<String>,
    },
    Signup {
        user: String,
        idp: String,
        username: String,
        password: String,
        #[serde(default)]
        expect: Option<String>,
    },
    Login {
        user: String,
        idp: String,
        #[serde(default)]
        wrong_password: bool,
        #[serde(default)]
        wrong_totp: bool,
        #[serde(default)]
        reuse_last_index: bool,
        #[serde(default)]
        expect: Option<String>,
        #[serde(default)]
        expect_stage: Option<u8>,
    },
    AdvanceClock { seconds: u64 },
    SpLogin {
        user: String,
        sp: String,
        idp: String,
        #[serde(default)]
        owners: Vec<String>,
        #[serde(default)]
        use_stored: Option<String>,
        #[serde(default)]
        expect: Option<String>,
        #[serde(default)]
        expect_score: Option<ScoreExpectation>,
        #[serde(default)]
        expect_reason: Option<String>,
    },
    StoreIdentity {
        user: String,
        idp: String,
        owner: String,
        #[serde(default)]
        expect: Option<String>,
    },
    Recertify { user: String, owner: String, attribute: String },
    /// Test hook: make the user's local copy of an attribute diverge from
    /// the owner's record, forcing a mismatch at verification.
    AlterUserCopy { user: String, owner: String, attribute: String, value: String },
    Trace {
        user: String,
        #[serde(default)]
        expect_count: Option<usize>,
    },
    VerifyChain {
        #[serde(default)]
        expect: Option<String>,
    },
}

impl Step {
    fn kind_name(&self) -> &'static str {
        match self {
            Step::Register { .. } => "register",
            Step::Signup { .. } => "signup",
            Step::Login { .. } => "login",
            Step::AdvanceClock { .. } => "advance_clock",
            Step::SpLogin { .. } => "sp_login",
            Step::StoreIdentity { .. } => "store_identity",
            Step::Recertify { .. } => "recertify",
            Step::AlterUserCopy { .. } => "alter_user_copy",
            Step::Trace { .. } => "trace",
            Step::VerifyChain { .. } => "verify_chain",
        }
    }
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreExpectation {
    pub attribute: String,
    pub value: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-9
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.schema != SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                file.schema
            )));
        }
        file.validate()?;
        Ok(file)
    }

    fn validate(&self) -> Result<(), Error> {
        let mut ids = BTreeSet::new();
        ids.insert(COMM_ID.to_string());
        for id in self
            .owners
            .iter()
            .map(|o| &o.id)
            .chain(self.idps.iter().map(|i| &i.id))
            .chain(self.sps.iter().map(|s| &s.id))
            .chain(self.users.iter().map(|u| &u.id))
        {
            if id.is_empty() || id.len() > 64 {
                return Err(Error::Validation(format!("actor id {id:?} must be 1..=64 bytes")));
            }
            if !ids.insert(id.clone()) {
                return Err(Error::Validation(format!("duplicate or reserved actor id {id:?}")));
            }
        }
        if self.channel_id.is_empty() || self.channel_id.len() > 64 {
            return Err(Error::Validation("channel_id must be 1..=64 bytes".into()));
        }
        for step in &self.steps {
            if let Step::Register { attributes, .. } = step {
                for (name, value) in attributes {
                    if name.is_empty() || name.len() > 128 || value.len() > 1024 {
                        return Err(Error::Validation(format!(
                            "attribute {name:?} out of size bounds (name 1..=128, value <=1024)"
                        )));
                    }
                }
            }
        }
        let owner_ids: BTreeSet<&str> = self.owners.iter().map(|o| o.id.as_str()).collect();
        let idp_ids: BTreeSet<&str> = self.idps.iter().map(|i| i.id.as_str()).collect();
        let sp_ids: BTreeSet<&str> = self.sps.iter().map(|s| s.id.as_str()).collect();
        let user_ids: BTreeSet<&str> = self.users.iter().map(|u| u.id.as_str()).collect();

        for user in &self.users {
            let seed = hex::decode(&user.seed_hex)
                .map_err(|e| Error::Validation(format!("user {:?} seed_hex: {e}", user.id)))?;
            if !(16..=64).contains(&seed.len()) {
                return Err(Error::Validation(format!(
                    "user {:?} seed must be 16..=64 bytes",
                    user.id
                )));
            }
            for consent in &user.consent {
                if !sp_ids.contains(consent.sp.as_str()) {
                    return Err(Error::Validation(format!(
                        "user {:?} consent references unknown sp {:?}",
                        user.id, consent.sp
                    )));
                }
                for owner in &consent.owners {
                    if !owner_ids.contains(owner.as_str()) {
                        return Err(Error::Validation(format!(
                            "user {:?} consent references unknown owner {owner:?}",
                            user.id
                        )));
                    }
                }
            }
        }

        let check = |index: usize, kind: &str, ok: bool, what: &str, id: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Step {
                    index,
                    kind: kind.to_string(),
                    message: format!("references unknown {what} {id:?}"),
                })
            }
        };
        let check_expect = |index: usize, kind: &str, expect: &Option<String>, allowed: &[&str]| {
            match expect.as_deref() {
                None => Ok(()),
                Some(word) if allowed.contains(&word) => Ok(()),
                Some(word) => Err(Error::Step {
                    index,
                    kind: kind.to_string(),
                    message: format!("expect must be one of {allowed:?}, got {word:?}"),
                }),
            }
        };
        for (index, step) in self.steps.iter().enumerate() {
            let kind = step.kind_name();
            match step {
                Step::Register { expect, .. }
                | Step::Signup { expect, .. }
                | Step::Login { expect, .. }
                | Step::StoreIdentity { expect, .. } => {
                    check_expect(index, kind, expect, &["ok", "fail"])?;
                }
                Step::SpLogin { expect, .. } => {
                    check_expect(index, kind, expect, &["granted", "denied", "stalled"])?;
                }
                Step::VerifyChain { expect } => {
                    check_expect(index, kind, expect, &["ok", "fail"])?;
                }
                _ => {}
            }
            match step {
                Step::Register { user, owner, .. }
                | Step::Recertify { user, owner, .. }
                | Step::AlterUserCopy { user, owner, .. } => {
                    check(index, kind, user_ids.contains(user.as_str()), "user", user)?;
                    check(index, kind, owner_ids.contains(owner.as_str()), "owner", owner)?;
                }
                Step::Signup { user, idp, .. } | Step::Login { user, idp, .. } => {
                    check(index, kind, user_ids.contains(user.as_str()), "user", user)?;
                    check(index, kind, idp_ids.contains(idp.as_str()), "idp", idp)?;
                }
                Step::SpLogin { user, sp, idp, owners, .. } => {
                    check(index, kind, user_ids.contains(user.as_str()), "user", user)?;
                    check(index, kind, sp_ids.contains(sp.as_str()), "sp", sp)?;
                    check(index, kind, idp_ids.contains(idp.as_str()), "idp", idp)?;
                    for owner in owners {
                        check(index, kind, owner_ids.contains(owner.as_str()), "owner", owner)?;
                    }
                }
                Step::StoreIdentity { user, idp, owner, .. } => {
                    check(index, kind, user_ids.contains(user.as_str()), "user", user)?;
                    check(index, kind, idp_ids.contains(idp.as_str()), "idp", idp)?;
                    check(index, kind, owner_ids.contains(owner.as_str()), "owner", owner)?;
                }
                Step::Trace { user, .. } => {
                    check(index, kind, user_ids.contains(user.as_str()), "user", user)?;
                }
                Step::AdvanceClock { .. } | Step::VerifyChain { .. } => {}
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

/// Overrides applied on top of the scenario file (command-line flags).
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<DerivationMode>,
    pub paper_literal_login: bool,
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunExit {
    Success,
    StepFailure { index: usize, kind: String, message: String },
}

/// Everything a completed run produced.
pub struct RunOutput {
    pub exit: RunExit,
    pub seed: u64,
    pub transcript: String,
    pub ledger_text: String,
    pub ledger: Ledger,
    pub report: String,
    pub idp_states: BTreeMap<String, String>,
    pub user_outcomes: BTreeMap<String, Vec<FlowOutcome>>,
    pub sp_decisions: BTreeMap<String, Vec<DecisionRecord>>,
    pub user_access_roots: BTreeMap<String, ExtendedPrivateKey>,
    pub attribute_values: BTreeSet<String>,
    pub user_secret_patterns: Vec<String>,
}

/// A fully wired deployment: the bus with all actors registered, plus typed
/// handles for step execution and post-run inspection.
pub struct Simulation {
    bus: Bus,
    consortium: ConsortiumHandle,
    users: BTreeMap<String, Rc<RefCell<UserAgent>>>,
    owners: BTreeMap<String, Rc<RefCell<DataOwner>>>,
    idps: BTreeMap<String, Rc<RefCell<IdentityProvider>>>,
    sps: BTreeMap<String, Rc<RefCell<ServiceProvider>>>,
}

impl Simulation {
    pub fn build(file: &ScenarioFile, overrides: &Overrides) -> Result<Self, Error> {
        let seed = overrides.seed.unwrap_or(file.seed);
        build_simulation(file, seed, overrides)
    }

    pub fn user(&self, id: &str) -> Option<Rc<RefCell<UserAgent>>> {
        self.users.get(id).cloned()
    }

    pub fn idp(&self, id: &str) -> Option<Rc<RefCell<IdentityProvider>>> {
        self.idps.get(id).cloned()
    }

    pub fn owner(&self, id: &str) -> Option<Rc<RefCell<DataOwner>>> {
        self.owners.get(id).cloned()
    }

    pub fn sp(&self, id: &str) -> Option<Rc<RefCell<ServiceProvider>>> {
        self.sps.get(id).cloned()
    }

    pub fn consortium(&self) -> ConsortiumHandle {
        self.consortium.clone()
    }

    pub fn bus_mut(&mut self) -> &mut Bus {
        &mut self.bus
    }

    pub fn transcript_text(&self) -> String {
        crate::netsim::transcript_text(self.bus.transcript())
    }

    /// Execute one step, checking its expectations.
    pub fn run_step(&mut self, index: usize, step: &Step) -> Result<(), Error> {
        execute_step(self, index, step)
    }
}

fn derive_seed(label: &str, scenario_seed: u64, extra: &str) -> [u8; 32] {
    Sha256::digest(format!("fedid/{label}/{scenario_seed}/{extra}").as_bytes()).into()
}

fn build_simulation(file: &ScenarioFile, seed: u64, overrides: &Overrides) -> Result<Simulation, Error> {
    let mode = overrides.mode.unwrap_or(file.mode);
    let paper_literal = overrides.paper_literal_login || file.paper_literal_login;

    let wrap = |e: crate::actors::Error| Error::Validation(e.to_string());

    // IBCPRE deployment, shared by every party.
    let (params, master) = ibcpre::setup(128, &derive_seed("ibcpre", seed, ""))
        .map_err(|e| Error::Validation(e.to_string()))?;

    // Consortium members are the data owners; every block needs all of them.
    let member_keys: Vec<(String, ExtendedPrivateKey)> = file
        .owners
        .iter()
        .map(|o| {
            crate::hdkeys::master_from_seed(&derive_seed("member", seed, &o.id), mode)
                .map(|k| (o.id.clone(), k))
                .map_err(|e| Error::Validation(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let quorum = file.owners.len() as u32;
    let consortium = Consortium::new(&file.channel_id, member_keys, quorum.max(1), 0).map_err(wrap)?;

    let mut trust_params = TrustParams::default();
    if let Some(days) = file.trust.half_life_days {
        trust_params.half_life_seconds = days * 86_400.0;
    }
    if let Some(p) = file.trust.unavailability_penalty {
        trust_params.unavailability_penalty = p;
    }
    if let Some(f) = file.trust.staleness_factor {
        trust_params.staleness_factor = f;
    }
    let mut weight_table = SourceWeightTable::default();
    for (class_name, weight) in &file.trust.weights {
        let class = match class_name.as_str() {
            "government" => SourceClass::Government,
            "credit_bureau" => SourceClass::CreditBureau,
            "delivery" => SourceClass::Delivery,
            "social" => SourceClass::Social,
            "other" => SourceClass::Other,
            other => {
                return Err(Error::Validation(format!("unknown source class {other:?}")));
            }
        };
        weight_table
            .set(class, *weight)
            .map_err(|e| Error::Validation(e.to_string()))?;
    }
    let owner_directory: BTreeMap<String, SourceClass> =
        file.owners.iter().map(|o| (o.id.clone(), o.class)).collect();

    let mut bus = Bus::new(seed);

    let comm = Rc::new(RefCell::new(CommServer::new(COMM_ID, consortium.clone())));
    bus.register_actor(COMM_ID, ActorRole::CommServer, comm.clone())
        .map_err(|e| Error::Validation(e.to_string()))?;

    let mut owners = BTreeMap::new();
    for config in &file.owners {
        let sk = ibcpre::extract(&master, &config.id).map_err(|e| Error::Validation(e.to_string()))?;
        let owner = Rc::new(RefCell::new(DataOwner::new(
            &config.id,
            config.class,
            sk,
            consortium.clone(),
            COMM_ID,
        )));
        bus.register_actor(&config.id, ActorRole::DataOwner, owner.clone())
            .map_err(|e| Error::Validation(e.to_string()))?;
        owners.insert(config.id.clone(), owner);
    }

    let mut idps = BTreeMap::new();
    for config in &file.idps {
        let sk = ibcpre::extract(&master, &config.id).map_err(|e| Error::Validation(e.to_string()))?;
        let mut idp = IdentityProvider::new(&config.id, params.clone(), sk, COMM_ID);
        idp.weight_table = weight_table.clone();
        idp.trust_params = trust_params;
        idp.paper_literal_login = paper_literal;
        idp.offline_behavior = match file.owner_offline_behavior {
            OfflineBehaviorConfig::HardBlock => OfflineBehavior::HardBlock,
            OfflineBehaviorConfig::DegradeScore => OfflineBehavior::DegradeScore,
        };
        idp.owner_directory = owner_directory.clone();
        let idp = Rc::new(RefCell::new(idp));
        bus.register_actor(&config.id, ActorRole::IdentityProvider, idp.clone())
            .map_err(|e| Error::Validation(e.to_string()))?;
        idps.insert(config.id.clone(), idp);
    }

    let mut sps = BTreeMap::new();
    for config in &file.sps {
        let mut policy = crate::trust::ServicePolicy::default();
        for claim in &config.claims {
            policy
                .require(&claim.attribute, claim.threshold, claim.mandatory)
                .map_err(|e| Error::Validation(e.to_string()))?;
        }
        let sp = Rc::new(RefCell::new(ServiceProvider::new(&config.id, policy)));
        bus.register_actor(&config.id, ActorRole::ServiceProvider, sp.clone())
            .map_err(|e| Error::Validation(e.to_string()))?;
        sps.insert(config.id.clone(), sp);
    }

    let mut users = BTreeMap::new();
    for config in &file.users {
        let seed_bytes = hex::decode(&config.seed_hex).expect("validated");
        let sk = ibcpre::extract(&master, &config.id).map_err(|e| Error::Validation(e.to_string()))?;
        let mut user = UserAgent::new(&config.id, &seed_bytes, mode, params.clone(), sk).map_err(wrap)?;
        user.paper_literal_login = paper_literal;
        for consent in &config.consent {
            user.consent.insert(
                consent.sp.clone(),
                crate::actors::ConsentRule {
                    attributes: consent.attributes.iter().cloned().collect(),
                    owners: consent.owners.iter().cloned().collect(),
                },
            );
        }
        let user = Rc::new(RefCell::new(user));
        bus.register_actor(&config.id, ActorRole::User, user.clone())
            .map_err(|e| Error::Validation(e.to_string()))?;
        users.insert(config.id.clone(), user);
    }

    // Fault injection.
    for id in &file.faults.offline {
        bus.faults.offline_actors.insert(id.clone());
    }
    for tamper in &file.faults.tamper {
        bus.faults.tamper_rules.push(TamperRule {
            rule: MatchRule {
                from: tamper.from.clone(),
                to: tamper.to.clone(),
                kind: tamper.kind.clone(),
            },
            byte_index: tamper.byte_index,
            from_end: tamper.from_end,
        });
    }
    for drop in &file.faults.drop {
        bus.faults.drop_rules.push(MatchRule {
            from: drop.from.clone(),
            to: drop.to.clone(),
            kind: drop.kind.clone(),
        });
    }

    Ok(Simulation { bus, consortium, users, owners, idps, sps })
}

fn step_err(index: usize, step: &Step, message: impl Into<String>) -> Error {
    Error::Step { index, kind: step.kind_name().to_string(), message: message.into() }
}

fn expect_flag(expect: &Option<String>, default_ok: bool) -> bool {
    match expect.as_deref() {
        None => default_ok,
        Some("ok") | Some("granted") => true,
        _ => false,
    }
}

/// Execute a parsed scenario. Per-step expectation failures end the run with
/// [`RunExit::StepFailure`]; structural problems surface as errors.
pub fn run_scenario(file: &ScenarioFile, overrides: &Overrides) -> Result<RunOutput, Error> {
    let seed = overrides.seed.unwrap_or(file.seed);
    let mut sim = build_simulation(file, seed, overrides)?;
    let failure = run_all_steps(&mut sim, &file.steps)?;
    collect_output(sim, file, seed, failure)
}

/// Run every step, stopping at the first expectation failure.
pub fn run_all_steps(
    sim: &mut Simulation,
    steps: &[Step],
) -> Result<Option<(usize, String, String)>, Error> {
    for (index, step) in steps.iter().enumerate() {
        match execute_step(sim, index, step) {
            Ok(()) => {}
            Err(Error::Step { message, kind, .. }) => {
                return Ok(Some((index, kind, message)));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(None)
}

fn collect_output(
    sim: Simulation,
    file: &ScenarioFile,
    seed: u64,
    failure: Option<(usize, String, String)>,
) -> Result<RunOutput, Error> {
    let sim = &sim;

    // Collect outputs.
    let consortium = sim.consortium.borrow();
    let mut ledger_bytes = Vec::new();
    consortium
        .ledger
        .persist(&mut ledger_bytes)
        .map_err(|e| Error::Io(e.to_string()))?;
    let ledger_text = String::from_utf8(ledger_bytes).expect("hex lines are UTF-8");

    let mut idp_states = BTreeMap::new();
    for (id, idp) in &sim.idps {
        idp_states.insert(id.clone(), idp.borrow().persisted_state_json());
    }
    let mut user_outcomes = BTreeMap::new();
    let mut user_access_roots = BTreeMap::new();
    let mut user_secret_patterns = Vec::new();
    for (id, user) in &sim.users {
        let user = user.borrow();
        user_outcomes.insert(id.clone(), user.outcomes.clone());
        user_access_roots.insert(id.clone(), user.access_root().clone());
        user_secret_patterns.extend(user.private_scalar_hexes());
        user_secret_patterns.push(user.access_root().to_base58());
    }
    let mut sp_decisions = BTreeMap::new();
    for (id, sp) in &sim.sps {
        sp_decisions.insert(id.clone(), sp.borrow().decisions.clone());
    }
    let attribute_values: BTreeSet<String> = file
        .steps
        .iter()
        .filter_map(|s| match s {
            Step::Register { attributes, .. } => Some(attributes.values().cloned()),
            _ => None,
        })
        .flatten()
        .collect();

    let transcript = crate::netsim::transcript_text(sim.bus.transcript());
    let users_for_report: Vec<(String, ExtendedPrivateKey)> = user_access_roots
        .iter()
        .map(|(id, key)| (id.clone(), key.clone()))
        .collect();
    let report = audit_report(
        &consortium.ledger,
        &users_for_report,
        &transcript,
        &attribute_values,
        &user_secret_patterns,
        &idp_states,
        DEFAULT_GAP_LIMIT,
    );

    let exit = match failure {
        None => RunExit::Success,
        Some((index, kind, message)) => RunExit::StepFailure { index, kind, message },
    };

    Ok(RunOutput {
        exit,
        seed,
        transcript,
        ledger_text,
        ledger: consortium.ledger.clone(),
        report,
        idp_states,
        user_outcomes,
        sp_decisions,
        user_access_roots,
        attribute_values,
        user_secret_patterns,
    })
}

fn execute_step(sim: &mut Simulation, index: usize, step: &Step) -> Result<(), Error> {
    match step {
        Step::Register { user, owner, attributes, expect } => {
            let user_rc = sim.users[user].clone();
            let owner_rc = sim.owners[owner].clone();
            let now = sim.bus.now();
            let result = user_rc.borrow_mut().register_with_owner(
                &mut owner_rc.borrow_mut(),
                attributes.clone(),
                now,
            );
            let ok = result.is_ok();
            if ok != expect_flag(expect, true) {
                return Err(step_err(index, step, format!("expected {expect:?}, got ok={ok}")));
            }
            Ok(())
        }

        Step::Signup { user, idp, username, password, expect } => {
            let user_rc = sim.users[user].clone();
            let before = user_rc.borrow().outcomes.len();
            user_rc
                .borrow_mut()
                .begin_signup(&mut sim.bus, idp, username, password)
                .map_err(|e| step_err(index, step, e.to_string()))?;
            sim.bus.run_until_idle().map_err(|e| step_err(index, step, e.to_string()))?;
            let outcomes = user_rc.borrow().outcomes.clone();
            let outcome = outcomes
                .get(before)
                .ok_or_else(|| step_err(index, step, "signup produced no outcome"))?;
            if outcome.ok != expect_flag(expect, true) {
                return Err(step_err(
                    index,
                    step,
                    format!("expected {expect:?}, got ok={} ({})", outcome.ok, outcome.detail),
                ));
            }
            Ok(())
        }

        Step::Login { user, idp, wrong_password, wrong_totp, reuse_last_index, expect, expect_stage } => {
            let user_rc = sim.users[user].clone();
            let before = user_rc.borrow().outcomes.len();
            let reuse_index = if *reuse_last_index {
                let u = user_rc.borrow();
                let last = u.last_login_index(idp);
                drop(u);
                match last {
                    Some(i) => Some(i),
                    None => return Err(step_err(index, step, "no previous login index to reuse")),
                }
            } else {
                None
            };
            let options = LoginOptions {
                wrong_password: *wrong_password,
                wrong_totp: *wrong_totp,
                reuse_index,
            };
            user_rc
                .borrow_mut()
                .begin_login(&mut sim.bus, idp, options)
                .map_err(|e| step_err(index, step, e.to_string()))?;
            sim.bus.run_until_idle().map_err(|e| step_err(index, step, e.to_string()))?;
            let outcomes = user_rc.borrow().outcomes.clone();
            let outcome = outcomes
                .get(before)
                .ok_or_else(|| step_err(index, step, "login produced no outcome"))?;
            if outcome.ok != expect_flag(expect, true) {
                return Err(step_err(
                    index,
                    step,
                    format!("expected {expect:?}, got ok={} ({})", outcome.ok, outcome.detail),
                ));
            }
            if let Some(stage) = expect_stage {
                let want = format!("stage {stage}");
                if outcome.detail != want {
                    return Err(step_err(
                        index,
                        step,
                        format!("expected failure at {want}, got {:?}", outcome.detail),
                    ));
                }
            }
            Ok(())
        }

        Step::AdvanceClock { seconds } => {
            sim.bus.advance_clock(*seconds);
            Ok(())
        }

        Step::SpLogin { user, sp, idp, owners, use_stored, expect, expect_score, expect_reason } => {
            let user_rc = sim.users[user].clone();
            let before = user_rc.borrow().outcomes.len();
            user_rc
                .borrow_mut()
                .begin_sp_login(&mut sim.bus, sp, idp, owners, use_stored.as_deref())
                .map_err(|e| step_err(index, step, e.to_string()))?;
            sim.bus.run_until_idle().map_err(|e| step_err(index, step, e.to_string()))?;
            let outcomes = user_rc.borrow().outcomes.clone();
            if expect.as_deref() == Some("stalled") {
                // Fault scenarios may leave the flow without any decision.
                return if outcomes.len() == before {
                    Ok(())
                } else {
                    Err(step_err(index, step, "expected the flow to stall, but it completed"))
                };
            }
            let outcome = outcomes
                .get(before)
                .ok_or_else(|| step_err(index, step, "flow produced no outcome"))?;
            let want_granted = expect_flag(expect, true);
            if outcome.ok != want_granted {
                return Err(step_err(
                    index,
                    step,
                    format!(
                        "expected {}, got {} ({})",
                        if want_granted { "granted" } else { "denied" },
                        if outcome.ok { "granted" } else { "denied" },
                        outcome.detail
                    ),
                ));
            }
            if let Some(expectation) = expect_score {
                let got = outcome.scores.get(&expectation.attribute).copied().ok_or_else(|| {
                    step_err(index, step, format!("no score for {:?}", expectation.attribute))
                })?;
                if (got - expectation.value).abs() > expectation.tolerance {
                    return Err(step_err(
                        index,
                        step,
                        format!(
                            "score for {:?}: expected {} (±{}), got {}",
                            expectation.attribute, expectation.value, expectation.tolerance, got
                        ),
                    ));
                }
            }
            if let Some(reason) = expect_reason {
                if !outcome.detail.contains(reason.as_str()) {
                    return Err(step_err(
                        index,
                        step,
                        format!("expected reason containing {reason:?}, got {:?}", outcome.detail),
                    ));
                }
            }
            Ok(())
        }

        Step::StoreIdentity { user, idp, owner, expect } => {
            let user_rc = sim.users[user].clone();
            let before = user_rc.borrow().outcomes.len();
            user_rc
                .borrow_mut()
                .begin_store_identity(&mut sim.bus, idp, owner)
                .map_err(|e| step_err(index, step, e.to_string()))?;
            sim.bus.run_until_idle().map_err(|e| step_err(index, step, e.to_string()))?;
            let outcomes = user_rc.borrow().outcomes.clone();
            let outcome = outcomes
                .get(before)
                .ok_or_else(|| step_err(index, step, "store produced no outcome"))?;
            if outcome.ok != expect_flag(expect, true) {
                return Err(step_err(
                    index,
                    step,
                    format!("expected {expect:?}, got ok={} ({})", outcome.ok, outcome.detail),
                ));
            }
            Ok(())
        }

        Step::Recertify { user, owner, attribute } => {
            let user_rc = sim.users[user].clone();
            let owner_rc = sim.owners[owner].clone();
            let now = sim.bus.now();
            user_rc
                .borrow_mut()
                .recertify_with_owner(&mut owner_rc.borrow_mut(), attribute, now)
                .map_err(|e| step_err(index, step, e.to_string()))?;
            Ok(())
        }

        Step::AlterUserCopy { user, owner, attribute, value } => {
            sim.users[user]
                .borrow_mut()
                .alter_local_attribute(owner, attribute, value)
                .map_err(|e| step_err(index, step, e.to_string()))?;
            Ok(())
        }

        Step::Trace { user, expect_count } => {
            let user_rc = sim.users[user].clone();
            let user_ref = user_rc.borrow();
            let consortium = sim.consortium.borrow();
            let records =
                consortium.ledger.trace_from_access_root(user_ref.access_root(), DEFAULT_GAP_LIMIT);
            if let Some(expected) = expect_count {
                if records.len() != *expected {
                    return Err(step_err(
                        index,
                        step,
                        format!("expected {expected} traced records, found {}", records.len()),
                    ));
                }
            }
            Ok(())
        }

        Step::VerifyChain { expect } => {
            let ok = sim.consortium.borrow().ledger.verify_chain();
            if ok != expect_flag(expect, true) {
                return Err(step_err(index, step, format!("verify_chain returned {ok}")));
            }
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// Audit report
// ---------------------------------------------------------------------------

/// Build the user-facing audit report: per-user traced transactions,
/// per-owner counts, chain verification, and a privacy scan of the ledger
/// bytes and provider state dumps.
pub fn audit_report(
    ledger: &Ledger,
    users: &[(String, ExtendedPrivateKey)],
    transcript: &str,
    attribute_values: &BTreeSet<String>,
    user_secret_patterns: &[String],
    idp_states: &BTreeMap<String, String>,
    gap_limit: u32,
) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let mut writeln = |line: String| {
        let _ = std::fmt::Write::write_str(&mut out, &line);
        let _ = out.write_char('\n');
    };

    writeln("audit report".into());
    writeln(format!("channel: {}", ledger.config().channel_id));
    writeln(format!("blocks: {}", ledger.blocks().len()));
    let chain_ok = ledger.verify_chain();
    writeln(format!("chain verification: {}", if chain_ok { "OK" } else { "FAILED" }));

    let total_records = ledger.records().count();
    let mut traced_total = 0usize;
    for (user_id, root) in users {
        let records = ledger.trace_from_access_root(root, gap_limit);
        traced_total += records.len();
        let mut per_owner: BTreeMap<&str, usize> = BTreeMap::new();
        let mut data_access = 0usize;
        let mut recert = 0usize;
        for record in &records {
            *per_owner.entry(record.data_owner_id.as_str()).or_default() += 1;
            match record.payload {
                crate::ledger::TxPayload::DataAccess { .. } => data_access += 1,
                crate::ledger::TxPayload::Recertification { .. } => recert += 1,
            }
        }
        writeln(format!(
            "user {user_id}: {} transactions ({data_access} data-access, {recert} re-certification)",
            records.len()
        ));
        for (owner, count) in per_owner {
            writeln(format!("  owner {owner}: {count}"));
        }
    }
    writeln(format!(
        "ledger records: {total_records} total, {traced_total} traced to the audited users"
    ));

    // Privacy scan: attribute values and user secrets must appear nowhere in
    // the ledger bytes or any provider's persisted state.
    let mut ledger_bytes = Vec::new();
    let _ = ledger.persist(&mut ledger_bytes);
    let ledger_text = String::from_utf8_lossy(&ledger_bytes).into_owned();
    let decoded_blocks: Vec<Vec<u8>> = ledger_text
        .lines()
        .skip(1)
        .filter_map(|line| hex::decode(line).ok())
        .collect();
    let mut violations = Vec::new();
    for value in attribute_values {
        let raw = value.as_bytes();
        if decoded_blocks.iter().any(|b| contains_subslice(b, raw)) {
            violations.push(format!("attribute value {value:?} found in ledger bytes"));
        }
        for (idp, state) in idp_states {
            if state.contains(value.as_str()) {
                violations.push(format!("attribute value {value:?} found in {idp} state"));
            }
        }
    }
    for secret in user_secret_patterns {
        if ledger_text.contains(secret.as_str())
            || decoded_blocks
                .iter()
                .any(|b| hex::decode(secret).map(|raw| contains_subslice(b, &raw)).unwrap_or(false))
        {
            violations.push("user private key material found in ledger bytes".into());
        }
        for (idp, state) in idp_states {
            if state.contains(secret.as_str()) {
                violations.push(format!("user private key material found in {idp} state"));
            }
        }
    }
    if violations.is_empty() {
        writeln("privacy scan: clean".into());
    } else {
        for violation in &violations {
            writeln(format!("privacy scan VIOLATION: {violation}"));
        }
    }

    writeln(format!("transcript entries: {}", transcript.lines().count()));
    out
}

fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

// ---------------------------------------------------------------------------
// File-level entry points used by the command line
// ---------------------------------------------------------------------------

/// Run a scenario from a file path and write all artifacts under `out_dir`.
pub fn run_scenario_file(
    path: &std::path::Path,
    out_dir: &std::path::Path,
    overrides: &Overrides,
) -> Result<RunOutput, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let file = ScenarioFile::parse(&text)?;
    let output = run_scenario(&file, overrides)?;
    write_run_outputs(&output, out_dir)?;
    Ok(output)
}

/// Persist transcript, ledger, provider states, report, and the run
/// manifest (which the `report` command needs to re-trace).
pub fn write_run_outputs(output: &RunOutput, out_dir: &std::path::Path) -> Result<(), Error> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    std::fs::create_dir_all(out_dir).map_err(io)?;
    std::fs::write(out_dir.join("transcript.txt"), &output.transcript).map_err(io)?;
    std::fs::write(out_dir.join("ledger.dat"), &output.ledger_text).map_err(io)?;
    std::fs::write(out_dir.join("report.txt"), &output.report).map_err(io)?;
    for (idp, state) in &output.idp_states {
        std::fs::write(out_dir.join(format!("idp_state.{idp}.json")), state).map_err(io)?;
    }
    let manifest = RunManifest {
        schema: SCHEMA_VERSION,
        seed: output.seed,
        users: output
            .user_access_roots
            .iter()
            .map(|(id, key)| (id.clone(), key.to_base58()))
            .collect(),
        attribute_values: output.attribute_values.iter().cloned().collect(),
        user_secret_patterns: output.user_secret_patterns.clone(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), manifest_json).map_err(io)?;
    Ok(())
}

/// The run directory's machine-readable summary. It lives on the user's
/// side of the trust boundary: it contains the user's own root keys so the
/// audit tooling can trace their transactions later.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub seed: u64,
    pub users: BTreeMap<String, String>,
    pub attribute_values: Vec<String>,
    pub user_secret_patterns: Vec<String>,
}

/// Rebuild the audit report from a run directory.
pub fn report_from_run_dir(run_dir: &std::path::Path) -> Result<String, Error> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    let manifest_text = std::fs::read_to_string(run_dir.join("manifest.json")).map_err(io)?;
    let manifest: RunManifest =
        serde_json::from_str(&manifest_text).map_err(|e| Error::Parse(e.to_string()))?;
    let ledger_text = std::fs::read_to_string(run_dir.join("ledger.dat")).map_err(io)?;
    let ledger = Ledger::load(&mut ledger_text.as_bytes())
        .map_err(|e| Error::Parse(e.to_string()))?;
    let transcript = std::fs::read_to_string(run_dir.join("transcript.txt")).map_err(io)?;

    let mut users = Vec::new();
    for (id, xprv) in &manifest.users {
        let key = ExtendedPrivateKey::from_base58(xprv)
            .map_err(|e| Error::Parse(format!("manifest user {id:?}: {e}")))?;
        users.push((id.clone(), key));
    }
    let mut idp_states = BTreeMap::new();
    for entry in std::fs::read_dir(run_dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(idp) = name.strip_prefix("idp_state.").and_then(|n| n.strip_suffix(".json")) {
            let state = std::fs::read_to_string(entry.path()).map_err(io)?;
            idp_states.insert(idp.to_string(), state);
        }
    }
    Ok(audit_report(
        &ledger,
        &users,
        &transcript,
        &manifest.attribute_values.iter().cloned().collect(),
        &manifest.user_secret_patterns,
        &idp_states,
        DEFAULT_GAP_LIMIT,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAPPY_PATH: &str = include_str!("../scenarios/happy_path.toml");

    #[test]
    fn bundled_scenarios_parse() {
        for text in [
            HAPPY_PATH,
            include_str!("../scenarios/social_denied.toml"),
            include_str!("../scenarios/stored_identity.toml"),
            include_str!("../scenarios/owner_offline_block.toml"),
            include_str!("../scenarios/owner_offline_degrade.toml"),
            include_str!("../scenarios/tampered_envelope.toml"),
            include_str!("../scenarios/login_failures.toml"),
            include_str!("../scenarios/mismatch.toml"),
            include_str!("../scenarios/multiuser.toml"),
            include_str!("../scenarios/idp_ignorance.toml"),
        ] {
            ScenarioFile::parse(text).unwrap();
        }
    }

    #[test]
    fn malformed_toml_reports_the_line() {
        let text = "schema = 1\nseed = 42\nthis is not toml";
        let err = ScenarioFile::parse(text).unwrap_err();
        match err {
            Error::Parse(message) => assert!(message.contains("line"), "message: {message}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_schema_version_is_a_parse_error() {
        let text = HAPPY_PATH.replacen("schema = 1", "schema = 9", 1);
        assert!(matches!(ScenarioFile::parse(&text).unwrap_err(), Error::Parse(_)));
    }

    #[test]
    fn duplicate_actor_id_rejected() {
        let text = HAPPY_PATH.replacen("id = \"idp-1\"", "id = \"dmv\"", 1);
        assert!(matches!(ScenarioFile::parse(&text).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn reserved_comm_id_rejected() {
        let text = HAPPY_PATH.replacen("id = \"idp-1\"", "id = \"comm\"", 1);
        assert!(matches!(ScenarioFile::parse(&text).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn unknown_step_reference_names_the_step() {
        let text = HAPPY_PATH.replace("owner = \"dmv\"", "owner = \"nobody\"");
        match ScenarioFile::parse(&text).unwrap_err() {
            Error::Step { index, kind, message } => {
                assert_eq!(index, 0);
                assert_eq!(kind, "register");
                assert!(message.contains("nobody"));
            }
            other => panic!("expected step error, got {other:?}"),
        }
    }

    #[test]
    fn bad_seed_hex_rejected() {
        let text = HAPPY_PATH.replacen(
            "seed_hex = \"000102030405060708090a0b0c0d0e0f\"",
            "seed_hex = \"abcd\"",
            1,
        );
        assert!(matches!(ScenarioFile::parse(&text).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn failed_expectation_names_the_step() {
        // Claim a grant the trust formula denies: social weight 0.5 cannot
        // clear the 0.9 threshold.
        let text = include_str!("../scenarios/social_denied.toml")
            .replacen("expect = \"denied\"", "expect = \"granted\"", 1);
        let file = ScenarioFile::parse(&text).unwrap();
        let output = run_scenario(&file, &Overrides::default()).unwrap();
        match output.exit {
            RunExit::StepFailure { index, kind, .. } => {
                assert_eq!(kind, "sp_login");
                assert_eq!(index, 3);
            }
            RunExit::Success => panic!("expected a step failure"),
        }
    }

    #[test]
    fn mode_override_changes_keys_but_not_outcomes() {
        let file = ScenarioFile::parse(HAPPY_PATH).unwrap();
        let multiplicative = run_scenario(&file, &Overrides::default()).unwrap();
        let additive = run_scenario(
            &file,
            &Overrides { mode: Some(DerivationMode::Additive), ..Default::default() },
        )
        .unwrap();
        assert_eq!(additive.exit, RunExit::Success);
        assert_ne!(multiplicative.ledger_text, additive.ledger_text);
    }

    #[test]
    fn paper_literal_login_mode_still_logs_in() {
        let file = ScenarioFile::parse(HAPPY_PATH).unwrap();
        let output = run_scenario(
            &file,
            &Overrides { paper_literal_login: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(output.exit, RunExit::Success, "transcript:\n{}", output.transcript);
    }

    #[test]
    fn paper_literal_mode_keeps_the_replay_guard() {
        // The same failure ladder (replayed index, wrong TOTP, wrong
        // password) holds when the third factor is plain key comparison.
        let file =
            ScenarioFile::parse(include_str!("../scenarios/login_failures.toml")).unwrap();
        let output = run_scenario(
            &file,
            &Overrides { paper_literal_login: true, ..Default::default() },
        )
        .unwrap();
        assert_eq!(output.exit, RunExit::Success, "transcript:\n{}", output.transcript);
    }

    #[test]
    fn consent_referencing_unknown_owner_rejected() {
        let text = HAPPY_PATH.replacen("owners = [\"dmv\"]", "owners = [\"ghost\"]", 1);
        assert!(matches!(ScenarioFile::parse(&text).unwrap_err(), Error::Validation(_)));
    }

    #[test]
    fn misspelled_expectation_rejected_at_parse() {
        let text = HAPPY_PATH.replacen("expect = \"granted\"", "expect = \"grnted\"", 1);
        match ScenarioFile::parse(&text).unwrap_err() {
            Error::Step { kind, message, .. } => {
                assert_eq!(kind, "sp_login");
                assert!(message.contains("grnted"));
            }
            other => panic!("expected step error, got {other:?}"),
        }
    }

    #[test]
    fn report_round_trips_through_a_run_directory() {
        let dir = std::env::temp_dir().join(format!("fedid-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let file = ScenarioFile::parse(HAPPY_PATH).unwrap();
        let output = run_scenario(&file, &Overrides::default()).unwrap();
        write_run_outputs(&output, &dir).unwrap();
        let rebuilt = report_from_run_dir(&dir).unwrap();
        assert_eq!(rebuilt, output.report);
        assert!(rebuilt.contains("privacy scan: clean"));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn report_flags_a_tampered_ledger() {
        let dir = std::env::temp_dir().join(format!("fedid-tamper-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let file = ScenarioFile::parse(HAPPY_PATH).unwrap();
        let output = run_scenario(&file, &Overrides::default()).unwrap();
        write_run_outputs(&output, &dir).unwrap();

        // Flip hex characters in the final block line until we find one
        // where the file still parses; the chain check must then fail.
        let path = dir.join("ledger.dat");
        let pristine = std::fs::read_to_string(&path).unwrap();
        let mut flagged = false;
        for position in pristine.len() / 2..pristine.len() {
            let mut bytes = pristine.clone().into_bytes();
            if bytes[position] == b'\n' {
                continue;
            }
            bytes[position] ^= 0x01;
            std::fs::write(&path, &bytes).unwrap();
            match report_from_run_dir(&dir) {
                Ok(report) => {
                    assert!(
                        report.contains("chain verification: FAILED"),
                        "tampered ledger parsed but was not flagged:\n{report}"
                    );
                    flagged = true;
                    break;
                }
                Err(Error::Parse(_)) => continue,
                Err(other) => panic!("unexpected error: {other:?}"),
            }
        }
        assert!(flagged, "no parse-surviving mutation found to exercise the FAILED path");
        let _ = std::fs::remove_dir_all(&dir);
    }
}
