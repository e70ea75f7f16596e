//! Permissioned, hash-chained ledger replicated across in-process nodes.
//!
//! Blocks are proposed round-robin and every node re-validates and
//! re-executes them (order-then-execute). The world state is a pure function
//! of the block sequence.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::contract::{self, BidRecord, CfpId, CfpRecord, CfpTarget, ContractError, ContractEvent, ContractParams};
use crate::grid::{BusId, SensitivityMatrix};

pub const DEFAULT_BLOCK_MAX: usize = 128;
pub const DEFAULT_FUNDING: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(&s).map_err(serde::de::Error::custom)
    }
}

/// 32-byte SHA-256 digest, hex encoded on the wire.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash32(pub [u8; 32]);

impl fmt::Debug for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl fmt::Display for Hash32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", hex::encode(self.0))
    }
}

impl Serialize for Hash32 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Hash32 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Hash32(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub public_key: Vec<u8>,
    pub secret_key: Vec<u8>,
}

/// Digital-signature backend used for transactions and zone claims.
pub trait SignatureScheme: Send + Sync {
    fn keypair_from_seed(&self, seed: [u8; 32]) -> KeyPair;
    fn sign(&self, secret_key: &[u8], msg: &[u8]) -> Vec<u8>;
    fn verify(&self, public_key: &[u8], msg: &[u8], signature: &[u8]) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    fn keypair_from_seed(&self, seed: [u8; 32]) -> KeyPair {
        let sk = SigningKey::from_bytes(&seed);
        KeyPair { public_key: sk.verifying_key().to_bytes().to_vec(), secret_key: seed.to_vec() }
    }

    fn sign(&self, secret_key: &[u8], msg: &[u8]) -> Vec<u8> {
        let seed: [u8; 32] = secret_key.try_into().expect("ed25519 secret keys are 32 bytes");
        SigningKey::from_bytes(&seed).sign(msg).to_bytes().to_vec()
    }

    fn verify(&self, public_key: &[u8], msg: &[u8], signature: &[u8]) -> bool {
        let Ok(pk) = <[u8; 32]>::try_from(public_key) else { return false };
        let Ok(vk) = VerifyingKey::from_bytes(&pk) else { return false };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else { return false };
        vk.verify(msg, &sig).is_ok()
    }
}

/// Keyed-digest stand-in for tests that sign thousands of transactions.
/// The public key equals the secret, so it proves nothing about authorship.
#[derive(Debug, Clone, Copy, Default)]
pub struct KeyedDigest;

impl SignatureScheme for KeyedDigest {
    fn keypair_from_seed(&self, seed: [u8; 32]) -> KeyPair {
        KeyPair { public_key: seed.to_vec(), secret_key: seed.to_vec() }
    }

    fn sign(&self, secret_key: &[u8], msg: &[u8]) -> Vec<u8> {
        Sha256::new().chain_update(secret_key).chain_update(msg).finalize().to_vec()
    }

    fn verify(&self, public_key: &[u8], msg: &[u8], signature: &[u8]) -> bool {
        self.sign(public_key, msg) == signature
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterReading {
    pub bus: BusId,
    pub v: f64,
    pub p: f64,
    pub q: f64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TxPayload {
    AccountInit {
        zone: AgentId,
        #[serde(with = "hex_bytes")]
        public_key: Vec<u8>,
        #[serde(with = "hex_bytes")]
        zone_signature: Vec<u8>,
        funding: f64,
    },
    MeterReading(MeterReading),
    CreateCfp {
        targets: Vec<CfpTarget>,
        expiry_step: u64,
        reserve_price: Option<f64>,
        parent: Option<CfpId>,
    },
    ReplyCfp {
        cfp_id: CfpId,
        price: f64,
        actuator_bus: BusId,
    },
    SensitivityPublish(SensitivityMatrix),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionEnvelope {
    pub tx_id: String,
    pub agent_id: AgentId,
    pub payload: TxPayload,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
    pub submitted_step: u64,
}

#[derive(Serialize)]
struct SigningView<'a> {
    tx_id: &'a str,
    agent_id: AgentId,
    payload: &'a TxPayload,
    submitted_step: u64,
}

pub fn tx_id_for(agent: AgentId, seq: u64) -> String {
    format!("A{}-{:08}", agent.0, seq)
}

fn parse_tx_seq(tx_id: &str, agent: AgentId) -> Option<u64> {
    let rest = tx_id.strip_prefix(&format!("A{}-", agent.0))?;
    if rest.len() != 8 || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rest.parse().ok()
}

impl TransactionEnvelope {
    pub fn signing_bytes(tx_id: &str, agent_id: AgentId, payload: &TxPayload, submitted_step: u64) -> Vec<u8> {
        serde_json::to_vec(&SigningView { tx_id, agent_id, payload, submitted_step }).expect("payload serializes")
    }

    pub fn signed(
        scheme: &dyn SignatureScheme,
        keys: &KeyPair,
        agent_id: AgentId,
        seq: u64,
        payload: TxPayload,
        submitted_step: u64,
    ) -> Self {
        let tx_id = tx_id_for(agent_id, seq);
        let msg = Self::signing_bytes(&tx_id, agent_id, &payload, submitted_step);
        let signature = scheme.sign(&keys.secret_key, &msg);
        Self { tx_id, agent_id, payload, signature, submitted_step }
    }

    pub fn verify_with(&self, scheme: &dyn SignatureScheme, public_key: &[u8]) -> bool {
        let msg = Self::signing_bytes(&self.tx_id, self.agent_id, &self.payload, self.submitted_step);
        scheme.verify(public_key, &msg, &self.signature)
    }

    fn order_key(&self) -> (AgentId, &str) {
        (self.agent_id, &self.tx_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Hash32,
    pub timestamp: u64,
    pub txs: Vec<TransactionEnvelope>,
    pub block_hash: Hash32,
}

impl Block {
    pub fn compute_hash(index: u64, prev_hash: &Hash32, timestamp: u64, txs: &[TransactionEnvelope]) -> Hash32 {
        let body = serde_json::to_vec(txs).expect("transactions serialize");
        let digest = Sha256::new()
            .chain_update(index.to_be_bytes())
            .chain_update(prev_hash.0)
            .chain_update(timestamp.to_be_bytes())
            .chain_update(body)
            .finalize();
        Hash32(digest.into())
    }

    pub fn new(index: u64, prev_hash: Hash32, timestamp: u64, txs: Vec<TransactionEnvelope>) -> Self {
        let block_hash = Self::compute_hash(index, &prev_hash, timestamp, &txs);
        Self { index, prev_hash, timestamp, txs, block_hash }
    }

    pub fn hash_is_valid(&self) -> bool {
        Self::compute_hash(self.index, &self.prev_hash, self.timestamp, &self.txs) == self.block_hash
    }

    /// Canonical one-line serialization used by `chain.log`.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("block serializes")
    }
}

pub fn write_chain_log(chain: &[Block]) -> String {
    let mut out = String::new();
    for block in chain {
        out.push_str(&block.to_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {reason}")]
pub struct ChainLogError {
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

/// Parses one canonical block line; anything that does not re-serialize to the
/// same bytes is rejected.
pub fn parse_block_line(line: &str) -> Result<Block, String> {
    let block: Block = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if block.to_line() != line {
        return Err("not in canonical form".into());
    }
    Ok(block)
}

pub fn parse_chain_log(text: &str) -> Result<Vec<Block>, ChainLogError> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let Some(body) = text.strip_suffix('\n') else {
        let line = text.matches('\n').count() + 1;
        return Err(ChainLogError { line, reason: "missing trailing newline (truncated?)".into() });
    };
    body.split('\n')
        .enumerate()
        .map(|(i, line)| parse_block_line(line).map_err(|reason| ChainLogError { line: i + 1, reason }))
        .collect()
}

/// Recomputes every hash and link. Returns the first index that fails.
pub fn verify_chain(chain: &[Block]) -> Result<(), usize> {
    let mut prev: Option<&Block> = None;
    for (k, block) in chain.iter().enumerate() {
        let expected_prev = prev.map_or(Hash32::default(), |b| b.block_hash);
        let ordered = block.txs.windows(2).all(|w| w[0].order_key() < w[1].order_key());
        let clock_ok = prev.is_none_or(|b| block.timestamp >= b.timestamp);
        if block.index != k as u64
            || block.prev_hash != expected_prev
            || !block.hash_is_valid()
            || !ordered
            || !clock_ok
        {
            return Err(k);
        }
        prev = Some(block);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    #[serde(with = "hex_bytes")]
    pub public_key: Vec<u8>,
    pub balance: f64,
    pub reputation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterRecord {
    pub agent: AgentId,
    pub reading: MeterReading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub block: u64,
    pub event: ContractEvent,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldState {
    pub accounts: BTreeMap<AgentId, Account>,
    pub latest_measurements: BTreeMap<BusId, MeterRecord>,
    /// Latest reading per agent and bus; enforcement baselines come from here.
    pub device_meters: BTreeMap<AgentId, BTreeMap<BusId, MeterReading>>,
    pub sensitivity: Option<SensitivityMatrix>,
    pub contracts: contract::ContractBook,
    pub receipts: Vec<Receipt>,
    /// Highest committed transaction sequence number per agent.
    pub last_seq: BTreeMap<AgentId, u64>,
    pub height: u64,
    pub clock: u64,
}

impl WorldState {
    pub fn digest(&self) -> Hash32 {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        Hash32(Sha256::digest(bytes).into())
    }

    pub fn total_balance(&self) -> f64 {
        self.accounts.values().map(|a| a.balance).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("agent {0} is already registered")]
    DuplicateAgent(AgentId),
    #[error("registration is only possible before genesis")]
    RegistrationClosed,
    #[error("signature does not verify")]
    BadSignature,
    #[error("agent {0} is not registered")]
    UnknownAgent(AgentId),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
    #[error("node {node} is not the proposer for step {step}")]
    NotProposer { node: usize, step: u64 },
    #[error("block {index}: hash mismatch")]
    HashMismatch { index: u64 },
    #[error("block {index}: stale or out-of-order (expected {expected})")]
    StaleBlock { index: u64, expected: u64 },
    #[error("block {index}: invalid transaction {tx_id}: {reason}")]
    InvalidTx { index: u64, tx_id: String, reason: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
}

/// Invitation issued at genesis configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub public_key: Vec<u8>,
    pub funding: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerConfig {
    pub block_max: usize,
    pub n_nodes: usize,
    pub contract: ContractParams,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        Self { block_max: DEFAULT_BLOCK_MAX, n_nodes: 1, contract: ContractParams::default() }
    }
}

/// Everything block execution needs besides the state itself.
pub struct ExecContext<'a> {
    pub scheme: &'a dyn SignatureScheme,
    pub params: &'a ContractParams,
    /// Invited members; `None` trusts the genesis block as written (audit replay).
    pub members: Option<&'a BTreeMap<AgentId, Member>>,
}

fn invalid(e: ContractError) -> LedgerError {
    LedgerError::InvalidPayload(e.to_string())
}

/// Structural checks that make a transaction unfit for any block.
fn check_envelope(state: &WorldState, tx: &TransactionEnvelope, ctx: &ExecContext) -> Result<(), LedgerError> {
    let Some(seq) = parse_tx_seq(&tx.tx_id, tx.agent_id) else {
        return Err(LedgerError::InvalidPayload(format!("malformed tx id {}", tx.tx_id)));
    };
    if state.last_seq.get(&tx.agent_id).is_some_and(|&last| seq <= last) {
        return Err(LedgerError::InvalidPayload(format!("replayed tx id {}", tx.tx_id)));
    }
    match &tx.payload {
        TxPayload::AccountInit { zone, public_key, zone_signature, funding } => {
            if state.height > 0 {
                return Err(LedgerError::InvalidPayload("accounts are created only in the genesis block".into()));
            }
            if *zone != tx.agent_id {
                return Err(LedgerError::InvalidPayload("zone differs from signer".into()));
            }
            if let Some(members) = ctx.members {
                let m = members.get(zone).ok_or(LedgerError::UnknownAgent(*zone))?;
                if &m.public_key != public_key || m.funding != *funding {
                    return Err(LedgerError::InvalidPayload("account does not match invitation".into()));
                }
            }
            if state.accounts.contains_key(zone) {
                return Err(LedgerError::DuplicateAgent(*zone));
            }
            if !tx.verify_with(ctx.scheme, public_key)
                || !ctx.scheme.verify(public_key, &contract::zone_claim_message(*zone), zone_signature)
            {
                return Err(LedgerError::BadSignature);
            }
        }
        _ => {
            let acct = state.accounts.get(&tx.agent_id).ok_or(LedgerError::UnknownAgent(tx.agent_id))?;
            if !tx.verify_with(ctx.scheme, &acct.public_key) {
                return Err(LedgerError::BadSignature);
            }
        }
    }
    Ok(())
}

/// Static payload validation against committed state, used at submission.
fn check_payload(state: &WorldState, tx: &TransactionEnvelope, now: u64) -> Result<(), LedgerError> {
    match &tx.payload {
        TxPayload::AccountInit { .. } => Ok(()),
        TxPayload::MeterReading(r) => {
            if [r.v, r.p, r.q].iter().all(|x| x.is_finite()) {
                Ok(())
            } else {
                Err(LedgerError::InvalidPayload("non-finite meter reading".into()))
            }
        }
        TxPayload::CreateCfp { targets, expiry_step, reserve_price, .. } => {
            contract::check_create_cfp(state, tx.agent_id, targets, *expiry_step, *reserve_price, now).map_err(invalid)
        }
        TxPayload::ReplyCfp { cfp_id, price, actuator_bus } => {
            let bid = BidRecord {
                cfp_id: *cfp_id,
                responder: tx.agent_id,
                price: *price,
                bid_step: now,
                actuator_bus: *actuator_bus,
            };
            contract::check_reply_cfp(state, &bid).map_err(invalid)
        }
        TxPayload::SensitivityPublish(m) => {
            let n = m.buses.len();
            let square = m.sp.len() == n && m.sq.len() == n && m.sp.iter().chain(&m.sq).all(|row| row.len() == n);
            let sorted = m.buses.windows(2).all(|w| w[0] < w[1]);
            let finite = m.sp.iter().chain(&m.sq).flatten().all(|x| x.is_finite());
            if square && sorted && finite {
                Ok(())
            } else {
                Err(LedgerError::InvalidPayload("malformed sensitivity matrix".into()))
            }
        }
    }
}

/// Runs one transaction. Contract-level refusals become receipts; structural
/// faults are returned as errors and invalidate the block.
fn execute_tx(
    state: &mut WorldState,
    tx: &TransactionEnvelope,
    now: u64,
    ctx: &ExecContext,
) -> Result<ContractEvent, LedgerError> {
    check_envelope(state, tx, ctx)?;
    let seq = parse_tx_seq(&tx.tx_id, tx.agent_id).expect("checked");
    state.last_seq.insert(tx.agent_id, seq);
    let agent = tx.agent_id;
    let result = match &tx.payload {
        TxPayload::AccountInit { zone, public_key, zone_signature, funding } => {
            contract::init_account(state, ctx.scheme, *zone, public_key, zone_signature, *funding)
                .map(|(agent, balance)| ContractEvent::AccountOpened { agent, balance })
        }
        TxPayload::MeterReading(r) => {
            if check_payload(state, tx, now).is_err() {
                Err(ContractError::InvalidValue("meter reading".into()))
            } else {
                contract::record_meter(state, agent, r, now);
                return Ok(ContractEvent::MeterAccepted);
            }
        }
        TxPayload::CreateCfp { targets, expiry_step, reserve_price, parent } => {
            contract::create_cfp(state, agent, targets.clone(), *expiry_step, *reserve_price, *parent, now)
                .map(|cfp_id| ContractEvent::CfpCreated { cfp_id, initiator: agent })
        }
        TxPayload::ReplyCfp { cfp_id, price, actuator_bus } => {
            let bid = BidRecord {
                cfp_id: *cfp_id,
                responder: agent,
                price: *price,
                bid_step: now,
                actuator_bus: *actuator_bus,
            };
            contract::reply_cfp(state, bid).map(|()| ContractEvent::BidAccepted {
                cfp_id: *cfp_id,
                responder: agent,
                price: *price,
            })
        }
        TxPayload::SensitivityPublish(m) => {
            if check_payload(state, tx, now).is_err() {
                Err(ContractError::InvalidValue("sensitivity matrix".into()))
            } else {
                state.sensitivity = Some(m.clone());
                return Ok(ContractEvent::SensitivityPublished);
            }
        }
    };
    Ok(result.unwrap_or_else(|reason| ContractEvent::Rejected { tx_id: tx.tx_id.clone(), reason }))
}

/// Applies a block's transactions and then the contract's due assignments and
/// enforcements at the block's clock.
pub fn execute_block(state: &mut WorldState, block: &Block, ctx: &ExecContext) -> Result<(), LedgerError> {
    for tx in &block.txs {
        let event = execute_tx(state, tx, block.timestamp, ctx).map_err(|e| LedgerError::InvalidTx {
            index: block.index,
            tx_id: tx.tx_id.clone(),
            reason: e.to_string(),
        })?;
        if !matches!(event, ContractEvent::MeterAccepted) {
            state.receipts.push(Receipt { block: block.index, event });
        }
    }
    if block.index > 0 {
        for event in contract::run_due(state, block.timestamp, ctx.params) {
            state.receipts.push(Receipt { block: block.index, event });
        }
    }
    state.height = block.index + 1;
    state.clock = block.timestamp;
    Ok(())
}

/// Re-executes a verified chain from an empty state, reporting the state after
/// every block.
pub fn replay_chain(
    chain: &[Block],
    scheme: &dyn SignatureScheme,
    params: &ContractParams,
    mut on_block: impl FnMut(&Block, &WorldState),
) -> Result<WorldState, LedgerError> {
    if let Err(k) = verify_chain(chain) {
        return Err(LedgerError::HashMismatch { index: k as u64 });
    }
    let ctx = ExecContext { scheme, params, members: None };
    let mut state = WorldState::default();
    for block in chain {
        execute_block(&mut state, block, &ctx)?;
        on_block(block, &state);
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StateKey {
    Account(AgentId),
    Reputation(AgentId),
    Wallet(AgentId),
    Contract(CfpId),
    LatestMeasurement(BusId),
    Sensitivity,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateValue {
    Account(Account),
    Reputation(f64),
    Wallet(f64),
    Contract(Box<CfpRecord>),
    LatestMeasurement(MeterRecord),
    Sensitivity(SensitivityMatrix),
}

pub struct LedgerNode {
    pub node_id: usize,
    pub config: LedgerConfig,
    members: BTreeMap<AgentId, Member>,
    chain: Vec<Block>,
    state: WorldState,
    mempool: Vec<TransactionEnvelope>,
    scheme: Box<dyn SignatureScheme>,
}

impl LedgerNode {
    pub fn new(node_id: usize, config: LedgerConfig, scheme: Box<dyn SignatureScheme>) -> Self {
        Self {
            node_id,
            config,
            members: BTreeMap::new(),
            chain: Vec::new(),
            state: WorldState::default(),
            mempool: Vec::new(),
            scheme,
        }
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    pub fn scheme(&self) -> &dyn SignatureScheme {
        self.scheme.as_ref()
    }

    /// Invites an agent. Only possible while the chain is empty.
    pub fn register_agent(&mut self, agent: AgentId, public_key: Vec<u8>, funding: f64) -> Result<(), LedgerError> {
        if !self.chain.is_empty() {
            return Err(LedgerError::RegistrationClosed);
        }
        if self.members.contains_key(&agent) {
            return Err(LedgerError::DuplicateAgent(agent));
        }
        self.members.insert(agent, Member { public_key, funding });
        Ok(())
    }

    fn ctx(&self) -> ExecContext<'_> {
        ExecContext { scheme: self.scheme.as_ref(), params: &self.config.contract, members: Some(&self.members) }
    }

    pub fn submit_transaction(&mut self, tx: TransactionEnvelope) -> Result<(), LedgerError> {
        if self.mempool.iter().any(|p| p.tx_id == tx.tx_id) {
            return Err(LedgerError::InvalidPayload(format!("duplicate tx id {}", tx.tx_id)));
        }
        let ctx = self.ctx();
        if let TxPayload::AccountInit { .. } = tx.payload {
            if !self.chain.is_empty() {
                return Err(LedgerError::RegistrationClosed);
            }
        }
        check_envelope(&self.state, &tx, &ctx)?;
        check_payload(&self.state, &tx, tx.submitted_step)?;
        self.mempool.push(tx);
        Ok(())
    }

    pub fn proposer_for(&self, step: u64) -> usize {
        (step % self.config.n_nodes.max(1) as u64) as usize
    }

    /// Seals the next block from the mempool. The genesis block is sealed by
    /// node 0; afterwards proposers rotate with the step.
    pub fn seal_block(&mut self, step: u64) -> Result<Block, LedgerError> {
        let expected = if self.chain.is_empty() { 0 } else { self.proposer_for(step) };
        if self.node_id != expected {
            return Err(LedgerError::NotProposer { node: self.node_id, step });
        }
        self.mempool.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        let index = self.chain.len() as u64;
        let prev_hash = self.chain.last().map_or(Hash32::default(), |b| b.block_hash);

        // Leave out anything that would make the block invalid.
        let mut scratch = self.state.clone();
        let mut txs = Vec::new();
        let ctx = self.ctx();
        for tx in &self.mempool {
            if txs.len() == self.config.block_max {
                break;
            }
            if execute_tx(&mut scratch, tx, step, &ctx).is_ok() {
                txs.push(tx.clone());
            }
        }
        let block = Block::new(index, prev_hash, step, txs);
        self.apply_block(&block)?;
        Ok(block)
    }

    pub fn apply_block(&mut self, block: &Block) -> Result<(), LedgerError> {
        let expected = self.chain.len() as u64;
        if block.index != expected {
            return Err(LedgerError::StaleBlock { index: block.index, expected });
        }
        let tip = self.chain.last();
        if block.prev_hash != tip.map_or(Hash32::default(), |b| b.block_hash) || !block.hash_is_valid() {
            return Err(LedgerError::HashMismatch { index: block.index });
        }
        let structural =
            |reason: &str| LedgerError::InvalidTx { index: block.index, tx_id: String::new(), reason: reason.into() };
        if tip.is_some_and(|b| block.timestamp < b.timestamp) {
            return Err(structural("clock went backwards"));
        }
        if block.txs.len() > self.config.block_max {
            return Err(structural("block exceeds the size cap"));
        }
        if !block.txs.windows(2).all(|w| w[0].order_key() < w[1].order_key()) {
            return Err(structural("transactions out of canonical order"));
        }
        let mut next = self.state.clone();
        execute_block(&mut next, block, &self.ctx())?;
        self.state = next;
        self.chain.push(block.clone());
        self.mempool.retain(|p| !block.txs.iter().any(|t| t.tx_id == p.tx_id));
        Ok(())
    }

    pub fn query_state(&self, key: &StateKey) -> Result<StateValue, LedgerError> {
        let account =
            |a: &AgentId| self.state.accounts.get(a).ok_or_else(|| LedgerError::UnknownKey(format!("{key:?}")));
        Ok(match key {
            StateKey::Account(a) => StateValue::Account(account(a)?.clone()),
            StateKey::Reputation(a) => StateValue::Reputation(account(a)?.reputation),
            StateKey::Wallet(a) => StateValue::Wallet(account(a)?.balance),
            StateKey::Contract(id) => StateValue::Contract(Box::new(
                self.state
                    .contracts
                    .cfps
                    .get(id)
                    .cloned()
                    .ok_or_else(|| LedgerError::UnknownKey(format!("{key:?}")))?,
            )),
            StateKey::LatestMeasurement(bus) => StateValue::LatestMeasurement(
                self.state
                    .latest_measurements
                    .get(bus)
                    .cloned()
                    .ok_or_else(|| LedgerError::UnknownKey(format!("{key:?}")))?,
            ),
            StateKey::Sensitivity => StateValue::Sensitivity(
                self.state.sensitivity.clone().ok_or_else(|| LedgerError::UnknownKey(format!("{key:?}")))?,
            ),
        })
    }
}

/// Builds a zone's genesis account transaction.
pub fn account_init_tx(
    scheme: &dyn SignatureScheme,
    keys: &KeyPair,
    agent: AgentId,
    funding: f64,
) -> TransactionEnvelope {
    let zone_signature = scheme.sign(&keys.secret_key, &contract::zone_claim_message(agent));
    let payload = TxPayload::AccountInit { zone: agent, public_key: keys.public_key.clone(), zone_signature, funding };
    TransactionEnvelope::signed(scheme, keys, agent, 0, payload, 0)
}
