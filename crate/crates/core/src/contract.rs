//! The voltage-service smart contract.
//!
//! A call for proposals (CFP) moves through
//! `Open -> BiddingClosed -> Assigned -> EnforcedSuccess | EnforcedFailure`.
//! A CFP that closes without an acceptable bid goes straight from
//! `BiddingClosed` to `EnforcedFailure`. Every transition is a pure function of
//! the world state and the block clock, so all replicas agree on the outcome.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{decide_local_or_market, MitigationChoice};
use crate::grid::{BusId, SensitivityMatrix};
use crate::ledger::{Account, AgentId, MeterReading, SignatureScheme, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CfpId(pub u64);

impl fmt::Display for CfpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CfpState {
    Open,
    BiddingClosed,
    Assigned,
    EnforcedSuccess,
    EnforcedFailure,
}

impl CfpState {
    pub fn is_terminal(self) -> bool {
        matches!(self, CfpState::EnforcedSuccess | CfpState::EnforcedFailure)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CfpState::Open => "Open",
            CfpState::BiddingClosed => "BiddingClosed",
            CfpState::Assigned => "Assigned",
            CfpState::EnforcedSuccess => "EnforcedSuccess",
            CfpState::EnforcedFailure => "EnforcedFailure",
        }
    }
}

/// The declared lifecycle relation.
pub fn is_legal_transition(from: CfpState, to: CfpState) -> bool {
    use CfpState::*;
    matches!(
        (from, to),
        (Open, BiddingClosed)
            | (BiddingClosed, Assigned)
            | (BiddingClosed, EnforcedFailure)
            | (Assigned, EnforcedSuccess)
            | (Assigned, EnforcedFailure)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BidWeighting {
    /// `price / max(G, g_floor)`: a low rating makes a bid look dearer.
    Divide,
    /// `price * G`, the literal weighting.
    Multiply,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractParams {
    pub gamma_success: f64,
    pub gamma_fail: f64,
    pub tol_abs: f64,
    pub weighting: BidWeighting,
    pub g_floor: f64,
    /// Steps between assignment and enforcement.
    pub enforcement_window: u64,
    /// Bidding window of a CFP reissued after a failed enforcement.
    pub rebid_window: u64,
}

impl Default for ContractParams {
    fn default() -> Self {
        Self {
            gamma_success: 1.0,
            gamma_fail: -10.0,
            tol_abs: 0.0005,
            weighting: BidWeighting::Divide,
            g_floor: 0.1,
            enforcement_window: 12,
            rebid_window: 3,
        }
    }
}

impl ContractParams {
    pub fn effective_price(&self, price: f64, reputation: f64) -> f64 {
        match self.weighting {
            BidWeighting::Divide => price / reputation.max(self.g_floor),
            BidWeighting::Multiply => price * reputation,
        }
    }
}

/// The voltage change requested from one responder at its shared coupling bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfpTarget {
    pub responder: AgentId,
    pub pzc_bus: BusId,
    pub dv_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidRecord {
    pub cfp_id: CfpId,
    pub responder: AgentId,
    pub price: f64,
    pub bid_step: u64,
    /// Bus of the device the responder will move; enforcement audits it.
    pub actuator_bus: BusId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceContract {
    pub cfp_id: CfpId,
    pub winner: AgentId,
    pub price: f64,
    pub effective_price: f64,
    pub pzc_bus: BusId,
    pub actuator_bus: BusId,
    pub dv_target: f64,
    pub assigned_step: u64,
    pub enforce_deadline_step: u64,
    /// DEC flag per bidder: 1 for the winner, 0 for every other bidder.
    pub decisions: BTreeMap<AgentId, u8>,
    /// Winner's last metered `(p, q)` at the actuator bus before assignment.
    pub baseline: Option<(f64, f64)>,
    /// Last metered `(p, q)` per step inside the enforcement window.
    pub deliveries: BTreeMap<u64, (f64, f64)>,
    pub dv_achieved: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateChange {
    pub step: u64,
    pub state: CfpState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfpRecord {
    pub cfp_id: CfpId,
    pub initiator: AgentId,
    pub targets: Vec<CfpTarget>,
    pub created_step: u64,
    pub expiry_step: u64,
    /// Initiator's own mitigation cost; an award needs a cheaper weighted bid.
    pub reserve_price: Option<f64>,
    /// Upstream CFP when this one is a subcontract.
    pub parent: Option<CfpId>,
    /// CFP whose failed enforcement produced this one.
    pub reissue_of: Option<CfpId>,
    pub state: CfpState,
    pub history: Vec<StateChange>,
    pub bids: Vec<BidRecord>,
    pub contract: Option<ServiceContract>,
    pub no_award: Option<NoAwardReason>,
}

impl CfpRecord {
    pub fn target_for(&self, agent: AgentId) -> Option<&CfpTarget> {
        self.targets.iter().find(|t| t.responder == agent)
    }

    fn transition(&mut self, to: CfpState, step: u64) {
        debug_assert!(is_legal_transition(self.state, to), "{:?} -> {:?}", self.state, to);
        self.state = to;
        self.history.push(StateChange { step, state: to });
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContractBook {
    pub cfps: BTreeMap<CfpId, CfpRecord>,
    pub next_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoAwardReason {
    NoValidBids,
    /// Best weighted bid was not below the initiator's own cost.
    ReserveNotMet {
        best_effective: f64,
        reserve: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AssignOutcome {
    Awarded(ServiceContract),
    NoAward(NoAwardReason),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnforceOutcome {
    Success { achieved: f64 },
    Failure { achieved: f64, reissued: Option<CfpId> },
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum ContractError {
    #[error("zone {0} already has an account")]
    ZoneTaken(AgentId),
    #[error("signature does not verify")]
    BadSignature,
    #[error("agent {0} is not registered")]
    UnknownAgent(AgentId),
    #[error("expiry step {expiry} is not after the current step {now}")]
    PastExpiry { expiry: u64, now: u64 },
    #[error("requested voltage change is zero")]
    ZeroTarget,
    #[error("CFP has no responders")]
    NoResponders,
    #[error("unknown CFP {0}")]
    UnknownCfp(CfpId),
    #[error("bid at step {bid_step} arrived after CFP expiry {expiry}")]
    Expired { bid_step: u64, expiry: u64 },
    #[error("bid price {price} exceeds initiator balance {balance}")]
    Unaffordable { price: f64, balance: f64 },
    #[error("CFP is not open for bids")]
    NotOpen,
    #[error("agent {0} was not invited to bid")]
    NotInvited(AgentId),
    #[error("agent {0} already bid")]
    DuplicateBid(AgentId),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("bidding has not expired yet")]
    NotExpired,
    #[error("CFP already assigned")]
    AlreadyAssigned,
    #[error("enforcement deadline not reached")]
    NotDue,
    #[error("contract already enforced")]
    AlreadyEnforced,
    #[error("CFP has no assigned contract")]
    NotAssigned,
    #[error("no sensitivity matrix has been published")]
    NoSensitivity,
}

/// `G_now = G_prev + gamma * |dV|`.
pub fn update_reputation(g_prev: f64, gamma: f64, dv_magnitude: f64) -> f64 {
    g_prev + gamma * dv_magnitude
}

/// Message an agent signs to claim its zone.
pub fn zone_claim_message(zone: AgentId) -> Vec<u8> {
    format!("zone:{}", zone.0).into_bytes()
}

pub fn init_account(
    state: &mut WorldState,
    scheme: &dyn SignatureScheme,
    zone: AgentId,
    public_key: &[u8],
    zone_signature: &[u8],
    funding: f64,
) -> Result<(AgentId, f64), ContractError> {
    if !scheme.verify(public_key, &zone_claim_message(zone), zone_signature) {
        return Err(ContractError::BadSignature);
    }
    if state.accounts.contains_key(&zone) {
        return Err(ContractError::ZoneTaken(zone));
    }
    if !(funding.is_finite() && funding >= 0.0) {
        return Err(ContractError::InvalidValue("funding".into()));
    }
    state.accounts.insert(zone, Account { public_key: public_key.to_vec(), balance: funding, reputation: 1.0 });
    Ok((zone, funding))
}

/// Checks a CFP request against the committed state without changing it.
pub fn check_create_cfp(
    state: &WorldState,
    initiator: AgentId,
    targets: &[CfpTarget],
    expiry_step: u64,
    reserve_price: Option<f64>,
    now: u64,
) -> Result<(), ContractError> {
    if !state.accounts.contains_key(&initiator) {
        return Err(ContractError::UnknownAgent(initiator));
    }
    if targets.is_empty() {
        return Err(ContractError::NoResponders);
    }
    for t in targets {
        if !t.dv_target.is_finite() {
            return Err(ContractError::InvalidValue("dv_target".into()));
        }
        if t.dv_target == 0.0 {
            return Err(ContractError::ZeroTarget);
        }
        if !state.accounts.contains_key(&t.responder) || t.responder == initiator {
            return Err(ContractError::UnknownAgent(t.responder));
        }
    }
    if let Some(r) = reserve_price {
        if !(r.is_finite() && r >= 0.0) {
            return Err(ContractError::InvalidValue("reserve_price".into()));
        }
    }
    if expiry_step <= now {
        return Err(ContractError::PastExpiry { expiry: expiry_step, now });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn create_cfp(
    state: &mut WorldState,
    initiator: AgentId,
    targets: Vec<CfpTarget>,
    expiry_step: u64,
    reserve_price: Option<f64>,
    parent: Option<CfpId>,
    now: u64,
) -> Result<CfpId, ContractError> {
    check_create_cfp(state, initiator, &targets, expiry_step, reserve_price, now)?;
    Ok(insert_cfp(state, initiator, targets, expiry_step, reserve_price, parent, None, now))
}

#[allow(clippy::too_many_arguments)]
fn insert_cfp(
    state: &mut WorldState,
    initiator: AgentId,
    targets: Vec<CfpTarget>,
    expiry_step: u64,
    reserve_price: Option<f64>,
    parent: Option<CfpId>,
    reissue_of: Option<CfpId>,
    now: u64,
) -> CfpId {
    let book = &mut state.contracts;
    book.next_id += 1;
    let cfp_id = CfpId(book.next_id);
    book.cfps.insert(
        cfp_id,
        CfpRecord {
            cfp_id,
            initiator,
            targets,
            created_step: now,
            expiry_step,
            reserve_price,
            parent,
            reissue_of,
            state: CfpState::Open,
            history: vec![StateChange { step: now, state: CfpState::Open }],
            bids: Vec::new(),
            contract: None,
            no_award: None,
        },
    );
    cfp_id
}

pub fn check_reply_cfp(state: &WorldState, bid: &BidRecord) -> Result<(), ContractError> {
    let cfp = state.contracts.cfps.get(&bid.cfp_id).ok_or(ContractError::UnknownCfp(bid.cfp_id))?;
    if !state.accounts.contains_key(&bid.responder) {
        return Err(ContractError::UnknownAgent(bid.responder));
    }
    if cfp.state != CfpState::Open {
        return Err(ContractError::NotOpen);
    }
    if cfp.target_for(bid.responder).is_none() {
        return Err(ContractError::NotInvited(bid.responder));
    }
    if cfp.bids.iter().any(|b| b.responder == bid.responder) {
        return Err(ContractError::DuplicateBid(bid.responder));
    }
    if !(bid.price.is_finite() && bid.price >= 0.0) {
        return Err(ContractError::InvalidValue("price".into()));
    }
    if bid.bid_step > cfp.expiry_step {
        return Err(ContractError::Expired { bid_step: bid.bid_step, expiry: cfp.expiry_step });
    }
    let balance = state.accounts[&cfp.initiator].balance;
    if bid.price > balance {
        return Err(ContractError::Unaffordable { price: bid.price, balance });
    }
    Ok(())
}

/// Appends a bid to the CFP's valid bids when it is affordable and on time.
pub fn reply_cfp(state: &mut WorldState, bid: BidRecord) -> Result<(), ContractError> {
    check_reply_cfp(state, &bid)?;
    let cfp = state.contracts.cfps.get_mut(&bid.cfp_id).expect("checked");
    cfp.bids.push(bid);
    Ok(())
}

/// Balance minus prices already promised under assigned, unenforced contracts.
pub fn uncommitted_balance(state: &WorldState, agent: AgentId) -> f64 {
    let balance = state.accounts.get(&agent).map_or(0.0, |a| a.balance);
    let promised: f64 = state
        .contracts
        .cfps
        .values()
        .filter(|c| c.initiator == agent && c.state == CfpState::Assigned)
        .filter_map(|c| c.contract.as_ref().map(|k| k.price))
        .sum();
    balance - promised
}

pub fn assign_cfp(
    state: &mut WorldState,
    cfp_id: CfpId,
    now: u64,
    params: &ContractParams,
) -> Result<AssignOutcome, ContractError> {
    let cfp = state.contracts.cfps.get(&cfp_id).ok_or(ContractError::UnknownCfp(cfp_id))?;
    match cfp.state {
        CfpState::Open => {}
        CfpState::BiddingClosed => {}
        _ => return Err(ContractError::AlreadyAssigned),
    }
    if now < cfp.expiry_step {
        return Err(ContractError::NotExpired);
    }

    let available = uncommitted_balance(state, cfp.initiator);
    let mut best: Option<(f64, &BidRecord)> = None;
    for bid in &cfp.bids {
        if bid.price > available {
            continue;
        }
        let g = state.accounts.get(&bid.responder).map_or(0.0, |a| a.reputation);
        let eff = params.effective_price(bid.price, g);
        let better = match best {
            None => true,
            Some((b_eff, b_bid)) => eff < b_eff || (eff == b_eff && bid.responder < b_bid.responder),
        };
        if better {
            best = Some((eff, bid));
        }
    }

    let outcome = match best {
        None => AssignOutcome::NoAward(NoAwardReason::NoValidBids),
        Some((eff, bid)) => {
            let reserve_met = match cfp.reserve_price {
                None => true,
                Some(local) => decide_local_or_market(local, eff) == MitigationChoice::Award,
            };
            if !reserve_met {
                AssignOutcome::NoAward(NoAwardReason::ReserveNotMet {
                    best_effective: eff,
                    reserve: cfp.reserve_price.unwrap_or(f64::INFINITY),
                })
            } else {
                let target = cfp.target_for(bid.responder).expect("bids are only accepted from invitees");
                let baseline =
                    state.device_meters.get(&bid.responder).and_then(|m| m.get(&bid.actuator_bus)).map(|r| (r.p, r.q));
                let decisions =
                    cfp.bids.iter().map(|b| (b.responder, u8::from(b.responder == bid.responder))).collect();
                AssignOutcome::Awarded(ServiceContract {
                    cfp_id,
                    winner: bid.responder,
                    price: bid.price,
                    effective_price: eff,
                    pzc_bus: target.pzc_bus,
                    actuator_bus: bid.actuator_bus,
                    dv_target: target.dv_target,
                    assigned_step: now,
                    enforce_deadline_step: now + params.enforcement_window,
                    decisions,
                    baseline,
                    deliveries: BTreeMap::new(),
                    dv_achieved: None,
                })
            }
        }
    };

    let cfp = state.contracts.cfps.get_mut(&cfp_id).expect("present");
    if cfp.state == CfpState::Open {
        cfp.transition(CfpState::BiddingClosed, now);
    }
    match &outcome {
        AssignOutcome::Awarded(contract) => {
            cfp.contract = Some(contract.clone());
            cfp.transition(CfpState::Assigned, now);
        }
        AssignOutcome::NoAward(reason) => {
            cfp.no_award = Some(reason.clone());
            cfp.transition(CfpState::EnforcedFailure, now);
        }
    }
    Ok(outcome)
}

/// Feeds a committed meter reading into the world state and into the audit
/// window of every assigned contract it belongs to.
pub fn record_meter(state: &mut WorldState, agent: AgentId, reading: &MeterReading, now: u64) {
    state.latest_measurements.insert(reading.bus, crate::ledger::MeterRecord { agent, reading: reading.clone() });
    state.device_meters.entry(agent).or_default().insert(reading.bus, reading.clone());
    for cfp in state.contracts.cfps.values_mut() {
        if cfp.state != CfpState::Assigned {
            continue;
        }
        let Some(contract) = cfp.contract.as_mut() else { continue };
        if contract.winner == agent
            && contract.actuator_bus == reading.bus
            && now > contract.assigned_step
            && now <= contract.enforce_deadline_step
        {
            contract.deliveries.insert(now, (reading.p, reading.q));
        }
    }
}

/// Sustained voltage change at the contract's coupling bus over the window:
/// the weakest per-step contribution of the winner plus any subcontractors
/// it hired for this CFP.
pub fn achieved_voltage_change(
    book: &ContractBook,
    cfp: &CfpRecord,
    sens: &SensitivityMatrix,
) -> Result<f64, ContractError> {
    let contract = cfp.contract.as_ref().ok_or(ContractError::NotAssigned)?;
    let mut sources = vec![contract];
    for child in book.cfps.values() {
        if child.parent == Some(cfp.cfp_id) && child.initiator == contract.winner {
            if let Some(c) = child.contract.as_ref() {
                sources.push(c);
            }
        }
    }
    let sign = contract.dv_target.signum();
    let first = contract.assigned_step + 1;
    let last = contract.enforce_deadline_step.max(first);
    let mut worst: Option<f64> = None;
    for step in first..=last {
        let mut total = 0.0;
        for src in &sources {
            let Some((p0, q0)) = src.baseline else { continue };
            let (p, q) = src.deliveries.range(..=step).next_back().map(|(_, &v)| v).unwrap_or((p0, q0));
            let sp = sens.sp(contract.pzc_bus, src.actuator_bus).map_err(|_| ContractError::NoSensitivity)?;
            let sq = sens.sq(contract.pzc_bus, src.actuator_bus).map_err(|_| ContractError::NoSensitivity)?;
            total += sp * (p - p0) + sq * (q - q0);
        }
        worst = Some(match worst {
            None => total,
            Some(w) if sign * total < sign * w => total,
            Some(w) => w,
        });
    }
    Ok(worst.unwrap_or(0.0))
}

pub fn enforcement_succeeded(dv_target: f64, achieved: f64, tol_abs: f64) -> bool {
    let sign = dv_target.signum();
    (achieved - dv_target).abs() <= tol_abs || sign * achieved >= sign * dv_target
}

pub fn enforce_cfp(
    state: &mut WorldState,
    cfp_id: CfpId,
    now: u64,
    params: &ContractParams,
) -> Result<EnforceOutcome, ContractError> {
    let cfp = state.contracts.cfps.get(&cfp_id).ok_or(ContractError::UnknownCfp(cfp_id))?;
    match cfp.state {
        CfpState::Assigned => {}
        CfpState::EnforcedSuccess | CfpState::EnforcedFailure => return Err(ContractError::AlreadyEnforced),
        _ => return Err(ContractError::NotAssigned),
    }
    let contract = cfp.contract.as_ref().ok_or(ContractError::NotAssigned)?;
    if now < contract.enforce_deadline_step {
        return Err(ContractError::NotDue);
    }
    let sens = state.sensitivity.as_ref().ok_or(ContractError::NoSensitivity)?;
    let achieved = achieved_voltage_change(&state.contracts, cfp, sens)?;
    let success = enforcement_succeeded(contract.dv_target, achieved, params.tol_abs);

    let (initiator, winner, price, target) = (cfp.initiator, contract.winner, contract.price, contract.dv_target);
    let magnitude = target.abs();
    let winner_acct = state.accounts.get_mut(&winner).ok_or(ContractError::UnknownAgent(winner))?;
    if success {
        winner_acct.reputation = update_reputation(winner_acct.reputation, params.gamma_success, magnitude);
        winner_acct.balance += price;
        state.accounts.get_mut(&initiator).ok_or(ContractError::UnknownAgent(initiator))?.balance -= price;
    } else {
        winner_acct.reputation = update_reputation(winner_acct.reputation, params.gamma_fail, magnitude);
    }

    let cfp = state.contracts.cfps.get_mut(&cfp_id).expect("present");
    if let Some(c) = cfp.contract.as_mut() {
        c.dv_achieved = Some(achieved);
    }
    if success {
        cfp.transition(CfpState::EnforcedSuccess, now);
        return Ok(EnforceOutcome::Success { achieved });
    }
    cfp.transition(CfpState::EnforcedFailure, now);

    // Announce again to the remaining invitees for whatever is still missing.
    let delivered = (achieved / target).clamp(0.0, 1.0);
    let remaining = 1.0 - delivered;
    let targets: Vec<CfpTarget> = cfp
        .targets
        .iter()
        .filter(|t| t.responder != winner)
        .map(|t| CfpTarget { responder: t.responder, pzc_bus: t.pzc_bus, dv_target: t.dv_target * remaining })
        .collect();
    let (parent, reserve) = (cfp.parent, cfp.reserve_price);
    let reissued = if remaining > 1e-9 && !targets.is_empty() {
        Some(insert_cfp(
            state,
            initiator,
            targets,
            now + params.rebid_window.max(1),
            reserve,
            parent,
            Some(cfp_id),
            now,
        ))
    } else {
        None
    };
    Ok(EnforceOutcome::Failure { achieved, reissued })
}

/// Contract event appended to the world state's receipt log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContractEvent {
    AccountOpened { agent: AgentId, balance: f64 },
    MeterAccepted,
    SensitivityPublished,
    CfpCreated { cfp_id: CfpId, initiator: AgentId },
    BidAccepted { cfp_id: CfpId, responder: AgentId, price: f64 },
    AssignmentNotice { cfp_id: CfpId, winner: Option<AgentId>, effective_price: Option<f64> },
    EnforcementResult { cfp_id: CfpId, success: bool, dv_achieved: f64, reissued: Option<CfpId> },
    Rejected { tx_id: String, reason: ContractError },
}

/// Runs every assignment and enforcement that is due at `now`, in CFP order.
pub fn run_due(state: &mut WorldState, now: u64, params: &ContractParams) -> Vec<ContractEvent> {
    let mut events = Vec::new();
    let due_assign: Vec<CfpId> = state
        .contracts
        .cfps
        .values()
        .filter(|c| matches!(c.state, CfpState::Open | CfpState::BiddingClosed) && now >= c.expiry_step)
        .map(|c| c.cfp_id)
        .collect();
    for id in due_assign {
        if let Ok(outcome) = assign_cfp(state, id, now, params) {
            events.push(match outcome {
                AssignOutcome::Awarded(c) => ContractEvent::AssignmentNotice {
                    cfp_id: id,
                    winner: Some(c.winner),
                    effective_price: Some(c.effective_price),
                },
                AssignOutcome::NoAward(_) => {
                    ContractEvent::AssignmentNotice { cfp_id: id, winner: None, effective_price: None }
                }
            });
        }
    }
    let due_enforce: Vec<CfpId> = state
        .contracts
        .cfps
        .values()
        .filter(|c| {
            c.state == CfpState::Assigned && c.contract.as_ref().is_some_and(|k| now >= k.enforce_deadline_step)
        })
        .map(|c| c.cfp_id)
        .collect();
    for id in due_enforce {
        match enforce_cfp(state, id, now, params) {
            Ok(EnforceOutcome::Success { achieved }) => events.push(ContractEvent::EnforcementResult {
                cfp_id: id,
                success: true,
                dv_achieved: achieved,
                reissued: None,
            }),
            Ok(EnforceOutcome::Failure { achieved, reissued }) => {
                events.push(ContractEvent::EnforcementResult {
                    cfp_id: id,
                    success: false,
                    dv_achieved: achieved,
                    reissued,
                });
                if let Some(new_id) = reissued {
                    events.push(ContractEvent::CfpCreated {
                        cfp_id: new_id,
                        initiator: state.contracts.cfps[&new_id].initiator,
                    });
                }
            }
            // Without a published sensitivity matrix the audit cannot run yet.
            Err(_) => {}
        }
    }
    events
}
