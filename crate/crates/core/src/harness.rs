//! Scenario loading, the step runner that wires grid, agents and ledger
//! replicas together, and report emission.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{
    revenue_active, worst_violation, zone_violations, AgentPolicy, BidComputation, DiscountPolicy, DispatchProblem,
    Pricing, SubcontractPlan, ViolationReport, ZonalAgent, VIOLATION_DEADBAND,
};
use crate::contract::{BidWeighting, CfpId, CfpRecord, CfpState, CfpTarget, ContractParams};
use crate::grid::{
    build_sensitivity, solve_voltage_at, BusId, BusRecord, DeviceKind, DeviceRecord, Feeder, LineId, LineRecord,
    NetworkModel, OperatingPoint, SensitivityMatrix, VoltageProfile, DEFAULT_V_MAX, DEFAULT_V_MIN,
};
use crate::ledger::{
    account_init_tx, replay_chain, AgentId, Block, Ed25519, Hash32, LedgerConfig, LedgerError, LedgerNode,
    SignatureScheme, TransactionEnvelope, TxPayload, WorldState, DEFAULT_BLOCK_MAX, DEFAULT_FUNDING,
};

pub const BUNDLED: [(&str, &str); 2] = [
    ("ieee_4zone", include_str!("../scenarios/ieee_4zone.json")),
    ("microgrid_2agent", include_str!("../scenarios/microgrid_2agent.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub topology: Topology,
    pub zones: Vec<ZoneConfig>,
    pub dg_settings: Vec<DgSetting>,
    pub price_series: PriceSeries,
    pub events: Vec<Event>,
    pub params: Params,
}

fn one() -> f64 {
    1.0
}
fn v_min() -> f64 {
    DEFAULT_V_MIN
}
fn v_max() -> f64 {
    DEFAULT_V_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub root_bus: u32,
    #[serde(default = "one")]
    pub base_voltage: f64,
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: u32,
    #[serde(default = "v_min")]
    pub v_min: f64,
    #[serde(default = "v_max")]
    pub v_max: f64,
    #[serde(default)]
    pub load_p: f64,
    #[serde(default)]
    pub load_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    pub i_cap: f64,
}

/// A zone and its agent. Coupling buses are the buses two zones share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneConfig {
    pub id: u32,
    pub buses: Vec<u32>,
    pub dg: String,
    #[serde(default)]
    pub subcontract_threshold: Option<f64>,
    #[serde(default)]
    pub discount: Option<DiscountPolicy>,
}

fn generator() -> DeviceKind {
    DeviceKind::Generator
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgSetting {
    pub id: String,
    pub bus: u32,
    #[serde(default = "generator")]
    pub kind: DeviceKind,
    pub p_max: f64,
    pub q_max: f64,
    pub s_max: f64,
    pub pr_q: f64,
    pub alpha: f64,
    /// Initial availability; defaults to `p_max`.
    #[serde(default)]
    pub p_avail: Option<f64>,
}

/// Hourly active-power prices in $ per p.u.·h, starting at `start_hour`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSeries {
    #[serde(default)]
    pub start_hour: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    DgOutageStart { step: u64, dg: String },
    DgOutageEnd { step: u64, dg: String },
    IrradianceSet { step: u64, dg: String, p_avail: f64 },
    LoadSet { step: u64, bus: u32, p: f64, q: f64 },
    ActuationFault { step: u64, agent: u32, duration: u64 },
}

impl Event {
    pub fn step(&self) -> u64 {
        match self {
            Event::DgOutageStart { step, .. }
            | Event::DgOutageEnd { step, .. }
            | Event::IrradianceSet { step, .. }
            | Event::LoadSet { step, .. }
            | Event::ActuationFault { step, .. } => *step,
        }
    }
}

fn d_gamma_s() -> f64 {
    1.0
}
fn d_gamma_f() -> f64 {
    -10.0
}
fn d_tol() -> f64 {
    0.0005
}
fn d_weighting() -> BidWeighting {
    BidWeighting::Divide
}
fn d_block_max() -> usize {
    DEFAULT_BLOCK_MAX
}
fn d_funding() -> f64 {
    DEFAULT_FUNDING
}
fn d_steps() -> u64 {
    144
}
fn d_step_minutes() -> u64 {
    5
}
fn d_bid_window() -> u64 {
    3
}
fn d_enforce() -> u64 {
    12
}
fn d_g_floor() -> f64 {
    0.1
}
fn d_nodes() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    #[serde(default = "d_gamma_s")]
    pub gamma_success: f64,
    #[serde(default = "d_gamma_f")]
    pub gamma_fail: f64,
    #[serde(default = "d_tol")]
    pub tol_abs: f64,
    #[serde(default = "d_weighting")]
    pub bid_weighting: BidWeighting,
    #[serde(rename = "B_M", default = "d_block_max")]
    pub block_max: usize,
    #[serde(default = "d_funding")]
    pub genesis_funding: f64,
    /// Pricing horizon of a service, hours.
    #[serde(default = "one")]
    pub dt_hours: f64,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_step_minutes")]
    pub step_minutes: u64,
    #[serde(default = "d_bid_window")]
    pub bid_window: u64,
    #[serde(default = "d_enforce")]
    pub enforcement_window: u64,
    #[serde(default = "d_g_floor")]
    pub g_floor: f64,
    #[serde(default = "d_nodes")]
    pub nodes: usize,
    /// Message bus delivery delay, steps.
    #[serde(default)]
    pub latency: u64,
}

impl Default for Params {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all params have defaults")
    }
}

impl Params {
    pub fn contract_params(&self) -> ContractParams {
        ContractParams {
            gamma_success: self.gamma_success,
            gamma_fail: self.gamma_fail,
            tol_abs: self.tol_abs,
            weighting: self.bid_weighting,
            g_floor: self.g_floor,
            enforcement_window: self.enforcement_window,
            rebid_window: self.bid_window,
        }
    }

    /// Bid window plus enforcement window.
    pub fn contract_cycle(&self) -> u64 {
        self.bid_window + self.enforcement_window
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let config: ScenarioConfig = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

fn fail<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Validation(msg.into()))
}

impl ScenarioConfig {
    pub fn network(&self) -> NetworkModel {
        let mut buses: Vec<BusRecord> = self
            .topology
            .buses
            .iter()
            .map(|b| BusRecord {
                id: BusId(b.id),
                v_min: b.v_min,
                v_max: b.v_max,
                devices: Vec::new(),
                load_p: b.load_p,
                load_q: b.load_q,
            })
            .collect();
        for dg in &self.dg_settings {
            if let Some(bus) = buses.iter_mut().find(|b| b.id.0 == dg.bus) {
                let p_avail = dg.p_avail.unwrap_or(dg.p_max);
                bus.devices.push(DeviceRecord {
                    id: dg.id.clone(),
                    kind: dg.kind,
                    p_max: dg.p_max,
                    q_max: dg.q_max,
                    s_max: dg.s_max,
                    p_set: 0.0,
                    q_set: 0.0,
                    p_avail,
                });
            }
        }
        NetworkModel {
            buses,
            lines: self
                .topology
                .lines
                .iter()
                .map(|l| LineRecord {
                    id: LineId(l.id),
                    from_bus: BusId(l.from),
                    to_bus: BusId(l.to),
                    r: l.r,
                    x: l.x,
                    i_cap: l.i_cap,
                })
                .collect(),
            root_bus_id: BusId(self.topology.root_bus),
            base_voltage: self.topology.base_voltage,
        }
    }

    /// Coupling buses: `(zone_a, zone_b) -> bus` for every pair of zones that
    /// share a bus.
    pub fn pzcs(&self) -> BTreeMap<(u32, u32), u32> {
        let mut out = BTreeMap::new();
        for (i, a) in self.zones.iter().enumerate() {
            for b in &self.zones[i + 1..] {
                let sa: BTreeSet<u32> = a.buses.iter().copied().collect();
                if let Some(&shared) = b.buses.iter().find(|x| sa.contains(x)) {
                    out.insert((a.id, b.id), shared);
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let t = &self.topology;
        let mut bus_ids = BTreeSet::new();
        for b in &t.buses {
            if !bus_ids.insert(b.id) {
                return fail(format!("duplicate bus {}", b.id));
            }
            if !(0.0 < b.v_min && b.v_min < b.v_max) {
                return fail(format!("bus {}: need 0 < v_min < v_max", b.id));
            }
        }
        for l in &t.lines {
            for end in [l.from, l.to] {
                if !bus_ids.contains(&end) {
                    return fail(format!("line {} references unknown bus {end}", l.id));
                }
            }
        }
        if !t.base_voltage.is_finite() || t.base_voltage <= 0.0 {
            return fail("base_voltage must be positive");
        }
        Feeder::new(&self.network()).map_err(|e| ScenarioError::Validation(e.to_string()))?;

        let mut dg_ids = BTreeSet::new();
        for dg in &self.dg_settings {
            if !dg_ids.insert(dg.id.as_str()) {
                return fail(format!("duplicate DG {}", dg.id));
            }
            if !bus_ids.contains(&dg.bus) {
                return fail(format!("DG {} sits on unknown bus {}", dg.id, dg.bus));
            }
            let ratings = [dg.p_max, dg.q_max, dg.s_max, dg.pr_q, dg.alpha];
            if ratings.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return fail(format!("DG {}: ratings and prices must be non-negative", dg.id));
            }
        }
        let mut zone_ids = BTreeSet::new();
        let mut dg_owner = BTreeSet::new();
        for z in &self.zones {
            if !zone_ids.insert(z.id) {
                return fail(format!("duplicate zone {}", z.id));
            }
            if let Some(b) = z.buses.iter().find(|b| !bus_ids.contains(b)) {
                return fail(format!("zone {} references unknown bus {b}", z.id));
            }
            let Some(dg) = self.dg_settings.iter().find(|d| d.id == z.dg) else {
                return fail(format!("zone {} references unknown DG {}", z.id, z.dg));
            };
            if !z.buses.contains(&dg.bus) {
                return fail(format!("DG {} is outside zone {}", dg.id, z.id));
            }
            if !dg_owner.insert(z.dg.as_str()) {
                return fail(format!("DG {} belongs to two zones", z.dg));
            }
        }
        for (i, a) in self.zones.iter().enumerate() {
            for b in &self.zones[i + 1..] {
                let shared = a.buses.iter().filter(|x| b.buses.contains(x)).count();
                if shared > 1 {
                    return fail(format!("zones {} and {} share {shared} buses; expected at most one", a.id, b.id));
                }
            }
        }
        if self.price_series.values.is_empty() || self.price_series.values.iter().any(|p| !(p.is_finite() && *p >= 0.0))
        {
            return fail("price_series needs at least one non-negative value");
        }
        for e in &self.events {
            let ok = match e {
                Event::DgOutageStart { dg, .. } | Event::DgOutageEnd { dg, .. } => dg_ids.contains(dg.as_str()),
                Event::IrradianceSet { dg, p_avail, .. } => dg_ids.contains(dg.as_str()) && *p_avail >= 0.0,
                Event::LoadSet { bus, .. } => bus_ids.contains(bus),
                Event::ActuationFault { agent, .. } => zone_ids.contains(agent),
            };
            if !ok {
                return fail(format!("event references unknown element: {e:?}"));
            }
        }
        let p = &self.params;
        if p.steps < 1 {
            return fail("steps must be at least 1");
        }
        if !(p.gamma_fail < 0.0 && 0.0 < p.gamma_success) {
            return fail("need gamma_fail < 0 < gamma_success");
        }
        if p.nodes < 1 || p.block_max < 1 || p.step_minutes < 1 || p.bid_window < 1 {
            return fail("nodes, B_M, step_minutes and bid_window must be positive");
        }
        if !(p.tol_abs >= 0.0 && p.dt_hours > 0.0 && p.genesis_funding >= 0.0 && p.g_floor > 0.0) {
            return fail("tol_abs, dt_hours, genesis_funding and g_floor out of range");
        }
        Ok(())
    }

    pub fn price_at(&self, step: u64) -> f64 {
        let hour = (step * self.params.step_minutes / 60) as usize;
        let v = &self.price_series.values;
        v[hour.min(v.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageBody {
    /// The initiator no longer needs the service bought under this CFP.
    Release { cfp_id: CfpId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: AgentId,
    pub to: AgentId,
    pub deliver_step: u64,
    pub body: MessageBody,
}

/// Lossless per-pair FIFO links with a fixed delay.
#[derive(Debug, Clone, Default)]
pub struct MessageBus {
    pub latency: u64,
    queues: BTreeMap<(AgentId, AgentId), VecDeque<Message>>,
}

impl MessageBus {
    pub fn new(latency: u64) -> Self {
        Self { latency, queues: BTreeMap::new() }
    }

    pub fn send(&mut self, from: AgentId, to: AgentId, now: u64, body: MessageBody) {
        let msg = Message { from, to, deliver_step: now + self.latency, body };
        self.queues.entry((from, to)).or_default().push_back(msg);
    }

    /// Everything due for `to`, senders in ascending order.
    pub fn deliver(&mut self, to: AgentId, now: u64) -> Vec<Message> {
        let mut out = Vec::new();
        for ((_, dst), q) in self.queues.iter_mut() {
            if *dst != to {
                continue;
            }
            while q.front().is_some_and(|m| m.deliver_step <= now) {
                out.push(q.pop_front().expect("front exists"));
            }
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("replica divergence at block {index}: digests {digests:?}")]
    ReplicaDivergence { index: u64, digests: Vec<Hash32> },
    #[error("ledger failure: {0}")]
    Ledger(#[from] LedgerError),
    #[error("scenario error: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractRow {
    pub cfp_id: CfpId,
    pub initiator: AgentId,
    pub winner: Option<AgentId>,
    pub price: Option<f64>,
    pub dv_target: f64,
    pub dv_achieved: Option<f64>,
    pub status: CfpState,
}

impl ContractRow {
    pub fn from_record(c: &CfpRecord) -> Self {
        let contract = c.contract.as_ref();
        Self {
            cfp_id: c.cfp_id,
            initiator: c.initiator,
            winner: contract.map(|k| k.winner),
            price: contract.map(|k| k.price),
            dv_target: contract.map_or(c.targets[0].dv_target, |k| k.dv_target),
            dv_achieved: contract.and_then(|k| k.dv_achieved),
            status: c.state,
        }
    }
}

/// One CFP evaluation by a responder: the dispatch problem it posed and the
/// offer it produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BidAudit {
    pub step: u64,
    pub agent: AgentId,
    pub cfp_id: CfpId,
    pub reputation: f64,
    pub problem: Option<DispatchProblem>,
    pub offer: BidComputation,
}

/// A stretch of consecutive steps during which a bus was out of band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationEpisode {
    pub bus: BusId,
    pub start: u64,
    /// First compliant step, if the run saw one.
    pub end: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub voltages: Vec<(u64, BusId, f64)>,
    pub contracts: Vec<ContractRow>,
    pub reputation: Vec<(u64, AgentId, f64)>,
    pub wallets: Vec<(u64, AgentId, f64)>,
    pub income: Vec<(u64, AgentId, f64)>,
    pub chain: Vec<Block>,
    pub warnings: Vec<String>,
    pub episodes: Vec<ViolationEpisode>,
    pub bid_audit: Vec<BidAudit>,
    /// State digest of every node after every block.
    pub digests: Vec<Vec<Hash32>>,
    pub final_state: WorldState,
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn state_rows(
    step: u64,
    state: &WorldState,
    out_g: &mut Vec<(u64, AgentId, f64)>,
    out_b: &mut Vec<(u64, AgentId, f64)>,
) {
    for (&agent, acct) in &state.accounts {
        out_g.push((step, agent, acct.reputation));
        out_b.push((step, agent, acct.balance));
    }
}

fn triples_csv(header: &str, rows: &[(u64, impl std::fmt::Display, f64)]) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for (step, key, v) in rows {
        let _ = writeln!(s, "{step},{key},{v}");
    }
    s
}

impl RunReport {
    pub fn voltages_csv(&self) -> String {
        triples_csv("step,bus,v_pu", &self.voltages)
    }

    pub fn reputation_csv(&self) -> String {
        triples_csv("step,agent,g", &self.reputation)
    }

    pub fn wallets_csv(&self) -> String {
        triples_csv("step,agent,balance", &self.wallets)
    }

    pub fn income_csv(&self) -> String {
        triples_csv("step,agent,eq13_revenue", &self.income)
    }

    pub fn contracts_csv(&self) -> String {
        let mut s = String::from("cfp_id,initiator,winner,price,dv_target,dv_achieved,status\n");
        for r in &self.contracts {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.cfp_id,
                r.initiator,
                opt(r.winner),
                opt(r.price),
                r.dv_target,
                opt(r.dv_achieved),
                r.status.as_str()
            );
        }
        s
    }

    pub fn chain_log(&self) -> String {
        crate::ledger::write_chain_log(&self.chain)
    }
}

pub fn emit_reports(report: &RunReport, out_dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let files = [
        ("voltages.csv", report.voltages_csv()),
        ("contracts.csv", report.contracts_csv()),
        ("reputation.csv", report.reputation_csv()),
        ("wallets.csv", report.wallets_csv()),
        ("income.csv", report.income_csv()),
        ("chain.log", report.chain_log()),
        ("warnings.txt", report.warnings.iter().map(|w| format!("{w}\n")).collect()),
    ];
    for (name, body) in files {
        std::fs::write(out_dir.join(name), body)?;
    }
    Ok(())
}

/// Rebuilds the reputation and wallet traces from the chain alone. Returns
/// `(reputation_csv, wallets_csv)`.
pub fn audit_chain(chain: &[Block], params: &ContractParams) -> Result<(String, String), LedgerError> {
    let (mut g, mut b) = (Vec::new(), Vec::new());
    replay_chain(chain, &Ed25519, params, |block, state| {
        if block.index > 0 {
            state_rows(block.timestamp, state, &mut g, &mut b);
        }
    })?;
    Ok((triples_csv("step,agent,g", &g), triples_csv("step,agent,balance", &b)))
}

pub fn agent_seed(seed: u64, agent: AgentId) -> [u8; 32] {
    Sha256::new()
        .chain_update(b"zonal-agent-key")
        .chain_update(seed.to_le_bytes())
        .chain_update(agent.0.to_le_bytes())
        .finalize()
        .into()
}

/// Active action an agent holds for one purpose, added to its DG's natural
/// operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Offset {
    dp: f64,
    dq: f64,
}

#[derive(Debug, Clone)]
struct DgRuntime {
    setting: DgSetting,
    online: bool,
    p_avail: f64,
    offsets: BTreeMap<String, Offset>,
}

impl DgRuntime {
    fn device(&self) -> DeviceRecord {
        let (p_avail, q_max) = if self.online { (self.p_avail, self.setting.q_max) } else { (0.0, 0.0) };
        let mut d = DeviceRecord {
            id: self.setting.id.clone(),
            kind: self.setting.kind,
            p_max: if self.online { self.setting.p_max } else { 0.0 },
            q_max,
            s_max: self.setting.s_max,
            p_set: 0.0,
            q_set: 0.0,
            p_avail,
        };
        let natural_p = match d.kind {
            DeviceKind::Generator => d.p_ceiling(),
            DeviceKind::Storage | DeviceKind::LoadBank => 0.0,
        };
        let dp: f64 = self.offsets.values().map(|o| o.dp).sum();
        let dq: f64 = self.offsets.values().map(|o| o.dq).sum();
        let (p, q, _) = d.clamp_setpoint(natural_p + dp, dq);
        d.p_set = p;
        d.q_set = q;
        d
    }
}

#[derive(Debug, Clone)]
struct SubcontractState {
    plan: SubcontractPlan,
}

struct AgentRuntime {
    agent: ZonalAgent,
    dg: String,
    /// Action promised in each submitted bid.
    bids: BTreeMap<CfpId, BidComputation>,
    subcontracts: BTreeMap<CfpId, SubcontractState>,
    acted: BTreeSet<CfpId>,
    released: BTreeSet<CfpId>,
    /// Own actions taken without a contract, with the direction they push.
    local_services: BTreeMap<u64, (BidComputation, f64)>,
    handled_no_award: BTreeSet<CfpId>,
    fault_until: Option<u64>,
}

pub struct Simulation {
    config: ScenarioConfig,
    network: NetworkModel,
    dgs: BTreeMap<String, DgRuntime>,
    agents: Vec<AgentRuntime>,
    nodes: Vec<LedgerNode>,
    bus: MessageBus,
    scheme: Ed25519,
    report: RunReport,
    open_violations: BTreeMap<BusId, (u64, bool)>,
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, RunError> {
        config.validate().map_err(|e| RunError::Scenario(e.to_string()))?;
        let network = config.network();
        let scheme = Ed25519;
        let pzcs = config.pzcs();
        let mut dgs = BTreeMap::new();
        for dg in &config.dg_settings {
            dgs.insert(
                dg.id.clone(),
                DgRuntime {
                    setting: dg.clone(),
                    online: true,
                    p_avail: dg.p_avail.unwrap_or(dg.p_max),
                    offsets: BTreeMap::new(),
                },
            );
        }
        let mut agents = Vec::new();
        let mut zones = config.zones.clone();
        zones.sort_by_key(|z| z.id);
        for z in &zones {
            let id = AgentId(z.id);
            let buses: BTreeSet<BusId> = z.buses.iter().map(|&b| BusId(b)).collect();
            let lines = network
                .lines
                .iter()
                .filter(|l| buses.contains(&l.from_bus) && buses.contains(&l.to_bus))
                .map(|l| l.id)
                .collect();
            let neighbours = pzcs
                .iter()
                .filter_map(|(&(a, b), &bus)| match (a == z.id, b == z.id) {
                    (true, _) => Some((AgentId(b), BusId(bus))),
                    (_, true) => Some((AgentId(a), BusId(bus))),
                    _ => None,
                })
                .collect();
            let dg = &dgs[&z.dg].setting;
            let agent = ZonalAgent::new(
                id,
                buses,
                lines,
                neighbours,
                vec![z.dg.clone()],
                BusId(dg.bus),
                scheme.keypair_from_seed(agent_seed(config.params.seed, id)),
                Pricing { pr_q: dg.pr_q, alpha: dg.alpha },
                AgentPolicy { subcontract_threshold: z.subcontract_threshold, discount: z.discount },
            );
            agents.push(AgentRuntime {
                agent,
                dg: z.dg.clone(),
                bids: BTreeMap::new(),
                subcontracts: BTreeMap::new(),
                acted: BTreeSet::new(),
                released: BTreeSet::new(),
                local_services: BTreeMap::new(),
                handled_no_award: BTreeSet::new(),
                fault_until: None,
            });
        }

        let ledger_cfg = LedgerConfig {
            block_max: config.params.block_max,
            n_nodes: config.params.nodes,
            contract: config.params.contract_params(),
        };
        let mut nodes: Vec<LedgerNode> =
            (0..config.params.nodes).map(|i| LedgerNode::new(i, ledger_cfg.clone(), Box::new(Ed25519))).collect();
        for node in &mut nodes {
            for a in &agents {
                node.register_agent(a.agent.agent_id, a.agent.keys.public_key.clone(), config.params.genesis_funding)?;
            }
        }
        let bus = MessageBus::new(config.params.latency);
        let report = RunReport {
            voltages: Vec::new(),
            contracts: Vec::new(),
            reputation: Vec::new(),
            wallets: Vec::new(),
            income: Vec::new(),
            chain: Vec::new(),
            warnings: Vec::new(),
            episodes: Vec::new(),
            bid_audit: Vec::new(),
            digests: Vec::new(),
            final_state: WorldState::default(),
        };
        let mut sim =
            Self { config, network, dgs, agents, nodes, bus, scheme, report, open_violations: BTreeMap::new() };
        let genesis: Vec<TransactionEnvelope> = sim
            .agents
            .iter()
            .map(|a| account_init_tx(&sim.scheme, &a.agent.keys, a.agent.agent_id, sim.config.params.genesis_funding))
            .collect();
        sim.broadcast(genesis)?;
        sim.seal(0)?;
        Ok(sim)
    }

    fn committed(&self) -> &WorldState {
        self.nodes[0].state()
    }

    fn broadcast(&mut self, txs: Vec<TransactionEnvelope>) -> Result<(), RunError> {
        for tx in txs {
            for node in &mut self.nodes {
                // A refused transaction simply never reaches a block.
                let _ = node.submit_transaction(tx.clone());
            }
        }
        Ok(())
    }

    fn seal(&mut self, step: u64) -> Result<(), RunError> {
        let proposer = self.nodes[0].proposer_for(step);
        let proposer = if self.nodes[0].chain().is_empty() { 0 } else { proposer };
        let block = self.nodes[proposer].seal_block(step)?;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if i != proposer {
                node.apply_block(&block)?;
            }
        }
        let digests: Vec<Hash32> = self.nodes.iter().map(|n| n.state().digest()).collect();
        if digests.windows(2).any(|w| w[0] != w[1]) {
            return Err(RunError::ReplicaDivergence { index: block.index, digests });
        }
        self.report.digests.push(digests);
        Ok(())
    }

    fn apply_events(&mut self, step: u64) {
        for e in self.config.events.iter().filter(|e| e.step() == step) {
            match e {
                Event::DgOutageStart { dg, .. } => self.dgs.get_mut(dg).expect("validated").online = false,
                Event::DgOutageEnd { dg, .. } => self.dgs.get_mut(dg).expect("validated").online = true,
                Event::IrradianceSet { dg, p_avail, .. } => self.dgs.get_mut(dg).expect("validated").p_avail = *p_avail,
                Event::LoadSet { bus, p, q, .. } => {
                    if let Some(b) = self.network.buses.iter_mut().find(|b| b.id.0 == *bus) {
                        b.load_p = *p;
                        b.load_q = *q;
                    }
                }
                Event::ActuationFault { agent, duration, .. } => {
                    if let Some(a) = self.agents.iter_mut().find(|a| a.agent.agent_id.0 == *agent) {
                        a.fault_until = Some(step + duration);
                    }
                }
            }
        }
    }

    fn refresh_devices(&mut self) {
        for bus in &mut self.network.buses {
            for dev in &mut bus.devices {
                if let Some(rt) = self.dgs.get(&dev.id) {
                    *dev = rt.device();
                }
            }
        }
    }

    fn neighbour_actuators(&self) -> BTreeMap<AgentId, BusId> {
        self.agents.iter().map(|a| (a.agent.agent_id, a.agent.dg_bus)).collect()
    }

    fn track_safety(&mut self, profile: &VoltageProfile) {
        let limit = 2 * self.config.params.contract_cycle();
        for bus in &self.network.buses {
            let v = profile.voltages[&bus.id];
            let bad = v < bus.v_min - VIOLATION_DEADBAND || v > bus.v_max + VIOLATION_DEADBAND;
            match (bad, self.open_violations.get_mut(&bus.id)) {
                (true, None) => {
                    self.open_violations.insert(bus.id, (profile.step, false));
                    self.report.episodes.push(ViolationEpisode { bus: bus.id, start: profile.step, end: None });
                }
                (true, Some((start, warned))) => {
                    if !*warned && profile.step - *start >= limit {
                        *warned = true;
                        self.report.warnings.push(format!(
                            "unresolved violation: bus {} out of band since step {} (still at step {}, v = {v})",
                            bus.id, start, profile.step
                        ));
                    }
                }
                (false, Some(_)) => {
                    self.open_violations.remove(&bus.id);
                    if let Some(ep) = self.report.episodes.iter_mut().rev().find(|e| e.bus == bus.id && e.end.is_none())
                    {
                        ep.end = Some(profile.step);
                    }
                }
                (false, None) => {}
            }
        }
    }

    /// Runs every configured step and returns the report.
    pub fn run(mut self) -> Result<RunReport, RunError> {
        for step in 0..self.config.params.steps {
            self.step(step)?;
        }
        let state = self.committed().clone();
        self.report.contracts = state.contracts.cfps.values().map(ContractRow::from_record).collect();
        self.report.chain = self.nodes[0].chain().to_vec();
        self.report.final_state = state;
        Ok(self.report)
    }

    fn step(&mut self, step: u64) -> Result<(), RunError> {
        // (1) events, (2) grid solve
        self.apply_events(step);
        self.refresh_devices();
        let op = OperatingPoint::from_network(&self.network);
        let profile = solve_voltage_at(&self.network, &op, step).map_err(|e| RunError::Scenario(e.to_string()))?;
        for (&bus, &v) in &profile.voltages {
            self.report.voltages.push((step, bus, v));
        }
        self.track_safety(&profile);
        let pr_p = self.config.price_at(step);
        let step_hours = self.config.params.step_minutes as f64 / 60.0;
        for a in &self.agents {
            let p = self.dgs[&a.dg].device().p_set.max(0.0);
            self.report.income.push((step, a.agent.agent_id, revenue_active(pr_p, p, step_hours)));
        }

        // (3) meters
        let mut txs = Vec::new();
        for i in 0..self.agents.len() {
            let reading = self.agents[i].agent.read_zone_state(&self.scheme, &self.network, &profile);
            txs.extend(reading.txs);
        }
        if step == 0 {
            if let Ok(sens) = build_sensitivity(&self.network) {
                let a = &mut self.agents[0];
                txs.push(a.agent.sign(&self.scheme, TxPayload::SensitivityPublish(sens), step));
            }
        }
        self.broadcast(txs)?;

        // (4)-(7) agent turns in ascending id order, against committed state
        for i in 0..self.agents.len() {
            let txs = self.agent_turn(i, step, &profile);
            self.broadcast(txs)?;
        }

        // (8) happens inside block execution; (9) seal and compare replicas
        self.seal(step)?;
        let state = self.committed().clone();
        state_rows(step, &state, &mut self.report.reputation, &mut self.report.wallets);
        Ok(())
    }

    fn set_offset(&mut self, i: usize, key: String, off: Option<Offset>) {
        let dg = self.agents[i].dg.clone();
        let rt = self.dgs.get_mut(&dg).expect("agent DG exists");
        match off {
            Some(o) => {
                rt.offsets.insert(key, o);
            }
            None => {
                rt.offsets.remove(&key);
            }
        }
        self.refresh_devices();
    }

    fn agent_turn(&mut self, i: usize, step: u64, profile: &VoltageProfile) -> Vec<TransactionEnvelope> {
        let me = self.agents[i].agent.agent_id;
        let state = self.committed().clone();
        let mut txs = Vec::new();

        for msg in self.bus.deliver(me, step) {
            let MessageBody::Release { cfp_id } = msg.body;
            self.end_service(i, cfp_id, &state, step);
        }

        self.winner_duties(i, step, profile, &state, &mut txs);
        self.responder_duties(i, step, profile, &state, &mut txs);
        self.initiator_duties(i, step, profile, &state, &mut txs);
        txs
    }

    /// Drops the action held for `cfp_id` and releases anything bought
    /// downstream for it.
    fn end_service(&mut self, i: usize, cfp_id: CfpId, state: &WorldState, step: u64) {
        let me = self.agents[i].agent.agent_id;
        self.set_offset(i, format!("cfp:{cfp_id}"), None);
        for child in state.contracts.cfps.values() {
            if child.parent == Some(cfp_id) && child.initiator == me && !self.agents[i].released.contains(&child.cfp_id)
            {
                if let Some(c) = &child.contract {
                    self.agents[i].released.insert(child.cfp_id);
                    self.bus.send(me, c.winner, step, MessageBody::Release { cfp_id: child.cfp_id });
                }
            }
        }
    }

    fn winner_duties(
        &mut self,
        i: usize,
        step: u64,
        profile: &VoltageProfile,
        state: &WorldState,
        txs: &mut Vec<TransactionEnvelope>,
    ) {
        let me = self.agents[i].agent.agent_id;
        for cfp in state.contracts.cfps.values() {
            let Some(contract) = &cfp.contract else { continue };
            if contract.winner != me {
                continue;
            }
            let id = cfp.cfp_id;
            if cfp.state == CfpState::Assigned && !self.agents[i].acted.contains(&id) {
                self.agents[i].acted.insert(id);
                let Some(bid) = self.agents[i].bids.get(&id).copied() else { continue };
                let (dp, dq) = self.promised_action(i, id, &bid, state);
                let fault = self.agents[i].fault_until.is_some_and(|until| step < until);
                let device = self.dgs[&self.agents[i].dg].device();
                let act = self.agents[i].agent.act_on_contract(&device, dp, dq, fault);
                if !fault {
                    let off = Offset { dp: act.p_set - device.p_set, dq: act.q_set - device.q_set };
                    self.set_offset(i, format!("cfp:{id}"), Some(off));
                }
                let bus = self.agents[i].agent.dg_bus;
                let v = profile.get(bus).unwrap_or(1.0);
                let tx = self.agents[i].agent.meter_tx(&self.scheme, &self.network, bus, v, step);
                txs.push(tx);
            } else if cfp.state == CfpState::EnforcedFailure
                && self.agents[i].acted.contains(&id)
                && !self.agents[i].released.contains(&id)
            {
                self.agents[i].released.insert(id);
                self.end_service(i, id, state, step);
            }
        }
    }

    /// The part of a bid the agent carries out itself: everything, unless a
    /// subcontract for this CFP was awarded downstream.
    fn promised_action(&self, i: usize, cfp_id: CfpId, bid: &BidComputation, state: &WorldState) -> (f64, f64) {
        let me = self.agents[i].agent.agent_id;
        if let Some(sub) = self.agents[i].subcontracts.get(&cfp_id) {
            let awarded = state
                .contracts
                .cfps
                .values()
                .any(|c| c.parent == Some(cfp_id) && c.initiator == me && c.contract.is_some());
            if awarded {
                return (sub.plan.own_part.dp, sub.plan.own_part.dq);
            }
        }
        (bid.dp, bid.dq)
    }

    fn responder_duties(
        &mut self,
        i: usize,
        step: u64,
        profile: &VoltageProfile,
        state: &WorldState,
        txs: &mut Vec<TransactionEnvelope>,
    ) {
        let me = self.agents[i].agent.agent_id;
        let Some(sens) = state.sensitivity.clone() else { return };
        let reputation = state.accounts.get(&me).map_or(1.0, |a| a.reputation);
        let pr_p = self.config.price_at(step);
        let dt = self.config.params.dt_hours;
        let actuators = self.neighbour_actuators();
        let open: Vec<CfpRecord> = state
            .contracts
            .cfps
            .values()
            .filter(|c| c.state == CfpState::Open && c.expiry_step >= step && c.target_for(me).is_some())
            .cloned()
            .collect();
        for cfp in open {
            let id = cfp.cfp_id;
            if self.agents[i].bids.contains_key(&id) {
                continue;
            }
            let target = cfp.target_for(me).expect("filtered").clone();
            let balance = state.accounts.get(&cfp.initiator).map_or(0.0, |a| a.balance);
            let agent = &self.agents[i].agent;

            let bid = if let Some(sub) = self.agents[i].subcontracts.get(&id).cloned() {
                let child = state.contracts.cfps.values().find(|c| c.parent == Some(id) && c.initiator == me);
                match child {
                    Some(c) if c.state == CfpState::Assigned || c.state.is_terminal() => {
                        let standalone = sub.plan.standalone;
                        match &c.contract {
                            Some(k) => {
                                let price = sub.plan.aggregate_price(k.price, agent.pricing.alpha);
                                let price = agent.policy.discount.map_or(price, |d| d.apply(price, reputation));
                                BidComputation { price, ..standalone }
                            }
                            None => standalone,
                        }
                    }
                    // still waiting on the downstream round, unless time is up
                    _ if step < cfp.expiry_step => continue,
                    _ => sub.plan.standalone,
                }
            } else {
                let bid = agent.evaluate_cfp(
                    target.pzc_bus,
                    target.dv_target,
                    reputation,
                    &sens,
                    &self.network,
                    profile,
                    pr_p,
                    dt,
                );
                let problem = agent.dispatch_problem(
                    target.pzc_bus,
                    target.dv_target,
                    &sens,
                    &self.network,
                    profile,
                    pr_p,
                    dt,
                    agent.pricing.alpha,
                );
                self.report.bid_audit.push(BidAudit { step, agent: me, cfp_id: id, reputation, problem, offer: bid });
                if !bid.feasible {
                    self.agents[i].bids.insert(id, BidComputation::infeasible());
                    continue;
                }
                let sub_expiry = (cfp.expiry_step - 1).min(step + self.config.params.bid_window);
                if sub_expiry > step {
                    let plan = agent.maybe_subcontract(
                        cfp.initiator,
                        target.pzc_bus,
                        &bid,
                        &sens,
                        &self.network,
                        profile,
                        &actuators,
                        pr_p,
                        dt,
                    );
                    if let Some(plan) = plan {
                        let standalone = plan.standalone;
                        let payload = TxPayload::CreateCfp {
                            targets: vec![plan.target.clone()],
                            expiry_step: sub_expiry,
                            reserve_price: Some(plan.reserve),
                            parent: Some(id),
                        };
                        let discounted =
                            agent.policy.discount.map_or(standalone.cost, |d| d.apply(standalone.cost, reputation));
                        let plan =
                            SubcontractPlan { standalone: BidComputation { price: discounted, ..standalone }, ..plan };
                        txs.push(self.agents[i].agent.sign(&self.scheme, payload, step));
                        self.agents[i].subcontracts.insert(id, SubcontractState { plan });
                        continue;
                    }
                }
                bid
            };
            if !bid.feasible || bid.price > balance {
                self.agents[i].bids.insert(id, BidComputation::infeasible());
                continue;
            }
            let payload =
                TxPayload::ReplyCfp { cfp_id: id, price: bid.price, actuator_bus: self.agents[i].agent.dg_bus };
            txs.push(self.agents[i].agent.sign(&self.scheme, payload, step));
            self.agents[i].bids.insert(id, bid);
        }
    }

    /// Voltage change a service currently contributes at every bus, from the
    /// committed meter readings of its providers.
    fn service_effect(state: &WorldState, sens: &SensitivityMatrix, cfp: &CfpRecord) -> BTreeMap<BusId, f64> {
        let mut out: BTreeMap<BusId, f64> = BTreeMap::new();
        let mut sources = Vec::new();
        if let Some(c) = &cfp.contract {
            sources.push(c);
        }
        for child in state.contracts.cfps.values() {
            if child.parent == Some(cfp.cfp_id) {
                if let Some(c) = &child.contract {
                    sources.push(c);
                }
            }
        }
        for c in sources {
            let Some((p0, q0)) = c.baseline else { continue };
            let Some(r) = state.device_meters.get(&c.winner).and_then(|m| m.get(&c.actuator_bus)) else { continue };
            let (dp, dq) = (r.p - p0, r.q - q0);
            for &bus in &sens.buses {
                let dv =
                    sens.sp(bus, c.actuator_bus).unwrap_or(0.0) * dp + sens.sq(bus, c.actuator_bus).unwrap_or(0.0) * dq;
                *out.entry(bus).or_default() += dv;
            }
        }
        out
    }

    /// True when the zone would stay in band on the service's side without it.
    fn can_release(&self, i: usize, profile: &VoltageProfile, effect: &BTreeMap<BusId, f64>, direction: f64) -> bool {
        let agent = &self.agents[i].agent;
        let voltages: BTreeMap<BusId, f64> = agent
            .zone_buses
            .iter()
            .filter_map(|&b| profile.get(b).map(|v| (b, v - effect.get(&b).copied().unwrap_or(0.0))))
            .collect();
        zone_violations(&self.network, &voltages, profile.step)
            .iter()
            .all(|v| v.correction().signum() != direction.signum())
    }

    fn initiator_duties(
        &mut self,
        i: usize,
        step: u64,
        profile: &VoltageProfile,
        state: &WorldState,
        txs: &mut Vec<TransactionEnvelope>,
    ) {
        let me = self.agents[i].agent.agent_id;
        let Some(sens) = state.sensitivity.clone() else { return };

        // Release one service that is no longer needed.
        let enforced: Vec<&CfpRecord> = state
            .contracts
            .cfps
            .values()
            .filter(|c| c.initiator == me && c.parent.is_none() && c.state == CfpState::EnforcedSuccess)
            .filter(|c| !self.agents[i].released.contains(&c.cfp_id))
            .collect();
        for cfp in enforced {
            let effect = Self::service_effect(state, &sens, cfp);
            let direction = cfp.contract.as_ref().map_or(0.0, |c| c.dv_target);
            if self.can_release(i, profile, &effect, direction) {
                let winner = cfp.contract.as_ref().expect("enforced contracts have a winner").winner;
                self.agents[i].released.insert(cfp.cfp_id);
                self.bus.send(me, winner, step, MessageBody::Release { cfp_id: cfp.cfp_id });
                return;
            }
        }
        let locals: Vec<(u64, BidComputation, f64)> =
            self.agents[i].local_services.iter().map(|(&k, &(b, d))| (k, b, d)).collect();
        for (key, action, direction) in locals {
            let dg_bus = self.agents[i].agent.dg_bus;
            let effect: BTreeMap<BusId, f64> = sens
                .buses
                .iter()
                .map(|&b| {
                    (b, sens.sp(b, dg_bus).unwrap_or(0.0) * action.dp + sens.sq(b, dg_bus).unwrap_or(0.0) * action.dq)
                })
                .collect();
            if self.can_release(i, profile, &effect, direction) {
                self.agents[i].local_services.remove(&key);
                self.set_offset(i, format!("local:{key}"), None);
                return;
            }
        }

        let outstanding = state.contracts.cfps.values().any(|c| {
            c.initiator == me
                && c.parent.is_none()
                && matches!(c.state, CfpState::Open | CfpState::BiddingClosed | CfpState::Assigned)
        });
        if outstanding {
            return;
        }
        let agent = &self.agents[i].agent;
        let voltages: BTreeMap<BusId, f64> =
            agent.zone_buses.iter().filter_map(|&b| profile.get(b).map(|v| (b, v))).collect();
        let violations = zone_violations(&self.network, &voltages, step);
        let Some(violation) = worst_violation(&violations).cloned() else { return };

        let pr_p = self.config.price_at(step);
        let dt = self.config.params.dt_hours;
        let local = agent.local_mitigation(&violation, &sens, &self.network, profile, pr_p, dt);
        let targets = agent.compute_pzc_targets(&violation, &sens, &self.neighbour_actuators());

        let last_root = state.contracts.cfps.values().rev().find(|c| c.initiator == me && c.parent.is_none());
        let market_failed =
            last_root.is_some_and(|c| c.no_award.is_some() && !self.agents[i].handled_no_award.contains(&c.cfp_id));
        if let Some(c) = last_root {
            if c.no_award.is_some() {
                self.agents[i].handled_no_award.insert(c.cfp_id);
            }
        }
        if local.feasible && (targets.is_empty() || market_failed) {
            self.self_mitigate(i, step, &violation, local);
            return;
        }
        if targets.is_empty() {
            return;
        }
        let payload = TxPayload::CreateCfp {
            targets: targets.into_values().collect::<Vec<CfpTarget>>(),
            expiry_step: step + self.config.params.bid_window,
            reserve_price: local.feasible.then_some(local.cost),
            parent: None,
        };
        txs.push(self.agents[i].agent.sign(&self.scheme, payload, step));
    }

    fn self_mitigate(&mut self, i: usize, step: u64, violation: &ViolationReport, action: BidComputation) {
        let device = self.dgs[&self.agents[i].dg].device();
        let act = self.agents[i].agent.act_on_contract(&device, action.dp, action.dq, false);
        let off = Offset { dp: act.p_set - device.p_set, dq: act.q_set - device.q_set };
        self.agents[i]
            .local_services
            .insert(step, (BidComputation { dp: off.dp, dq: off.dq, ..action }, violation.correction()));
        self.set_offset(i, format!("local:{step}"), Some(off));
    }
}

pub fn run_simulation(config: ScenarioConfig) -> Result<RunReport, RunError> {
    Simulation::new(config)?.run()
}
