//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gridchain::agent::DispatchProblem;
use gridchain::contract::{
    assign_cfp, create_cfp, enforce_cfp, is_legal_transition, record_meter, reply_cfp, BidRecord, CfpId, CfpState,
    CfpTarget, ContractParams,
};
use gridchain::grid::{
    build_sensitivity, solve_voltage, BusId, BusRecord, LineId, LineRecord, NetworkModel, OperatingPoint,
};
use gridchain::ledger::{parse_chain_log, verify_chain, Account, AgentId, MeterReading, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random radial feeder: bus k hangs off a uniformly chosen earlier bus.
pub fn random_tree(rng: &mut impl Rng, n: u32) -> NetworkModel {
    let mut buses: Vec<BusRecord> = (1..=n).map(BusRecord::new).collect();
    for b in buses.iter_mut().skip(1) {
        b.load_p = rng.gen_range(0.0..0.05);
        b.load_q = rng.gen_range(0.0..0.03);
    }
    let lines = (2..=n)
        .map(|k| LineRecord {
            id: LineId(k - 1),
            from_bus: BusId(rng.gen_range(1..k)),
            to_bus: BusId(k),
            r: rng.gen_range(0.0..0.05),
            x: rng.gen_range(0.0..0.05),
            i_cap: 10.0,
        })
        .collect();
    NetworkModel { buses, lines, root_bus_id: BusId(1), base_voltage: 1.0 }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest gap between the sensitivity matrix and central differences of the
/// voltage solve.
pub fn sensitivity_fd_error(net: &NetworkModel) -> f64 {
    let sens = build_sensitivity(net).unwrap();
    let base = OperatingPoint::from_network(net);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &j in &sens.buses {
        for reactive in [false, true] {
            let bump = |sign: f64| {
                let mut op = base.clone();
                let m = if reactive { &mut op.inj_q } else { &mut op.inj_p };
                *m.get_mut(&j).unwrap() += sign * h;
                solve_voltage(net, &op).unwrap()
            };
            let (up, down) = (bump(1.0), bump(-1.0));
            for &i in &sens.buses {
                let fd = (up.voltages[&i] - down.voltages[&i]) / (2.0 * h);
                let s = if reactive { sens.sq(i, j) } else { sens.sp(i, j) }.unwrap();
                worst = worst.max((fd - s).abs());
            }
        }
    }
    worst
}

/// Dense search along each free variable in turn; the other follows from the
/// equality constraint. Returns the cheapest point that passes the problem's
/// own feasibility test.
pub fn brute_force_dispatch(p: &DispatchProblem, samples: usize) -> Option<(f64, f64, f64)> {
    if p.dv == 0.0 {
        return Some((0.0, 0.0, 0.0));
    }
    let a = scan_line(p, samples, true);
    let b = scan_line(p, samples, false);
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.2 < x.2 { y } else { x }),
        (x, y) => x.or(y),
    }
}

fn scan_line(p: &DispatchProblem, samples: usize, by_dp: bool) -> Option<(f64, f64, f64)> {
    let tol = 1e-9;
    let coef = if by_dp { p.s_q } else { p.s_p };
    if coef == 0.0 {
        return None;
    }
    let (lo, hi) = if by_dp { (p.dp_min, p.dp_max) } else { (p.dq_min, p.dq_max) };
    let point = |t: f64| {
        if by_dp {
            (t, (p.dv - p.s_p * t) / p.s_q)
        } else {
            ((p.dv - p.s_q * t) / p.s_p, t)
        }
    };
    let scan = |lo: f64, hi: f64| {
        let mut best: Option<(f64, f64, f64, f64)> = None;
        for k in 0..=samples {
            let t = lo + (hi - lo) * k as f64 / samples as f64;
            let (dp, dq) = point(t);
            if p.is_feasible(dp, dq, tol) {
                let c = p.cost(dp, dq);
                if best.is_none_or(|b| c < b.2) {
                    best = Some((dp, dq, c, t));
                }
            }
        }
        best
    };
    let (dp, dq, c, t) = scan(lo, hi)?;
    let width = (hi - lo) / samples as f64;
    match scan((t - width).max(lo), (t + width).min(hi)) {
        Some((rp, rq, rc, _)) if rc < c => Some((rp, rq, rc)),
        _ => Some((dp, dq, c)),
    }
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-9)
}

/// Outcome of the lifecycle model check.
#[derive(Debug, Default)]
pub struct ModelCheck {
    pub states: usize,
    pub calls: usize,
    pub violations: Vec<String>,
    pub terminal_seen: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy)]
enum Call {
    Reply(AgentId, f64),
    Assign,
    Enforce,
    Meter(AgentId, f64),
    Tick(u64),
}

const M1: AgentId = AgentId(1);
const M2: AgentId = AgentId(2);
const M3: AgentId = AgentId(3);

fn model_world() -> (WorldState, CfpId) {
    let mut s = WorldState::default();
    for a in [M1, M2, M3] {
        s.accounts.insert(a, Account { public_key: vec![a.0 as u8], balance: 1_000.0, reputation: 1.0 });
    }
    // chain 1 - 2 - 3 with the two responders' actuators at buses 2 and 3
    let net = NetworkModel {
        buses: (1..=3).map(BusRecord::new).collect(),
        lines: (1..=2)
            .map(|k| LineRecord {
                id: LineId(k),
                from_bus: BusId(k),
                to_bus: BusId(k + 1),
                r: 0.01,
                x: 0.01,
                i_cap: 5.0,
            })
            .collect(),
        root_bus_id: BusId(1),
        base_voltage: 1.0,
    };
    s.sensitivity = Some(build_sensitivity(&net).unwrap());
    for (a, bus) in [(M1, 2), (M3, 3)] {
        record_meter(&mut s, a, &MeterReading { bus: BusId(bus), v: 1.0, p: 0.0, q: 0.0, step: 0 }, 0);
    }
    let targets = vec![
        CfpTarget { responder: M1, pzc_bus: BusId(2), dv_target: 0.002 },
        CfpTarget { responder: M3, pzc_bus: BusId(2), dv_target: 0.002 },
    ];
    let id = create_cfp(&mut s, M2, targets, 2, None, None, 0).unwrap();
    (s, id)
}

fn apply(s: &mut WorldState, now: &mut u64, id: CfpId, call: Call, params: &ContractParams) -> bool {
    match call {
        Call::Reply(a, price) => {
            let bus = if a == M1 { 2 } else { 3 };
            reply_cfp(s, BidRecord { cfp_id: id, responder: a, price, bid_step: *now, actuator_bus: BusId(bus) })
                .is_ok()
        }
        Call::Assign => assign_cfp(s, id, *now, params).is_ok(),
        Call::Enforce => enforce_cfp(s, id, *now, params).is_ok(),
        Call::Meter(a, q) => {
            let bus = if a == M1 { 2 } else { 3 };
            record_meter(s, a, &MeterReading { bus: BusId(bus), v: 1.0, p: 0.0, q, step: *now }, *now);
            true
        }
        Call::Tick(k) => {
            *now += k;
            true
        }
    }
}

/// Explores every interleaving of bids, meter readings, assignment,
/// enforcement and clock advances on a three-agent, single-CFP instance,
/// deduplicating identical states, and checks each CFP's history against the
/// declared transition relation.
pub fn lifecycle_model_check(max_depth: usize) -> ModelCheck {
    let params = ContractParams { enforcement_window: 3, rebid_window: 1, ..ContractParams::default() };
    let calls = [
        Call::Reply(M1, 40.0),
        Call::Reply(M3, 30.0),
        Call::Reply(M3, 2_000.0),
        Call::Assign,
        Call::Enforce,
        Call::Meter(M1, 0.2),
        Call::Meter(M3, 0.2),
        Call::Meter(M3, 0.0),
        Call::Tick(1),
    ];
    let (start, id) = model_world();
    let mut out = ModelCheck::default();
    let mut seen = BTreeSet::new();
    let mut frontier = vec![(start, 0u64)];
    for _ in 0..max_depth {
        let mut next = Vec::new();
        for (state, now) in frontier {
            for &call in &calls {
                let mut s = state.clone();
                let mut t = now;
                if t > 8 && matches!(call, Call::Tick(_)) {
                    continue;
                }
                let before: BTreeMap<CfpId, (CfpState, usize)> =
                    s.contracts.cfps.iter().map(|(k, c)| (*k, (c.state, c.history.len()))).collect();
                let ok = apply(&mut s, &mut t, id, call, &params);
                out.calls += 1;
                for (cid, c) in &s.contracts.cfps {
                    if c.history.first().map(|h| h.state) != Some(CfpState::Open) {
                        out.violations.push(format!("{cid}: history does not start Open"));
                    }
                    let mut prev = CfpState::Open;
                    for change in c.history.iter().skip(1) {
                        if !is_legal_transition(prev, change.state) {
                            out.violations.push(format!("{cid}: {prev:?} -> {:?} via {call:?}", change.state));
                        }
                        prev = change.state;
                    }
                    if prev != c.state {
                        out.violations.push(format!("{cid}: history ends at {prev:?} but state is {:?}", c.state));
                    }
                    if let Some(&(old, len)) = before.get(cid) {
                        if !ok && (old, len) != (c.state, c.history.len()) {
                            out.violations
                                .push(format!("{cid}: rejected {call:?} still moved {old:?} -> {:?}", c.state));
                        }
                        if c.history.len() < len || c.history.len() > len + 2 {
                            out.violations.push(format!("{cid}: history jumped from {len} to {}", c.history.len()));
                        }
                    }
                    if c.state.is_terminal() {
                        out.terminal_seen.insert(c.state.as_str().to_string());
                    }
                }
                let key = (serde_json::to_string(&s).unwrap(), t);
                if seen.insert(key) {
                    next.push((s, t));
                }
            }
        }
        frontier = next;
    }
    out.states = seen.len();
    out
}

/// Result of flipping bits in one byte of a chain log.
#[derive(Debug, PartialEq, Eq)]
pub enum MutationVerdict {
    Detected { at: usize, mutated: usize },
    Missed { mutated: usize },
}

pub fn mutate_and_verify(log: &[u8], offset: usize, xor: u8) -> MutationVerdict {
    let mutated = log[..offset].iter().filter(|&&b| b == b'\n').count();
    let mut bytes = log.to_vec();
    bytes[offset] ^= xor;
    let Ok(text) = String::from_utf8(bytes) else {
        return MutationVerdict::Detected { at: mutated, mutated };
    };
    match parse_chain_log(&text) {
        Err(e) => MutationVerdict::Detected { at: e.line.saturating_sub(1), mutated },
        Ok(chain) => match verify_chain(&chain) {
            Err(at) => MutationVerdict::Detected { at, mutated },
            Ok(()) => MutationVerdict::Missed { mutated },
        },
    }
}
