//! Zonal agent logic: zone monitoring, coupling-bus targets, bid dispatch,
//! subcontracting and actuation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::contract::CfpTarget;
use crate::grid::{
    branch_currents, pzc_sensitivity, solve_voltage, BusId, DeviceRecord, LineId, NetworkModel, OperatingPoint,
    SensitivityMatrix, ViolationDirection, VoltageProfile,
};
use crate::ledger::{AgentId, KeyPair, MeterReading, SignatureScheme, TransactionEnvelope, TxPayload};

/// Voltages within this distance of a limit are treated as compliant by agents.
pub const VIOLATION_DEADBAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MitigationChoice {
    SelfMitigate,
    Award,
}

/// Award only when the market is strictly cheaper than fixing it locally.
pub fn decide_local_or_market(local_cost: f64, winning_effective_bid: f64) -> MitigationChoice {
    if winning_effective_bid < local_cost {
        MitigationChoice::Award
    } else {
        MitigationChoice::SelfMitigate
    }
}

/// Wholesale revenue from selling active power.
pub fn revenue_active(pr_p: f64, p_dg: f64, dt: f64) -> f64 {
    pr_p * p_dg * dt
}

/// Price of a voltage-support service: reactive energy plus marked-up lost sales.
pub fn revenue_service(pr_q: f64, q_dg: f64, dt: f64, r_dg_lost: f64, alpha: f64) -> f64 {
    pr_q * q_dg.abs() * dt + alpha * r_dg_lost
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    /// Reactive power price, $ per p.u.·h.
    pub pr_q: f64,
    /// Markup on lost active-power revenue.
    pub alpha: f64,
}

/// Bid at `1 - fraction` of cost while the agent's rating is below the trigger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscountPolicy {
    pub below_reputation: f64,
    pub fraction: f64,
}

impl DiscountPolicy {
    pub fn apply(&self, price: f64, reputation: f64) -> f64 {
        if reputation < self.below_reputation {
            price * (1.0 - self.fraction)
        } else {
            price
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentPolicy {
    /// Above this standalone cost the agent tries to buy part of the job downstream.
    pub subcontract_threshold: Option<f64>,
    pub discount: Option<DiscountPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub bus: BusId,
    pub direction: ViolationDirection,
    pub deviation: f64,
    pub step: u64,
}

impl ViolationReport {
    /// Signed voltage change that brings the bus back to its limit.
    pub fn correction(&self) -> f64 {
        self.direction.corrective_sign() * self.deviation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BidComputation {
    pub feasible: bool,
    pub dp: f64,
    pub dq: f64,
    /// Cost of the action before any strategic discount.
    pub cost: f64,
    pub price: f64,
    /// What the initiator would pay to do the same job itself (no markup).
    pub local_cost: f64,
}

impl BidComputation {
    pub fn infeasible() -> Self {
        Self { feasible: false, ..Self::default() }
    }
}

/// One candidate action of a single device against one voltage target.
///
/// The action `(dp, dq)` must satisfy `s_p*dp + s_q*dq = dv`, stay in the
/// device box and apparent-power circle, and keep every watched bus inside
/// its `[lo, hi]` change window (`a*dp + b*dq`).
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchProblem {
    pub s_p: f64,
    pub s_q: f64,
    pub dv: f64,
    pub p0: f64,
    pub q0: f64,
    pub dp_min: f64,
    pub dp_max: f64,
    pub dq_min: f64,
    pub dq_max: f64,
    pub s_max: f64,
    pub watched: Vec<(f64, f64, f64, f64)>,
    pub pr_q: f64,
    pub pr_p: f64,
    pub alpha: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dispatch {
    pub dp: f64,
    pub dq: f64,
    pub cost: f64,
}

const EPS: f64 = 1e-12;

impl DispatchProblem {
    pub fn cost(&self, dp: f64, dq: f64) -> f64 {
        let curtailed = (-dp).max(0.0);
        revenue_service(self.pr_q, dq, self.dt, self.pr_p * curtailed * self.dt, self.alpha)
    }

    pub fn is_feasible(&self, dp: f64, dq: f64, tol: f64) -> bool {
        let eq = (self.s_p * dp + self.s_q * dq - self.dv).abs() <= tol.max(1e-12);
        let boxed =
            dp >= self.dp_min - tol && dp <= self.dp_max + tol && dq >= self.dq_min - tol && dq <= self.dq_max + tol;
        let (p, q) = (self.p0 + dp, self.q0 + dq);
        let circle = (p * p + q * q).sqrt() <= self.s_max + tol;
        let watched = self.watched.iter().all(|&(a, b, lo, hi)| {
            let d = a * dp + b * dq;
            d >= lo - tol && d <= hi + tol
        });
        eq && boxed && circle && watched
    }

    /// Exact minimum over the feasible segment of the equality line.
    ///
    /// The line is `x(t) = x0 + t*u`. Every constraint cuts it to an interval
    /// in `t`, and the cost is convex piecewise linear with kinks where `dp`
    /// or `dq` crosses zero, so the optimum is at an end point or a kink.
    pub fn solve(&self) -> Option<Dispatch> {
        if self.dv == 0.0 {
            return Some(Dispatch { dp: 0.0, dq: 0.0, cost: 0.0 });
        }
        let n2 = self.s_p * self.s_p + self.s_q * self.s_q;
        if n2 < EPS * EPS {
            return None;
        }
        let norm = n2.sqrt();
        let x0 = (self.dv * self.s_p / n2, self.dv * self.s_q / n2);
        let u = (self.s_q / norm, -self.s_p / norm);

        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        // c*t + d in [l, h]
        let mut clip = |c: f64, d: f64, l: f64, h: f64| -> bool {
            if c.abs() < EPS {
                return d >= l - 1e-12 && d <= h + 1e-12;
            }
            let (a, b) = ((l - d) / c, (h - d) / c);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
            true
        };
        let mut ok = clip(u.0, x0.0, self.dp_min, self.dp_max) && clip(u.1, x0.1, self.dq_min, self.dq_max);
        for &(a, b, l, h) in &self.watched {
            ok &= clip(a * u.0 + b * u.1, a * x0.0 + b * x0.1, l, h);
        }
        if !ok || lo > hi + 1e-12 {
            return None;
        }
        // |p0 + x0 + t*u|^2 <= s_max^2 with |u| = 1
        let (cx, cy) = (self.p0 + x0.0, self.q0 + x0.1);
        let bh = cx * u.0 + cy * u.1;
        let disc = bh * bh - (cx * cx + cy * cy - self.s_max * self.s_max);
        if disc < 0.0 {
            return None;
        }
        let root = disc.sqrt();
        lo = lo.max(-bh - root);
        hi = hi.min(-bh + root);
        if lo > hi + 1e-12 {
            return None;
        }
        let hi = hi.max(lo);

        let point = |t: f64| (x0.0 + t * u.0, x0.1 + t * u.1);
        let mut candidates = vec![lo, hi];
        if u.0.abs() > EPS {
            candidates.push(-x0.0 / u.0);
        }
        if u.1.abs() > EPS {
            candidates.push(-x0.1 / u.1);
        }
        let mut best: Option<Dispatch> = None;
        for t in candidates {
            if !(lo..=hi).contains(&t) {
                continue;
            }
            let (dp, dq) = point(t);
            let cost = self.cost(dp, dq);
            if best.is_none_or(|b| cost < b.cost - 1e-12) {
                best = Some(Dispatch { dp, dq, cost });
            }
        }
        best
    }

    /// Splits a solution into the cheaper and dearer resource, by cost per
    /// volt. Returns `(cheap_dv, cheap_cost, dear_dv, dear_cost)` when both
    /// resources are in use.
    pub fn split(&self, d: &Dispatch) -> Option<(f64, f64, f64, f64)> {
        let (dv_p, dv_q) = (self.s_p * d.dp, self.s_q * d.dq);
        let cost_p = self.cost(d.dp, 0.0);
        let cost_q = self.cost(0.0, d.dq);
        if dv_p.abs() < 1e-12 || dv_q.abs() < 1e-12 || cost_p <= 0.0 || cost_q <= 0.0 {
            return None;
        }
        if cost_p / dv_p.abs() <= cost_q / dv_q.abs() {
            Some((dv_p, cost_p, dv_q, cost_q))
        } else {
            Some((dv_q, cost_q, dv_p, cost_p))
        }
    }
}

/// A nested CFP a responder issues for the part of the job it would rather buy.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcontractPlan {
    pub target: CfpTarget,
    /// Highest weighted downstream price the agent will accept.
    pub reserve: f64,
    /// Action the agent keeps for itself if the subcontract is awarded.
    pub own_part: BidComputation,
    pub standalone: BidComputation,
}

impl SubcontractPlan {
    /// Upstream price when the downstream award goes through.
    pub fn aggregate_price(&self, downstream_price: f64, alpha: f64) -> f64 {
        self.own_part.cost + alpha * downstream_price
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuation {
    pub p_set: f64,
    pub q_set: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct ZonalAgent {
    pub agent_id: AgentId,
    pub zone_buses: BTreeSet<BusId>,
    pub zone_lines: BTreeSet<LineId>,
    /// Coupling bus shared with each neighbouring zone.
    pub pzc_buses: BTreeMap<AgentId, BusId>,
    pub devices: Vec<String>,
    pub dg_bus: BusId,
    pub keys: KeyPair,
    pub pricing: Pricing,
    pub meter_buses: BTreeSet<BusId>,
    pub policy: AgentPolicy,
    next_seq: u64,
}

/// What an agent sees of its zone in one step.
#[derive(Debug, Clone)]
pub struct ZoneReading {
    pub voltages: BTreeMap<BusId, f64>,
    pub violations: Vec<ViolationReport>,
    pub txs: Vec<TransactionEnvelope>,
}

impl ZonalAgent {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent_id: AgentId,
        zone_buses: BTreeSet<BusId>,
        zone_lines: BTreeSet<LineId>,
        pzc_buses: BTreeMap<AgentId, BusId>,
        devices: Vec<String>,
        dg_bus: BusId,
        keys: KeyPair,
        pricing: Pricing,
        policy: AgentPolicy,
    ) -> Self {
        let meter_buses = zone_buses.clone();
        Self {
            agent_id,
            zone_buses,
            zone_lines,
            pzc_buses,
            devices,
            dg_bus,
            keys,
            pricing,
            meter_buses,
            policy,
            next_seq: 0,
        }
    }

    /// Signs a payload with the next sequence number. Sequence 0 is the
    /// genesis account transaction.
    pub fn sign(&mut self, scheme: &dyn SignatureScheme, payload: TxPayload, step: u64) -> TransactionEnvelope {
        self.next_seq += 1;
        TransactionEnvelope::signed(scheme, &self.keys, self.agent_id, self.next_seq, payload, step)
    }

    pub fn device<'a>(&self, network: &'a NetworkModel) -> Option<&'a DeviceRecord> {
        let bus = network.buses.iter().find(|b| b.id == self.dg_bus)?;
        bus.devices.iter().find(|d| self.devices.contains(&d.id))
    }

    pub fn meter_tx(
        &mut self,
        scheme: &dyn SignatureScheme,
        network: &NetworkModel,
        bus: BusId,
        v: f64,
        step: u64,
    ) -> TransactionEnvelope {
        let (p, q) = if bus == self.dg_bus {
            self.device(network).map_or((0.0, 0.0), |d| (d.p_set, d.q_set))
        } else {
            (0.0, 0.0)
        };
        self.sign(scheme, TxPayload::MeterReading(MeterReading { bus, v, p, q, step }), step)
    }

    /// Reads the zone meters, flags violations and signs meter transactions
    /// for the coupling buses and the agent's own DG.
    pub fn read_zone_state(
        &mut self,
        scheme: &dyn SignatureScheme,
        network: &NetworkModel,
        profile: &VoltageProfile,
    ) -> ZoneReading {
        let voltages: BTreeMap<BusId, f64> =
            self.meter_buses.iter().filter_map(|&b| profile.get(b).map(|v| (b, v))).collect();
        let violations = zone_violations(network, &voltages, profile.step);
        let mut published: BTreeSet<BusId> = self.pzc_buses.values().copied().collect();
        published.insert(self.dg_bus);
        let txs = published
            .into_iter()
            .filter_map(|b| voltages.get(&b).map(|&v| (b, v)))
            .map(|(b, v)| self.meter_tx(scheme, network, b, v, profile.step))
            .collect();
        ZoneReading { voltages, violations, txs }
    }

    /// Per-neighbour voltage changes at the shared coupling buses that would
    /// clear `violation`. Neighbours whose actuator cannot move the violated
    /// bus are left out.
    pub fn compute_pzc_targets(
        &self,
        violation: &ViolationReport,
        sens: &SensitivityMatrix,
        neighbour_actuators: &BTreeMap<AgentId, BusId>,
    ) -> BTreeMap<AgentId, CfpTarget> {
        let mut out = BTreeMap::new();
        for (&neighbour, &pzc) in &self.pzc_buses {
            let Some(&actuator) = neighbour_actuators.get(&neighbour) else { continue };
            let Ok(ratio) = pzc_sensitivity(sens, pzc, violation.bus, actuator) else { continue };
            let dv = violation.correction() * ratio;
            if dv.abs() > 0.0 && dv.is_finite() {
                out.insert(neighbour, CfpTarget { responder: neighbour, pzc_bus: pzc, dv_target: dv });
            }
        }
        out
    }

    /// Builds the dispatch problem for moving `pzc_bus` by `dv` with the
    /// agent's DG, as seen from the current network and profile.
    #[allow(clippy::too_many_arguments)]
    pub fn dispatch_problem(
        &self,
        pzc_bus: BusId,
        dv: f64,
        sens: &SensitivityMatrix,
        network: &NetworkModel,
        profile: &VoltageProfile,
        pr_p: f64,
        dt: f64,
        alpha: f64,
    ) -> Option<DispatchProblem> {
        let dev = self.device(network)?;
        let s_p = sens.sp(pzc_bus, self.dg_bus).ok()?;
        let s_q = sens.sq(pzc_bus, self.dg_bus).ok()?;
        let mut watched = Vec::new();
        for bus in &network.buses {
            if !self.zone_buses.contains(&bus.id) {
                continue;
            }
            let v = profile.get(bus.id)?;
            let a = sens.sp(bus.id, self.dg_bus).ok()?;
            let b = sens.sq(bus.id, self.dg_bus).ok()?;
            watched.push((a, b, bus.v_min.min(v) - v, bus.v_max.max(v) - v));
        }
        Some(DispatchProblem {
            s_p,
            s_q,
            dv,
            p0: dev.p_set,
            q0: dev.q_set,
            dp_min: dev.p_floor() - dev.p_set,
            dp_max: (dev.p_ceiling() - dev.p_set).max(0.0),
            dq_min: -dev.q_max - dev.q_set,
            dq_max: dev.q_max - dev.q_set,
            s_max: dev.s_max,
            watched,
            pr_q: self.pricing.pr_q,
            pr_p,
            alpha,
            dt,
        })
    }

    /// Cheapest own action that moves `pzc_bus` by `dv_target`, priced with
    /// the agent's markup and discount policy.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate_cfp(
        &self,
        pzc_bus: BusId,
        dv_target: f64,
        reputation: f64,
        sens: &SensitivityMatrix,
        network: &NetworkModel,
        profile: &VoltageProfile,
        pr_p: f64,
        dt: f64,
    ) -> BidComputation {
        let Some(problem) =
            self.dispatch_problem(pzc_bus, dv_target, sens, network, profile, pr_p, dt, self.pricing.alpha)
        else {
            return BidComputation::infeasible();
        };
        let Some(d) = problem.solve() else { return BidComputation::infeasible() };
        if !self.lines_ok(network, d.dp, d.dq) {
            return BidComputation::infeasible();
        }
        let local = DispatchProblem { alpha: 1.0, ..problem }.cost(d.dp, d.dq);
        let price = self.policy.discount.map_or(d.cost, |p| p.apply(d.cost, reputation));
        BidComputation { feasible: true, dp: d.dp, dq: d.dq, cost: d.cost, price, local_cost: local }
    }

    /// Cost of clearing a violation in the agent's own zone with its own DG.
    /// No markup applies to the agent's own lost sales.
    #[allow(clippy::too_many_arguments)]
    pub fn local_mitigation(
        &self,
        violation: &ViolationReport,
        sens: &SensitivityMatrix,
        network: &NetworkModel,
        profile: &VoltageProfile,
        pr_p: f64,
        dt: f64,
    ) -> BidComputation {
        let Some(problem) =
            self.dispatch_problem(violation.bus, violation.correction(), sens, network, profile, pr_p, dt, 1.0)
        else {
            return BidComputation::infeasible();
        };
        match problem.solve() {
            Some(d) if self.lines_ok(network, d.dp, d.dq) => {
                BidComputation { feasible: true, dp: d.dp, dq: d.dq, cost: d.cost, price: d.cost, local_cost: d.cost }
            }
            _ => BidComputation::infeasible(),
        }
    }

    fn lines_ok(&self, network: &NetworkModel, dp: f64, dq: f64) -> bool {
        let mut op = OperatingPoint::from_network(network);
        *op.inj_p.entry(self.dg_bus).or_default() += dp;
        *op.inj_q.entry(self.dg_bus).or_default() += dq;
        let Ok(profile) = solve_voltage(network, &op) else { return false };
        let Ok(currents) = branch_currents(network, &op, &profile) else { return false };
        network
            .lines
            .iter()
            .zip(currents)
            .all(|(line, i)| !self.zone_lines.contains(&line.id) || i <= line.i_cap + 1e-9)
    }

    /// Decides whether to buy the dearer half of a job from a downstream
    /// neighbour. `initiator` is the agent that asked us.
    #[allow(clippy::too_many_arguments)]
    pub fn maybe_subcontract(
        &self,
        initiator: AgentId,
        upstream_pzc: BusId,
        standalone: &BidComputation,
        sens: &SensitivityMatrix,
        network: &NetworkModel,
        profile: &VoltageProfile,
        neighbour_actuators: &BTreeMap<AgentId, BusId>,
        pr_p: f64,
        dt: f64,
    ) -> Option<SubcontractPlan> {
        let threshold = self.policy.subcontract_threshold?;
        if !standalone.feasible || standalone.cost <= threshold {
            return None;
        }
        let (&down, &down_pzc) = self.pzc_buses.iter().find(|(&a, _)| a != initiator)?;
        let actuator = *neighbour_actuators.get(&down)?;
        let dv = sens.sp(upstream_pzc, self.dg_bus).ok()? * standalone.dp
            + sens.sq(upstream_pzc, self.dg_bus).ok()? * standalone.dq;
        let problem = self.dispatch_problem(upstream_pzc, dv, sens, network, profile, pr_p, dt, self.pricing.alpha)?;
        let d = Dispatch { dp: standalone.dp, dq: standalone.dq, cost: standalone.cost };
        let (_, cheap_cost, dear_dv, _) = problem.split(&d)?;
        let ratio = pzc_sensitivity(sens, down_pzc, upstream_pzc, actuator).ok()?;
        let down_dv = dear_dv * ratio;
        if down_dv.abs() < 1e-12 {
            return None;
        }
        // keep the cheap resource, drop the dear one
        let cheap_is_p = (problem.cost(d.dp, 0.0) - cheap_cost).abs() < 1e-12;
        let (own_dp, own_dq) = if cheap_is_p { (d.dp, 0.0) } else { (0.0, d.dq) };
        let own_part = BidComputation {
            feasible: true,
            dp: own_dp,
            dq: own_dq,
            cost: cheap_cost,
            price: cheap_cost,
            local_cost: DispatchProblem { alpha: 1.0, ..problem.clone() }.cost(own_dp, own_dq),
        };
        Some(SubcontractPlan {
            target: CfpTarget { responder: down, pzc_bus: down_pzc, dv_target: down_dv },
            reserve: (standalone.cost - cheap_cost) / self.pricing.alpha,
            own_part,
            standalone: *standalone,
        })
    }

    /// New device setpoints for an awarded action. A fault leaves the device
    /// untouched.
    pub fn act_on_contract(&self, device: &DeviceRecord, dp: f64, dq: f64, fault: bool) -> Actuation {
        if fault {
            return Actuation { p_set: device.p_set, q_set: device.q_set, clamped: false };
        }
        let (p_set, q_set, clamped) = device.clamp_setpoint(device.p_set + dp, device.q_set + dq);
        Actuation { p_set, q_set, clamped }
    }
}

/// Violations among the given bus voltages, ignoring float noise at the limits.
pub fn zone_violations(network: &NetworkModel, voltages: &BTreeMap<BusId, f64>, step: u64) -> Vec<ViolationReport> {
    let mut out = Vec::new();
    for bus in &network.buses {
        let Some(&v) = voltages.get(&bus.id) else { continue };
        if v < bus.v_min - VIOLATION_DEADBAND {
            out.push(ViolationReport {
                bus: bus.id,
                direction: ViolationDirection::Under,
                deviation: bus.v_min - v,
                step,
            });
        } else if v > bus.v_max + VIOLATION_DEADBAND {
            out.push(ViolationReport {
                bus: bus.id,
                direction: ViolationDirection::Over,
                deviation: v - bus.v_max,
                step,
            });
        }
    }
    out
}

/// The violation with the largest deviation, lowest bus on ties.
pub fn worst_violation(violations: &[ViolationReport]) -> Option<&ViolationReport> {
    violations.iter().fold(None, |best: Option<&ViolationReport>, v| match best {
        Some(b) if b.deviation >= v.deviation => Some(b),
        _ => Some(v),
    })
}
