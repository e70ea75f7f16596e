//! Radial feeder model with a linearized DistFlow solve.
//!
//! All quantities are per-unit. Branch flows are accumulated leaf-to-root and
//! bus voltages are swept root-to-leaf with the first-order drop
//! `V_child = V_parent - (r * P + x * Q) / V_base`. Because the sweep is linear
//! in the injections, the sensitivity of bus `i` to an injection at bus `j` is
//! the impedance of the root path shared by `i` and `j`, divided by `V_base`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bus identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Line identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LineId(pub u32);

pub const DEFAULT_V_MIN: f64 = 0.95;
pub const DEFAULT_V_MAX: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Generator,
    Storage,
    LoadBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub id: String,
    pub kind: DeviceKind,
    pub p_max: f64,
    pub q_max: f64,
    pub s_max: f64,
    pub p_set: f64,
    pub q_set: f64,
    /// Fuel or irradiance ceiling on active output.
    pub p_avail: f64,
}

impl DeviceRecord {
    /// Lowest active setpoint the device can take. Storage may charge down to
    /// `-p_max`; load banks only consume.
    pub fn p_floor(&self) -> f64 {
        match self.kind {
            DeviceKind::Generator => 0.0,
            DeviceKind::Storage | DeviceKind::LoadBank => -self.p_max,
        }
    }

    pub fn p_ceiling(&self) -> f64 {
        match self.kind {
            DeviceKind::LoadBank => 0.0,
            DeviceKind::Generator | DeviceKind::Storage => self.p_max.min(self.p_avail).max(0.0),
        }
    }

    /// Checks the capability box and the apparent-power circle.
    pub fn within_limits(&self, tol: f64) -> bool {
        self.p_set >= self.p_floor() - tol
            && self.p_set <= self.p_ceiling() + tol
            && self.q_set.abs() <= self.q_max + tol
            && self.p_set.hypot(self.q_set) <= self.s_max + tol
    }

    /// Projects `(p, q)` onto the device capability region. Returns the
    /// clamped pair and whether any clamping happened.
    pub fn clamp_setpoint(&self, p: f64, q: f64) -> (f64, f64, bool) {
        let mut cp = p.clamp(self.p_floor(), self.p_ceiling());
        let mut cq = q.clamp(-self.q_max, self.q_max);
        let s = cp.hypot(cq);
        if s > self.s_max {
            // Keep active power, shrink reactive first; then scale if still outside.
            let q_room = (self.s_max * self.s_max - cp * cp).max(0.0).sqrt();
            cq = cq.clamp(-q_room, q_room);
            if cp.abs() > self.s_max {
                cp = cp.signum() * self.s_max;
                cq = 0.0;
            }
        }
        let clamped = (cp - p).abs() > 1e-12 || (cq - q).abs() > 1e-12;
        (cp, cq, clamped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: BusId,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default)]
    pub devices: Vec<DeviceRecord>,
    pub load_p: f64,
    pub load_q: f64,
}

impl BusRecord {
    pub fn new(id: u32) -> Self {
        Self {
            id: BusId(id),
            v_min: DEFAULT_V_MIN,
            v_max: DEFAULT_V_MAX,
            devices: Vec::new(),
            load_p: 0.0,
            load_q: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: LineId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    pub i_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    pub root_bus_id: BusId,
    pub base_voltage: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("topology is not a tree rooted at bus {root}: {detail}")]
    NonRadialTopology { root: BusId, detail: String },
    #[error("operating point has no entry for bus {0}")]
    MissingBus(BusId),
    #[error("unknown bus {0}")]
    UnknownBus(BusId),
    #[error("invalid network data: {0}")]
    InvalidData(String),
    #[error("sensitivity denominator {0:e} too small")]
    DegenerateSensitivity(f64),
}

/// Parent links and a root-first visiting order derived from a validated
/// network.
#[derive(Debug, Clone)]
pub struct Feeder {
    order: Vec<BusId>,
    /// Incoming line for every non-root bus, as an index into `lines`.
    parent_line: BTreeMap<BusId, usize>,
    parent: BTreeMap<BusId, BusId>,
}

impl Feeder {
    pub fn new(network: &NetworkModel) -> Result<Self, GridError> {
        let root = network.root_bus_id;
        let non_radial = |detail: String| GridError::NonRadialTopology { root, detail };

        let mut ids = BTreeSet::new();
        for bus in &network.buses {
            if !ids.insert(bus.id) {
                return Err(GridError::InvalidData(format!("duplicate bus {}", bus.id)));
            }
            if !(bus.v_min > 0.0 && bus.v_min < bus.v_max) {
                return Err(GridError::InvalidData(format!("bus {} has invalid voltage band", bus.id)));
            }
        }
        if !ids.contains(&root) {
            return Err(GridError::UnknownBus(root));
        }
        if !network.base_voltage.is_finite() || network.base_voltage <= 0.0 {
            return Err(GridError::InvalidData("base voltage must be positive".into()));
        }

        let mut parent_line = BTreeMap::new();
        let mut parent = BTreeMap::new();
        let mut children: BTreeMap<BusId, Vec<BusId>> = BTreeMap::new();
        for (idx, line) in network.lines.iter().enumerate() {
            for end in [line.from_bus, line.to_bus] {
                if !ids.contains(&end) {
                    return Err(GridError::UnknownBus(end));
                }
            }
            if line.r < 0.0 || line.x < 0.0 || !line.i_cap.is_finite() || line.i_cap <= 0.0 {
                return Err(GridError::InvalidData(format!("line {} has invalid impedance or capacity", line.id.0)));
            }
            if line.to_bus == root {
                return Err(non_radial(format!("line {} feeds the root", line.id.0)));
            }
            if parent_line.insert(line.to_bus, idx).is_some() {
                return Err(non_radial(format!("bus {} has more than one parent line", line.to_bus)));
            }
            parent.insert(line.to_bus, line.from_bus);
            children.entry(line.from_bus).or_default().push(line.to_bus);
        }

        let mut order = Vec::with_capacity(ids.len());
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([root]);
        seen.insert(root);
        while let Some(bus) = queue.pop_front() {
            order.push(bus);
            for &child in children.get(&bus).map(Vec::as_slice).unwrap_or(&[]) {
                if !seen.insert(child) {
                    return Err(non_radial(format!("cycle through bus {child}")));
                }
                queue.push_back(child);
            }
        }
        if order.len() != ids.len() {
            let orphan = ids.iter().find(|b| !seen.contains(b)).copied().unwrap_or(root);
            return Err(non_radial(format!("bus {orphan} is not reachable from the root")));
        }
        Ok(Self { order, parent_line, parent })
    }

    /// Buses in root-first order.
    pub fn order(&self) -> &[BusId] {
        &self.order
    }

    pub fn parent(&self, bus: BusId) -> Option<BusId> {
        self.parent.get(&bus).copied()
    }

    pub fn parent_line(&self, bus: BusId) -> Option<usize> {
        self.parent_line.get(&bus).copied()
    }

    /// Lines on the path from the root to `bus`.
    pub fn root_path(&self, mut bus: BusId) -> Vec<usize> {
        let mut path = Vec::new();
        while let Some(line) = self.parent_line(bus) {
            path.push(line);
            bus = self.parent[&bus];
        }
        path
    }
}

/// Net per-bus injections: device setpoints minus load.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub inj_p: BTreeMap<BusId, f64>,
    pub inj_q: BTreeMap<BusId, f64>,
}

impl OperatingPoint {
    pub fn from_network(network: &NetworkModel) -> Self {
        let mut op = Self::default();
        for bus in &network.buses {
            let gen_p: f64 = bus.devices.iter().map(|d| d.p_set).sum();
            let gen_q: f64 = bus.devices.iter().map(|d| d.q_set).sum();
            op.inj_p.insert(bus.id, gen_p - bus.load_p);
            op.inj_q.insert(bus.id, gen_q - bus.load_q);
        }
        op
    }

    pub fn zero(network: &NetworkModel) -> Self {
        let mut op = Self::default();
        for bus in &network.buses {
            op.inj_p.insert(bus.id, 0.0);
            op.inj_q.insert(bus.id, 0.0);
        }
        op
    }

    fn get(&self, bus: BusId) -> Result<(f64, f64), GridError> {
        match (self.inj_p.get(&bus), self.inj_q.get(&bus)) {
            (Some(&p), Some(&q)) => Ok((p, q)),
            _ => Err(GridError::MissingBus(bus)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageProfile {
    pub step: u64,
    pub voltages: BTreeMap<BusId, f64>,
}

impl VoltageProfile {
    pub fn flat(network: &NetworkModel, step: u64) -> Self {
        let voltages = network.buses.iter().map(|b| (b.id, network.base_voltage)).collect();
        Self { step, voltages }
    }

    pub fn get(&self, bus: BusId) -> Option<f64> {
        self.voltages.get(&bus).copied()
    }
}

/// Branch flows indexed like `network.lines`, positive toward the leaves.
fn sweep_flows(network: &NetworkModel, feeder: &Feeder, op: &OperatingPoint) -> Result<Vec<(f64, f64)>, GridError> {
    let mut subtree: BTreeMap<BusId, (f64, f64)> = BTreeMap::new();
    for bus in &network.buses {
        let (p, q) = op.get(bus.id)?;
        subtree.insert(bus.id, (-p, -q));
    }
    let mut flows = vec![(0.0, 0.0); network.lines.len()];
    for &bus in feeder.order().iter().rev() {
        if let Some(line) = feeder.parent_line(bus) {
            let demand = subtree[&bus];
            flows[line] = demand;
            let up = subtree.get_mut(&feeder.parent[&bus]).expect("parent present");
            up.0 += demand.0;
            up.1 += demand.1;
        }
    }
    Ok(flows)
}

pub fn solve_voltage(network: &NetworkModel, op: &OperatingPoint) -> Result<VoltageProfile, GridError> {
    solve_voltage_at(network, op, 0)
}

/// Backward/forward sweep stamped with a simulation step.
pub fn solve_voltage_at(network: &NetworkModel, op: &OperatingPoint, step: u64) -> Result<VoltageProfile, GridError> {
    let feeder = Feeder::new(network)?;
    let flows = sweep_flows(network, &feeder, op)?;
    let mut voltages = BTreeMap::new();
    voltages.insert(network.root_bus_id, network.base_voltage);
    for &bus in feeder.order().iter().skip(1) {
        let line_idx = feeder.parent_line(bus).expect("non-root bus has a parent line");
        let line = &network.lines[line_idx];
        let (p, q) = flows[line_idx];
        let upstream = voltages[&feeder.parent[&bus]];
        voltages.insert(bus, upstream - (line.r * p + line.x * q) / network.base_voltage);
    }
    Ok(VoltageProfile { step, voltages })
}

/// Per-line current magnitude `sqrt(P^2 + Q^2) / V_receiving`, indexed like
/// `network.lines`.
pub fn branch_currents(
    network: &NetworkModel,
    op: &OperatingPoint,
    profile: &VoltageProfile,
) -> Result<Vec<f64>, GridError> {
    let feeder = Feeder::new(network)?;
    let flows = sweep_flows(network, &feeder, op)?;
    network
        .lines
        .iter()
        .zip(flows)
        .map(|(line, (p, q))| {
            let v = profile.get(line.to_bus).ok_or(GridError::MissingBus(line.to_bus))?;
            Ok(p.hypot(q) / v)
        })
        .collect()
}

/// `sp[i][j] = dV_i/dP_j`, `sq[i][j] = dV_i/dQ_j`, rows and columns ordered like
/// `buses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrix {
    pub buses: Vec<BusId>,
    pub sp: Vec<Vec<f64>>,
    pub sq: Vec<Vec<f64>>,
}

impl SensitivityMatrix {
    pub fn index(&self, bus: BusId) -> Result<usize, GridError> {
        self.buses.binary_search(&bus).map_err(|_| GridError::UnknownBus(bus))
    }

    pub fn sp(&self, i: BusId, j: BusId) -> Result<f64, GridError> {
        Ok(self.sp[self.index(i)?][self.index(j)?])
    }

    pub fn sq(&self, i: BusId, j: BusId) -> Result<f64, GridError> {
        Ok(self.sq[self.index(i)?][self.index(j)?])
    }
}

/// Shared root-path impedance sums for every bus pair, divided by the base
/// voltage (the solver's linearization point).
pub fn build_sensitivity(network: &NetworkModel) -> Result<SensitivityMatrix, GridError> {
    let feeder = Feeder::new(network)?;
    let mut buses: Vec<BusId> = network.buses.iter().map(|b| b.id).collect();
    buses.sort();
    let n = buses.len();
    let paths: Vec<BTreeSet<usize>> = buses.iter().map(|&b| feeder.root_path(b).into_iter().collect()).collect();
    let mut sp = vec![vec![0.0; n]; n];
    let mut sq = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let (mut r, mut x) = (0.0, 0.0);
            for &line in paths[i].intersection(&paths[j]) {
                r += network.lines[line].r;
                x += network.lines[line].x;
            }
            let (r, x) = (r / network.base_voltage, x / network.base_voltage);
            sp[i][j] = r;
            sp[j][i] = r;
            sq[i][j] = x;
            sq[j][i] = x;
        }
    }
    Ok(SensitivityMatrix { buses, sp, sq })
}

/// `dV_i = sp[i][j] * dp + sq[i][j] * dq` for every bus `i`.
pub fn predict_voltage_change(
    sens: &SensitivityMatrix,
    bus_j: BusId,
    dp: f64,
    dq: f64,
) -> Result<BTreeMap<BusId, f64>, GridError> {
    let j = sens.index(bus_j)?;
    Ok(sens.buses.iter().enumerate().map(|(i, &bus)| (bus, sens.sp[i][j] * dp + sens.sq[i][j] * dq)).collect())
}

/// Ratio of the voltage response at `pzc_bus` to the response at
/// `violated_bus` for the same injection at `actuator_bus`.
pub fn pzc_sensitivity(
    sens: &SensitivityMatrix,
    pzc_bus: BusId,
    violated_bus: BusId,
    actuator_bus: BusId,
) -> Result<f64, GridError> {
    let num = sens.sp(pzc_bus, actuator_bus)?;
    let den = sens.sp(violated_bus, actuator_bus)?;
    if den.abs() < 1e-12 {
        return Err(GridError::DegenerateSensitivity(den));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationDirection {
    Under,
    Over,
}

impl ViolationDirection {
    /// Sign of the voltage change that moves the bus back into band.
    pub fn corrective_sign(self) -> f64 {
        match self {
            ViolationDirection::Under => 1.0,
            ViolationDirection::Over => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub bus: BusId,
    pub v: f64,
    pub deviation: f64,
    pub direction: ViolationDirection,
}

/// Buses outside their closed `[v_min, v_max]` band.
pub fn detect_violations(network: &NetworkModel, profile: &VoltageProfile) -> Vec<Violation> {
    network
        .buses
        .iter()
        .filter_map(|bus| {
            let v = profile.get(bus.id)?;
            if v < bus.v_min {
                Some(Violation { bus: bus.id, v, deviation: bus.v_min - v, direction: ViolationDirection::Under })
            } else if v > bus.v_max {
                Some(Violation { bus: bus.id, v, deviation: v - bus.v_max, direction: ViolationDirection::Over })
            } else {
                None
            }
        })
        .collect()
}
