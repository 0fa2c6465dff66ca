//! Radial feeder model, backward/forward sweep power flow and
//! voltage / reactive-power sensitivities.
//!
//! Powers on [`Bus`] are stored in kW / kvar and lines in ohm; the solver
//! works in per-unit on the network's bases. Per-unit impedance uses the
//! three-phase convention `Z_base = 3 * V_ln^2 / S_base`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use num_complex::Complex;
use thiserror::Error;

use crate::scalar::Scalar;

/// Integer bus label. Inverters are identified by the bus they sit on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Load,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus<T> {
    pub id: BusId,
    pub kind: BusKind,
    /// Active demand, kW.
    pub load_p: T,
    /// Reactive demand, kvar.
    pub load_q: T,
    /// PV active injection, kW.
    pub pv_p: T,
    /// Inverter reactive injection, kvar.
    pub inv_q: T,
}

impl<T: Scalar> Bus<T> {
    pub fn slack(id: u32) -> Self {
        Self::load(id, T::zero(), T::zero()).with_kind(BusKind::Slack)
    }

    pub fn load(id: u32, load_p: T, load_q: T) -> Self {
        Bus {
            id: BusId(id),
            kind: BusKind::Load,
            load_p,
            load_q,
            pv_p: T::zero(),
            inv_q: T::zero(),
        }
    }

    pub fn with_pv(mut self, pv_p: T) -> Self {
        self.pv_p = pv_p;
        self
    }

    fn with_kind(mut self, kind: BusKind) -> Self {
        self.kind = kind;
        self
    }

    /// Net complex injection in kVA (generation positive).
    pub fn injection_kva(&self) -> Complex<T> {
        Complex::new(self.pv_p - self.load_p, self.inv_q - self.load_q)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line<T> {
    pub from: BusId,
    pub to: BusId,
    /// Resistance, ohm.
    pub r: T,
    /// Reactance, ohm.
    pub x: T,
}

impl<T: Scalar> Line<T> {
    pub fn new(from: u32, to: u32, r: T, x: T) -> Self {
        Line {
            from: BusId(from),
            to: BusId(to),
            r,
            x,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("network must contain exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("line {from}-{to} references unknown bus")]
    UnknownLineEnd { from: BusId, to: BusId },
    #[error("line {from}-{to} must have r > 0 and x > 0")]
    BadImpedance { from: BusId, to: BusId },
    #[error("bus {0} has a negative load or PV value")]
    NegativePower(BusId),
    #[error("network is not a tree: {lines} lines for {buses} buses")]
    NotATree { buses: usize, lines: usize },
    #[error("bus {0} is not reachable from the slack bus")]
    Disconnected(BusId),
    #[error("unknown bus id {0}")]
    UnknownBus(BusId),
    #[error("injection vector has length {got}, expected {expected}")]
    InjectionLength { got: usize, expected: usize },
    #[error("slack setpoint {0} p.u. outside (0.8, 1.2)")]
    SlackSetpoint(f64),
    #[error("power base values must be positive")]
    BadBase,
    #[error("power flow did not converge after {iterations} sweeps (mismatch {mismatch:e} p.u.)")]
    NotConverged { iterations: usize, mismatch: f64 },
}

/// Radial feeder with a validated tree topology.
#[derive(Clone, Debug)]
pub struct NetworkModel<T> {
    buses: Vec<Bus<T>>,
    lines: Vec<Line<T>>,
    v_base: T,
    s_base: T,
    index: BTreeMap<BusId, usize>,
    root: usize,
    /// Bus indices in breadth-first order from the slack.
    order: Vec<usize>,
    parent: Vec<Option<usize>>,
    /// Per-unit impedance of the line towards the parent.
    z_up: Vec<Complex<T>>,
}

impl<T: Scalar> NetworkModel<T> {
    /// Builds and validates a network. `v_base` is line-to-neutral volts,
    /// `s_base` three-phase kVA.
    pub fn new(buses: Vec<Bus<T>>, lines: Vec<Line<T>>, v_base: T, s_base: T) -> Result<Self, GridError> {
        if !(v_base > T::zero() && s_base > T::zero()) {
            return Err(GridError::BadBase);
        }
        let mut index = BTreeMap::new();
        for (k, b) in buses.iter().enumerate() {
            if index.insert(b.id, k).is_some() {
                return Err(GridError::DuplicateBus(b.id));
            }
            let negative = [b.load_p, b.load_q, b.pv_p].iter().any(|v| *v < T::zero());
            if negative {
                return Err(GridError::NegativePower(b.id));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(k, _)| k)
            .collect();
        if slacks.len() != 1 {
            return Err(GridError::SlackCount(slacks.len()));
        }
        let root = slacks[0];
        if lines.len() + 1 != buses.len() {
            return Err(GridError::NotATree {
                buses: buses.len(),
                lines: lines.len(),
            });
        }

        let z_base = T::lit(3.0) * v_base * v_base / (s_base * T::lit(1000.0));
        let mut adj: Vec<Vec<(usize, Complex<T>)>> = vec![Vec::new(); buses.len()];
        for l in &lines {
            let (a, b) = match (index.get(&l.from), index.get(&l.to)) {
                (Some(&a), Some(&b)) if a != b => (a, b),
                _ => return Err(GridError::UnknownLineEnd { from: l.from, to: l.to }),
            };
            if !(l.r > T::zero() && l.x > T::zero()) {
                return Err(GridError::BadImpedance { from: l.from, to: l.to });
            }
            let z = Complex::new(l.r / z_base, l.x / z_base);
            adj[a].push((b, z));
            adj[b].push((a, z));
        }

        let n = buses.len();
        let mut parent = vec![None; n];
        let mut z_up = vec![Complex::new(T::zero(), T::zero()); n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(k) = queue.pop_front() {
            order.push(k);
            for &(m, z) in &adj[k] {
                if !seen[m] {
                    seen[m] = true;
                    parent[m] = Some(k);
                    z_up[m] = z;
                    queue.push_back(m);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(GridError::Disconnected(buses[k].id));
        }

        Ok(NetworkModel {
            buses,
            lines,
            v_base,
            s_base,
            index,
            root,
            order,
            parent,
            z_up,
        })
    }

    pub fn buses(&self) -> &[Bus<T>] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line<T>] {
        &self.lines
    }

    pub fn v_base(&self) -> T {
        self.v_base
    }

    pub fn s_base(&self) -> T {
        self.s_base
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn slack_index(&self) -> usize {
        self.root
    }

    pub fn slack_id(&self) -> BusId {
        self.buses[self.root].id
    }

    pub fn index_of(&self, id: BusId) -> Result<usize, GridError> {
        self.index.get(&id).copied().ok_or(GridError::UnknownBus(id))
    }

    pub fn bus(&self, id: BusId) -> Result<&Bus<T>, GridError> {
        Ok(&self.buses[self.index_of(id)?])
    }

    /// Mutable access to a bus' powers. Id and kind stay fixed.
    pub fn set_bus_power(&mut self, id: BusId, load_p: T, load_q: T, pv_p: T, inv_q: T) -> Result<(), GridError> {
        let k = self.index_of(id)?;
        if load_p < T::zero() || load_q < T::zero() || pv_p < T::zero() {
            return Err(GridError::NegativePower(id));
        }
        let b = &mut self.buses[k];
        b.load_p = load_p;
        b.load_q = load_q;
        b.pv_p = pv_p;
        b.inv_q = inv_q;
        Ok(())
    }

    /// Parent bus index of `k` (towards the slack), `None` for the slack.
    pub fn parent_index(&self, k: usize) -> Option<usize> {
        self.parent[k]
    }

    /// Bus indices from the slack outwards, breadth first.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    /// Indices on the path from bus `k` up to (and including) the slack.
    pub fn path_to_slack(&self, mut k: usize) -> Vec<usize> {
        let mut path = vec![k];
        while let Some(p) = self.parent[k] {
            path.push(p);
            k = p;
        }
        path
    }

    /// Converts kVA to per-unit.
    pub fn kva_to_pu(&self, s: Complex<T>) -> Complex<T> {
        s / self.s_base
    }

    /// Per-bus net injections in p.u. from the bus fields.
    pub fn injections_pu(&self) -> Vec<Complex<T>> {
        self.buses.iter().map(|b| b.injection_kva() / self.s_base).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowSolution<T> {
    pub v_mag: Vec<T>,
    pub v_ang: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest nodal complex power mismatch, p.u.
    pub mismatch: T,
    /// Complex power delivered by the slack into the feeder, p.u.
    pub slack_power: Complex<T>,
    /// Total series losses, p.u.
    pub losses: Complex<T>,
}

impl<T: Scalar> PowerFlowSolution<T> {
    /// Unsolved placeholder for [`SweepSolver::solve_into`].
    pub fn empty() -> Self {
        PowerFlowSolution {
            v_mag: Vec::new(),
            v_ang: Vec::new(),
            converged: false,
            iterations: 0,
            mismatch: T::infinity(),
            slack_power: Complex::new(T::zero(), T::zero()),
            losses: Complex::new(T::zero(), T::zero()),
        }
    }

    pub fn into_result(self) -> Result<Self, GridError> {
        if self.converged {
            Ok(self)
        } else {
            Err(GridError::NotConverged {
                iterations: self.iterations,
                mismatch: self.mismatch.to_f64_lossy(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepOptions<T> {
    /// Stop when the largest voltage update and the largest power
    /// mismatch both fall below this value (p.u.).
    pub tol: T,
    pub max_sweeps: usize,
}

impl<T: Scalar> Default for SweepOptions<T> {
    fn default() -> Self {
        let floor = T::epsilon() * T::lit(64.0);
        SweepOptions {
            tol: T::lit(1e-8).max(floor),
            max_sweeps: 200,
        }
    }
}

/// Backward/forward sweep solver with reusable work buffers.
#[derive(Clone, Debug)]
pub struct SweepSolver<T> {
    pub options: SweepOptions<T>,
    v: Vec<Complex<T>>,
    branch: Vec<Complex<T>>,
}

impl<T: Scalar> Default for SweepSolver<T> {
    fn default() -> Self {
        Self::new(SweepOptions::default())
    }
}

impl<T: Scalar> SweepSolver<T> {
    pub fn new(options: SweepOptions<T>) -> Self {
        SweepSolver {
            options,
            v: Vec::new(),
            branch: Vec::new(),
        }
    }

    pub fn solve(
        &mut self,
        net: &NetworkModel<T>,
        injections: &[Complex<T>],
        slack_v: T,
    ) -> Result<PowerFlowSolution<T>, GridError> {
        let mut out = PowerFlowSolution::empty();
        self.solve_into(net, injections, slack_v, &mut out)?;
        Ok(out)
    }

    /// Solves into `out`, reusing its allocations. Returns `Err` only for
    /// invalid inputs; non-convergence is reported through `out.converged`.
    pub fn solve_into(
        &mut self,
        net: &NetworkModel<T>,
        injections: &[Complex<T>],
        slack_v: T,
        out: &mut PowerFlowSolution<T>,
    ) -> Result<(), GridError> {
        let n = net.len();
        if injections.len() != n {
            return Err(GridError::InjectionLength {
                got: injections.len(),
                expected: n,
            });
        }
        if !(slack_v > T::lit(0.8) && slack_v < T::lit(1.2)) {
            return Err(GridError::SlackSetpoint(slack_v.to_f64_lossy()));
        }
        let zero = Complex::new(T::zero(), T::zero());
        self.v.clear();
        self.v.resize(n, Complex::new(T::one(), T::zero()));
        self.v[net.root] = Complex::new(slack_v, T::zero());
        self.branch.clear();
        self.branch.resize(n, zero);

        let tol = self.options.tol;
        let mut converged = false;
        let mut mismatch = T::infinity();
        let mut sweeps = 0;
        while sweeps < self.options.max_sweeps {
            sweeps += 1;
            // Backward: branch current into each bus = its load current plus
            // everything flowing on to its children.
            for b in self.branch.iter_mut() {
                *b = zero;
            }
            for &k in net.order.iter().rev() {
                let drawn = (-injections[k] / self.v[k]).conj();
                let total = self.branch[k] + drawn;
                self.branch[k] = total;
                if let Some(p) = net.parent[k] {
                    self.branch[p] += total;
                }
            }
            // Forward: voltage drop along each line.
            let mut max_dv = T::zero();
            for &k in net.order.iter().skip(1) {
                let p = net.parent[k].expect("non-root bus has a parent");
                let vk = self.v[p] - net.z_up[k] * self.branch[k];
                let dv = (vk - self.v[k]).norm();
                if !(dv <= max_dv) {
                    max_dv = dv;
                }
                self.v[k] = vk;
            }
            if max_dv.is_nan() {
                break;
            }
            if max_dv <= tol {
                mismatch = self.mismatch(net, injections);
                if mismatch <= tol {
                    converged = true;
                    break;
                }
            }
        }
        if !converged && mismatch.is_infinite() {
            mismatch = self.mismatch(net, injections);
        }

        // Slack power and losses at the final voltages.
        let mut losses = zero;
        for &k in net.order.iter().skip(1) {
            let p = net.parent[k].expect("non-root bus has a parent");
            let i = (self.v[p] - self.v[k]) / net.z_up[k];
            losses += net.z_up[k] * i * i.conj();
        }
        let mut root_out = zero;
        for &k in net.order.iter().skip(1) {
            if net.parent[k] == Some(net.root) {
                root_out += (self.v[net.root] - self.v[k]) / net.z_up[k];
            }
        }
        out.v_mag.clear();
        out.v_ang.clear();
        out.v_mag.extend(self.v.iter().map(|v| v.norm()));
        out.v_ang.extend(self.v.iter().map(|v| v.arg()));
        out.v_mag[net.root] = slack_v;
        out.v_ang[net.root] = T::zero();
        out.converged = converged;
        out.iterations = sweeps;
        out.mismatch = mismatch;
        out.slack_power = self.v[net.root] * root_out.conj() - injections[net.root];
        out.losses = losses;
        Ok(())
    }

    /// Largest |S_calc - S_inj| over buses, using line currents computed
    /// from the present voltages.
    fn mismatch(&self, net: &NetworkModel<T>, injections: &[Complex<T>]) -> T {
        let zero = Complex::new(T::zero(), T::zero());
        let n = net.len();
        // Net current leaving each bus into the network.
        let mut out_current = vec![zero; n];
        for &k in net.order.iter().skip(1) {
            let p = net.parent[k].expect("non-root bus has a parent");
            let i = (self.v[p] - self.v[k]) / net.z_up[k];
            out_current[p] += i;
            out_current[k] -= i;
        }
        let mut worst = T::zero();
        for &k in net.order.iter().skip(1) {
            let s = self.v[k] * out_current[k].conj();
            let m = (s - injections[k]).norm();
            if !(m <= worst) {
                worst = m;
            }
        }
        worst
    }
}

/// Solves the power flow with default sweep options (flat start).
pub fn solve_power_flow<T: Scalar>(
    net: &NetworkModel<T>,
    injections: &[Complex<T>],
    slack_v: T,
) -> Result<PowerFlowSolution<T>, GridError> {
    SweepSolver::new(SweepOptions::default()).solve(net, injections, slack_v)
}

/// Reactive-power perturbation used by the finite-difference sensitivities, kvar.
pub const SENSITIVITY_STEP_KVAR: f64 = 1.0;

/// Central finite-difference columns `dV_k / dQ_src` for every bus `k`,
/// one column per source bus, around the operating point `injections`.
pub fn sensitivity_columns<T: Scalar>(
    net: &NetworkModel<T>,
    injections: &[Complex<T>],
    slack_v: T,
    sources: &[BusId],
) -> Result<Vec<Vec<T>>, GridError> {
    let mut solver = SweepSolver::new(SweepOptions::default());
    let delta = T::lit(SENSITIVITY_STEP_KVAR) / net.s_base;
    let mut work = injections.to_vec();
    let mut up = PowerFlowSolution::empty();
    let mut down = PowerFlowSolution::empty();
    let mut columns = Vec::with_capacity(sources.len());
    for &src in sources {
        let k = net.index_of(src)?;
        work[k] = injections[k] + Complex::new(T::zero(), delta);
        solver.solve_into(net, &work, slack_v, &mut up)?;
        work[k] = injections[k] - Complex::new(T::zero(), delta);
        solver.solve_into(net, &work, slack_v, &mut down)?;
        work[k] = injections[k];
        for s in [&up, &down] {
            if !s.converged {
                return Err(GridError::NotConverged {
                    iterations: s.iterations,
                    mismatch: s.mismatch.to_f64_lossy(),
                });
            }
        }
        let two_delta = delta + delta;
        columns.push(
            up.v_mag
                .iter()
                .zip(&down.v_mag)
                .map(|(a, b)| (*a - *b) / two_delta)
                .collect(),
        );
    }
    Ok(columns)
}

fn check_solution<T: Scalar>(net: &NetworkModel<T>, sol: &PowerFlowSolution<T>) -> Result<T, GridError> {
    if !sol.converged || sol.v_mag.len() != net.len() {
        return Err(GridError::NotConverged {
            iterations: sol.iterations,
            mismatch: sol.mismatch.to_f64_lossy(),
        });
    }
    Ok(sol.v_mag[net.root])
}

/// `dV_target / dQ_i` (p.u. per p.u.) for each source bus, at the operating
/// point given by the bus fields of `net` and the slack voltage in `sol`.
pub fn voltage_sensitivity<T: Scalar>(
    net: &NetworkModel<T>,
    sol: &PowerFlowSolution<T>,
    target: BusId,
    sources: &[BusId],
) -> Result<Vec<T>, GridError> {
    let slack_v = check_solution(net, sol)?;
    let t = net.index_of(target)?;
    let cols = sensitivity_columns(net, &net.injections_pu(), slack_v, sources)?;
    Ok(cols.iter().map(|c| c[t]).collect())
}

/// Square `A_VQ` block restricted to a set of buses.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrix<T> {
    pub buses: Vec<BusId>,
    /// `a[t][s] = dV_{buses[t]} / dQ_{buses[s]}`.
    pub a: Vec<Vec<T>>,
}

/// `A_VQ` over `buses` at the given operating point.
pub fn vq_sensitivity_at<T: Scalar>(
    net: &NetworkModel<T>,
    injections: &[Complex<T>],
    slack_v: T,
    buses: &[BusId],
) -> Result<SensitivityMatrix<T>, GridError> {
    let rows: Vec<usize> = buses.iter().map(|b| net.index_of(*b)).collect::<Result<_, _>>()?;
    let cols = sensitivity_columns(net, injections, slack_v, buses)?;
    let a = rows.iter().map(|&t| cols.iter().map(|c| c[t]).collect()).collect();
    Ok(SensitivityMatrix {
        buses: buses.to_vec(),
        a,
    })
}

/// `A_VQ` over every bus carrying PV (`pv_p > 0`).
pub fn full_vq_sensitivity<T: Scalar>(
    net: &NetworkModel<T>,
    sol: &PowerFlowSolution<T>,
) -> Result<SensitivityMatrix<T>, GridError> {
    let slack_v = check_solution(net, sol)?;
    let pv: Vec<BusId> = net.buses.iter().filter(|b| b.pv_p > T::zero()).map(|b| b.id).collect();
    vq_sensitivity_at(net, &net.injections_pu(), slack_v, &pv)
}
