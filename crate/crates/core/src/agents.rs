//! Inverter agent protocol.
//!
//! The free functions are the individual update rules: max/min voltage
//! assessment, the divide / merge / switch decision, leader election by
//! max-consensus on voltage deviation, the leader's dead-band integral
//! law, follower averaging and the reactive capacity / output formulas.
//! [`Agent`] wires them into a per-tick state machine that talks to its
//! neighbours only through [`AgentMessage`]s.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{Envelope, Tick};
use crate::grid::BusId;
use crate::scalar::{clamp, pos, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("control parameters violate {0}")]
    BadParams(&'static str),
    #[error("protocol timing violates {0}")]
    BadTiming(&'static str),
}

/// Voltage limits, thresholds and gains (per-unit and dimensionless).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlParams<T> {
    /// Upper regulation limit.
    pub v_hi: T,
    /// Lower regulation limit.
    pub v_lo: T,
    /// Upper coalition threshold.
    pub v_hi_th: T,
    /// Lower coalition threshold.
    pub v_lo_th: T,
    pub v_ref: T,
    /// Largest ratio gap for a merge.
    pub eps_u: T,
    /// Neighbour ratio above which a switch towards it is considered.
    pub u_hi_th: T,
    /// Own ratio below which the inverter has spare capacity.
    pub u_lo_th: T,
    /// Integral step size.
    pub alpha: T,
    /// Inverter over-sizing fraction.
    pub beta: T,
}

impl<T: Scalar> Default for ControlParams<T> {
    fn default() -> Self {
        ControlParams {
            v_hi: T::lit(1.09),
            v_lo: T::lit(0.91),
            v_hi_th: T::lit(1.05),
            v_lo_th: T::lit(0.95),
            v_ref: T::lit(1.00),
            eps_u: T::lit(0.02),
            u_hi_th: T::lit(0.90),
            u_lo_th: T::lit(0.70),
            alpha: T::lit(20.0),
            beta: T::lit(0.10),
        }
    }
}

impl<T: Scalar> ControlParams<T> {
    pub fn validate(&self) -> Result<(), AgentError> {
        let ordered = self.v_lo < self.v_lo_th
            && self.v_lo_th < self.v_ref
            && self.v_ref < self.v_hi_th
            && self.v_hi_th < self.v_hi;
        if !ordered {
            return Err(AgentError::BadParams("v_lo < v_lo_th < v_ref < v_hi_th < v_hi"));
        }
        if !(T::zero() < self.u_lo_th && self.u_lo_th < self.u_hi_th && self.u_hi_th <= T::one()) {
            return Err(AgentError::BadParams("0 < u_lo_th < u_hi_th <= 1"));
        }
        if !(self.alpha > T::zero()) {
            return Err(AgentError::BadParams("alpha > 0"));
        }
        if !(self.beta >= T::zero()) {
            return Err(AgentError::BadParams("beta >= 0"));
        }
        if !(self.eps_u > T::zero()) {
            return Err(AgentError::BadParams("eps_u > 0"));
        }
        Ok(())
    }

    /// True if `v` lies inside the coalition threshold band.
    pub fn within_thresholds(&self, v: T) -> bool {
        self.v_lo_th <= v && v <= self.v_hi_th
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Leader,
    Follower,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Leader => "leader",
            Role::Follower => "follower",
        }
    }
}

/// One inverter's protocol and device state.
#[derive(Clone, Debug, PartialEq)]
pub struct InverterState<T> {
    pub id: BusId,
    /// Instantaneous terminal voltage, p.u.
    pub v_now: T,
    /// Rolling average of `v_now`, p.u.
    pub v_avg: T,
    /// Utilization ratio as held by the protocol (not clipped).
    pub u: T,
    pub lambda_hi: T,
    pub lambda_lo: T,
    pub role: Role,
    /// Active output, kW.
    pub p_out: T,
    /// PV rating, kW.
    pub p_rated: T,
    /// Apparent power rating, kVA.
    pub s_rated: T,
    /// Available reactive capacity, kvar.
    pub q_max: T,
    /// Reactive output, kvar.
    pub q_out: T,
    /// Neighbours this inverter cooperates with, sorted.
    pub active_edges: Vec<BusId>,
    /// Neighbours it has separated from, sorted.
    pub severed_edges: Vec<BusId>,
}

impl<T: Scalar> InverterState<T> {
    pub fn new(id: BusId, p_rated: T, neighbors: &[BusId], params: &ControlParams<T>) -> Self {
        let s_rated = (T::one() + params.beta) * p_rated;
        let mut active = neighbors.to_vec();
        active.sort();
        InverterState {
            id,
            v_now: T::one(),
            v_avg: T::one(),
            u: T::zero(),
            lambda_hi: T::zero(),
            lambda_lo: T::zero(),
            role: Role::Follower,
            p_out: T::zero(),
            p_rated,
            s_rated,
            q_max: s_rated,
            q_out: T::zero(),
            active_edges: active,
            severed_edges: Vec::new(),
        }
    }

    pub fn is_active(&self, j: BusId) -> bool {
        self.active_edges.binary_search(&j).is_ok()
    }

    pub fn is_severed(&self, j: BusId) -> bool {
        self.severed_edges.binary_search(&j).is_ok()
    }

    /// Moves `j` between the active and severed sets.
    pub fn set_edge(&mut self, j: BusId, active: bool) {
        let (from, to) = if active {
            (&mut self.severed_edges, &mut self.active_edges)
        } else {
            (&mut self.active_edges, &mut self.severed_edges)
        };
        if let Ok(k) = from.binary_search(&j) {
            from.remove(k);
            if let Err(k) = to.binary_search(&j) {
                to.insert(k, j);
            }
        }
    }

    /// Clipped ratio actually applied to the inverter.
    pub fn effective_u(&self) -> T {
        clamp(self.u, -T::one(), T::one())
    }

    /// Starts acting as leader, seeding the duals so `u` is continuous.
    fn become_leader(&mut self) {
        self.lambda_lo = pos(self.u);
        self.lambda_hi = pos(-self.u);
        self.role = Role::Leader;
    }
}

/// An agent's belief about its coalition's voltage extremes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoalitionView<T> {
    pub v_max_est: T,
    pub v_min_est: T,
    pub dv_max_est: T,
    /// Both extremes inside the threshold band.
    pub coalition_ok: bool,
}

impl<T: Scalar> CoalitionView<T> {
    /// View of a coalition containing only this inverter.
    pub fn singleton(v_avg: T, params: &ControlParams<T>) -> Self {
        CoalitionView {
            v_max_est: v_avg,
            v_min_est: v_avg,
            dv_max_est: (v_avg - params.v_ref).abs(),
            coalition_ok: params.within_thresholds(v_avg),
        }
    }

    pub fn has_conflict(&self, params: &ControlParams<T>) -> bool {
        self.v_max_est > params.v_hi_th && self.v_min_est < params.v_lo_th
    }
}

/// One max/min-consensus round: merge the `(max, min)` estimates received
/// from active neighbours.
pub fn assess_step<T: Scalar>(
    view: &CoalitionView<T>,
    neighbor_views: &[(T, T)],
    params: &ControlParams<T>,
) -> CoalitionView<T> {
    let mut out = *view;
    for &(hi, lo) in neighbor_views {
        out.v_max_est = out.v_max_est.max(hi);
        out.v_min_est = out.v_min_est.min(lo);
    }
    out.dv_max_est = out
        .dv_max_est
        .max((out.v_max_est - params.v_ref).abs())
        .max((out.v_min_est - params.v_ref).abs());
    out.coalition_ok = params.within_thresholds(out.v_max_est) && params.within_thresholds(out.v_min_est);
    out
}

/// What the deciding inverter knows about one communication neighbour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborInfo<T> {
    pub id: BusId,
    pub v_avg: T,
    pub u: T,
    pub coalition_ok: bool,
    /// Edge currently cooperating.
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionInputs<'a, T> {
    pub v_avg: T,
    pub u: T,
    pub view: CoalitionView<T>,
    /// |N_i| in the communication graph, live or not.
    pub comm_degree: usize,
    /// Neighbours heard from during this assessment window.
    pub neighbors: &'a [NeighborInfo<T>],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CoalitionAction {
    /// Sever every listed (currently active) edge.
    Divide(Vec<BusId>),
    /// Reactivate a severed edge.
    Merge(BusId),
    /// Leave the current coalition through `from` (if any) and join `to`.
    Switch {
        to: BusId,
        from: Option<BusId>,
    },
    None,
}

/// Options that change the literal coalition rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleOptions {
    /// A merge also needs the neighbour's coalition to be inside the thresholds.
    pub merge_requires_peer_ok: bool,
}

impl Default for RuleOptions {
    fn default() -> Self {
        RuleOptions {
            merge_requires_peer_ok: true,
        }
    }
}

/// Divide, then merge, then switch; the first rule that fires wins.
pub fn decide_coalition_action<T: Scalar>(
    inputs: &DecisionInputs<'_, T>,
    params: &ControlParams<T>,
    rules: RuleOptions,
) -> CoalitionAction {
    let side = inputs.v_avg - params.v_ref;

    if inputs.view.has_conflict(params) {
        let cut: Vec<BusId> = inputs
            .neighbors
            .iter()
            .filter(|n| n.active && side * (n.v_avg - params.v_ref) < T::zero())
            .map(|n| n.id)
            .collect();
        if !cut.is_empty() {
            return CoalitionAction::Divide(cut);
        }
    }

    if inputs.view.coalition_ok {
        let best = inputs
            .neighbors
            .iter()
            .filter(|n| !n.active)
            .filter(|n| n.coalition_ok || !rules.merge_requires_peer_ok)
            .map(|n| ((inputs.u - n.u).abs(), n.id))
            .filter(|(gap, _)| *gap < params.eps_u)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        if let Some((_, j)) = best {
            return CoalitionAction::Merge(j);
        }
    }

    let spare = inputs.u.abs() < params.u_lo_th;
    if spare && params.within_thresholds(inputs.v_avg) && inputs.comm_degree <= 2 {
        let target = inputs
            .neighbors
            .iter()
            .filter(|n| !n.active && n.u.abs() > params.u_hi_th)
            .max_by(|a, b| {
                a.u.abs()
                    .partial_cmp(&b.u.abs())
                    .unwrap_or(Ordering::Equal)
                    .then(b.id.cmp(&a.id))
            });
        if let Some(j) = target {
            let from = inputs.neighbors.iter().find(|n| n.active).map(|n| n.id);
            return CoalitionAction::Switch { to: j.id, from };
        }
    }

    CoalitionAction::None
}

/// Candidate in the leader max-consensus: the largest deviation wins,
/// ties go to the smaller id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DevClaim<T> {
    pub dv: T,
    pub id: BusId,
}

impl<T: Scalar> DevClaim<T> {
    pub fn beats(&self, other: &DevClaim<T>) -> bool {
        self.dv > other.dv || (self.dv == other.dv && self.id < other.id)
    }
}

/// One max-consensus round over deviation claims.
pub fn max_claim_step<T: Scalar>(estimate: DevClaim<T>, received: &[DevClaim<T>]) -> DevClaim<T> {
    received
        .iter()
        .fold(estimate, |best, c| if c.beats(&best) { *c } else { best })
}

/// Role once the claim consensus has converged.
pub fn elect_leader<T: Scalar>(own: DevClaim<T>, estimate: DevClaim<T>) -> Role {
    if estimate.id == own.id || own.beats(&estimate) {
        Role::Leader
    } else {
        Role::Follower
    }
}

/// Dead-band integral law of the leader. Returns `(u, lambda_hi, lambda_lo)`
/// for the next tick; `u` is formed from the current duals.
pub fn leader_step<T: Scalar>(state: &InverterState<T>, params: &ControlParams<T>) -> (T, T, T) {
    let u = state.lambda_lo - state.lambda_hi;
    let lambda_hi = pos(state.lambda_hi + params.alpha * (state.v_now - params.v_hi));
    let lambda_lo = pos(state.lambda_lo + params.alpha * (params.v_lo - state.v_now));
    (u, lambda_hi, lambda_lo)
}

/// Average of the own ratio and the ratios received this tick.
pub fn follower_step<T: Scalar>(u: T, neighbor_ratios: &[T]) -> T {
    if neighbor_ratios.is_empty() {
        return u;
    }
    let total = neighbor_ratios.iter().fold(u, |acc, x| acc + *x);
    total / T::from_usize(neighbor_ratios.len() + 1).expect("count fits scalar")
}

/// Reactive headroom `sqrt(S^2 - P^2)` with `S = (1 + beta) P_rated`.
/// Output above the apparent rating leaves no headroom.
pub fn q_capacity<T: Scalar>(p_out: T, p_rated: T, beta: T) -> T {
    let s_rated = (T::one() + beta) * p_rated;
    if p_out > s_rated {
        log::warn!("active output {p_out} kW exceeds apparent rating {s_rated} kVA");
        return T::zero();
    }
    let p = p_out.max(T::zero());
    (s_rated * s_rated - p * p).max(T::zero()).sqrt()
}

/// Reactive output for ratio `u`, projected onto `[-1, 1]`.
pub fn reactive_output<T: Scalar>(u: T, q_max: T) -> T {
    clamp(u, -T::one(), T::one()) * q_max
}

/// Mean over a fixed number of most recent samples; before the window
/// fills, the mean of what is there.
#[derive(Clone, Debug)]
pub struct MovingAverage<T> {
    buf: Vec<T>,
    next: usize,
    filled: bool,
    sum: T,
}

impl<T: Scalar> MovingAverage<T> {
    pub fn new(window: usize) -> Self {
        MovingAverage {
            buf: Vec::with_capacity(window.max(1)),
            next: 0,
            filled: false,
            sum: T::zero(),
        }
    }

    pub fn push(&mut self, x: T) -> T {
        let cap = self.buf.capacity();
        if !self.filled {
            self.buf.push(x);
            self.sum += x;
            if self.buf.len() == cap {
                self.filled = true;
                self.next = 0;
            }
        } else {
            self.sum += x - self.buf[self.next];
            self.buf[self.next] = x;
            self.next += 1;
            if self.next == cap {
                self.next = 0;
                // Re-add from scratch once per lap so rounding does not creep.
                self.sum = self.buf.iter().copied().sum();
            }
        }
        self.mean()
    }

    pub fn mean(&self) -> T {
        if self.buf.is_empty() {
            T::zero()
        } else {
            self.sum / T::from_usize(self.buf.len()).expect("window fits scalar")
        }
    }
}

/// How an agent takes part in the scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentMode {
    /// Self-organising coalitions.
    Proposed,
    /// Leader of its own singleton coalition, no messages.
    Local,
    /// Coalition edges dictated by a central partition.
    Centralized,
}

impl AgentMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentMode::Proposed => "proposed",
            AgentMode::Local => "local",
            AgentMode::Centralized => "centralized",
        }
    }
}

/// Tick schedule of the slow loop. Coalitions are updated at every
/// multiple of `cycle` (from the first full cycle on). The voltage
/// assessment runs over the `assess` ticks before an update, the edge
/// changes commit `latency` ticks after it and the election runs over the
/// `elect` ticks after the commit. Tick 0 opens an election.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProtocolTiming {
    pub cycle: Tick,
    pub assess: Tick,
    pub elect: Tick,
    pub latency: Tick,
}

impl ProtocolTiming {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.latency < 1 || self.assess < 1 || self.elect < 1 {
            return Err(AgentError::BadTiming("windows and latency must be at least one tick"));
        }
        if self.cycle < 2 * self.assess {
            return Err(AgentError::BadTiming("cycle >= 2 * assessment window"));
        }
        if self.latency + self.elect + self.assess > self.cycle {
            return Err(AgentError::BadTiming("latency + election + assessment <= cycle"));
        }
        if self.latency >= self.assess {
            return Err(AgentError::BadTiming("latency < assessment window"));
        }
        Ok(())
    }

    /// Update index `c` if `tick` is an update boundary `c * cycle`, `c >= 1`.
    pub fn update_at(&self, tick: Tick) -> Option<u64> {
        (tick >= self.cycle && tick.is_multiple_of(self.cycle)).then(|| tick / self.cycle)
    }

    /// Update index whose edge changes commit at `tick`.
    pub fn commit_at(&self, tick: Tick) -> Option<u64> {
        tick.checked_sub(self.latency).and_then(|t| self.update_at(t))
    }

    /// Update index whose assessment window contains `tick` (inclusive of
    /// the boundary itself).
    pub fn assessment_of(&self, tick: Tick) -> Option<u64> {
        let c = tick.div_ceil(self.cycle);
        (c >= 1 && tick + self.assess >= c * self.cycle).then_some(c)
    }

    /// Start tick of the election window containing `tick`.
    pub fn election_of(&self, tick: Tick) -> Option<Tick> {
        if tick < self.elect {
            return Some(0);
        }
        let since = tick.checked_sub(self.latency)?;
        let c = since / self.cycle;
        if c == 0 {
            return None;
        }
        let start = c * self.cycle + self.latency;
        (tick < start + self.elect).then_some(start)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssessMsg<T> {
    pub update: u64,
    /// Sender's averaged voltage frozen at the start of the window.
    pub v_snap: T,
    pub v_max_est: T,
    pub v_min_est: T,
    pub coalition_ok: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElectMsg<T> {
    /// Start tick of the election window.
    pub round: Tick,
    pub claim: DevClaim<T>,
}

/// Broadcast every tick to every communication neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentMessage<T> {
    pub u: T,
    pub v_avg: T,
    pub assess: Option<AssessMsg<T>>,
    pub elect: Option<ElectMsg<T>>,
    /// Topology proposal, only on an update tick.
    pub proposal: Option<(u64, CoalitionAction)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AgentEventKind {
    Divide(BusId),
    Merge(BusId),
    Switch {
        to: BusId,
        from: Option<BusId>,
    },
    /// Edge state changed at commit.
    EdgeUp(BusId),
    EdgeDown(BusId),
    Elected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentEvent {
    pub tick: Tick,
    pub agent: BusId,
    pub kind: AgentEventKind,
}

#[derive(Clone, Debug)]
struct NeighborSlot<T> {
    id: BusId,
    last_u: Option<T>,
    assess: Option<AssessMsg<T>>,
}

/// Per-tick protocol engine of one inverter.
#[derive(Clone, Debug)]
pub struct Agent<T> {
    pub state: InverterState<T>,
    pub view: CoalitionView<T>,
    mode: AgentMode,
    rules: RuleOptions,
    neighbors: Vec<NeighborSlot<T>>,
    avg: MovingAverage<T>,
    /// (update index, v_avg at window start)
    snap: Option<(u64, T)>,
    claim: Option<(Tick, DevClaim<T>)>,
    pending: Option<(u64, CoalitionAction)>,
    central_edges: Option<Vec<BusId>>,
}

impl<T: Scalar> Agent<T> {
    pub fn new(
        id: BusId,
        p_rated: T,
        neighbors: &[BusId],
        params: &ControlParams<T>,
        mode: AgentMode,
        rules: RuleOptions,
        avg_window_ticks: usize,
    ) -> Self {
        let neighbors: &[BusId] = if mode == AgentMode::Local { &[] } else { neighbors };
        let mut state = InverterState::new(id, p_rated, neighbors, params);
        if mode == AgentMode::Local {
            state.role = Role::Leader;
        }
        let mut slots: Vec<NeighborSlot<T>> = neighbors
            .iter()
            .map(|&id| NeighborSlot {
                id,
                last_u: None,
                assess: None,
            })
            .collect();
        slots.sort_by_key(|s| s.id);
        Agent {
            state,
            view: CoalitionView::singleton(T::one(), params),
            mode,
            rules,
            neighbors: slots,
            avg: MovingAverage::new(avg_window_ticks),
            snap: None,
            claim: None,
            pending: None,
            central_edges: None,
        }
    }

    pub fn id(&self) -> BusId {
        self.state.id
    }

    pub fn mode(&self) -> AgentMode {
        self.mode
    }

    pub fn neighbor_ids(&self) -> impl Iterator<Item = BusId> + '_ {
        self.neighbors.iter().map(|n| n.id)
    }

    /// Central partition to apply at the next commit tick (centralized mode).
    pub fn set_central_edges(&mut self, active: Vec<BusId>) {
        self.central_edges = Some(active);
    }

    /// Updates device limits for this tick: active output and reactive headroom.
    pub fn set_active_output(&mut self, p_out: T, params: &ControlParams<T>) {
        self.state.p_out = p_out;
        self.state.q_max = q_capacity(p_out, self.state.p_rated, params.beta);
        self.state.q_out = reactive_output(self.state.u, self.state.q_max);
    }

    /// One controller tick. `v_now` is the measured voltage after the power
    /// flow for this tick, `inbox` the envelopes delivered to this agent.
    /// Returns the message to broadcast (none in local mode) and appends
    /// protocol events to `events`.
    pub fn step(
        &mut self,
        tick: Tick,
        v_now: T,
        inbox: &[&Envelope<AgentMessage<T>>],
        timing: &ProtocolTiming,
        params: &ControlParams<T>,
        events: &mut Vec<AgentEvent>,
    ) -> Option<AgentMessage<T>> {
        self.state.v_now = v_now;
        self.state.v_avg = self.avg.push(v_now);

        if self.mode == AgentMode::Local {
            let (u, hi, lo) = leader_step(&self.state, params);
            self.state.u = u;
            self.state.lambda_hi = hi;
            self.state.lambda_lo = lo;
            self.state.q_out = reactive_output(u, self.state.q_max);
            return None;
        }

        let assessing = timing.assessment_of(tick);
        let mut ratios: Vec<T> = Vec::with_capacity(inbox.len());
        let mut extremes: Vec<(T, T)> = Vec::new();
        let mut claims: Vec<DevClaim<T>> = Vec::new();
        let commit = timing.commit_at(tick);
        let mut peer_proposals: Vec<(BusId, CoalitionAction)> = Vec::new();

        for env in inbox {
            let msg = &env.payload;
            let Ok(k) = self.neighbors.binary_search_by_key(&env.sender, |s| s.id) else {
                continue;
            };
            let active = self.state.is_active(env.sender);
            let slot = &mut self.neighbors[k];
            slot.last_u = Some(msg.u);
            if let Some(a) = &msg.assess {
                if Some(a.update) == assessing {
                    if active {
                        extremes.push((a.v_max_est, a.v_min_est));
                    }
                    slot.assess = Some(a.clone());
                }
            }
            if active {
                ratios.push(msg.u);
                if let (Some(e), Some((round, _))) = (&msg.elect, &self.claim) {
                    if e.round == *round {
                        claims.push(e.claim);
                    }
                }
            }
            if let (Some(c), Some((pc, action))) = (commit, &msg.proposal) {
                if *pc == c && env.sent_tick + timing.latency == tick {
                    peer_proposals.push((env.sender, action.clone()));
                }
            }
        }

        // Edge changes decided at the last update take effect together.
        if let Some(c) = commit {
            self.commit(c, tick, &peer_proposals, events);
        }

        // Leader election.
        match timing.election_of(tick) {
            Some(start) if start == tick => {
                let own = DevClaim {
                    dv: (self.state.v_avg - params.v_ref).abs(),
                    id: self.state.id,
                };
                self.claim = Some((start, own));
            }
            Some(start) => {
                if let Some((round, est)) = self.claim {
                    if round == start {
                        let est = max_claim_step(est, &claims);
                        self.claim = Some((round, est));
                        if tick + 1 == start + timing.elect {
                            self.finish_election(tick, events);
                        }
                    }
                }
            }
            None => {}
        }

        // Coalition voltage assessment.
        if let Some(c) = assessing {
            if self.snap.map(|s| s.0) != Some(c) {
                self.snap = Some((c, self.state.v_avg));
                self.view = CoalitionView::singleton(self.state.v_avg, params);
                for n in self.neighbors.iter_mut() {
                    if n.assess.as_ref().is_some_and(|a| a.update != c) {
                        n.assess = None;
                    }
                }
            }
            self.view = assess_step(&self.view, &extremes, params);
        }

        let mut proposal = None;
        if let Some(c) = timing.update_at(tick) {
            if self.mode == AgentMode::Proposed {
                let action = self.decide(params);
                match &action {
                    CoalitionAction::Divide(cut) => {
                        for &j in cut {
                            events.push(self.event(tick, AgentEventKind::Divide(j)));
                        }
                    }
                    CoalitionAction::Merge(j) => {
                        events.push(self.event(tick, AgentEventKind::Merge(*j)));
                    }
                    CoalitionAction::Switch { to, from } => {
                        events.push(self.event(tick, AgentEventKind::Switch { to: *to, from: *from }))
                    }
                    CoalitionAction::None => {}
                }
                proposal = Some((c, action.clone()));
                self.pending = Some((c, action));
            }
        }

        // Fast loop.
        match self.state.role {
            Role::Leader => {
                let (u, hi, lo) = leader_step(&self.state, params);
                self.state.u = u;
                self.state.lambda_hi = hi;
                self.state.lambda_lo = lo;
            }
            Role::Follower => {
                self.state.u = follower_step(self.state.u, &ratios);
            }
        }
        self.state.q_out = reactive_output(self.state.u, self.state.q_max);

        let assess = assessing.map(|c| AssessMsg {
            update: c,
            v_snap: self.snap.map(|s| s.1).unwrap_or(self.state.v_avg),
            v_max_est: self.view.v_max_est,
            v_min_est: self.view.v_min_est,
            coalition_ok: self.view.coalition_ok,
        });
        let elect = self.claim.and_then(|(round, claim)| {
            timing
                .election_of(tick)
                .filter(|s| *s == round)
                .map(|_| ElectMsg { round, claim })
        });
        Some(AgentMessage {
            u: self.state.u,
            v_avg: self.state.v_avg,
            assess,
            elect,
            proposal,
        })
    }

    fn event(&self, tick: Tick, kind: AgentEventKind) -> AgentEvent {
        AgentEvent {
            tick,
            agent: self.state.id,
            kind,
        }
    }

    fn decide(&self, params: &ControlParams<T>) -> CoalitionAction {
        let Some((c, v_snap)) = self.snap else {
            return CoalitionAction::None;
        };
        let infos: Vec<NeighborInfo<T>> = self
            .neighbors
            .iter()
            .filter_map(|n| {
                let a = n.assess.as_ref().filter(|a| a.update == c)?;
                Some(NeighborInfo {
                    id: n.id,
                    v_avg: a.v_snap,
                    u: n.last_u?,
                    coalition_ok: a.coalition_ok,
                    active: self.state.is_active(n.id),
                })
            })
            .collect();
        let inputs = DecisionInputs {
            v_avg: v_snap,
            u: self.state.u,
            view: self.view,
            comm_degree: self.neighbors.len(),
            neighbors: &infos,
        };
        decide_coalition_action(&inputs, params, self.rules)
    }

    fn commit(
        &mut self,
        update: u64,
        tick: Tick,
        peer_proposals: &[(BusId, CoalitionAction)],
        events: &mut Vec<AgentEvent>,
    ) {
        if self.mode == AgentMode::Centralized {
            if let Some(edges) = self.central_edges.take() {
                let ids: Vec<BusId> = self.neighbors.iter().map(|n| n.id).collect();
                for j in ids {
                    let want = edges.contains(&j);
                    if want != self.state.is_active(j) {
                        self.state.set_edge(j, want);
                        let kind = if want {
                            AgentEventKind::EdgeUp(j)
                        } else {
                            AgentEventKind::EdgeDown(j)
                        };
                        events.push(self.event(tick, kind));
                    }
                }
            }
            return;
        }
        let own = match self.pending.take() {
            Some((c, a)) if c == update => a,
            _ => CoalitionAction::None,
        };
        let me = self.state.id;
        for (j, peer) in peer_proposals {
            let j = *j;
            let was_active = self.state.is_active(j);
            let now_active = if was_active {
                !(severs(&own, j) || severs(peer, me))
            } else {
                joins(&own, j) || joins(peer, me)
            };
            if now_active != was_active {
                self.state.set_edge(j, now_active);
                let kind = if now_active {
                    AgentEventKind::EdgeUp(j)
                } else {
                    AgentEventKind::EdgeDown(j)
                };
                events.push(self.event(tick, kind));
            }
        }
    }

    fn finish_election(&mut self, tick: Tick, events: &mut Vec<AgentEvent>) {
        let Some((_, est)) = self.claim else { return };
        let own = DevClaim {
            dv: T::zero(),
            id: self.state.id,
        };
        // Only the id matters here: the estimate names the winner.
        let role = if est.id == own.id { Role::Leader } else { Role::Follower };
        if role == Role::Leader && self.state.role != Role::Leader {
            self.state.become_leader();
        } else {
            self.state.role = role;
        }
        if role == Role::Leader {
            events.push(self.event(tick, AgentEventKind::Elected));
        }
    }
}

fn severs(action: &CoalitionAction, j: BusId) -> bool {
    match action {
        CoalitionAction::Divide(cut) => cut.contains(&j),
        CoalitionAction::Switch { from, .. } => *from == Some(j),
        _ => false,
    }
}

fn joins(action: &CoalitionAction, j: BusId) -> bool {
    match action {
        CoalitionAction::Merge(to) => *to == j,
        CoalitionAction::Switch { to, .. } => *to == j,
        _ => false,
    }
}
