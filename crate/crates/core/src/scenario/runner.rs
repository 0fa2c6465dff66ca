//! Two-timescale simulation loop.
//!
//! Every tick: profiles and slack setpoint for the current time, reactive
//! headroom and output of every inverter, power flow, metrics, message
//! delivery, one protocol step per agent, message sending. Coalition
//! updates, commits and elections happen inside the agents on the
//! schedule given by [`ProtocolTiming`].

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FaultSpec, ScenarioConfig, SlackSchedule};
use super::feeder::{generate_network, Feeder};
use super::metrics::{Metrics, MetricsAccumulator};
use super::profiles::{generate_profiles, site_seed, Profile, ProfileKind, MINUTE_S};
use super::ScenarioError;
use crate::agents::{Agent, AgentEvent, AgentEventKind, AgentMessage, AgentMode, ControlParams, ProtocolTiming, Role};
use crate::baselines::{epsilon_decompose, select_epsilon, BaselineError};
use crate::comms::{CommGraph, Envelope, FaultSchedule, MessageBus, Tick};
use crate::grid::{vq_sensitivity_at, BusId, PowerFlowSolution, SweepOptions, SweepSolver};

/// One line of `events.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub tick: Tick,
    pub action: String,
    pub target: String,
}

/// Recorded series plus per-tick metrics.
#[derive(Clone, Debug, Default)]
pub struct TimeSeriesResult {
    pub tick_s: f64,
    pub start_s: f64,
    /// Ticks between consecutive records.
    pub record_stride: u64,
    pub ticks: u64,
    pub bus_ids: Vec<BusId>,
    pub inverter_ids: Vec<BusId>,
    /// Seconds since midnight of each record.
    pub times: Vec<f64>,
    /// Per record, per bus voltage (p.u.) from that tick's power flow.
    pub voltages: Vec<Vec<f64>>,
    /// Per record, per inverter ratio applied during that tick (clipped).
    pub ratios: Vec<Vec<f64>>,
    pub roles: Vec<Vec<Role>>,
    /// Per record, per inverter coalition label (smallest member id).
    pub coalitions: Vec<Vec<BusId>>,
    pub events: Vec<EventRecord>,
    pub metrics: Metrics,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    /// Ticks at which the active-edge relation was not symmetric.
    pub partition_violations: u64,
    /// Coalitions without exactly one leader at the end of an election.
    pub leader_violations: u64,
}

struct SiteRuntime {
    bus_index: usize,
    load: Option<Profile>,
    q_ratio: f64,
    pv: Option<Profile>,
}

/// A scenario being stepped tick by tick.
pub struct Simulation {
    cfg: ScenarioConfig,
    feeder: Feeder,
    timing: ProtocolTiming,
    slack: SlackSchedule,
    sites: Vec<SiteRuntime>,
    agents: Vec<Agent<f64>>,
    agent_bus: Vec<usize>,
    agent_pv: Vec<Option<Profile>>,
    index_of: BTreeMap<BusId, usize>,
    comm: CommGraph,
    bus: Option<MessageBus<AgentMessage<f64>>>,
    solver: SweepSolver<f64>,
    sol: PowerFlowSolution<f64>,
    base: Vec<Complex<f64>>,
    inj: Vec<Complex<f64>>,
    slack_v: f64,
    profile_step: Option<i64>,
    frozen: bool,
    tick: Tick,
    n_ticks: Tick,
    stride: Tick,
    acc: MetricsAccumulator,
    result: TimeSeriesResult,
    labels: Vec<usize>,
    label_ids: Vec<BusId>,
    inboxes: Vec<Vec<usize>>,
    u_applied: Vec<f64>,
    agent_events: Vec<AgentEvent>,
}

impl Simulation {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let feeder = match (&cfg.network.file, &cfg.network.generate) {
            (Some(path), _) => Feeder::load(path)?,
            (None, spec) => generate_network(&spec.clone().unwrap_or_default())?,
        };
        Self::with_feeder(cfg, feeder)
    }

    /// Runs `cfg` on an already built feeder (the `[network]` table is ignored).
    pub fn with_feeder(cfg: ScenarioConfig, feeder: Feeder) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let timing = cfg.timing()?;
        let slack = SlackSchedule::new(&cfg.slack)?;
        let net = &feeder.network;
        let csv_dir = cfg.profiles.csv_dir.clone();
        let profile_for =
            |bus: BusId, kind: ProfileKind, rating: f64, suffix: &str| -> Result<Profile, ScenarioError> {
                if let Some(dir) = &csv_dir {
                    let path = dir.join(format!("{bus}_{suffix}.csv"));
                    if path.exists() {
                        return Profile::load_csv(&path);
                    }
                }
                Ok(generate_profiles(kind, MINUTE_S, site_seed(cfg.seed, bus.0, kind)).scaled(rating))
            };

        let mut sites = Vec::new();
        let mut agent_ids = Vec::new();
        let mut agent_rating = Vec::new();
        let mut agent_pv = Vec::new();
        for s in &feeder.sites {
            let load = if s.load_kw > 0.0 {
                Some(profile_for(s.bus, s.profile, s.load_kw, "load")?)
            } else {
                None
            };
            let pv = if s.pv_kw > 0.0 {
                Some(profile_for(s.bus, ProfileKind::Pv, s.pv_kw, "pv")?)
            } else {
                None
            };
            let q_ratio = if s.load_kw > 0.0 { s.load_kvar / s.load_kw } else { 0.0 };
            if s.inverter {
                agent_ids.push(s.bus);
                agent_rating.push(s.pv_kw);
                agent_pv.push(pv.clone());
            }
            sites.push(SiteRuntime {
                bus_index: net.index_of(s.bus)?,
                load,
                q_ratio,
                // Inverter PV output is handled per agent.
                pv: if s.inverter { None } else { pv },
            });
        }
        if agent_ids.is_empty() {
            return Err(ScenarioError::Config("feeder has no inverters".into()));
        }

        let comm = CommGraph::from_feeder(net, &agent_ids)?;
        let avg = cfg.avg_window_ticks()?;
        let mode = cfg.strategy;
        let mut agents = Vec::with_capacity(agent_ids.len());
        let mut agent_bus = Vec::with_capacity(agent_ids.len());
        let mut index_of = BTreeMap::new();
        for (k, &id) in agent_ids.iter().enumerate() {
            let nb = comm.neighbors(id)?.to_vec();
            agents.push(Agent::new(id, agent_rating[k], &nb, &cfg.params, mode, cfg.rules, avg));
            agent_bus.push(net.index_of(id)?);
            index_of.insert(id, k);
        }

        let n_ticks = cfg.duration_ticks()?;
        let bus = if mode == AgentMode::Local {
            None
        } else {
            let faults = match &cfg.faults {
                FaultSpec::None => FaultSchedule::none(),
                FaultSpec::Hourly { fraction, duration_s } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xFA17_5EED);
                    let per_hour = (3600.0 / cfg.tick_s).round() as Tick;
                    let dur = (duration_s / cfg.tick_s).round() as Tick;
                    FaultSchedule::sample_periodic(&comm, &mut rng, *fraction, per_hour, dur, n_ticks)
                }
                FaultSpec::File { path } => FaultSchedule::load_csv(path, &comm, cfg.tick_s)?,
            };
            Some(MessageBus::new(comm.clone(), faults, timing.latency))
        };

        let n_bus = net.len();
        let result = TimeSeriesResult {
            tick_s: cfg.tick_s,
            start_s: cfg.start_s,
            record_stride: cfg.record_stride()?,
            ticks: n_ticks,
            bus_ids: net.buses().iter().map(|b| b.id).collect(),
            inverter_ids: agent_ids.clone(),
            ..TimeSeriesResult::default()
        };
        let n_agents = agents.len();
        Ok(Simulation {
            acc: MetricsAccumulator::new(&cfg.params),
            stride: cfg.record_stride()?,
            timing,
            slack,
            sites,
            agents,
            agent_bus,
            agent_pv,
            index_of,
            comm,
            bus,
            solver: SweepSolver::new(SweepOptions::default()),
            sol: PowerFlowSolution::empty(),
            base: vec![Complex::new(0.0, 0.0); n_bus],
            inj: vec![Complex::new(0.0, 0.0); n_bus],
            slack_v: 1.0,
            profile_step: None,
            frozen: false,
            tick: 0,
            n_ticks,
            result,
            labels: vec![0; n_agents],
            label_ids: agent_ids,
            inboxes: vec![Vec::new(); n_agents],
            u_applied: vec![0.0; n_agents],
            agent_events: Vec::new(),
            feeder,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn feeder(&self) -> &Feeder {
        &self.feeder
    }

    pub fn comm_graph(&self) -> &CommGraph {
        &self.comm
    }

    pub fn agents(&self) -> &[Agent<f64>] {
        &self.agents
    }

    pub fn agent(&self, id: BusId) -> Option<&Agent<f64>> {
        self.index_of.get(&id).map(|&k| &self.agents[k])
    }

    pub fn tick(&self) -> Tick {
        self.tick
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.n_ticks
    }

    /// Seconds since midnight at the current tick.
    pub fn time_s(&self) -> f64 {
        self.cfg.start_s + self.tick as f64 * self.cfg.tick_s
    }

    /// Power flow of the last completed tick.
    pub fn solution(&self) -> &PowerFlowSolution<f64> {
        &self.sol
    }

    pub fn slack_v(&self) -> f64 {
        self.slack_v
    }

    /// Bus injections (p.u.) of the last tick without inverter reactive output.
    pub fn base_injections(&self) -> &[Complex<f64>] {
        &self.base
    }

    /// Active output (kW) and reactive headroom (kvar) of each inverter.
    pub fn inverter_limits(&self) -> Vec<(BusId, f64, f64)> {
        self.agents
            .iter()
            .map(|a| (a.id(), a.state.p_out, a.state.q_max))
            .collect()
    }

    /// Members of every coalition, each sorted, ordered by smallest member.
    pub fn coalitions(&self) -> Vec<Vec<BusId>> {
        let mut groups: BTreeMap<BusId, Vec<BusId>> = BTreeMap::new();
        for (k, a) in self.agents.iter().enumerate() {
            groups.entry(self.label_ids[k]).or_default().push(a.id());
        }
        groups.into_values().collect()
    }

    /// Holds loads, PV and the slack setpoint at their current values.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        self.profile_step = None;
    }

    /// Lets the runner stop early; later ticks are not simulated.
    pub fn truncate(&mut self, n_ticks: Tick) {
        self.n_ticks = n_ticks.min(self.n_ticks);
    }

    fn refresh_profiles(&mut self, t: f64) {
        let step = (t / MINUTE_S).floor() as i64;
        if self.frozen || self.profile_step == Some(step) {
            return;
        }
        self.profile_step = Some(step);
        self.slack_v = self.slack.at(t);
        let s_base = self.feeder.network.s_base();
        for b in self.base.iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        for s in &self.sites {
            let p_load = s.load.as_ref().map_or(0.0, |p| p.at(t));
            let p_pv = s.pv.as_ref().map_or(0.0, |p| p.at(t));
            self.base[s.bus_index] += Complex::new(p_pv - p_load, -p_load * s.q_ratio) / s_base;
        }
        for (k, a) in self.agents.iter_mut().enumerate() {
            let p = self.agent_pv[k].as_ref().map_or(0.0, |p| p.at(t));
            a.set_active_output(p, &self.cfg.params);
            self.base[self.agent_bus[k]] += Complex::new(p / s_base, 0.0);
        }
    }

    fn relabel(&mut self) {
        // Union of active edges, labelled by the smallest member id.
        let n = self.agents.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for i in 0..n {
            for j_id in &self.agents[i].state.active_edges {
                if let Some(&j) = self.index_of.get(j_id) {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        parent[hi] = lo;
                    }
                }
            }
        }
        let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            let next = dense.len();
            let l = *dense.entry(r).or_insert(next);
            self.labels[i] = l;
            // agents are sorted by id, so the root is the smallest member
            self.label_ids[i] = self.agents[r].id();
        }
    }

    fn edges_symmetric(&self) -> bool {
        self.agents.iter().all(|a| {
            a.state.active_edges.iter().all(|j| {
                self.index_of
                    .get(j)
                    .is_some_and(|&k| self.agents[k].state.is_active(a.id()))
            })
        })
    }

    fn count_leader_violations(&self) -> u64 {
        let mut leaders: BTreeMap<BusId, usize> = BTreeMap::new();
        for (k, a) in self.agents.iter().enumerate() {
            let e = leaders.entry(self.label_ids[k]).or_insert(0);
            if a.state.role == Role::Leader {
                *e += 1;
            }
        }
        leaders.values().filter(|&&c| c != 1).count() as u64
    }

    fn central_partition(&mut self) -> Result<(), ScenarioError> {
        let p: &ControlParams<f64> = &self.cfg.params;
        let v: Vec<f64> = self.agents.iter().map(|a| a.state.v_avg).collect();
        if v.iter().all(|&x| p.within_thresholds(x)) {
            return Ok(());
        }
        let ids: Vec<BusId> = self.agents.iter().map(|a| a.id()).collect();
        let a_vq = vq_sensitivity_at(&self.feeder.network, &self.inj, self.slack_v, &ids)?;
        let eps = match select_epsilon(&a_vq, &v, p) {
            Ok(e) => e,
            // One-sided violation: everyone cooperates.
            Err(BaselineError::NoConflict) => 0.0,
            Err(e) => {
                log::warn!("tick {}: {e}; no cooperation", self.tick);
                1.0
            }
        };
        let part = epsilon_decompose(&a_vq, eps);
        let zone = part.zone_of();
        for a in self.agents.iter_mut() {
            let z = zone[&a.id()];
            let keep: Vec<BusId> = a.neighbor_ids().filter(|j| zone[j] == z).collect();
            a.set_central_edges(keep);
        }
        self.result.events.push(EventRecord {
            tick: self.tick,
            action: "partition".into(),
            target: format!("eps={eps} zones={}", part.zones.len()),
        });
        Ok(())
    }

    /// Advances one tick.
    pub fn step(&mut self) -> Result<(), ScenarioError> {
        let tick = self.tick;
        let t = self.time_s();
        self.refresh_profiles(t);
        if tick == 0 {
            self.relabel();
        }

        let s_base = self.feeder.network.s_base();
        self.inj.copy_from_slice(&self.base);
        for (k, a) in self.agents.iter().enumerate() {
            self.u_applied[k] = a.state.effective_u();
            self.inj[self.agent_bus[k]] += Complex::new(0.0, a.state.q_out / s_base);
        }
        self.solver
            .solve_into(&self.feeder.network, &self.inj, self.slack_v, &mut self.sol)?;
        if !self.sol.converged {
            return Err(ScenarioError::PowerFlow {
                tick,
                mismatch: self.sol.mismatch,
            });
        }
        self.acc.observe(&self.sol.v_mag, &self.u_applied, &self.labels, 1);
        if tick.is_multiple_of(self.stride) {
            self.result.times.push(t);
            self.result.voltages.push(self.sol.v_mag.clone());
            self.result.ratios.push(self.u_applied.clone());
            self.result
                .roles
                .push(self.agents.iter().map(|a| a.state.role).collect());
            self.result.coalitions.push(self.label_ids.clone());
        }

        let delivered: Vec<Envelope<AgentMessage<f64>>> = match self.bus.as_mut() {
            Some(b) => b.deliver(tick),
            None => Vec::new(),
        };
        for inbox in self.inboxes.iter_mut() {
            inbox.clear();
        }
        for (e, env) in delivered.iter().enumerate() {
            if let Some(&k) = self.index_of.get(&env.receiver) {
                self.inboxes[k].push(e);
            }
        }

        self.agent_events.clear();
        let mut outgoing: Vec<(usize, AgentMessage<f64>)> = Vec::new();
        let params = self.cfg.params;
        for k in 0..self.agents.len() {
            let inbox: Vec<&Envelope<AgentMessage<f64>>> = self.inboxes[k].iter().map(|&e| &delivered[e]).collect();
            let v = self.sol.v_mag[self.agent_bus[k]];
            if let Some(msg) = self.agents[k].step(tick, v, &inbox, &self.timing, &params, &mut self.agent_events) {
                outgoing.push((k, msg));
            }
        }

        if let Some(bus) = self.bus.as_mut() {
            for (k, msg) in outgoing {
                let from = self.agents[k].id();
                let nbs: Vec<BusId> = self.agents[k].neighbor_ids().collect();
                let last = nbs.len().saturating_sub(1);
                let mut msg = Some(msg);
                for (n, j) in nbs.into_iter().enumerate() {
                    let payload = if n == last {
                        msg.take().expect("message still held")
                    } else {
                        msg.clone().expect("message still held")
                    };
                    bus.send(Envelope {
                        sender: from,
                        receiver: j,
                        sent_tick: tick,
                        payload,
                    })?;
                }
            }
        }

        let mut edges_changed = false;
        for ev in &self.agent_events {
            let i = ev.agent;
            let (action, target) = match &ev.kind {
                AgentEventKind::Divide(j) => ("divide", format!("{i}-{j}")),
                AgentEventKind::Merge(j) => ("merge", format!("{i}-{j}")),
                AgentEventKind::Switch { to, from } => (
                    "switch",
                    match from {
                        Some(h) => format!("{i}:{h}->{to}"),
                        None => format!("{i}:->{to}"),
                    },
                ),
                AgentEventKind::EdgeUp(j) => {
                    edges_changed = true;
                    if i > *j {
                        continue;
                    }
                    ("edge_up", format!("{i}-{j}"))
                }
                AgentEventKind::EdgeDown(j) => {
                    edges_changed = true;
                    if i > *j {
                        continue;
                    }
                    ("edge_down", format!("{i}-{j}"))
                }
                AgentEventKind::Elected => ("leader", format!("{i}")),
            };
            self.result.events.push(EventRecord {
                tick,
                action: action.into(),
                target,
            });
        }
        if edges_changed {
            self.relabel();
            if !self.edges_symmetric() {
                self.result.partition_violations += 1;
            }
        }
        if let Some(start) = self.timing.election_of(tick) {
            if tick + 1 == start + self.timing.elect && self.cfg.strategy != AgentMode::Local {
                self.result.leader_violations += self.count_leader_violations();
            }
        }
        if self.cfg.strategy == AgentMode::Centralized && self.timing.update_at(tick).is_some() {
            self.central_partition()?;
        }

        self.tick += 1;
        Ok(())
    }

    pub fn run_until(&mut self, tick: Tick) -> Result<(), ScenarioError> {
        while self.tick < tick.min(self.n_ticks) {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> TimeSeriesResult {
        self.result.metrics = self.acc.finish(self.cfg.tick_s);
        self.result.ticks = self.tick;
        if let Some(b) = &self.bus {
            let (sent, dropped) = b.stats();
            self.result.messages_sent = sent;
            self.result.messages_dropped = dropped;
        }
        self.result
    }
}

/// Runs a scenario to the end.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<TimeSeriesResult, ScenarioError> {
    let mut sim = Simulation::new(cfg.clone())?;
    let end = sim.n_ticks;
    sim.run_until(end)?;
    Ok(sim.finish())
}

/// Convenience for loading a scenario file and running it.
pub fn run_scenario_file(path: &Path) -> Result<TimeSeriesResult, ScenarioError> {
    run_scenario(&ScenarioConfig::load(path)?)
}
