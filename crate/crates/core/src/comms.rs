//! Synchronous-round message network between inverter agents.
//!
//! Messages travel only along edges of the communication tree, arrive a
//! fixed number of ticks after they are sent and are silently dropped
//! when the link is down at the delivery tick.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use thiserror::Error;

use crate::grid::{BusId, NetworkModel};
use crate::scalar::Scalar;

/// Controller tick counter.
pub type Tick = u64;

#[derive(Debug, Error)]
pub enum CommsError {
    #[error("unknown inverter id {0}")]
    UnknownNode(BusId),
    #[error("duplicate inverter id {0}")]
    DuplicateNode(BusId),
    #[error("{0} and {1} are not neighbours")]
    NotAnEdge(BusId, BusId),
    #[error("communication graph is not a connected tree ({nodes} nodes, {edges} edges)")]
    NotATree { nodes: usize, edges: usize },
    #[error("fault on {edge:?} has start {start} >= end {end}")]
    EmptyFault { edge: Edge, start: Tick, end: Tick },
    #[error("fault schedule: {0}")]
    Parse(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Undirected edge, stored with the smaller id first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge(BusId, BusId);

impl Edge {
    pub fn new(a: BusId, b: BusId) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn ends(&self) -> (BusId, BusId) {
        (self.0, self.1)
    }
}

/// Undirected communication tree over inverter ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CommGraph {
    adj: BTreeMap<BusId, Vec<BusId>>,
}

impl CommGraph {
    pub fn new(nodes: &[BusId], edges: &[(BusId, BusId)]) -> Result<Self, CommsError> {
        let mut adj: BTreeMap<BusId, Vec<BusId>> = BTreeMap::new();
        for &n in nodes {
            if adj.insert(n, Vec::new()).is_some() {
                return Err(CommsError::DuplicateNode(n));
            }
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in edges {
            if !adj.contains_key(&a) {
                return Err(CommsError::UnknownNode(a));
            }
            if !adj.contains_key(&b) {
                return Err(CommsError::UnknownNode(b));
            }
            if a == b || !seen.insert(Edge::new(a, b)) {
                return Err(CommsError::NotATree {
                    nodes: nodes.len(),
                    edges: edges.len(),
                });
            }
            adj.get_mut(&a).expect("checked").push(b);
            adj.get_mut(&b).expect("checked").push(a);
        }
        for list in adj.values_mut() {
            list.sort();
        }
        let g = CommGraph { adj };
        let tree = nodes.is_empty() || (edges.len() + 1 == nodes.len() && g.is_connected());
        if !tree {
            return Err(CommsError::NotATree {
                nodes: nodes.len(),
                edges: edges.len(),
            });
        }
        Ok(g)
    }

    /// Communication tree induced by the feeder: each inverter talks to the
    /// nearest inverter upstream of it. Inverters with no inverter upstream
    /// are chained together in depth-first feeder order, so the result is a
    /// single tree.
    pub fn from_feeder<T: Scalar>(net: &NetworkModel<T>, inverters: &[BusId]) -> Result<Self, CommsError> {
        let n = net.len();
        let mut is_inv = vec![false; n];
        for &id in inverters {
            is_inv[net.index_of(id)?] = true;
        }
        let mut children = vec![Vec::new(); n];
        for k in 0..n {
            if let Some(p) = net.parent_index(k) {
                children[p].push(k);
            }
        }
        for c in children.iter_mut() {
            c.sort_by_key(|&k| net.buses()[k].id);
        }
        // Depth-first walk carrying the nearest inverter above each bus.
        let mut edges = Vec::new();
        let mut top_level = Vec::new();
        let mut stack = vec![(net.slack_index(), None::<usize>)];
        while let Some((k, above)) = stack.pop() {
            let mut carry = above;
            if is_inv[k] {
                match above {
                    Some(a) => edges.push((net.buses()[a].id, net.buses()[k].id)),
                    None => top_level.push(k),
                }
                carry = Some(k);
            }
            for &c in children[k].iter().rev() {
                stack.push((c, carry));
            }
        }
        for w in top_level.windows(2) {
            edges.push((net.buses()[w[0]].id, net.buses()[w[1]].id));
        }
        CommGraph::new(inverters, &edges)
    }

    pub fn nodes(&self) -> impl Iterator<Item = BusId> + '_ {
        self.adj.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn contains(&self, id: BusId) -> bool {
        self.adj.contains_key(&id)
    }

    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for (&a, list) in &self.adj {
            for &b in list {
                if a < b {
                    out.push(Edge::new(a, b));
                }
            }
        }
        out
    }

    pub fn has_edge(&self, a: BusId, b: BusId) -> bool {
        self.adj.get(&a).is_some_and(|l| l.binary_search(&b).is_ok())
    }

    pub fn neighbors(&self, i: BusId) -> Result<&[BusId], CommsError> {
        self.adj.get(&i).map(|v| v.as_slice()).ok_or(CommsError::UnknownNode(i))
    }

    /// Number of edges on the longest shortest path.
    pub fn diameter(&self) -> usize {
        self.adj.keys().map(|&s| self.eccentricity(s)).max().unwrap_or(0)
    }

    fn eccentricity(&self, start: BusId) -> usize {
        let mut dist = BTreeMap::from([(start, 0usize)]);
        let mut queue = VecDeque::from([start]);
        let mut far = 0;
        while let Some(k) = queue.pop_front() {
            let d = dist[&k];
            far = far.max(d);
            for &m in &self.adj[&k] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(m) {
                    e.insert(d + 1);
                    queue.push_back(m);
                }
            }
        }
        far
    }

    fn is_connected(&self) -> bool {
        match self.adj.keys().next() {
            None => true,
            Some(&s) => {
                let mut seen = BTreeSet::from([s]);
                let mut stack = vec![s];
                while let Some(k) = stack.pop() {
                    for &m in &self.adj[&k] {
                        if seen.insert(m) {
                            stack.push(m);
                        }
                    }
                }
                seen.len() == self.adj.len()
            }
        }
    }
}

/// Adjacency of `i`.
pub fn neighbors(g: &CommGraph, i: BusId) -> Result<&[BusId], CommsError> {
    g.neighbors(i)
}

/// A link that delivers nothing for ticks in `[start_tick, end_tick)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinkFault {
    pub edge: Edge,
    pub start_tick: Tick,
    pub end_tick: Tick,
}

impl LinkFault {
    pub fn new(edge: Edge, start_tick: Tick, end_tick: Tick) -> Result<Self, CommsError> {
        if start_tick >= end_tick {
            return Err(CommsError::EmptyFault {
                edge,
                start: start_tick,
                end: end_tick,
            });
        }
        Ok(LinkFault {
            edge,
            start_tick,
            end_tick,
        })
    }
}

/// Link faults indexed by edge.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultSchedule {
    by_edge: BTreeMap<Edge, Vec<(Tick, Tick)>>,
}

impl FaultSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_faults(faults: impl IntoIterator<Item = LinkFault>) -> Self {
        let mut by_edge: BTreeMap<Edge, Vec<(Tick, Tick)>> = BTreeMap::new();
        for f in faults {
            by_edge.entry(f.edge).or_default().push((f.start_tick, f.end_tick));
        }
        for v in by_edge.values_mut() {
            v.sort();
        }
        FaultSchedule { by_edge }
    }

    /// Every `period_ticks`, starting at tick 0, `ceil(fraction * |E|)` edges
    /// drawn uniformly without replacement go down for `duration_ticks`.
    pub fn sample_periodic<R: Rng>(
        g: &CommGraph,
        rng: &mut R,
        fraction: f64,
        period_ticks: Tick,
        duration_ticks: Tick,
        horizon_ticks: Tick,
    ) -> Self {
        let edges = g.edges();
        let count = ((fraction * edges.len() as f64).ceil() as usize).min(edges.len());
        let mut faults = Vec::new();
        if count == 0 || period_ticks == 0 || duration_ticks == 0 {
            return Self::none();
        }
        let mut start = 0;
        while start < horizon_ticks {
            for idx in sample(rng, edges.len(), count).into_iter() {
                faults.push(LinkFault {
                    edge: edges[idx],
                    start_tick: start,
                    end_tick: start + duration_ticks,
                });
            }
            start += period_ticks;
        }
        Self::from_faults(faults)
    }

    /// Reads `edge_from,edge_to,start_s,end_s` rows (header optional).
    pub fn load_csv(path: &Path, g: &CommGraph, tick_s: f64) -> Result<Self, CommsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut faults = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if row == 0 && rec.get(0).is_some_and(|f| f.parse::<u32>().is_err()) {
                continue;
            }
            if rec.len() != 4 {
                return Err(CommsError::Parse(format!("row {}: expected 4 fields", row + 1)));
            }
            let id = |k: usize| {
                rec[k]
                    .parse::<u32>()
                    .map(BusId)
                    .map_err(|e| CommsError::Parse(format!("row {}: {e}", row + 1)))
            };
            let secs = |k: usize| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| CommsError::Parse(format!("row {}: {e}", row + 1)))
            };
            let (a, b) = (id(0)?, id(1)?);
            if !g.has_edge(a, b) {
                return Err(CommsError::NotAnEdge(a, b));
            }
            let start = (secs(2)? / tick_s).round() as Tick;
            let end = (secs(3)? / tick_s).round() as Tick;
            faults.push(LinkFault::new(Edge::new(a, b), start, end)?);
        }
        Ok(Self::from_faults(faults))
    }

    pub fn is_empty(&self) -> bool {
        self.by_edge.is_empty()
    }

    pub fn is_down(&self, edge: Edge, tick: Tick) -> bool {
        match self.by_edge.get(&edge) {
            None => false,
            Some(spans) => spans.iter().any(|&(s, e)| s <= tick && tick < e),
        }
    }

    pub fn faults(&self) -> Vec<LinkFault> {
        let mut out = Vec::new();
        for (&edge, spans) in &self.by_edge {
            for &(start_tick, end_tick) in spans {
                out.push(LinkFault {
                    edge,
                    start_tick,
                    end_tick,
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope<M> {
    pub sender: BusId,
    pub receiver: BusId,
    pub sent_tick: Tick,
    pub payload: M,
}

/// Removes from `pending` every envelope due at `now` and returns those
/// that cross a live edge. Envelopes whose delivery tick has passed are
/// dropped; later ones stay queued.
pub fn deliver_round<M>(
    g: &CommGraph,
    faults: &FaultSchedule,
    pending: &mut Vec<Envelope<M>>,
    now: Tick,
    latency_ticks: Tick,
) -> Vec<Envelope<M>> {
    assert!(latency_ticks >= 1, "latency must be at least one tick");
    let mut delivered = Vec::new();
    let mut keep = Vec::with_capacity(pending.len());
    for env in pending.drain(..) {
        let due = env.sent_tick + latency_ticks;
        if due > now {
            keep.push(env);
        } else if due == now
            && g.has_edge(env.sender, env.receiver)
            && !faults.is_down(Edge::new(env.sender, env.receiver), now)
        {
            delivered.push(env);
        }
    }
    *pending = keep;
    delivered
}

/// Owns the in-flight queue for one scenario.
#[derive(Clone, Debug)]
pub struct MessageBus<M> {
    graph: CommGraph,
    faults: FaultSchedule,
    latency: Tick,
    pending: Vec<Envelope<M>>,
    sent: u64,
    dropped: u64,
}

impl<M> MessageBus<M> {
    pub fn new(graph: CommGraph, faults: FaultSchedule, latency: Tick) -> Self {
        assert!(latency >= 1, "latency must be at least one tick");
        MessageBus {
            graph,
            faults,
            latency,
            pending: Vec::new(),
            sent: 0,
            dropped: 0,
        }
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn faults(&self) -> &FaultSchedule {
        &self.faults
    }

    pub fn latency(&self) -> Tick {
        self.latency
    }

    pub fn send(&mut self, env: Envelope<M>) -> Result<(), CommsError> {
        if !self.graph.has_edge(env.sender, env.receiver) {
            return Err(CommsError::NotAnEdge(env.sender, env.receiver));
        }
        self.sent += 1;
        self.pending.push(env);
        Ok(())
    }

    pub fn deliver(&mut self, now: Tick) -> Vec<Envelope<M>> {
        let before = self.pending.len();
        let out = deliver_round(&self.graph, &self.faults, &mut self.pending, now, self.latency);
        self.dropped += (before - self.pending.len() - out.len()) as u64;
        out
    }

    /// (sent, dropped) counters.
    pub fn stats(&self) -> (u64, u64) {
        (self.sent, self.dropped)
    }

    pub fn is_link_up(&self, a: BusId, b: BusId, tick: Tick) -> bool {
        self.graph.has_edge(a, b) && !self.faults.is_down(Edge::new(a, b), tick)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Line};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[u32]) -> Vec<BusId> {
        v.iter().map(|&x| BusId(x)).collect()
    }

    fn path3() -> CommGraph {
        CommGraph::new(&ids(&[1, 2, 3]), &[(BusId(1), BusId(2)), (BusId(2), BusId(3))]).unwrap()
    }

    fn env(s: u32, r: u32, t: Tick) -> Envelope<u32> {
        Envelope {
            sender: BusId(s),
            receiver: BusId(r),
            sent_tick: t,
            payload: s * 100 + r,
        }
    }

    #[test]
    fn path_neighbours() {
        let g = path3();
        assert_eq!(neighbors(&g, BusId(2)).unwrap(), &ids(&[1, 3])[..]);
        assert_eq!(neighbors(&g, BusId(3)).unwrap(), &ids(&[2])[..]);
        assert!(neighbors(&g, BusId(9)).is_err());
        assert_eq!(g.diameter(), 2);
    }

    #[test]
    fn rejects_non_trees() {
        let cyc = [(BusId(1), BusId(2)), (BusId(2), BusId(3)), (BusId(3), BusId(1))];
        assert!(CommGraph::new(&ids(&[1, 2, 3]), &cyc).is_err());
        assert!(CommGraph::new(&ids(&[1, 2, 3]), &[(BusId(1), BusId(2))]).is_err());
    }

    #[test]
    fn latency_one_delivers_next_tick() {
        let g = path3();
        let f = FaultSchedule::none();
        let mut pending = vec![env(1, 2, 5)];
        assert!(deliver_round(&g, &f, &mut pending, 5, 1).is_empty());
        let got = deliver_round(&g, &f, &mut pending, 6, 1);
        assert_eq!(got, vec![env(1, 2, 5)]);
        assert!(pending.is_empty());
    }

    #[test]
    fn faulted_link_drops() {
        let g = path3();
        let fault = LinkFault::new(Edge::new(BusId(2), BusId(1)), 6, 8).unwrap();
        let f = FaultSchedule::from_faults([fault]);
        let mut pending = vec![env(1, 2, 5), env(2, 1, 5), env(2, 3, 5)];
        let got = deliver_round(&g, &f, &mut pending, 6, 1);
        assert_eq!(got, vec![env(2, 3, 5)]);
        assert!(pending.is_empty());
        // after the window the link works again
        let mut pending = vec![env(1, 2, 7)];
        assert_eq!(deliver_round(&g, &f, &mut pending, 8, 1).len(), 1);
    }

    #[test]
    fn non_edges_never_delivered() {
        let g = path3();
        let mut bus = MessageBus::new(g.clone(), FaultSchedule::none(), 1);
        assert!(bus.send(env(1, 3, 0)).is_err());
        let mut pending = vec![env(1, 3, 0)];
        assert!(deliver_round(&g, &FaultSchedule::none(), &mut pending, 1, 1).is_empty());
    }

    #[test]
    fn empty_fault_rejected() {
        assert!(LinkFault::new(Edge::new(BusId(1), BusId(2)), 4, 4).is_err());
    }

    #[test]
    fn periodic_faults_count_and_length() {
        let nodes = ids(&(1..=21).collect::<Vec<_>>());
        let edges: Vec<_> = (1..21).map(|k| (BusId(k), BusId(k + 1))).collect();
        let g = CommGraph::new(&nodes, &edges).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = FaultSchedule::sample_periodic(&g, &mut rng, 0.1, 100, 25, 400);
        let faults = s.faults();
        assert_eq!(faults.len(), 4 * 2);
        assert!(faults
            .iter()
            .all(|f| f.end_tick - f.start_tick == 25 && f.start_tick % 100 == 0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(s, FaultSchedule::sample_periodic(&g, &mut rng, 0.1, 100, 25, 400));
    }

    #[test]
    fn feeder_tree_links_nearest_upstream_inverters() {
        // 1 - 2 - 3 - 4 with a branch 2 - 5 - 6 and 1 - 7.
        let buses = (1..=7)
            .map(|i| {
                if i == 1 {
                    Bus::<f64>::slack(1)
                } else {
                    Bus::load(i, 1.0, 0.0)
                }
            })
            .collect();
        let lines = vec![
            Line::new(1, 2, 0.1, 0.1),
            Line::new(2, 3, 0.1, 0.1),
            Line::new(3, 4, 0.1, 0.1),
            Line::new(2, 5, 0.1, 0.1),
            Line::new(5, 6, 0.1, 0.1),
            Line::new(1, 7, 0.1, 0.1),
        ];
        let net = NetworkModel::new(buses, lines, 230.0, 1000.0).unwrap();
        let g = CommGraph::from_feeder(&net, &ids(&[2, 4, 6, 7])).unwrap();
        assert_eq!(g.neighbors(BusId(2)).unwrap(), &ids(&[4, 6, 7])[..]);
        assert_eq!(g.neighbors(BusId(7)).unwrap(), &ids(&[2])[..]);
        assert!(!g.has_edge(BusId(4), BusId(6)));
    }

    #[test]
    fn fault_csv_roundtrip() {
        let g = path3();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("faults.csv");
        std::fs::write(&p, "edge_from,edge_to,start_s,end_s\n1,2,10.0,20.0\n3,2,0,1\n").unwrap();
        let s = FaultSchedule::load_csv(&p, &g, 0.2).unwrap();
        assert!(s.is_down(Edge::new(BusId(1), BusId(2)), 50));
        assert!(!s.is_down(Edge::new(BusId(1), BusId(2)), 100));
        assert!(s.is_down(Edge::new(BusId(2), BusId(3)), 4));
        std::fs::write(&p, "1,3,0,1\n").unwrap();
        assert!(FaultSchedule::load_csv(&p, &g, 0.2).is_err());
    }
}
