//! Feeder description: network file format and the synthetic generator.
//!
//! A network file is a list of records, one per line:
//!
//! ```text
//! # comment
//! [base] v_ln=230 s_kva=1000
//! [bus]  id=1 kind=slack
//! [bus]  id=2 kind=load kw=6.5 kvar=2.1 profile=residential pv_kw=5 inverter=true
//! [line] from=1 to=2 r=0.012 x=0.008
//! ```
//!
//! Bus powers are nameplate values; the runner scales them by the site's
//! normalized profile. `kvar` keeps a fixed ratio to `kw`. `inverter`
//! defaults to true when `pv_kw > 0`. Unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::profiles::ProfileKind;
use super::ScenarioError;
use crate::grid::{Bus, BusId, BusKind, Line, NetworkModel};

/// Consumption and generation attached to one bus.
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    pub bus: BusId,
    pub load_kw: f64,
    pub load_kvar: f64,
    pub profile: ProfileKind,
    pub pv_kw: f64,
    pub inverter: bool,
}

#[derive(Clone, Debug)]
pub struct Feeder {
    pub network: NetworkModel<f64>,
    /// Sorted by bus id; buses without load or PV are omitted.
    pub sites: Vec<Site>,
}

fn err(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::NetworkFile { line, msg: msg.into() }
}

struct Record<'a> {
    line: usize,
    fields: BTreeMap<&'a str, &'a str>,
}

impl<'a> Record<'a> {
    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.fields.remove(key)
    }

    fn num(&mut self, key: &str) -> Result<Option<f64>, ScenarioError> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| err(self.line, format!("{key}={v} is not a number"))),
        }
    }

    fn need_num(&mut self, key: &str) -> Result<f64, ScenarioError> {
        self.num(key)?.ok_or_else(|| err(self.line, format!("missing {key}")))
    }

    fn id(&mut self, key: &str) -> Result<u32, ScenarioError> {
        let v = self.take(key).ok_or_else(|| err(self.line, format!("missing {key}")))?;
        v.parse::<u32>()
            .map_err(|_| err(self.line, format!("{key}={v} is not a bus id")))
    }

    fn finish(self) -> Result<(), ScenarioError> {
        match self.fields.keys().next() {
            None => Ok(()),
            Some(k) => Err(err(self.line, format!("unknown key {k}"))),
        }
    }
}

impl Feeder {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut v_ln = 230.0;
        let mut s_kva = 1000.0;
        let mut buses = Vec::new();
        let mut lines = Vec::new();
        let mut sites = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut parts = body.split_whitespace();
            let head = parts.next().unwrap_or("");
            let mut fields = BTreeMap::new();
            for p in parts {
                let (key, val) = p
                    .split_once('=')
                    .ok_or_else(|| err(line, format!("expected key=value, got {p}")))?;
                if fields.insert(key, val).is_some() {
                    return Err(err(line, format!("repeated key {key}")));
                }
            }
            let mut rec = Record { line, fields };
            match head {
                "[base]" => {
                    if let Some(v) = rec.num("v_ln")? {
                        v_ln = v;
                    }
                    if let Some(s) = rec.num("s_kva")? {
                        s_kva = s;
                    }
                }
                "[bus]" => {
                    let id = rec.id("id")?;
                    let kind = rec.take("kind").unwrap_or("load");
                    match kind {
                        "slack" => buses.push(Bus::slack(id)),
                        "load" => {
                            let kw = rec.num("kw")?.unwrap_or(0.0);
                            let kvar = rec.num("kvar")?.unwrap_or(0.0);
                            let pv = rec.num("pv_kw")?.unwrap_or(0.0);
                            let profile = match rec.take("profile") {
                                None => ProfileKind::Residential,
                                Some(p) => match ProfileKind::parse(p) {
                                    Some(ProfileKind::Pv) | None => {
                                        return Err(err(line, format!("profile={p} is not a load profile")))
                                    }
                                    Some(kind) => kind,
                                },
                            };
                            let inverter = match rec.take("inverter") {
                                None => pv > 0.0,
                                Some("true") => true,
                                Some("false") => false,
                                Some(v) => return Err(err(line, format!("inverter={v} is not a boolean"))),
                            };
                            if inverter && !(pv > 0.0) {
                                return Err(err(line, "inverter without pv_kw"));
                            }
                            buses.push(Bus::load(id, kw, kvar).with_pv(pv));
                            if kw != 0.0 || kvar != 0.0 || pv != 0.0 {
                                sites.push(Site {
                                    bus: BusId(id),
                                    load_kw: kw,
                                    load_kvar: kvar,
                                    profile,
                                    pv_kw: pv,
                                    inverter,
                                });
                            }
                        }
                        other => return Err(err(line, format!("kind={other} is not slack or load"))),
                    }
                }
                "[line]" => {
                    let from = rec.id("from")?;
                    let to = rec.id("to")?;
                    let r = rec.need_num("r")?;
                    let x = rec.need_num("x")?;
                    lines.push(Line::new(from, to, r, x));
                }
                other => return Err(err(line, format!("unknown record {other}"))),
            }
            rec.finish()?;
        }
        let network = NetworkModel::new(buses, lines, v_ln, s_kva)?;
        sites.sort_by_key(|s| s.bus);
        Ok(Feeder { network, sites })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let net = &self.network;
        let _ = writeln!(out, "[base] v_ln={} s_kva={}", net.v_base(), net.s_base());
        let by_bus: BTreeMap<BusId, &Site> = self.sites.iter().map(|s| (s.bus, s)).collect();
        let mut buses: Vec<&Bus<f64>> = net.buses().iter().collect();
        buses.sort_by_key(|b| b.id);
        for b in buses {
            match (b.kind, by_bus.get(&b.id)) {
                (BusKind::Slack, _) => {
                    let _ = writeln!(out, "[bus] id={} kind=slack", b.id);
                }
                (BusKind::Load, None) => {
                    let _ = writeln!(out, "[bus] id={} kind=load", b.id);
                }
                (BusKind::Load, Some(s)) => {
                    let _ = writeln!(
                        out,
                        "[bus] id={} kind=load kw={} kvar={} profile={} pv_kw={} inverter={}",
                        b.id,
                        s.load_kw,
                        s.load_kvar,
                        s.profile.as_str(),
                        s.pv_kw,
                        s.inverter
                    );
                }
            }
        }
        for l in net.lines() {
            let _ = writeln!(out, "[line] from={} to={} r={} x={}", l.from, l.to, l.r, l.x);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, self.to_text()).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))
    }

    /// Inverter buses with their PV rating, sorted by id.
    pub fn inverters(&self) -> Vec<(BusId, f64)> {
        self.sites
            .iter()
            .filter(|s| s.inverter)
            .map(|s| (s.bus, s.pv_kw))
            .collect()
    }
}

/// A chain of buses hanging off an existing bus. The first lateral starts
/// at the slack bus and counts it among its nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LateralSpec {
    pub nodes: usize,
    #[serde(default)]
    pub attach: u32,
    /// Multiplies the span impedances drawn for this lateral.
    #[serde(default = "one")]
    pub impedance_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSite {
    pub bus: u32,
    pub kw: f64,
}

/// Parameters of the synthetic feeder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub laterals: Vec<LateralSpec>,
    /// Span resistance range, ohm.
    pub r_ohm: [f64; 2],
    /// Span reactance range, ohm.
    pub x_ohm: [f64; 2],
    pub houses: usize,
    pub pv_houses: usize,
    pub house_kw: [f64; 2],
    pub house_pv_kw: [f64; 2],
    pub power_factor: f64,
    pub commercial: Vec<FixedSite>,
    pub farms: Vec<FixedSite>,
    pub v_ln: f64,
    pub s_kva: f64,
    pub seed: u64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        let lateral = |nodes, attach, impedance_scale| LateralSpec {
            nodes,
            attach,
            impedance_scale,
        };
        let site = |bus, kw| FixedSite { bus, kw };
        NetworkSpec {
            // buses 1-22, 23-37, 38-54, 55-71, 72-87, 88-103
            laterals: vec![
                lateral(22, 0, 1.0),
                lateral(15, 6, 1.0),
                lateral(17, 2, LAT3),
                lateral(17, 10, 1.0),
                lateral(16, 4, 1.0),
                lateral(16, 5, 1.0),
            ],
            r_ohm: [0.00242, 0.00341],
            x_ohm: [0.00165, 0.00242],
            houses: 60,
            pv_houses: 30,
            house_kw: [2.2, 14.5],
            house_pv_kw: [2.5, 7.5],
            power_factor: 0.95,
            // school, bank, grocery, office
            commercial: vec![site(14, 68.4), site(61, 31.4), site(64, 45.1), site(99, 62.3)],
            farms: vec![site(49, 45.5), site(54, 140.0)],
            v_ln: 230.0,
            s_kva: 1000.0,
            seed: 1,
        }
    }
}

impl NetworkSpec {
    pub fn bus_count(&self) -> usize {
        self.laterals.iter().map(|l| l.nodes).sum()
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Spec(m.to_string()));
        if self.laterals.is_empty() || self.laterals[0].nodes < 1 {
            return bad("first lateral needs at least the slack bus");
        }
        if self.laterals.iter().skip(1).any(|l| l.nodes == 0) {
            return bad("empty lateral");
        }
        if self.laterals.iter().any(|l| !(l.impedance_scale > 0.0)) {
            return bad("impedance scale must be positive");
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !(self.r_ohm[0] > 0.0 && self.x_ohm[0] > 0.0 && ordered(self.r_ohm) && ordered(self.x_ohm)) {
            return bad("impedance ranges must be positive and ordered");
        }
        if !(self.house_kw[0] >= 0.0
            && ordered(self.house_kw)
            && self.house_pv_kw[0] > 0.0
            && ordered(self.house_pv_kw))
        {
            return bad("capacity ranges must be non-negative and ordered");
        }
        if !(self.power_factor > 0.0 && self.power_factor <= 1.0) {
            return bad("power factor must lie in (0, 1]");
        }
        if self.pv_houses > self.houses {
            return bad("more PV houses than houses");
        }
        let n = self.bus_count() as u32;
        let mut fixed = BTreeSet::new();
        for s in self.commercial.iter().chain(&self.farms) {
            if s.bus < 2 || s.bus > n || !fixed.insert(s.bus) || !(s.kw > 0.0) {
                return bad("fixed sites need distinct non-slack buses and positive kW");
            }
        }
        if self.houses > n as usize - 1 - fixed.len() {
            return bad("not enough free buses for the houses");
        }
        if !(self.v_ln > 0.0 && self.s_kva > 0.0) {
            return bad("bases must be positive");
        }
        Ok(())
    }
}

const LAT3: f64 = 2.3;

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Builds the feeder: laterals, span impedances, fixed commercial loads and
/// PV farms, then houses (and PV houses among them) on random free buses.
pub fn generate_network(spec: &NetworkSpec) -> Result<Feeder, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.bus_count() as u32;
    let mut lines = Vec::with_capacity(n as usize - 1);
    let mut next = 1u32;
    for (k, lat) in spec.laterals.iter().enumerate() {
        let mut prev = if k == 0 {
            next += 1;
            1
        } else {
            if lat.attach < 1 || lat.attach >= next {
                return Err(ScenarioError::Spec(format!(
                    "lateral {} attaches to bus {} which does not exist yet",
                    k + 1,
                    lat.attach
                )));
            }
            lat.attach
        };
        let count = if k == 0 { lat.nodes - 1 } else { lat.nodes };
        for _ in 0..count {
            let r = draw(&mut rng, spec.r_ohm) * lat.impedance_scale;
            let x = draw(&mut rng, spec.x_ohm) * lat.impedance_scale;
            lines.push(Line::new(prev, next, r, x));
            prev = next;
            next += 1;
        }
    }

    let q_ratio = (1.0 / (spec.power_factor * spec.power_factor) - 1.0).sqrt();
    let mut sites: BTreeMap<u32, Site> = BTreeMap::new();
    for c in &spec.commercial {
        sites.insert(
            c.bus,
            Site {
                bus: BusId(c.bus),
                load_kw: c.kw,
                load_kvar: c.kw * q_ratio,
                profile: ProfileKind::Commercial,
                pv_kw: 0.0,
                inverter: false,
            },
        );
    }
    for f in &spec.farms {
        sites.insert(
            f.bus,
            Site {
                bus: BusId(f.bus),
                load_kw: 0.0,
                load_kvar: 0.0,
                profile: ProfileKind::Residential,
                pv_kw: f.kw,
                inverter: true,
            },
        );
    }
    // The last free bus of each lateral hosts a PV house.
    let mut ends: Vec<u32> = Vec::new();
    let mut last = 0u32;
    for lat in &spec.laterals {
        last += lat.nodes as u32;
        if let Some(b) = (last + 1 - lat.nodes as u32..=last)
            .rev()
            .find(|b| *b >= 2 && !sites.contains_key(b))
        {
            ends.push(b);
        }
    }
    ends.truncate(spec.pv_houses);
    let free: Vec<u32> = (2..=n)
        .filter(|b| !sites.contains_key(b) && !ends.contains(b))
        .collect();
    let mut houses: Vec<u32> = sample(&mut rng, free.len(), spec.houses - ends.len())
        .into_iter()
        .map(|k| free[k])
        .collect();
    let pv_rest: BTreeSet<u32> = sample(&mut rng, houses.len(), spec.pv_houses - ends.len())
        .into_iter()
        .map(|k| houses[k])
        .collect();
    houses.extend(&ends);
    houses.sort();
    for &b in &houses {
        let kw = draw(&mut rng, spec.house_kw);
        let pv = if pv_rest.contains(&b) || ends.contains(&b) {
            draw(&mut rng, spec.house_pv_kw)
        } else {
            0.0
        };
        sites.insert(
            b,
            Site {
                bus: BusId(b),
                load_kw: kw,
                load_kvar: kw * q_ratio,
                profile: ProfileKind::Residential,
                pv_kw: pv,
                inverter: pv > 0.0,
            },
        );
    }

    let buses = (1..=n)
        .map(|id| match sites.get(&id) {
            _ if id == 1 => Bus::slack(1),
            Some(s) => Bus::load(id, s.load_kw, s.load_kvar).with_pv(s.pv_kw),
            None => Bus::load(id, 0.0, 0.0),
        })
        .collect();
    let network = NetworkModel::new(buses, lines, spec.v_ln, spec.s_kva)?;
    Ok(Feeder {
        network,
        sites: sites.into_values().collect(),
    })
}
