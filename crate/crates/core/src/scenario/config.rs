//! Scenario file (TOML). Every table rejects unknown keys.
//!
//! ```toml
//! duration_s = 86400.0
//! strategy = "proposed"       # proposed | local | centralized
//! seed = 1
//! record_every_s = 10.0
//!
//! [network]                   # either a file ...
//! file = "feeder.net"
//! [network.generate]          # ... or generator settings
//! seed = 1
//!
//! [profiles]
//! csv_dir = "profiles"        # <bus>_load.csv / <bus>_pv.csv, time_s,value_kw
//!
//! [faults]
//! kind = "hourly"             # none | hourly | file
//! fraction = 0.1
//! duration_s = 900.0
//!
//! [slack]
//! default_v = 1.01
//! windows = [{ start = "18:00", end = "22:00", v = 1.03 }]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::feeder::NetworkSpec;
use super::profiles::DAY_S;
use super::ScenarioError;
use crate::agents::{AgentMode, ControlParams, ProtocolTiming, RuleOptions};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSource {
    pub file: Option<PathBuf>,
    pub generate: Option<NetworkSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSource {
    /// Directory with per-bus CSV files; buses without a file use the
    /// synthetic generator.
    pub csv_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FaultSpec {
    #[default]
    None,
    /// Every hour a fraction of the communication edges fails for `duration_s`.
    Hourly { fraction: f64, duration_s: f64 },
    /// `edge_from,edge_to,start_s,end_s` rows.
    File { path: PathBuf },
}

/// Slack setpoint by time of day. `start`/`end` are `HH:MM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackWindow {
    pub start: String,
    pub end: String,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlackSpec {
    pub default_v: f64,
    pub windows: Vec<SlackWindow>,
}

impl Default for SlackSpec {
    fn default() -> Self {
        let w = |start: &str, end: &str, v| SlackWindow {
            start: start.into(),
            end: end.into(),
            v,
        };
        SlackSpec {
            default_v: 1.01,
            windows: vec![w("18:00", "22:00", 1.03), w("10:00", "16:30", 0.99)],
        }
    }
}

/// Parses `HH:MM` or `HH:MM:SS` into seconds after midnight.
pub fn parse_clock(s: &str) -> Result<f64, ScenarioError> {
    let bad = || ScenarioError::Config(format!("{s} is not HH:MM"));
    let parts: Vec<&str> = s.trim().split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let mut total = 0.0;
    for (k, p) in parts.iter().enumerate() {
        let v: u32 = p.parse().map_err(|_| bad())?;
        let lim = if k == 0 { 24 } else { 59 };
        if v > lim || (k == 0 && v == 24 && parts[1..].iter().any(|x| x.parse::<u32>() != Ok(0))) {
            return Err(bad());
        }
        total += f64::from(v) * [3600.0, 60.0, 1.0][k];
    }
    Ok(total)
}

/// Compiled slack schedule; the first matching window wins.
#[derive(Clone, Debug, PartialEq)]
pub struct SlackSchedule {
    default_v: f64,
    windows: Vec<(f64, f64, f64)>,
}

impl SlackSchedule {
    pub fn new(spec: &SlackSpec) -> Result<Self, ScenarioError> {
        let ok = |v: f64| v > 0.8 && v < 1.2;
        if !ok(spec.default_v) {
            return Err(ScenarioError::Config("slack voltage must lie in (0.8, 1.2)".into()));
        }
        let mut windows = Vec::new();
        for w in &spec.windows {
            let (a, b) = (parse_clock(&w.start)?, parse_clock(&w.end)?);
            if !ok(w.v) || !(a < b) {
                return Err(ScenarioError::Config(format!(
                    "slack window {}-{} needs start < end and v in (0.8, 1.2)",
                    w.start, w.end
                )));
            }
            windows.push((a, b, w.v));
        }
        Ok(SlackSchedule {
            default_v: spec.default_v,
            windows,
        })
    }

    pub fn constant(v: f64) -> Self {
        SlackSchedule {
            default_v: v,
            windows: Vec::new(),
        }
    }

    /// Setpoint at `t_s` seconds after midnight of day 0.
    pub fn at(&self, t_s: f64) -> f64 {
        let tod = t_s.rem_euclid(DAY_S);
        self.windows
            .iter()
            .find(|w| w.0 <= tod && tod < w.1)
            .map_or(self.default_v, |w| w.2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    /// Time of day at tick 0, seconds after midnight.
    pub start_s: f64,
    pub tick_s: f64,
    pub coalition_period_s: f64,
    pub assess_window_s: f64,
    pub election_window_s: f64,
    pub avg_window_s: f64,
    pub latency_ticks: u64,
    pub strategy: AgentMode,
    pub seed: u64,
    /// Spacing of recorded samples; metrics always use every tick.
    pub record_every_s: f64,
    pub network: NetworkSource,
    pub profiles: ProfileSource,
    pub params: ControlParams<f64>,
    pub rules: RuleOptions,
    pub faults: FaultSpec,
    pub slack: SlackSpec,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: DAY_S,
            start_s: 0.0,
            tick_s: 0.2,
            coalition_period_s: 300.0,
            assess_window_s: 60.0,
            election_window_s: 60.0,
            avg_window_s: 900.0,
            latency_ticks: 1,
            strategy: AgentMode::Proposed,
            seed: 1,
            record_every_s: 10.0,
            network: NetworkSource::default(),
            profiles: ProfileSource::default(),
            params: ControlParams::default(),
            rules: RuleOptions::default(),
            faults: FaultSpec::None,
            slack: SlackSpec::default(),
        }
    }
}

fn ticks_of(s: f64, tick_s: f64, what: &str) -> Result<u64, ScenarioError> {
    let t = s / tick_s;
    let r = t.round();
    if !(r >= 0.0) || (t - r).abs() > 1e-6 * r.max(1.0) {
        return Err(ScenarioError::Config(format!(
            "{what} = {s} s is not a whole number of ticks"
        )));
    }
    Ok(r as u64)
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a scenario file; relative paths inside are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.network.file.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.profiles.csv_dir.as_mut() {
            fix(p);
        }
        if let FaultSpec::File { path } = &mut cfg.faults {
            fix(path);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.tick_s > 0.0) {
            return Err(ScenarioError::Config("tick_s must be positive".into()));
        }
        if !(self.duration_s >= 0.0) || !(self.start_s >= 0.0) {
            return Err(ScenarioError::Config(
                "duration_s and start_s must be non-negative".into(),
            ));
        }
        if self.network.file.is_some() && self.network.generate.is_some() {
            return Err(ScenarioError::Config("network: give either file or generate".into()));
        }
        self.params.validate()?;
        self.timing()?.validate()?;
        self.duration_ticks()?;
        self.avg_window_ticks()?;
        self.record_stride()?;
        if let FaultSpec::Hourly { fraction, duration_s } = &self.faults {
            if !(0.0..=1.0).contains(fraction) || !(*duration_s > 0.0 && *duration_s <= 3600.0) {
                return Err(ScenarioError::Config(
                    "hourly faults need fraction in [0,1] and 0 < duration_s <= 3600".into(),
                ));
            }
        }
        SlackSchedule::new(&self.slack)?;
        Ok(())
    }

    pub fn timing(&self) -> Result<ProtocolTiming, ScenarioError> {
        Ok(ProtocolTiming {
            cycle: ticks_of(self.coalition_period_s, self.tick_s, "coalition_period_s")?,
            assess: ticks_of(self.assess_window_s, self.tick_s, "assess_window_s")?,
            elect: ticks_of(self.election_window_s, self.tick_s, "election_window_s")?,
            latency: self.latency_ticks,
        })
    }

    pub fn duration_ticks(&self) -> Result<u64, ScenarioError> {
        ticks_of(self.duration_s, self.tick_s, "duration_s")
    }

    pub fn avg_window_ticks(&self) -> Result<usize, ScenarioError> {
        let n = ticks_of(self.avg_window_s, self.tick_s, "avg_window_s")?;
        if n == 0 {
            return Err(ScenarioError::Config(
                "avg_window_s must cover at least one tick".into(),
            ));
        }
        Ok(n as usize)
    }

    pub fn record_stride(&self) -> Result<u64, ScenarioError> {
        let n = ticks_of(self.record_every_s, self.tick_s, "record_every_s")?;
        if n == 0 {
            return Err(ScenarioError::Config(
                "record_every_s must cover at least one tick".into(),
            ));
        }
        Ok(n)
    }

    /// Generator settings in effect (defaults when no network is given).
    pub fn network_spec(&self) -> NetworkSpec {
        self.network.generate.clone().unwrap_or_default()
    }
}
