//! Seeded families of randomized feeders run under every strategy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ScenarioConfig;
use super::metrics::Metrics;
use super::runner::run_scenario;
use super::ScenarioError;
use crate::agents::AgentMode;

pub const STRATEGIES: [AgentMode; 3] = [AgentMode::Proposed, AgentMode::Centralized, AgentMode::Local];

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub seed: u64,
    pub strategy: AgentMode,
    pub inverters: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchSummary {
    /// Sorted by seed, then strategy in [`STRATEGIES`] order.
    pub rows: Vec<BatchRow>,
}

impl BatchSummary {
    pub fn rows_for(&self, strategy: AgentMode) -> impl Iterator<Item = &BatchRow> {
        self.rows.iter().filter(move |r| r.strategy == strategy)
    }

    /// Mean of every metric over the scenarios run with `strategy`.
    pub fn mean(&self, strategy: AgentMode) -> Metrics {
        let rows: Vec<&BatchRow> = self.rows_for(strategy).collect();
        let n = rows.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Metrics {
            lower_violation_min: sum(|m| m.lower_violation_min),
            upper_violation_min: sum(|m| m.upper_violation_min),
            max_u_spread: sum(|m| m.max_u_spread),
            saturation_min: sum(|m| m.saturation_min),
        }
    }

    /// Share of scenarios in which `strategy` saturated some inverter
    /// during a violation.
    pub fn saturation_share(&self, strategy: AgentMode) -> f64 {
        let rows: Vec<&BatchRow> = self.rows_for(strategy).collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().filter(|r| r.metrics.saturation_min > 0.0).count() as f64 / rows.len() as f64
    }
}

/// Scenario `k` of a batch: house placement, PV count (20 to 40) and
/// capacities, and profile seeds all follow from `seed` and `k`.
pub fn batch_config(template: &ScenarioConfig, seed: u64, k: u64) -> ScenarioConfig {
    let scenario_seed = seed.wrapping_mul(1_000_003).wrapping_add(k);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed);
    let mut spec = template.network_spec();
    spec.seed = rng.random();
    spec.pv_houses = rng.random_range(20..=40).min(spec.houses);
    let mut cfg = template.clone();
    cfg.network.file = None;
    cfg.network.generate = Some(spec);
    cfg.seed = rng.random();
    cfg
}

/// Runs `n` randomized scenarios under every strategy, in parallel.
pub fn run_batch(template: &ScenarioConfig, n: usize, seed: u64) -> Result<BatchSummary, ScenarioError> {
    if n == 0 {
        return Err(ScenarioError::Config("batch needs at least one scenario".into()));
    }
    if template.network.file.is_some() {
        return Err(ScenarioError::Config(
            "batch scenarios are generated; drop network.file".into(),
        ));
    }
    let jobs: Vec<(u64, AgentMode)> = (0..n as u64)
        .flat_map(|k| STRATEGIES.iter().map(move |&s| (k, s)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(k, strategy)| {
            let mut cfg = batch_config(template, seed, k);
            cfg.strategy = strategy;
            let inverters = cfg.network_spec().pv_houses + cfg.network_spec().farms.len();
            let res = run_scenario(&cfg)?;
            log::info!("batch scenario {k} {strategy:?}: {:?}", res.metrics);
            Ok(BatchRow {
                seed: k,
                strategy,
                inverters,
                metrics: res.metrics,
            })
        })
        .collect::<Result<Vec<_>, ScenarioError>>()?;
    let order = |s: AgentMode| STRATEGIES.iter().position(|&x| x == s).unwrap_or(0);
    rows.sort_by_key(|r| (r.seed, order(r.strategy)));
    Ok(BatchSummary { rows })
}
