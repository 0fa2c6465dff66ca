//! Violation and utilization summaries.

use std::fmt;

use crate::agents::ControlParams;
use crate::grid::BusId;

use super::runner::TimeSeriesResult;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    /// Minutes with some bus below the lower limit.
    pub lower_violation_min: f64,
    /// Minutes with some bus above the upper limit.
    pub upper_violation_min: f64,
    /// Largest within-coalition spread of the applied ratio.
    pub max_u_spread: f64,
    /// Minutes with a violation and some inverter at `|u| = 1`.
    pub saturation_min: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lower_violation_min={}", self.lower_violation_min)?;
        writeln!(f, "upper_violation_min={}", self.upper_violation_min)?;
        writeln!(f, "max_u_spread={}", self.max_u_spread)?;
        write!(f, "saturation_min={}", self.saturation_min)
    }
}

/// Tick-by-tick accumulation of [`Metrics`].
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    v_lo: f64,
    v_hi: f64,
    lower_ticks: u64,
    upper_ticks: u64,
    sat_ticks: u64,
    max_spread: f64,
    lo_scratch: Vec<f64>,
    hi_scratch: Vec<f64>,
}

impl MetricsAccumulator {
    pub fn new(params: &ControlParams<f64>) -> Self {
        MetricsAccumulator {
            v_lo: params.v_lo,
            v_hi: params.v_hi,
            lower_ticks: 0,
            upper_ticks: 0,
            sat_ticks: 0,
            max_spread: 0.0,
            lo_scratch: Vec::new(),
            hi_scratch: Vec::new(),
        }
    }

    /// `weight` ticks of the given state. `coalition[k]` labels inverter
    /// `k`'s coalition with a small dense index.
    pub fn observe(&mut self, voltages: &[f64], u: &[f64], coalition: &[usize], weight: u64) {
        let low = voltages.iter().any(|&v| v < self.v_lo);
        let high = voltages.iter().any(|&v| v > self.v_hi);
        if low {
            self.lower_ticks += weight;
        }
        if high {
            self.upper_ticks += weight;
        }
        if (low || high) && u.iter().any(|x| x.abs() >= 1.0) {
            self.sat_ticks += weight;
        }
        let groups = coalition.iter().copied().max().map_or(0, |m| m + 1);
        self.lo_scratch.clear();
        self.lo_scratch.resize(groups, f64::INFINITY);
        self.hi_scratch.clear();
        self.hi_scratch.resize(groups, f64::NEG_INFINITY);
        for (x, &c) in u.iter().zip(coalition) {
            self.lo_scratch[c] = self.lo_scratch[c].min(*x);
            self.hi_scratch[c] = self.hi_scratch[c].max(*x);
        }
        for (lo, hi) in self.lo_scratch.iter().zip(&self.hi_scratch) {
            if hi >= lo {
                self.max_spread = self.max_spread.max(hi - lo);
            }
        }
    }

    pub fn finish(&self, tick_s: f64) -> Metrics {
        let min = |t: u64| t as f64 * tick_s / 60.0;
        Metrics {
            lower_violation_min: min(self.lower_ticks),
            upper_violation_min: min(self.upper_ticks),
            max_u_spread: self.max_spread,
            saturation_min: min(self.sat_ticks),
        }
    }
}

/// Metrics from the recorded samples, each standing for `record_stride`
/// ticks. With a stride of one this equals the runner's own metrics.
pub fn compute_metrics(result: &TimeSeriesResult, params: &ControlParams<f64>) -> Metrics {
    let mut acc = MetricsAccumulator::new(params);
    let mut labels: Vec<usize> = Vec::new();
    for k in 0..result.times.len() {
        dense_labels(&result.coalitions[k], &mut labels);
        acc.observe(&result.voltages[k], &result.ratios[k], &labels, result.record_stride);
    }
    acc.finish(result.tick_s)
}

fn dense_labels(ids: &[BusId], out: &mut Vec<usize>) {
    let mut seen: Vec<BusId> = ids.to_vec();
    seen.sort();
    seen.dedup();
    out.clear();
    out.extend(ids.iter().map(|id| seen.binary_search(id).expect("present")));
}
