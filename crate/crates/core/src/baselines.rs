//! Comparison strategies: communication-free local control and
//! centralized epsilon-decomposition zoning.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::agents::{leader_step, ControlParams, InverterState};
use crate::grid::{BusId, SensitivityMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("no inverter above the upper threshold together with one below the lower threshold")]
    NoConflict,
    #[error("no threshold separates the over- and under-voltage inverters")]
    NoSeparation,
    #[error("voltage vector has {got} entries, matrix has {want}")]
    Length { got: usize, want: usize },
}

/// Zones of inverters that cooperate under the centralized scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonPartition<T> {
    pub epsilon: T,
    /// Sorted zones, each sorted; together they cover every inverter once.
    pub zones: Vec<Vec<BusId>>,
}

impl<T> EpsilonPartition<T> {
    /// Zone index of every inverter.
    pub fn zone_of(&self) -> BTreeMap<BusId, usize> {
        let mut out = BTreeMap::new();
        for (z, members) in self.zones.iter().enumerate() {
            for &m in members {
                out.insert(m, z);
            }
        }
        out
    }

    pub fn same_zone(&self, a: BusId, b: BusId) -> bool {
        self.zones.iter().any(|z| z.contains(&a) && z.contains(&b))
    }
}

/// Local control: the leader law on every inverter, nothing exchanged.
pub fn local_control_step<T: Scalar>(state: &InverterState<T>, params: &ControlParams<T>) -> InverterState<T> {
    let (u, lambda_hi, lambda_lo) = leader_step(state, params);
    InverterState {
        u,
        lambda_hi,
        lambda_lo,
        ..state.clone()
    }
}

/// Symmetric coupling strengths `max(|a_ij|, |a_ji|)` divided by the
/// largest absolute entry of the matrix.
pub fn normalized_couplings<T: Scalar>(a: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = a.len();
    let peak = a.iter().flat_map(|r| r.iter()).fold(T::zero(), |m, x| m.max(x.abs()));
    let scale = if peak > T::zero() { peak } else { T::one() };
    (0..n)
        .map(|i| (0..n).map(|j| a[i][j].abs().max(a[j][i].abs()) / scale).collect())
        .collect()
}

/// Connected components of the graph with an edge wherever the normalized
/// coupling is at least `epsilon`. `epsilon >= 1` means no cooperation.
pub fn epsilon_decompose<T: Scalar>(a_vq: &SensitivityMatrix<T>, epsilon: T) -> EpsilonPartition<T> {
    let w = normalized_couplings(&a_vq.a);
    let labels = components(&w, epsilon);
    let mut zones: BTreeMap<usize, Vec<BusId>> = BTreeMap::new();
    for (k, l) in labels.into_iter().enumerate() {
        zones.entry(l).or_default().push(a_vq.buses[k]);
    }
    let mut zones: Vec<Vec<BusId>> = zones
        .into_values()
        .map(|mut z| {
            z.sort();
            z
        })
        .collect();
    zones.sort();
    EpsilonPartition { epsilon, zones }
}

/// Component label per row, the smallest member index of its component.
fn components<T: Scalar>(w: &[Vec<T>], epsilon: T) -> Vec<usize> {
    let n = w.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    if epsilon < T::one() {
        for i in 0..n {
            for j in (i + 1)..n {
                if w[i][j] >= epsilon {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi] = lo;
                }
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Smallest candidate threshold (a distinct normalized coupling value, or 1)
/// whose zones keep every inverter above `v_hi_th` apart from every
/// inverter below `v_lo_th`. `voltages` follows `a_vq.buses`.
pub fn select_epsilon<T: Scalar>(
    a_vq: &SensitivityMatrix<T>,
    voltages: &[T],
    params: &ControlParams<T>,
) -> Result<T, BaselineError> {
    let n = a_vq.buses.len();
    if voltages.len() != n {
        return Err(BaselineError::Length {
            got: voltages.len(),
            want: n,
        });
    }
    let high: Vec<usize> = (0..n).filter(|&k| voltages[k] > params.v_hi_th).collect();
    let low: Vec<usize> = (0..n).filter(|&k| voltages[k] < params.v_lo_th).collect();
    if high.is_empty() || low.is_empty() {
        return Err(BaselineError::NoConflict);
    }
    let w = normalized_couplings(&a_vq.a);
    let mut candidates: Vec<T> = w.iter().flat_map(|r| r.iter().copied()).collect();
    candidates.push(T::one());
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite couplings"));
    candidates.dedup();
    // Separation is monotone in epsilon, so bisect over the sorted candidates.
    let separates = |eps: T| {
        let labels = components(&w, eps);
        !high.iter().any(|&h| low.iter().any(|&l| labels[h] == labels[l]))
    };
    if !separates(*candidates.last().expect("at least one candidate")) {
        return Err(BaselineError::NoSeparation);
    }
    let (mut lo, mut hi) = (0usize, candidates.len() - 1);
    if separates(candidates[0]) {
        return Ok(candidates[0]);
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if separates(candidates[mid]) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(candidates[hi])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(a: Vec<Vec<f64>>) -> SensitivityMatrix<f64> {
        let buses = (1..=a.len() as u32).map(BusId).collect();
        SensitivityMatrix { buses, a }
    }

    #[test]
    fn weak_coupling_splits() {
        let a = mat(vec![vec![1.0, 0.05], vec![0.05, 1.0]]);
        let p = epsilon_decompose(&a, 0.1);
        assert_eq!(p.zones, vec![vec![BusId(1)], vec![BusId(2)]]);
        let p = epsilon_decompose(&a, 0.0);
        assert_eq!(p.zones, vec![vec![BusId(1), BusId(2)]]);
        let p = epsilon_decompose(&mat(vec![vec![1.0, 1.0], vec![1.0, 1.0]]), 1.0);
        assert_eq!(p.zones.len(), 2);
    }

    #[test]
    fn asymmetric_entries_use_the_larger() {
        let a = mat(vec![vec![1.0, 0.3], vec![0.01, 1.0]]);
        assert_eq!(epsilon_decompose(&a, 0.2).zones.len(), 1);
    }

    #[test]
    fn chain_threshold() {
        let a = mat(vec![vec![1.0, 0.8, 0.1], vec![0.8, 1.0, 0.3], vec![0.1, 0.3, 1.0]]);
        let params = ControlParams::default();
        let eps = select_epsilon(&a, &[1.06, 1.0, 0.94], &params).unwrap();
        assert_eq!(eps, 0.8);
        let p = epsilon_decompose(&a, eps);
        assert_eq!(p.zones, vec![vec![BusId(1), BusId(2)], vec![BusId(3)]]);
        assert!(!p.same_zone(BusId(1), BusId(3)));
        assert_eq!(
            select_epsilon(&a, &[1.0, 1.0, 0.94], &params),
            Err(BaselineError::NoConflict)
        );
    }

    #[test]
    fn local_step_is_leader_law() {
        let params = ControlParams::<f64>::default();
        let mut s = InverterState::new(BusId(4), 5.0, &[], &params);
        s.v_now = 0.90;
        let s1 = local_control_step(&s, &params);
        assert_eq!(s1.u, 0.0);
        assert!((s1.lambda_lo - 0.2).abs() < 1e-12);
        let s2 = local_control_step(&s1, &params);
        assert!((s2.u - 0.2).abs() < 1e-12);
        s.v_now = 1.0;
        assert_eq!(local_control_step(&s, &params).u, 0.0);
    }
}
