//! Reference solutions for one coalition on a frozen snapshot.
//!
//! With equal penalty weights the optimum shares one utilization ratio
//! across the coalition, so the exact nonlinear answer reduces to a 1-D
//! root search. [`LinearVoltageModel`] is the linearized leader voltage
//! used by the primal-dual trajectory.

use num_complex::Complex;
use thiserror::Error;

use crate::agents::ControlParams;
use crate::grid::{sensitivity_columns, BusId, GridError, NetworkModel, SweepOptions, SweepSolver};
use crate::scalar::{clamp, pos, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("coalition has no members")]
    Empty,
    #[error("member {0} has no reactive capacity")]
    NoCapacity(BusId),
    #[error("sensitivity of the leader to member {0} is not positive")]
    BadSensitivity(BusId),
    #[error("trajectory diverged at step {0}; reduce the step")]
    Diverged(usize),
}

/// A coalition member and its reactive capacity, kvar.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Member<T> {
    pub id: BusId,
    pub q_max: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotOptimum<T> {
    pub u_star: T,
    /// Reactive output per member, kvar.
    pub q_star: Vec<(BusId, T)>,
    pub v_leader: T,
    /// Even `|u| = 1` does not clear the violation.
    pub saturated: bool,
}

/// Which limit the leader violates, if any.
fn violated_limit<T: Scalar>(v: T, params: &ControlParams<T>) -> Option<T> {
    if v < params.v_lo {
        Some(params.v_lo)
    } else if v > params.v_hi {
        Some(params.v_hi)
    } else {
        None
    }
}

/// Shared-ratio optimum on the nonlinear power flow. `injections` are the
/// frozen bus injections in p.u. without any inverter reactive output.
pub fn snapshot_optimum<T: Scalar>(
    net: &NetworkModel<T>,
    members: &[Member<T>],
    leader: BusId,
    params: &ControlParams<T>,
    injections: &[Complex<T>],
    slack_v: T,
) -> Result<SnapshotOptimum<T>, OracleError> {
    if members.is_empty() {
        return Err(OracleError::Empty);
    }
    let idx: Vec<usize> = members.iter().map(|m| net.index_of(m.id)).collect::<Result<_, _>>()?;
    let lead = net.index_of(leader)?;
    let mut solver = SweepSolver::new(SweepOptions::default());
    let mut work = injections.to_vec();
    let mut v_at = |u: T| -> Result<T, OracleError> {
        work.copy_from_slice(injections);
        for (m, &k) in members.iter().zip(&idx) {
            let q = net.kva_to_pu(Complex::new(T::zero(), u * m.q_max));
            work[k] += q;
        }
        Ok(solver.solve(net, &work, slack_v)?.into_result()?.v_mag[lead])
    };

    let v0 = v_at(T::zero())?;
    let finish = |u: T, v: T, saturated: bool| SnapshotOptimum {
        u_star: u,
        q_star: members.iter().map(|m| (m.id, u * m.q_max)).collect(),
        v_leader: v,
        saturated,
    };
    let Some(limit) = violated_limit(v0, params) else {
        return Ok(finish(T::zero(), v0, false));
    };
    let dir = if limit == params.v_lo { T::one() } else { -T::one() };
    let v_end = v_at(dir)?;
    // Remaining violation at full output.
    if (v_end - limit) * (v0 - limit) > T::zero() {
        return Ok(finish(dir, v_end, true));
    }
    let tol = T::lit(1e-6).max(T::epsilon() * T::lit(64.0));
    let (mut a, mut b) = (T::zero(), dir);
    let (mut u, mut v) = (b, v_end);
    for _ in 0..200 {
        if (v - limit).abs() <= tol {
            break;
        }
        let mid = (a + b) / T::lit(2.0);
        if mid == a || mid == b {
            break;
        }
        let vm = v_at(mid)?;
        u = mid;
        v = vm;
        if (vm - limit) * (v0 - limit) > T::zero() {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(finish(u, v, false))
}

/// `V_l = v_uncon + sum_i s_i Q_i` around a frozen snapshot (all p.u.).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearVoltageModel<T> {
    pub members: Vec<BusId>,
    /// `dV_l / dQ_i`.
    pub sensitivities: Vec<T>,
    /// Reactive capacity per member, p.u.
    pub q_max: Vec<T>,
    pub v_uncon: T,
    /// `s_i / q_max_i`.
    pub gamma: Vec<T>,
}

impl<T: Scalar> LinearVoltageModel<T> {
    pub fn new(members: Vec<BusId>, sensitivities: Vec<T>, q_max: Vec<T>, v_uncon: T) -> Result<Self, OracleError> {
        if members.is_empty() {
            return Err(OracleError::Empty);
        }
        assert_eq!(members.len(), sensitivities.len());
        assert_eq!(members.len(), q_max.len());
        for k in 0..members.len() {
            if !(sensitivities[k] > T::zero()) {
                return Err(OracleError::BadSensitivity(members[k]));
            }
            if !(q_max[k] > T::zero()) {
                return Err(OracleError::NoCapacity(members[k]));
            }
        }
        let gamma = sensitivities.iter().zip(&q_max).map(|(s, q)| *s / *q).collect();
        Ok(LinearVoltageModel {
            members,
            sensitivities,
            q_max,
            v_uncon,
            gamma,
        })
    }

    /// Linearization at the frozen snapshot with every member at zero output.
    pub fn from_snapshot(
        net: &NetworkModel<T>,
        members: &[Member<T>],
        leader: BusId,
        injections: &[Complex<T>],
        slack_v: T,
    ) -> Result<Self, OracleError> {
        let ids: Vec<BusId> = members.iter().map(|m| m.id).collect();
        let lead = net.index_of(leader)?;
        let sol = SweepSolver::new(SweepOptions::default())
            .solve(net, injections, slack_v)?
            .into_result()?;
        let cols = sensitivity_columns(net, injections, slack_v, &ids)?;
        let s = cols.iter().map(|c| c[lead]).collect();
        let q = members.iter().map(|m| m.q_max / net.s_base()).collect();
        Self::new(ids, s, q, sol.v_mag[lead])
    }

    /// Leader voltage change per unit of shared ratio.
    pub fn gain(&self) -> T {
        self.sensitivities.iter().zip(&self.q_max).map(|(s, q)| *s * *q).sum()
    }

    pub fn leader_voltage(&self, u: T) -> T {
        self.v_uncon + u * self.gain()
    }

    /// `0.5 * sum_i gamma_i Q_i^2` with `Q_i = u q_max_i`.
    pub fn objective(&self, u: T) -> T {
        let half = T::lit(0.5);
        self.gamma
            .iter()
            .zip(&self.q_max)
            .map(|(g, q)| half * *g * (u * *q) * (u * *q))
            .sum()
    }

    /// Shared-ratio optimum of the linear problem.
    pub fn optimum(&self, params: &ControlParams<T>) -> T {
        match violated_limit(self.v_uncon, params) {
            None => T::zero(),
            Some(limit) => clamp((limit - self.v_uncon) / self.gain(), -T::one(), T::one()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint<T> {
    pub u: T,
    pub lambda_hi: T,
    pub lambda_lo: T,
    pub v_leader: T,
}

/// Forward-Euler integration of the projected primal-dual dynamics on the
/// linear model, starting from zero duals. `h` is the step in ticks (1 is
/// one controller sample). Returns `steps + 1` points.
pub fn primal_dual_trajectory<T: Scalar>(
    model: &LinearVoltageModel<T>,
    params: &ControlParams<T>,
    steps: usize,
    h: T,
) -> Result<Vec<TrajectoryPoint<T>>, OracleError> {
    let unsaturated = model.optimum(params).abs() < T::one();
    let bound = T::lit(10.0);
    let mut hi = T::zero();
    let mut lo = T::zero();
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let raw = lo - hi;
        if unsaturated && raw.abs() > bound {
            return Err(OracleError::Diverged(k));
        }
        let u = clamp(raw, -T::one(), T::one());
        let v = model.leader_voltage(u);
        out.push(TrajectoryPoint {
            u,
            lambda_hi: hi,
            lambda_lo: lo,
            v_leader: v,
        });
        hi = pos(hi + h * params.alpha * (v - params.v_hi));
        lo = pos(lo + h * params.alpha * (params.v_lo - v));
    }
    Ok(out)
}
