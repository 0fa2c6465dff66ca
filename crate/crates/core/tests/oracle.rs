use coalvar::oracle::{primal_dual_trajectory, snapshot_optimum, LinearVoltageModel, Member};
use coalvar::{Bus, BusId, ControlParams, Line, NetworkModel};

/// Heavily loaded chain whose far end sags below the lower limit.
fn sagging_chain() -> NetworkModel {
    let mut buses = vec![Bus::slack(1)];
    let mut lines = Vec::new();
    for id in 2..=8 {
        let b = Bus::load(id, 14.0, 4.0);
        buses.push(if id >= 6 { b.with_pv(1.0) } else { b });
        lines.push(Line::new(id - 1, id, 0.03, 0.02));
    }
    NetworkModel::new(buses, lines, 230.0, 100.0).unwrap()
}

#[test]
fn snapshot_optimum_lifts_the_leader_to_the_limit() {
    let params = ControlParams::default();
    let net = sagging_chain();
    let members: Vec<Member<f64>> = (6..=8)
        .map(|id| Member {
            id: BusId(id),
            q_max: 20.0,
        })
        .collect();
    let opt = snapshot_optimum(&net, &members, BusId(8), &params, &net.injections_pu(), 0.99).unwrap();
    assert!(!opt.saturated);
    assert!(opt.u_star > 0.0 && opt.u_star < 1.0);
    assert!((opt.v_leader - params.v_lo).abs() < 1e-6);
    assert!(opt.q_star.iter().all(|(_, q)| (q - opt.u_star * 20.0).abs() < 1e-9));
}

#[test]
fn linear_model_optimum_is_the_trajectory_limit() {
    let params = ControlParams::default();
    let model = LinearVoltageModel::new(vec![BusId(1), BusId(2)], vec![0.01, 0.02], vec![1.0, 1.5], 0.89).unwrap();
    let u_star = model.optimum(&params);
    assert!((model.leader_voltage(u_star) - params.v_lo).abs() < 1e-12);
    let path = primal_dual_trajectory(&model, &params, 400, 1.0).unwrap();
    let last = path.last().unwrap();
    assert!((last.u - u_star).abs() < 1e-6);
    assert_eq!(last.lambda_hi, 0.0);
}

#[test]
fn no_violation_means_no_action() {
    let params = ControlParams::default();
    let model = LinearVoltageModel::new(vec![BusId(1)], vec![0.01], vec![1.0], 1.0).unwrap();
    assert_eq!(model.optimum(&params), 0.0);
    assert_eq!(model.objective(0.0), 0.0);
}

#[test]
fn rejects_members_without_capacity() {
    assert!(LinearVoltageModel::new(vec![BusId(1)], vec![0.01], vec![0.0], 0.9).is_err());
    assert!(LinearVoltageModel::new(vec![BusId(1)], vec![-0.01], vec![1.0], 0.9).is_err());
}
