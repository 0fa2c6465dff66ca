use proptest::prelude::*;

use coalvar::baselines::{epsilon_decompose, normalized_couplings, select_epsilon, BaselineError};
use coalvar::grid::SensitivityMatrix;
use coalvar::{BusId, ControlParams};

fn matrix(n: usize) -> impl Strategy<Value = SensitivityMatrix<f64>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, n), n).prop_map(move |a| SensitivityMatrix {
        buses: (1..=n as u32).map(BusId).collect(),
        a,
    })
}

proptest! {
    #[test]
    fn zones_cover_every_bus_once(m in matrix(8), eps in 0.0f64..1.2) {
        let part = epsilon_decompose(&m, eps);
        let mut all: Vec<BusId> = part.zones.concat();
        all.sort();
        prop_assert_eq!(all, m.buses.clone());
    }

    #[test]
    fn larger_threshold_refines(m in matrix(8), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let coarse = epsilon_decompose(&m, lo);
        let fine = epsilon_decompose(&m, hi);
        for z in &fine.zones {
            prop_assert!(z.windows(2).all(|w| coarse.same_zone(w[0], w[1])));
        }
    }

    #[test]
    fn couplings_are_symmetric_and_normalized(m in matrix(6)) {
        let w = normalized_couplings(&m.a);
        let peak = w.iter().flatten().cloned().fold(0.0, f64::max);
        prop_assert!((peak - 1.0).abs() < 1e-12);
        for (i, row) in w.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                prop_assert_eq!(*x, w[j][i]);
            }
        }
    }
}

#[test]
fn extreme_thresholds() {
    let m = SensitivityMatrix {
        buses: vec![BusId(1), BusId(2), BusId(3)],
        a: vec![vec![1.0, 0.2, 0.01], vec![0.2, 0.8, 0.05], vec![0.01, 0.05, 0.6]],
    };
    assert_eq!(epsilon_decompose(&m, 0.0).zones.len(), 1);
    assert_eq!(epsilon_decompose(&m, 1.0).zones.len(), 3);
    assert_eq!(
        epsilon_decompose(&m, 0.1).zones,
        vec![vec![BusId(1), BusId(2)], vec![BusId(3)]]
    );
}

#[test]
fn selected_threshold_separates_conflicting_voltages() {
    let params = ControlParams::default();
    let m = SensitivityMatrix {
        buses: vec![BusId(1), BusId(2), BusId(3), BusId(4)],
        a: vec![
            vec![1.0, 0.6, 0.1, 0.1],
            vec![0.6, 0.9, 0.1, 0.1],
            vec![0.1, 0.1, 0.8, 0.4],
            vec![0.1, 0.1, 0.4, 0.7],
        ],
    };
    let v = [1.07, 1.06, 0.93, 0.99];
    let eps = select_epsilon(&m, &v, &params).unwrap();
    let part = epsilon_decompose(&m, eps);
    assert!(!part.same_zone(BusId(1), BusId(3)));
    assert!(!part.same_zone(BusId(2), BusId(3)));
    assert!(part.same_zone(BusId(1), BusId(2)));
    assert!(matches!(
        select_epsilon(&m, &[1.0; 4], &params),
        Err(BaselineError::NoConflict)
    ));
}
