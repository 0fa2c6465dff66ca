use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coalvar::comms::{CommGraph, Edge, Envelope, FaultSchedule, LinkFault, MessageBus};
use coalvar::scenario::{generate_network, NetworkSpec};
use coalvar::BusId;

fn ids(v: &[u32]) -> Vec<BusId> {
    v.iter().map(|&x| BusId(x)).collect()
}

fn chain() -> CommGraph {
    let n = ids(&[1, 2, 3, 4]);
    CommGraph::new(&n, &[(n[0], n[1]), (n[1], n[2]), (n[2], n[3])]).unwrap()
}

#[test]
fn rejects_cycles_and_forests() {
    let n = ids(&[1, 2, 3]);
    assert!(CommGraph::new(&n, &[(n[0], n[1]), (n[1], n[2]), (n[2], n[0])]).is_err());
    assert!(CommGraph::new(&n, &[(n[0], n[1])]).is_err());
    assert!(CommGraph::new(&n, &[(n[0], n[1]), (n[0], n[1])]).is_err());
}

#[test]
fn feeder_tree_spans_every_inverter() {
    let feeder = generate_network(&NetworkSpec::default()).unwrap();
    let inv: Vec<BusId> = feeder.inverters().into_iter().map(|(id, _)| id).collect();
    let g = CommGraph::from_feeder(&feeder.network, &inv).unwrap();
    assert_eq!(g.len(), inv.len());
    assert_eq!(g.edges().len(), inv.len() - 1);
    assert!(g.diameter() < inv.len());
}

#[test]
fn messages_arrive_after_the_latency() {
    let mut bus = MessageBus::new(chain(), FaultSchedule::none(), 3);
    bus.send(Envelope {
        sender: BusId(1),
        receiver: BusId(2),
        sent_tick: 10,
        payload: 7u8,
    })
    .unwrap();
    assert!(bus.deliver(11).is_empty());
    assert!(bus.deliver(12).is_empty());
    let got = bus.deliver(13);
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].payload, 7);
    assert_eq!(bus.stats(), (1, 0));
}

#[test]
fn sending_off_the_tree_is_an_error() {
    let mut bus = MessageBus::new(chain(), FaultSchedule::none(), 1);
    let env = Envelope {
        sender: BusId(1),
        receiver: BusId(3),
        sent_tick: 0,
        payload: (),
    };
    assert!(bus.send(env).is_err());
}

#[test]
fn a_down_link_drops_messages() {
    let fault = LinkFault::new(Edge::new(BusId(2), BusId(3)), 5, 8).unwrap();
    let mut bus = MessageBus::new(chain(), FaultSchedule::from_faults([fault]), 1);
    for t in [4, 6, 7] {
        bus.send(Envelope {
            sender: BusId(3),
            receiver: BusId(2),
            sent_tick: t,
            payload: t,
        })
        .unwrap();
    }
    let mut got = Vec::new();
    for now in 0..12 {
        got.extend(bus.deliver(now).into_iter().map(|e| e.payload));
    }
    assert_eq!(got, vec![7]);
    assert_eq!(bus.stats(), (3, 2));
    assert!(!bus.is_link_up(BusId(2), BusId(3), 5));
    assert!(bus.is_link_up(BusId(2), BusId(3), 8));
}

#[test]
fn periodic_faults_take_the_requested_share() {
    let g = chain();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sched = FaultSchedule::sample_periodic(&g, &mut rng, 0.1, 100, 20, 1000);
    let faults = sched.faults();
    assert_eq!(faults.len(), 10);
    assert!(faults
        .iter()
        .all(|f| f.end_tick - f.start_tick == 20 && f.start_tick % 100 == 0));
    let again = FaultSchedule::sample_periodic(&g, &mut ChaCha8Rng::seed_from_u64(1), 0.1, 100, 20, 1000);
    assert_eq!(faults, again.faults());
}
