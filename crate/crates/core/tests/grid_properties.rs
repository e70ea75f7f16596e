mod common;

use gridchain::grid::{
    branch_currents, build_sensitivity, detect_violations, solve_voltage, BusId, NetworkModel, OperatingPoint,
};
use proptest::prelude::*;

fn tree() -> impl Strategy<Value = NetworkModel> {
    (any::<u64>(), 2u32..=40).prop_map(|(seed, n)| common::random_tree(&mut common::seeded(seed), n))
}

fn injections(net: &NetworkModel, seed: u64) -> OperatingPoint {
    use rand::Rng;
    let mut rng = common::seeded(seed);
    let mut op = OperatingPoint::zero(net);
    for b in &net.buses {
        op.inj_p.insert(b.id, rng.gen_range(-0.2..0.2));
        op.inj_q.insert(b.id, rng.gen_range(-0.2..0.2));
    }
    op
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sensitivity_matches_finite_differences(net in tree()) {
        prop_assert!(common::sensitivity_fd_error(&net) <= 1e-9);
    }

    #[test]
    fn sensitivity_is_symmetric_and_non_negative(net in tree()) {
        let s = build_sensitivity(&net).unwrap();
        let root = net.root_bus_id;
        for &i in &s.buses {
            for &j in &s.buses {
                prop_assert_eq!(s.sp(i, j).unwrap(), s.sp(j, i).unwrap());
                prop_assert_eq!(s.sq(i, j).unwrap(), s.sq(j, i).unwrap());
                prop_assert!(s.sp(i, j).unwrap() >= 0.0 && s.sq(i, j).unwrap() >= 0.0);
            }
            prop_assert_eq!(s.sp(root, i).unwrap(), 0.0);
            prop_assert_eq!(s.sq(root, i).unwrap(), 0.0);
        }
    }

    #[test]
    fn solve_is_linear(net in tree(), a in any::<u64>(), b in any::<u64>()) {
        let (x, y) = (injections(&net, a), injections(&net, b));
        let mut sum = x.clone();
        for bus in &net.buses {
            *sum.inj_p.get_mut(&bus.id).unwrap() += y.inj_p[&bus.id];
            *sum.inj_q.get_mut(&bus.id).unwrap() += y.inj_q[&bus.id];
        }
        let flat = solve_voltage(&net, &OperatingPoint::zero(&net)).unwrap();
        let (vx, vy, vs) = (solve_voltage(&net, &x).unwrap(), solve_voltage(&net, &y).unwrap(), solve_voltage(&net, &sum).unwrap());
        for bus in &net.buses {
            let id = bus.id;
            let predicted = vx.voltages[&id] + vy.voltages[&id] - flat.voltages[&id];
            prop_assert!((vs.voltages[&id] - predicted).abs() <= 1e-12);
        }
        prop_assert_eq!(vs.voltages[&net.root_bus_id], 1.0);
    }

    #[test]
    fn more_active_power_never_lowers_a_voltage(net in tree(), seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let op = injections(&net, seed);
        let bus = net.buses[pick.index(net.buses.len())].id;
        let mut more = op.clone();
        *more.inj_p.get_mut(&bus).unwrap() += 0.1;
        let (v0, v1) = (solve_voltage(&net, &op).unwrap(), solve_voltage(&net, &more).unwrap());
        for b in &net.buses {
            prop_assert!(v1.voltages[&b.id] >= v0.voltages[&b.id]);
        }
    }

    #[test]
    fn violation_detection_is_deterministic(net in tree(), seed in any::<u64>()) {
        let op = injections(&net, seed);
        let first = detect_violations(&net, &solve_voltage(&net, &op).unwrap());
        let second = detect_violations(&net, &solve_voltage(&net, &op).unwrap());
        prop_assert_eq!(format!("{first:?}"), format!("{second:?}"));
    }

    #[test]
    fn branch_current_follows_receiving_voltage(net in tree(), seed in any::<u64>()) {
        // brute force: sum the subtree injections behind each line
        let op = injections(&net, seed);
        let profile = solve_voltage(&net, &op).unwrap();
        let currents = branch_currents(&net, &op, &profile).unwrap();
        for (k, line) in net.lines.iter().enumerate() {
            let mut subtree = vec![line.to_bus];
            let mut i = 0;
            while i < subtree.len() {
                let b = subtree[i];
                subtree.extend(net.lines.iter().filter(|l| l.from_bus == b).map(|l| l.to_bus));
                i += 1;
            }
            let p: f64 = subtree.iter().map(|b| op.inj_p[b]).sum();
            let q: f64 = subtree.iter().map(|b| op.inj_q[b]).sum();
            let expected = p.hypot(q) / profile.voltages[&line.to_bus];
            prop_assert!((currents[k] - expected).abs() <= 1e-12);
        }
    }
}

#[test]
fn bundled_feeder_matches_finite_differences() {
    use gridchain::harness::{bundled, parse_scenario};
    let net = parse_scenario(bundled("ieee_4zone").unwrap()).unwrap().network();
    assert_eq!(net.buses.len(), 37);
    assert!(common::sensitivity_fd_error(&net) <= 1e-9);
    assert!(build_sensitivity(&net).unwrap().sp(BusId(33), BusId(37)).unwrap() > 0.0);
}
