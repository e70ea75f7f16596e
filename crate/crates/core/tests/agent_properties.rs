mod common;

use std::collections::{BTreeMap, BTreeSet};

use gridchain::agent::{AgentPolicy, DispatchProblem, Pricing, ZonalAgent};
use gridchain::grid::{
    build_sensitivity, predict_voltage_change, solve_voltage, BusId, BusRecord, DeviceKind, DeviceRecord, LineId,
    LineRecord, NetworkModel, OperatingPoint,
};
use gridchain::ledger::{AgentId, KeyPair};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    net: NetworkModel,
    dg_bus: BusId,
    dv: f64,
    pr_p: f64,
    pricing: Pricing,
}

fn instance() -> impl Strategy<Value = Instance> {
    (
        prop::collection::vec((0.001f64..0.02, 0.001f64..0.02, 0.0f64..0.05), 5),
        4u32..=6,
        (any::<bool>(), 0.2f64..1.5, 0.0f64..1.0, 0.0f64..0.6, 0.3f64..1.6),
        (-0.02f64..0.02).prop_filter("non-zero target", |d| d.abs() > 1e-4),
        (50.0f64..300.0, 0.0f64..1500.0, 1.0f64..1.5),
    )
        .prop_map(|(lines, dg, (storage, p_max, avail, q_max, s_max), dv, (pr_p, pr_q, alpha))| {
            let mut buses: Vec<BusRecord> = (1..=6).map(BusRecord::new).collect();
            for (b, l) in buses.iter_mut().skip(1).zip(&lines) {
                b.load_p = l.2;
                b.load_q = l.2 / 2.0;
            }
            let mut dev = DeviceRecord {
                id: "DG".into(),
                kind: if storage { DeviceKind::Storage } else { DeviceKind::Generator },
                p_max,
                q_max,
                s_max,
                p_set: 0.0,
                q_set: 0.0,
                p_avail: avail * p_max,
            };
            let natural = if storage { 0.0 } else { dev.p_ceiling() };
            let (p, q, _) = dev.clamp_setpoint(natural, 0.0);
            dev.p_set = p;
            dev.q_set = q;
            buses[dg as usize - 1].devices.push(dev);
            let lines = lines
                .iter()
                .enumerate()
                .map(|(k, l)| LineRecord {
                    id: LineId(k as u32 + 1),
                    from_bus: BusId(k as u32 + 1),
                    to_bus: BusId(k as u32 + 2),
                    r: l.0,
                    x: l.1,
                    i_cap: 10.0,
                })
                .collect();
            let net = NetworkModel { buses, lines, root_bus_id: BusId(1), base_voltage: 1.0 };
            Instance { net, dg_bus: BusId(dg), dv, pr_p, pricing: Pricing { pr_q, alpha } }
        })
}

const PZC: BusId = BusId(3);

fn agent(inst: &Instance) -> ZonalAgent {
    let zone: BTreeSet<BusId> = (3..=6).map(BusId).collect();
    let lines = (3..=5).map(LineId).collect();
    ZonalAgent::new(
        AgentId(3),
        zone,
        lines,
        BTreeMap::from([(AgentId(2), PZC)]),
        vec!["DG".into()],
        inst.dg_bus,
        KeyPair { public_key: vec![], secret_key: vec![] },
        inst.pricing,
        AgentPolicy::default(),
    )
}

fn apply(net: &NetworkModel, dp: f64, dq: f64) -> NetworkModel {
    let mut out = net.clone();
    for b in &mut out.buses {
        for d in &mut b.devices {
            d.p_set += dp;
            d.q_set += dq;
        }
    }
    out
}

fn random_problem() -> impl Strategy<Value = DispatchProblem> {
    (
        (0.0f64..0.05, 0.0f64..0.05, -0.02f64..0.02),
        (0.0f64..1.0, -0.3f64..0.3, 0.0f64..1.0, 0.0f64..0.6),
        (0.5f64..1.5, 0.0f64..300.0, 0.0f64..1500.0, 1.0f64..1.5),
        prop::collection::vec((0.0f64..0.05, 0.0f64..0.05, -0.02f64..0.0, 0.0f64..0.02), 0..3),
    )
        .prop_map(|((s_p, s_q, dv), (p0, q0, p_room, q_max), (s_max, pr_p, pr_q, alpha), watched)| {
            DispatchProblem {
                s_p,
                s_q,
                dv,
                p0,
                q0,
                dp_min: -p0,
                dp_max: p_room,
                dq_min: -q_max - q0,
                dq_max: q_max - q0,
                s_max,
                watched,
                pr_q,
                pr_p,
                alpha,
                dt: 1.0,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn closed_form_dispatch_matches_grid_search(p in random_problem()) {
        let exact = p.solve();
        let oracle = common::brute_force_dispatch(&p, 20_000);
        match (exact, oracle) {
            (Some(d), Some((_, _, c))) => {
                prop_assert!(p.is_feasible(d.dp, d.dq, 1e-9));
                prop_assert!((d.cost - p.cost(d.dp, d.dq)).abs() <= 1e-9);
                prop_assert!(d.cost <= c * 1.01 + 1e-6, "exact {} vs oracle {}", d.cost, c);
            }
            (None, Some((dp, dq, _))) => {
                // only tolerable if the oracle point sits on a boundary
                prop_assert!(!p.is_feasible(dp, dq, -1e-7), "solver missed ({dp}, {dq})");
            }
            (Some(d), None) => prop_assert!(p.is_feasible(d.dp, d.dq, 1e-9)),
            (None, None) => {}
        }
    }

    #[test]
    fn offers_are_cheap_feasible_and_safe(inst in instance()) {
        let profile = solve_voltage(&inst.net, &OperatingPoint::from_network(&inst.net)).unwrap();
        let in_band = (3..=6).all(|b| {
            let v = profile.voltages[&BusId(b)];
            (0.95..=1.05).contains(&v)
        });
        prop_assume!(in_band);
        let sens = build_sensitivity(&inst.net).unwrap();
        let a = agent(&inst);
        let offer = a.evaluate_cfp(PZC, inst.dv, 1.0, &sens, &inst.net, &profile, inst.pr_p, 1.0);
        let problem = a.dispatch_problem(PZC, inst.dv, &sens, &inst.net, &profile, inst.pr_p, 1.0, inst.pricing.alpha).unwrap();
        if !offer.feasible {
            if let Some((dp, dq, _)) = common::brute_force_dispatch(&problem, 20_000) {
                prop_assert!(!problem.is_feasible(dp, dq, -1e-7));
            }
            return Ok(());
        }
        // bid-oracle equivalence
        let (_, _, oracle) = common::brute_force_dispatch(&problem, 20_000).unwrap();
        prop_assert!(offer.cost <= oracle * 1.01 + 1e-6, "offer {} vs oracle {}", offer.cost, oracle);
        let predicted = predict_voltage_change(&sens, inst.dg_bus, offer.dp, offer.dq).unwrap()[&PZC];
        prop_assert!((predicted - inst.dv).abs() <= 0.0005);
        // direction correctness
        prop_assert!(predicted * inst.dv > 0.0);
        // capability safety
        let after = apply(&inst.net, offer.dp, offer.dq);
        let dev = &after.buses[inst.dg_bus.0 as usize - 1].devices[0];
        prop_assert!(dev.within_limits(1e-9), "{dev:?}");
        // feasibility honesty: re-solve and check the zone
        let v = solve_voltage(&after, &OperatingPoint::from_network(&after)).unwrap();
        for b in 3..=6 {
            let x = v.voltages[&BusId(b)];
            prop_assert!((0.95 - 1e-9..=1.05 + 1e-9).contains(&x), "bus {b} at {x}");
        }
    }
}
