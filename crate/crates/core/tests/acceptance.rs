//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or overruns its time budget.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use gridchain::contract::{CfpId, CfpState, NoAwardReason};
use gridchain::grid::BusId;
use gridchain::harness::{audit_chain, bundled, parse_scenario, run_simulation, RunReport, ScenarioConfig};
use gridchain::ledger::{parse_chain_log, AgentId};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        {
            let held: bool = $cond;
            if !held {
                return Err(format!($($fmt)+));
            }
        }
    };
}

fn scenario(name: &str) -> ScenarioConfig {
    parse_scenario(bundled(name).unwrap()).unwrap()
}

fn run(name: &str, steps: Option<u64>) -> Result<RunReport, String> {
    let mut cfg = scenario(name);
    if let Some(s) = steps {
        cfg.params.steps = s;
    }
    run_simulation(cfg).map_err(|e| e.to_string())
}

fn final_value(rows: &[(u64, AgentId, f64)], agent: u32) -> f64 {
    rows.iter().rev().find(|r| r.1 == AgentId(agent)).map(|r| r.2).unwrap()
}

fn reputation_arithmetic() -> Outcome {
    // the undervoltage episode is settled by step 49
    let report = run("ieee_4zone", Some(50))?;
    let g3 = final_value(&report.reputation, 3);
    let g1 = final_value(&report.reputation, 1);
    ensure!((g3 - 0.966).abs() <= 1e-12, "A3 reputation {g3}, expected 0.966");
    ensure!((g1 - 1.0033).abs() <= 1e-12, "A1 reputation {g1}, expected 1.0033");
    Ok(format!("A3 = {g3:.15}, A1 = {g1:.15}"))
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines.map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect()).collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or(f64::NAN)
}

fn undervoltage_sequence() -> Outcome {
    let report = run("ieee_4zone", Some(60))?;
    let rows = csv_rows(&report.contracts_csv());
    let cfps = &report.final_state.contracts.cfps;
    ensure!(rows.len() >= 2, "expected at least two contracts, got {}", rows.len());
    let (first, second) = (&rows[0], &rows[1]);
    let c1 = &cfps[&CfpId(1)];

    // 1. CFP issued by A2 to A1 and A3 with the computed targets
    ensure!(first["initiator"] == "2", "CFP 1 initiator {}", first["initiator"]);
    let t: BTreeMap<u32, f64> = c1.targets.iter().map(|t| (t.responder.0, t.dv_target)).collect();
    ensure!((t[&1] - 0.0033).abs() < 5e-5 && (t[&3] - 0.0034).abs() < 5e-5 && t.len() == 2, "CFP 1 targets {t:?}");
    // 2. the cheaper bid wins
    let bids: BTreeMap<u32, f64> = c1.bids.iter().map(|b| (b.responder.0, b.price)).collect();
    ensure!(first["winner"] == "3" && bids[&3] < bids[&1], "CFP 1 winner {} with bids {bids:?}", first["winner"]);
    // 3. enforcement fails under the actuation fault and 4. the penalty lands
    ensure!(first["status"] == "EnforcedFailure", "CFP 1 status {}", first["status"]);
    let fail_step = c1.history.last().unwrap().step;
    let g3_at_fail = report.reputation.iter().find(|r| r.0 == fail_step && r.1 == AgentId(3)).unwrap().2;
    ensure!((g3_at_fail - 0.966).abs() < 1e-12, "A3 reputation {g3_at_fail} at step {fail_step}");
    // 5. the CFP is reissued to the remaining responder
    let c2 = &cfps[&CfpId(2)];
    ensure!(c2.reissue_of == Some(CfpId(1)) && c2.created_step == fail_step, "CFP 2 is not the reissue of CFP 1");
    // 6. A1 fulfils it
    ensure!(
        second["winner"] == "1" && second["status"] == "EnforcedSuccess",
        "CFP 2 winner {} status {}",
        second["winner"],
        second["status"]
    );
    ensure!(num(second, "dv_achieved") >= num(second, "dv_target") - 0.0005, "CFP 2 under-delivered");
    // 7. payment moves from A2 to A1 at enforcement
    let price = num(second, "price");
    let paid_step = c2.history.last().unwrap().step;
    let wallet = |step: u64, a: u32| report.wallets.iter().find(|r| r.0 == step && r.1 == AgentId(a)).unwrap().2;
    ensure!(
        (wallet(paid_step, 1) - wallet(paid_step - 1, 1) - price).abs() < 1e-9
            && (wallet(paid_step - 1, 2) - wallet(paid_step, 2) - price).abs() < 1e-9,
        "payment of {price} not transferred at step {paid_step}"
    );
    let order = [c1.created_step, c1.history[2].step, fail_step, c2.created_step, c2.history[2].step, paid_step];
    ensure!(order.windows(2).all(|w| w[0] <= w[1]), "events out of order: {order:?}");
    Ok(format!("steps {order:?}, bids {bids:?}, paid {price:.2}"))
}

fn overvoltage_sequence() -> Outcome {
    let report = run("ieee_4zone", Some(72))?;
    let cfps = &report.final_state.contracts.cfps;
    let sub = cfps.values().find(|c| c.parent.is_some()).ok_or("no nested CFP was created")?;
    ensure!(sub.initiator == AgentId(3) && sub.targets[0].responder == AgentId(4), "nested CFP is not A3 -> A4");
    let dv = sub.targets[0].dv_target;
    ensure!((dv + 0.0106).abs() < 2e-4, "nested target {dv}, expected about -0.0106");
    ensure!(!sub.bids.is_empty(), "A4 never bid downstream");
    ensure!(
        matches!(sub.no_award, Some(NoAwardReason::ReserveNotMet { .. })),
        "downstream bid not rejected: {:?}",
        sub.no_award
    );
    let parent = &cfps[&sub.parent.unwrap()];
    let contract = parent.contract.as_ref().ok_or("upstream CFP was not awarded")?;
    let reserve = parent.reserve_price.ok_or("upstream CFP carries no local cost")?;
    ensure!(
        contract.winner == AgentId(3) && parent.state == CfpState::EnforcedSuccess,
        "A3 did not fulfil the upstream CFP"
    );

    // award only when the weighted bid beats the initiator's own cost
    for c in cfps.values() {
        let Some(reserve) = c.reserve_price else { continue };
        match (&c.contract, &c.no_award) {
            (Some(k), _) => ensure!(k.effective_price < reserve, "CFP {} awarded above reserve", c.cfp_id),
            (None, Some(NoAwardReason::ReserveNotMet { best_effective, .. })) => {
                ensure!(*best_effective >= reserve, "CFP {} refused a bid below reserve", c.cfp_id)
            }
            _ => {}
        }
    }

    // every offer matches the brute-force dispatch oracle within 1%
    let mut checked = 0;
    for audit in &report.bid_audit {
        if !audit.offer.feasible {
            continue;
        }
        let problem = audit.problem.as_ref().ok_or("feasible offer without a problem")?;
        let (_, _, oracle) =
            common::brute_force_dispatch(problem, 20_000).ok_or("oracle found no feasible dispatch")?;
        let gap = common::relative_gap(audit.offer.cost, oracle);
        ensure!(
            gap <= 0.01,
            "offer {} by {} on CFP {} vs oracle {oracle}",
            audit.offer.cost,
            audit.agent,
            audit.cfp_id
        );
        checked += 1;
    }
    ensure!(checked >= 4, "only {checked} offers checked");
    Ok(format!(
        "nested target {dv:.4}, A3 effective {:.2} < local {reserve:.2}, {checked} offers within 1%",
        contract.effective_price
    ))
}

fn sensitivity_correctness() -> Outcome {
    let feeder = scenario("ieee_4zone").network();
    let mut worst = common::sensitivity_fd_error(&feeder);
    let mut rng = common::seeded(4);
    for _ in 0..100 {
        let n = rng.gen_range(2..=40);
        worst = worst.max(common::sensitivity_fd_error(&common::random_tree(&mut rng, n)));
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("37-bus feeder + 100 random trees, max deviation {worst:.2e}"))
}

fn ledger_integrity() -> Outcome {
    let report = run("ieee_4zone", None)?;
    ensure!(report.chain.len() >= 100, "chain has only {} blocks", report.chain.len());
    let log = report.chain_log().into_bytes();
    let mut rng = common::seeded(5);
    for _ in 0..1_000 {
        let offset = rng.gen_range(0..log.len());
        let xor = rng.gen_range(1..=255u8);
        match common::mutate_and_verify(&log, offset, xor) {
            common::MutationVerdict::Detected { at, mutated } => {
                ensure!(at <= mutated, "byte {offset}: detected at {at}, after mutated block {mutated}")
            }
            common::MutationVerdict::Missed { mutated } => {
                return Err(format!("byte {offset} of block {mutated} flipped with {xor:#04x} went unnoticed"))
            }
        }
    }
    Ok(format!("1000/1000 mutations detected on {} blocks", report.chain.len()))
}

fn replica_determinism() -> Outcome {
    let cfg = scenario("ieee_4zone");
    ensure!(cfg.params.nodes == 4, "fixture runs {} nodes", cfg.params.nodes);
    let params = cfg.params.contract_params();
    let report = run_simulation(cfg).map_err(|e| e.to_string())?;
    ensure!(report.digests.len() == report.chain.len(), "missing digests");
    for (k, d) in report.digests.iter().enumerate() {
        ensure!(d.len() == 4 && d.iter().all(|x| *x == d[0]), "digests differ at block {k}");
    }
    let chain = parse_chain_log(&report.chain_log()).map_err(|e| e.to_string())?;
    let (g, b) = audit_chain(&chain, &params).map_err(|e| e.to_string())?;
    ensure!(g == report.reputation_csv(), "reputation.csv not reproduced by replay");
    ensure!(b == report.wallets_csv(), "wallets.csv not reproduced by replay");
    Ok(format!("{} blocks x 4 nodes agree; replay reproduces both traces", report.chain.len()))
}

fn voltage_safety() -> Outcome {
    let mut notes = Vec::new();
    for name in ["ieee_4zone", "microgrid_2agent"] {
        let cfg = scenario(name);
        let limit = 2 * cfg.params.contract_cycle();
        let report = run_simulation(cfg).map_err(|e| e.to_string())?;
        ensure!(report.warnings.is_empty(), "{name}: {:?}", report.warnings);
        let mut longest = 0;
        for ep in &report.episodes {
            let end = ep.end.ok_or(format!("{name}: bus {} never recovered from step {}", ep.bus, ep.start))?;
            ensure!(end - ep.start <= limit, "{name}: bus {} out of band for {} steps", ep.bus, end - ep.start);
            longest = longest.max(end - ep.start);
        }
        ensure!(!report.episodes.is_empty(), "{name}: no event produced a violation");
        notes.push(format!("{name}: {} episodes, longest {longest} steps", report.episodes.len()));

        if name == "microgrid_2agent" {
            let c = &report.final_state.contracts.cfps[&CfpId(1)];
            let k = c.contract.as_ref().ok_or("microgrid CFP not awarded")?;
            let pzc = k.pzc_bus;
            let v = |step: u64| report.voltages.iter().find(|r| r.0 == step && r.1 == pzc).unwrap().2;
            let acted = k.assigned_step + 1;
            let drop = v(acted) - v(acted + 1);
            let dp = report
                .bid_audit
                .iter()
                .find(|a| a.cfp_id == c.cfp_id && a.agent == k.winner)
                .map(|a| a.offer.dp)
                .unwrap();
            ensure!((0.016..=0.024).contains(&drop), "PZC drop {drop}");
            ensure!((0.048..=0.072).contains(&-dp), "battery action {dp}");
            ensure!(pzc == BusId(3), "coupling bus {pzc}");
            notes.push(format!("PZC drop {drop:.4} from dp {dp:.4}"));
        }
    }
    Ok(notes.join("; "))
}

fn lifecycle_model_check() -> Outcome {
    let check = common::lifecycle_model_check(9);
    ensure!(check.violations.is_empty(), "{} illegal moves, first: {}", check.violations.len(), check.violations[0]);
    ensure!(check.terminal_seen.len() == 2, "terminal states reached: {:?}", check.terminal_seen);
    Ok(format!("{} distinct states, {} calls, no illegal transition", check.states, check.calls))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 reputation arithmetic", 1, reputation_arithmetic),
        ("2 undervoltage sequence", 5, undervoltage_sequence),
        ("3 overvoltage sequence", 30, overvoltage_sequence),
        ("4 sensitivity correctness", 10, sensitivity_correctness),
        ("5 ledger integrity", 10, ledger_integrity),
        ("6 replica determinism", 30, replica_determinism),
        ("7 voltage safety", 30, voltage_safety),
        ("8 lifecycle model check", 5, lifecycle_model_check),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let started = Instant::now();
        let outcome = check();
        let took = started.elapsed();
        let outcome = match outcome {
            Ok(_) if took > Duration::from_secs(budget) => Err(format!("took {took:.2?}, budget {budget} s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("[PASS] {name} ({took:.2?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name} ({took:.2?}): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
