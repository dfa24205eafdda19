mod common;

use std::collections::BTreeSet;

use common::{parse, request_steps, scenario_doc, t};
use erasure_core::report::{generate_report, Attempt};
use erasure_core::sim::{run_scenario, Scenario, Simulation};
use erasure_core::workflow::{EvidenceKind, RequestState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn run(scenario: Scenario, seed: u64) -> Simulation {
    let mut sim = Simulation::new(scenario, seed).unwrap();
    sim.run().unwrap();
    sim
}

fn assert_invariants(sim: &Simulation) {
    let broken: Vec<_> = sim.check_invariants().into_iter().filter(|i| !i.holds).collect();
    assert!(broken.is_empty(), "{broken:#?}");
}

#[test]
fn smoke_completes() {
    let sim = run(Scenario::bundled("smoke").unwrap(), 1);
    assert_invariants(&sim);
    let outcomes = sim.outcomes();
    assert!(!outcomes.is_empty());
    assert!(outcomes.iter().all(|o| o.state == RequestState::Completed), "{outcomes:#?}");
}

#[test]
fn faulty_closes_partially_with_one_crm_error() {
    let sim = run(Scenario::bundled("faulty").unwrap(), 1);
    assert_invariants(&sim);
    let first = &sim.outcomes()[0];
    assert_eq!(first.state, RequestState::PartiallyCompleted);
    let errors: Vec<_> = first.subtasks.iter().filter(|s| s.evidence_kind == Some(EvidenceKind::Error)).collect();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0].system_id.as_str(), "eu-crm");
}

#[test]
fn plugin_update_switches_versions() {
    let sim = run(Scenario::bundled("plugin-update").unwrap(), 1);
    assert_invariants(&sim);
    let versions = |label: &str| -> BTreeSet<String> {
        let out = sim.outcomes();
        let o = out.iter().find(|o| o.label.as_deref() == Some(label)).unwrap();
        assert_eq!(o.state, RequestState::Completed, "{label}");
        o.subtasks
            .iter()
            .filter(|s| s.evidence_kind == Some(EvidenceKind::Success))
            .filter_map(|s| s.plugin_version.clone())
            .collect()
    };
    assert_eq!(versions("before"), BTreeSet::from(["1.0.0".to_string()]));
    assert_eq!(versions("after"), BTreeSet::from(["2.0.0".to_string()]));
}

#[test]
fn same_seed_gives_the_same_report() {
    for seed in [1, 7] {
        let a = run_scenario(common::large_scenario(seed, 20), seed).map_err(|(e, _)| e).unwrap();
        let b = run_scenario(common::large_scenario(seed, 20), seed).map_err(|(e, _)| e).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
    }
}

#[test]
fn crash_recovery_reproduces_outcomes() {
    let scenario = common::large_scenario(3, 15);
    let clean = run(scenario.clone(), 3);
    let total = clean.service().store().len();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let points: Vec<u64> = (0..3).map(|_| rng.gen_range(1..total)).collect();
        let mut sim = Simulation::new(scenario.clone(), 3).unwrap().with_crash_points(points.clone());
        sim.run().unwrap();
        assert!(sim.crashes() >= 1, "{points:?}");
        assert_eq!(sim.outcomes(), clean.outcomes(), "{points:?}");
        assert_invariants(&sim);
        let jobs: Vec<_> = sim.service().management().jobs().map(|j| j.id.clone()).collect();
        let distinct: BTreeSet<_> = jobs.iter().collect();
        assert_eq!(jobs.len(), distinct.len());
        let census = sim.service().management().census();
        assert_eq!(census, clean.service().management().census());
    }
}

#[test]
fn large_scenario_terminates_with_invariants() {
    let report = run_scenario(common::large_scenario(5, 60), 5).map_err(|(e, _)| e).unwrap();
    assert!(report.quiescent);
    assert_eq!(report.requests.len(), 60);
    assert!(report.requests.iter().all(|r| r.state.is_terminal()));
    assert!(report.script_errors.is_empty(), "{:?}", report.script_errors);
    assert!(report.evidence.error > 0, "some retention checks deny");
    assert_eq!(report.audit.entries, report.audit.transition_total);
    assert!(report.audit.chain_intact);
}

#[test]
fn report_names_the_blocking_policy() {
    let mut doc = scenario_doc(
        vec![
            json!({ "system_id": "ledger", "records": [{ "subject": "u-1", "age_days": 1000, "count": 4 }] }),
            json!({ "system_id": "events", "records": [{ "subject": "u-1", "age_days": 10, "count": 2 }] }),
        ],
        request_steps(0, "r", "u-1"),
    );
    let ledger = &mut doc["registry"]["systems"][0];
    ledger["system_type"] = json!("billing");
    ledger["retention_policy_ids"] = json!(["rp-tax"]);
    let sim = run(parse(&doc), 1);
    assert_invariants(&sim);
    let id = sim.request("r").unwrap().clone();
    let report = generate_report(sim.service().state(), &id).unwrap();
    assert_eq!(report.outcome, RequestState::PartiallyCompleted);
    let ledger = report.subtasks.iter().find(|s| s.system_id.as_str() == "ledger").unwrap();
    let line = ledger.retention.as_ref().expect("deny is reported");
    assert_eq!(line.policy_id.as_ref().unwrap().as_str(), "rp-tax");
    let oldest = t(0).secs() - 1000 * 86_400;
    assert_eq!(line.earliest_deletion.unwrap().secs(), oldest + 2555 * 86_400);
    assert_eq!(ledger.evidence_kind, Some(EvidenceKind::Error));
    let events = report.subtasks.iter().find(|s| s.system_id.as_str() == "events").unwrap();
    assert!(events.retention.is_none());
    assert_eq!(events.records_affected, Some(2));

    let text = report.to_text();
    assert!(text.contains("retained under policy rp-tax"), "{text}");
    assert!(text.contains("PartiallyCompleted"), "{text}");
}

#[test]
fn retry_supersedes_the_failed_attempt() {
    let mut script = request_steps(0, "r", "u-1");
    script.push(json!({ "at": 1800, "op": "clear_faults" }));
    script.push(json!({ "at": 1800, "op": "retry_failed", "label": "r", "operator": "olivia" }));
    let doc = scenario_doc(
        vec![
            json!({ "system_id": "a", "records": [{ "subject": "u-1", "age_days": 3, "count": 2 }] }),
            json!({
                "system_id": "b",
                "records": [{ "subject": "u-1", "age_days": 3, "count": 5 }],
                "fail_pattern": { "mode": "error", "fail_first": 1, "message": "disk full" }
            }),
        ],
        script,
    );
    let mut sim = Simulation::new(parse(&doc), 1).unwrap();
    sim.run_until(t(1700)).unwrap();
    let id = sim.request("r").unwrap().clone();
    assert_eq!(sim.service().workflow().request(&id).unwrap().state, RequestState::PartiallyCompleted);
    sim.run().unwrap();
    assert_invariants(&sim);

    let report = generate_report(sim.service().state(), &id).unwrap();
    assert_eq!(report.outcome, RequestState::Completed);
    let b: Vec<_> = report.subtasks.iter().filter(|s| s.system_id.as_str() == "b").collect();
    assert_eq!(b.len(), 2);
    let old = b.iter().find(|s| s.attempt == Attempt::Superseded).unwrap();
    let new = b.iter().find(|s| s.attempt == Attempt::Active).unwrap();
    assert_eq!(old.evidence_kind, Some(EvidenceKind::Error));
    assert_eq!(old.payload.as_deref().map(|p| p.contains("disk full")), Some(true));
    assert_eq!(new.retry_of.as_ref(), Some(&old.subtask_id));
    assert_eq!(new.evidence_kind, Some(EvidenceKind::Success));
    assert_eq!(new.records_affected, Some(5));
    assert!(report.to_text().contains("Superseded"));
}

#[test]
fn report_requires_a_terminal_request() {
    let doc = scenario_doc(
        vec![json!({ "system_id": "a", "records": [{ "subject": "u-1", "age_days": 3, "count": 2 }] })],
        request_steps(0, "r", "u-1"),
    );
    let mut sim = Simulation::new(parse(&doc), 1).unwrap();
    while sim.request("r").is_none() {
        sim.step().unwrap();
    }
    let id = sim.request("r").unwrap().clone();
    assert!(!sim.service().workflow().request(&id).unwrap().state.is_terminal());
    assert!(generate_report(sim.service().state(), &id).is_err());
}
