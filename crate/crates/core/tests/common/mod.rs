#![allow(dead_code)]

use erasure_core::executor::{reconcile_cycle, scan_cycle, ExecutorConfig, NoMetadata};
use erasure_core::ids::{JobId, RequestId, RunnerId, SystemId};
use erasure_core::management::{RunnerCredential, Vault};
use erasure_core::service::{Service, Settings};
use erasure_core::sim::Scenario;
use erasure_core::time::Timestamp;
use erasure_core::workflow::{Evidence, Origin, RequestScope, ReviewDecision, SubjectRef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub mod oracles;

pub const START: i64 = 1_700_000_000;
pub const REGIONS: [&str; 3] = ["eu-de", "us-east", "ap-south"];

pub fn t(offset: i64) -> Timestamp {
    Timestamp(START + offset)
}

fn directive(table: &str, req: &str) -> Value {
    json!({
        "management_endpoint": "mgmt://local",
        "plugin_name": "pg-wipe",
        "plugin_version_req": req,
        "plugin_config": { "table": table }
    })
}

fn system(id: &str, ty: &str, region: &str, policies: &[&str]) -> Value {
    json!({
        "id": id,
        "system_type": ty,
        "name": id,
        "geo_region": region,
        "datacenter_id": format!("{region}-1"),
        "system_owner": "platform",
        "business_owner": "product",
        "directive": directive(ty, "^1.0"),
        "retention_policy_ids": policies,
    })
}

/// Three purposes, three system types and two retention policies: seven
/// years for billing data and sixty days for marketing data on CRMs.
pub fn base_registry(systems: Vec<Value>) -> Value {
    json!({
        "purposes": [
            { "id": "marketing", "name": "marketing" },
            { "id": "research", "name": "research" },
            { "id": "billing", "name": "billing" }
        ],
        "data_categories": [
            { "id": "ip", "name": "IP address" },
            { "id": "profile", "name": "profile" },
            { "id": "invoice", "name": "invoice" }
        ],
        "retention_policies": [
            { "id": "rp-mkt", "label": "campaign records", "min_retention": 60, "purpose_scope": "marketing" },
            { "id": "rp-tax", "label": "tax records", "min_retention": 2555, "legal_basis": "tax law" }
        ],
        "system_types": [
            { "id": "analytics-db", "name": "analytics", "data_categories": ["ip"], "purposes": ["research", "marketing"] },
            { "id": "crm", "name": "crm", "data_categories": ["profile"], "purposes": ["marketing"] },
            { "id": "billing", "name": "billing", "data_categories": ["invoice"], "purposes": ["billing"] }
        ],
        "systems": systems
    })
}

/// The ten systems of the large scenario, spread over three regions.
pub fn ten_systems() -> Vec<(String, &'static str, &'static str)> {
    let mut out = Vec::new();
    for region in REGIONS {
        out.push((format!("analytics-{region}"), "analytics-db", region));
        out.push((format!("crm-{region}"), "crm", region));
        out.push((format!("billing-{region}"), "billing", region));
    }
    out.push(("analytics-eu-de-2".to_string(), "analytics-db", "eu-de"));
    out
}

fn policies_of(ty: &str) -> Vec<&'static str> {
    match ty {
        "crm" => vec!["rp-mkt"],
        "billing" => vec!["rp-tax"],
        _ => vec![],
    }
}

pub fn identity(i: usize) -> Value {
    json!({ "user_id": format!("u-{i}"), "email": format!("u{i}@example.com"), "business_id": format!("b-{}", i % 8) })
}

fn subject_for(rng: &mut ChaCha8Rng, users: usize) -> Value {
    let i = rng.gen_range(0..users);
    match rng.gen_range(0..10) {
        0..=5 => json!({ "kind": "UserId", "value": format!("u-{i}") }),
        6..=8 => json!({ "kind": "Email", "value": format!("u{i}@example.com") }),
        _ => json!({ "kind": "BusinessId", "value": format!("b-{}", i % 8) }),
    }
}

/// Ten systems in three regions, `requests` approved requests with mixed
/// subject kinds and purpose filters, load spikes, ETL windows and record
/// ages that make some retention checks deny.
pub fn large_scenario(seed: u64, requests: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = 40;
    let systems = ten_systems();
    let registry = base_registry(systems.iter().map(|(id, ty, r)| system(id, ty, r, &policies_of(ty))).collect());
    let fleet: Vec<Value> = systems
        .iter()
        .map(|(id, ty, _)| {
            let ages = match *ty {
                "billing" => (1, 4000),
                "crm" => (1, 120),
                _ => (1, 365),
            };
            let window_start = rng.gen_range(600..3600);
            json!({
                "system_id": id,
                "record_count": 150,
                "subjects": (0..users).map(identity).collect::<Vec<_>>(),
                "record_age_days": ages,
                "step_size": rng.gen_range(3..=10),
                "load_curve": [[0, 0.2], [rng.gen_range(300..1800), 0.95], [rng.gen_range(1900..2400), 0.3]],
                "load_threshold": 0.8,
                "etl_windows": [[window_start, window_start + rng.gen_range(120..600)]],
                "etl_batch_size": 3
            })
        })
        .collect();
    let purposes = ["marketing", "research", "billing"];
    let mut script = Vec::new();
    for i in 0..requests {
        let at = (i as u64) * 30;
        let label = format!("r{i}");
        let mut submit = json!({ "at": at, "op": "submit", "label": label, "subject": subject_for(&mut rng, users) });
        if rng.gen_bool(0.3) {
            submit["purpose_filter"] = json!(purposes.choose(&mut rng).unwrap());
        }
        script.push(submit);
        script.push(json!({ "at": at, "op": "review", "label": label, "reviewer": "rita", "decision": "approve" }));
    }
    let scenario = json!({
        "name": format!("large-{seed}"),
        "start_time": START,
        "executor": { "scan_interval_secs": 30, "reconcile_interval_secs": 30, "max_parallel_dispatch": 32 },
        "registry": registry,
        "plugins": [{ "name": "pg-wipe", "version": "1.0.0", "behavior": "stepwise_delete" }],
        "fleet": { "systems": fleet },
        "script": script
    });
    Scenario::from_json(&scenario.to_string()).expect("generated scenario parses")
}

/// Systems with frequent ETL windows and small delete steps, so deletion
/// and loading contend for most of the run.
pub fn etl_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let users = 20;
    let ids: Vec<String> = (0..4).map(|i| format!("analytics-{i}")).collect();
    let registry = base_registry(ids.iter().map(|id| system(id, "analytics-db", REGIONS[0], &[])).collect());
    let fleet: Vec<Value> = ids
        .iter()
        .map(|id| {
            let mut windows = Vec::new();
            let mut at: i64 = rng.gen_range(0..120);
            while at < 6 * 3600 {
                let len = rng.gen_range(60..900);
                windows.push(json!([at, at + len]));
                at += len + rng.gen_range(30..600);
            }
            json!({
                "system_id": id,
                "record_count": 400,
                "subjects": (0..users).map(identity).collect::<Vec<_>>(),
                "etl_subjects": (users..users + 5).map(identity).collect::<Vec<_>>(),
                "step_size": rng.gen_range(1..=3),
                "etl_windows": windows,
                "etl_batch_size": 2
            })
        })
        .collect();
    let mut script = Vec::new();
    for i in 0..30 {
        let at = rng.gen_range(0..4 * 3600) / 10 * 10;
        let u = rng.gen_range(0..users + 5);
        script.push(json!({ "at": at, "op": "submit", "label": format!("r{i}"), "subject": { "kind": "UserId", "value": format!("u-{u}") } }));
        script.push(json!({ "at": at, "op": "review", "label": format!("r{i}"), "reviewer": "rita", "decision": "approve" }));
    }
    script.sort_by_key(|s| s["at"].as_u64().unwrap());
    let scenario = json!({
        "name": format!("etl-{seed}"),
        "start_time": START,
        "registry": registry,
        "plugins": [{ "name": "pg-wipe", "version": "1.0.0", "behavior": "stepwise_delete" }],
        "fleet": { "systems": fleet },
        "script": script
    });
    Scenario::from_json(&scenario.to_string()).expect("generated scenario parses")
}

/// An in-memory service with `n` analytics systems named `sys-0..`, plugin
/// `pg-wipe 1.0.0` published and a runner token `token-{system}` per system.
pub fn service_with_systems(n: usize, settings: Settings) -> Service {
    let ids: Vec<String> = (0..n).map(|i| format!("sys-{i}")).collect();
    let registry = base_registry(ids.iter().map(|id| system(id, "analytics-db", REGIONS[i_region(id)], &[])).collect());
    let seed = erasure_core::registry::RegistrySeed::from_json(&registry.to_string()).unwrap();
    let mut svc = Service::in_memory(settings);
    svc.seed_registry("setup", &seed, t(0)).unwrap();
    let plugin = erasure_core::sim::PluginSpec {
        name: "pg-wipe".into(),
        version: "1.0.0".parse().unwrap(),
        behavior: erasure_core::plugins::BuiltinBehavior::StepwiseDelete,
        params: Default::default(),
    };
    svc.publish_plugin("setup", plugin.descriptor(t(0)), t(0)).unwrap();
    let mut vault = Vault::new();
    for id in &ids {
        vault.insert(
            SystemId::new(id.clone()),
            RunnerCredential { runner_token: format!("token-{id}"), credential_ref: format!("cred-{id}") },
        );
    }
    svc.set_vault(vault);
    svc
}

fn i_region(id: &str) -> usize {
    id.bytes().last().map_or(0, |b| b as usize % REGIONS.len())
}

pub fn submit(svc: &mut Service, user: &str, at: Timestamp) -> RequestId {
    let scope = RequestScope { subject: SubjectRef::user(user), purpose_filter: None };
    svc.submit_request(scope, Origin::Api("intake".into()), at).unwrap().id
}

pub fn approve(svc: &mut Service, id: &RequestId, at: Timestamp) {
    svc.review(id, "rita", ReviewDecision::Approve, "ok", at).unwrap();
}

/// Submits, approves and dispatches a request; returns it with its job ids
/// in system order.
pub fn dispatched(svc: &mut Service, user: &str, at: Timestamp) -> (RequestId, Vec<JobId>) {
    let id = submit(svc, user, at);
    approve(svc, &id, at);
    scan_cycle(svc, &NoMetadata, &ExecutorConfig::default(), at).unwrap();
    let req = svc.workflow().request(&id).unwrap().clone();
    let jobs = svc
        .workflow()
        .active_subtasks_of(&req)
        .into_iter()
        .filter_map(|s| s.job_id.clone())
        .collect();
    (id, jobs)
}

pub fn runner(system: &SystemId) -> RunnerId {
    RunnerId::new(format!("runner-{system}"))
}

/// Claims the next job on `system` and reports `evidence` for it, then reconciles.
pub fn finish_next(svc: &mut Service, system: &SystemId, evidence: Evidence, at: Timestamp) -> JobId {
    let r = runner(system);
    let job = svc.claim_next(&r, system, &format!("token-{system}"), at).unwrap().expect("a queued job");
    svc.report_completion(&job.id, &r, evidence, at).unwrap();
    reconcile_cycle(svc, at).unwrap();
    job.id
}

pub fn success(at: Timestamp) -> Evidence {
    Evidence::success(3, "deleted 3 rows", ("pg-wipe", "1.0.0"), at)
}

pub fn no_data(at: Timestamp) -> Evidence {
    Evidence::no_data("no rows", ("pg-wipe", "1.0.0"), at)
}

pub fn error(at: Timestamp) -> Evidence {
    Evidence::error("connection refused", ("pg-wipe", "1.0.0"), at)
}

/// A scenario document over analytics systems, one per fleet entry. Tweak
/// the returned JSON, then parse it with [`parse`].
pub fn scenario_doc(fleet: Vec<Value>, script: Vec<Value>) -> Value {
    let systems = fleet
        .iter()
        .map(|f| {
            let id = f["system_id"].as_str().expect("fleet entry has system_id");
            system(id, "analytics-db", REGIONS[0], &[])
        })
        .collect();
    json!({
        "name": "fixture",
        "start_time": START,
        "registry": base_registry(systems),
        "plugins": [{ "name": "pg-wipe", "version": "1.0.0", "behavior": "stepwise_delete" }],
        "fleet": { "systems": fleet },
        "script": script
    })
}

pub fn parse(doc: &Value) -> Scenario {
    Scenario::from_json(&doc.to_string()).expect("fixture parses")
}

/// Submit and approve `label` for user `user` at offset `at`.
pub fn request_steps(at: u64, label: &str, user: &str) -> Vec<Value> {
    vec![
        json!({ "at": at, "op": "submit", "label": label, "subject": { "kind": "UserId", "value": user } }),
        json!({ "at": at, "op": "review", "label": label, "reviewer": "rita", "decision": "approve" }),
    ]
}
