//! Brute-force oracles shared by the unit tests and the acceptance run.

use erasure_core::policy::Verdict;
use erasure_core::registry::RegistrySeed;
use erasure_core::service::Service;
use erasure_core::workflow::{RequestState, SubTaskState};
use serde_json::json;

use super::{base_registry, t};

#[derive(Clone, Debug)]
pub struct Policy {
    pub id: String,
    pub days: u32,
    pub scope: Option<&'static str>,
    pub linked: bool,
}

pub fn retention_service(policies: &[Policy]) -> Service {
    let linked: Vec<&str> = policies.iter().filter(|p| p.linked).map(|p| p.id.as_str()).collect();
    let mut reg = base_registry(vec![json!({
        "id": "target",
        "system_type": "analytics-db",
        "name": "target",
        "geo_region": "eu-de",
        "datacenter_id": "fra-1",
        "system_owner": "o",
        "business_owner": "o",
        "directive": { "management_endpoint": "m", "plugin_name": "pg-wipe", "plugin_version_req": "^1.0" },
        "retention_policy_ids": linked,
    })]);
    reg["retention_policies"] = json!(policies
        .iter()
        .map(|p| json!({ "id": p.id, "label": p.id, "min_retention": p.days, "purpose_scope": p.scope }))
        .collect::<Vec<_>>());
    let seed = RegistrySeed::from_json(&reg.to_string()).unwrap();
    let mut svc = Service::in_memory(Default::default());
    svc.seed_registry("setup", &seed, t(0)).unwrap();
    svc
}

/// Brute force: every applicable policy still holding the data, then the
/// one with the latest release; equal releases go to the smallest id.
pub fn retention_oracle(policies: &[Policy], purpose: Option<&str>, data: i64, now: i64) -> (Verdict, Option<String>, Option<i64>) {
    let mut holding: Vec<(i64, &str)> = Vec::new();
    for p in policies {
        let applies = p.linked && (p.scope.is_none() || purpose.is_none() || p.scope == purpose);
        let release = data + i64::from(p.days) * 86_400;
        if applies && now < release {
            holding.push((release, &p.id));
        }
    }
    holding.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    match holding.first() {
        None => (Verdict::Allow, None, None),
        Some((release, id)) => (Verdict::Deny, Some(id.to_string()), Some(*release)),
    }
}

pub const OUTCOMES: [SubTaskState; 3] = [SubTaskState::Done, SubTaskState::NoData, SubTaskState::Failed];

/// Every sequence of `n` outcomes, in completion order.
pub fn sequences(n: usize) -> Vec<Vec<SubTaskState>> {
    (0..3usize.pow(n as u32))
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let s = OUTCOMES[k % 3];
                    k /= 3;
                    s
                })
                .collect()
        })
        .collect()
}

pub fn expected_closure(outcomes: &[SubTaskState]) -> RequestState {
    let failed = outcomes.iter().filter(|s| **s == SubTaskState::Failed).count();
    if failed == 0 {
        RequestState::Completed
    } else if failed == outcomes.len() {
        RequestState::Failed
    } else {
        RequestState::PartiallyCompleted
    }
}

