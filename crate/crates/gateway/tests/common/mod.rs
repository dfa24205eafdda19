#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use erasure_core::executor::ExecutorConfig;
use erasure_core::service::{Service, Settings};
use erasure_core::sim::Scenario;
use erasure_core::time::{Timestamp, VirtualClock};
use erasure_gateway::api::router;
use erasure_gateway::auth::{Directory, Principal, Role};
use erasure_gateway::state::{AppState, GatewayClock};
use http_body_util::BodyExt;
use serde_json::Value;
use std::sync::Arc;
use tower::ServiceExt;

pub const START: i64 = 1_700_000_000;
pub const SYSTEMS: [&str; 3] = ["eu-analytics", "eu-crm", "us-analytics"];

pub fn principals() -> Vec<Principal> {
    let mut v = vec![
        Principal { identity: "olivia".into(), token: "t-op".into(), role: Role::Operator },
        Principal { identity: "rita".into(), token: "t-rev".into(), role: Role::Reviewer },
        Principal { identity: "rob".into(), token: "t-rev2".into(), role: Role::Reviewer },
        Principal { identity: "alex".into(), token: "t-aud".into(), role: Role::Auditor },
    ];
    for s in SYSTEMS {
        v.push(Principal { identity: format!("runner-{s}"), token: format!("t-run-{s}"), role: Role::Runner(s.into()) });
    }
    v
}

/// Virtual-clock app over an in-memory service with the smoke registry and
/// plugins already registered.
pub fn seeded_app(settings: Settings) -> (AppState, Router) {
    let scenario = Scenario::bundled("smoke").unwrap();
    let mut svc = Service::in_memory(settings);
    let t = Timestamp(START);
    svc.seed_registry("setup", &scenario.registry, t).unwrap();
    for p in &scenario.plugins {
        svc.publish_plugin("setup", p.descriptor(t), t).unwrap();
    }
    let clock = GatewayClock::Virtual(Arc::new(VirtualClock::new(t)));
    let state = AppState::new(svc, clock, Directory::new(principals()), ExecutorConfig::default());
    let app = router(state.clone());
    (state, app)
}

pub async fn call(app: &Router, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, path, token, body).await;
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()))
    };
    (status, v)
}

pub async fn call_raw(
    app: &Router,
    method: Method,
    path: &str,
    token: Option<&str>,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}
