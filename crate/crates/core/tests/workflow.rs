mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use common::{approve, dispatched, error, finish_next, service_with_systems, submit, success, t};
use erasure_core::executor::{overdue_scan, reconcile_cycle, scan_cycle, ExecutorConfig, NoMetadata};
use erasure_core::ids::{RequestId, SubTaskId, SystemId};
use erasure_core::notify::{Inbox, NotificationKind, Notifier, Subscription};
use erasure_core::policy::{ExemptionCategory, ExemptionClaim};
use erasure_core::service::{Service, Settings};
use erasure_core::workflow::{Origin, RequestScope, RequestState, ReviewDecision, SubTaskState, SubjectRef};
use erasure_core::Error;
use proptest::prelude::*;

fn quorum(q: u32) -> Settings {
    Settings { approval_quorum: q, ..Settings::default() }
}

fn reviewer(i: usize) -> String {
    format!("reviewer-{i}")
}

#[test]
fn quorum_enumeration() {
    for q in 1..=3u32 {
        for len in 1..=(q as usize + 1) {
            for mask in 0..(1u32 << len) {
                let decisions: Vec<bool> = (0..len).map(|i| mask & (1 << i) != 0).collect();
                let mut svc = service_with_systems(1, quorum(q));
                let id = submit(&mut svc, "u-1", t(0));
                let mut approvals = 0;
                let mut expected = RequestState::Submitted;
                for (i, approve) in decisions.iter().enumerate() {
                    let decision = if *approve { ReviewDecision::Approve } else { ReviewDecision::Reject };
                    let r = svc.review(&id, &reviewer(i), decision, "", t(i as i64));
                    if expected.is_pre_execution() {
                        r.unwrap();
                        expected = if !approve {
                            RequestState::Rejected
                        } else {
                            approvals += 1;
                            if approvals >= q { RequestState::Approved } else { RequestState::UnderReview }
                        };
                    } else {
                        assert!(matches!(r, Err(Error::InvalidState(_))), "q={q} {decisions:?}: {r:?}");
                    }
                    assert_eq!(svc.workflow().request(&id).unwrap().state, expected, "q={q} {decisions:?}");
                }
            }
        }
    }
}

#[test]
fn review_opened_is_logged_once_before_the_first_review() {
    let mut svc = service_with_systems(1, quorum(2));
    let id = submit(&mut svc, "u-1", t(0));
    svc.review(&id, "a", ReviewDecision::Approve, "", t(1)).unwrap();
    svc.review(&id, "b", ReviewDecision::Approve, "", t(2)).unwrap();
    let actions: Vec<&str> = svc.log().iter().map(|e| e.audit.action.as_str()).filter(|a| a.starts_with("request.")).collect();
    assert_eq!(actions.iter().filter(|a| a.contains("review_opened")).count(), 1, "{actions:?}");
    let opened = actions.iter().position(|a| a.contains("review_opened")).unwrap();
    let reviewed = actions.iter().position(|a| a.contains("reviewed")).unwrap();
    assert!(opened < reviewed);
}

#[test]
fn duplicate_reviewer_is_refused() {
    let mut svc = service_with_systems(1, quorum(2));
    let id = submit(&mut svc, "u-1", t(0));
    svc.review(&id, "rita", ReviewDecision::Approve, "", t(1)).unwrap();
    let len = svc.store().len();
    assert!(matches!(svc.review(&id, "rita", ReviewDecision::Approve, "", t(2)), Err(Error::DuplicateReviewer(_))));
    assert_eq!(svc.store().len(), len);
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::UnderReview);
}

#[test]
fn manual_requests_need_a_second_person() {
    let mut svc = service_with_systems(1, Settings::default());
    let scope = RequestScope { subject: SubjectRef::user("u-1"), purpose_filter: None };
    let id = svc.submit_request(scope.clone(), Origin::Manual("olivia".into()), t(0)).unwrap().id;
    assert!(matches!(svc.review(&id, "olivia", ReviewDecision::Approve, "", t(1)), Err(Error::SelfApproval(_))));
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::Submitted);
    svc.review(&id, "rita", ReviewDecision::Approve, "", t(1)).unwrap();

    let api = svc.submit_request(scope, Origin::Api("olivia".into()), t(2)).unwrap().id;
    svc.review(&api, "olivia", ReviewDecision::Approve, "", t(3)).unwrap();
}

#[test]
fn submissions_are_validated() {
    let mut svc = service_with_systems(1, Settings::default());
    let setup = svc.store().len();
    let bad = |svc: &mut Service, subject: SubjectRef, purpose: Option<&str>| {
        let scope = RequestScope { subject, purpose_filter: purpose.map(Into::into) };
        svc.submit_request(scope, Origin::Api("intake".into()), t(0)).unwrap_err()
    };
    assert!(matches!(bad(&mut svc, SubjectRef::email("not-an-address"), None), Error::Malformed(_)));
    assert!(matches!(bad(&mut svc, SubjectRef::user("  "), None), Error::Malformed(_)));
    assert!(matches!(bad(&mut svc, SubjectRef::user("u-1"), Some("astrology")), Error::UnknownPurpose(_)));
    assert_eq!(svc.store().len(), setup, "rejected submissions are not logged");
    let ok = svc.submit_request(
        RequestScope { subject: SubjectRef::email("a@b.example"), purpose_filter: Some("marketing".into()) },
        Origin::Api("intake".into()),
        t(0),
    );
    assert_eq!(ok.unwrap().id, RequestId::from("req-000001"));
}

#[test]
fn expansion_happens_once() {
    let mut svc = service_with_systems(2, Settings::default());
    let id = submit(&mut svc, "u-1", t(0));
    approve(&mut svc, &id, t(0));
    let systems: Vec<SystemId> = vec!["sys-0".into(), "sys-1".into()];
    let opened = svc.open_subtasks("executor", &id, &systems, t(1)).unwrap();
    assert_eq!(opened.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["st-000001", "st-000002"]);
    assert!(matches!(svc.open_subtasks("executor", &id, &systems, t(2)), Err(Error::AlreadyExpanded(_))));
}

#[test]
fn no_matching_systems_completes_at_once() {
    let mut svc = service_with_systems(0, Settings::default());
    let id = submit(&mut svc, "u-1", t(0));
    approve(&mut svc, &id, t(0));
    scan_cycle(&mut svc, &NoMetadata, &ExecutorConfig::default(), t(1)).unwrap();
    let req = svc.workflow().request(&id).unwrap();
    assert_eq!(req.state, RequestState::Completed);
    assert!(req.subtask_ids.is_empty());
}

#[test]
fn purpose_filter_narrows_the_fleet() {
    let mut svc = service_with_systems(3, Settings::default());
    let scope = RequestScope { subject: SubjectRef::user("u-1"), purpose_filter: Some("billing".into()) };
    let id = svc.submit_request(scope, Origin::Api("intake".into()), t(0)).unwrap().id;
    approve(&mut svc, &id, t(0));
    scan_cycle(&mut svc, &NoMetadata, &ExecutorConfig::default(), t(1)).unwrap();
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::Completed, "analytics systems hold no billing data");
}

fn exemption(at: i64) -> ExemptionClaim {
    ExemptionClaim {
        category: ExemptionCategory::LegalClaims,
        justification: "pending litigation".into(),
        claimed_by: "rita".into(),
        timestamp: t(at),
    }
}

#[test]
fn exemptions_are_recorded_only_before_execution() {
    let mut svc = service_with_systems(1, Settings::default());
    let id = submit(&mut svc, "u-1", t(0));
    svc.record_exemption("rita", &id, exemption(1), t(1)).unwrap();
    assert_eq!(svc.workflow().request(&id).unwrap().exemptions.len(), 1);
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::Submitted, "recording does not decide");
    let mut empty = exemption(1);
    empty.justification = " ".into();
    assert!(matches!(svc.record_exemption("rita", &id, empty, t(1)), Err(Error::Malformed(_))));
    approve(&mut svc, &id, t(2));
    assert!(matches!(svc.record_exemption("rita", &id, exemption(3), t(3)), Err(Error::InvalidState(_))));
}

fn failed_subtask(svc: &Service, id: &RequestId) -> SubTaskId {
    let req = svc.workflow().request(id).unwrap();
    svc.workflow().active_subtasks_of(req).into_iter().find(|s| s.state == SubTaskState::Failed).unwrap().id.clone()
}

#[test]
fn retry_reopens_a_partial_request_and_supersedes_the_attempt() {
    let mut svc = service_with_systems(2, Settings::default());
    let (id, _) = dispatched(&mut svc, "u-1", t(0));
    finish_next(&mut svc, &"sys-0".into(), success(t(5)), t(5));
    let ok = svc.workflow().request(&id).unwrap().subtask_ids[0].clone();
    assert!(matches!(svc.retry_subtask("olivia", &ok, t(5)), Err(Error::InvalidState(_))), "only Failed retries");
    finish_next(&mut svc, &"sys-1".into(), error(t(6)), t(6));
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::PartiallyCompleted);

    let failed = failed_subtask(&svc, &id);
    let retry = svc.retry_subtask("olivia", &failed, t(7)).unwrap();
    assert_eq!(retry.retry_of.as_ref(), Some(&failed));
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::Executing);
    assert!(matches!(svc.retry_subtask("olivia", &failed, t(7)), Err(Error::InvalidState(_))), "already superseded");

    scan_cycle(&mut svc, &NoMetadata, &ExecutorConfig::default(), t(8)).unwrap();
    finish_next(&mut svc, &"sys-1".into(), success(t(9)), t(9));
    let req = svc.workflow().request(&id).unwrap();
    assert_eq!(req.state, RequestState::Completed);
    assert_eq!(svc.workflow().subtasks_of(req).len(), 3);
    assert_eq!(svc.workflow().active_subtasks_of(req).len(), 2);
}

#[test]
fn retry_is_refused_on_a_failed_request() {
    let mut svc = service_with_systems(1, Settings::default());
    let (id, _) = dispatched(&mut svc, "u-1", t(0));
    finish_next(&mut svc, &"sys-0".into(), error(t(5)), t(5));
    assert_eq!(svc.workflow().request(&id).unwrap().state, RequestState::Failed);
    let failed = failed_subtask(&svc, &id);
    assert!(matches!(svc.retry_subtask("olivia", &failed, t(6)), Err(Error::InvalidState(_))));
}

fn attach_inbox(svc: &mut Service, subs: &[(&str, &[NotificationKind])]) -> Inbox {
    let inbox = Inbox::new();
    let mut notifier = Notifier::new();
    notifier.add_sink("inbox", Arc::new(inbox.clone()));
    for (who, kinds) in subs {
        notifier
            .subscribe(Subscription { subscriber: who.to_string(), events: kinds.iter().copied().collect(), channel: "inbox".into() })
            .unwrap();
    }
    svc.set_notifier(notifier);
    inbox
}

#[test]
fn overdue_is_flagged_and_notified_once() {
    let mut svc = service_with_systems(1, Settings { sla_days: 1, ..Settings::default() });
    let inbox = attach_inbox(&mut svc, &[("dpo", &[NotificationKind::Overdue])]);
    let id = submit(&mut svc, "u-1", t(0));
    assert!(overdue_scan(&mut svc, t(86_400)).unwrap().is_empty(), "the deadline instant is not yet late");
    assert_eq!(overdue_scan(&mut svc, t(86_401)).unwrap(), vec![id.clone()]);
    assert!(overdue_scan(&mut svc, t(90_000)).unwrap().is_empty());
    assert!(svc.workflow().request(&id).unwrap().overdue);
    assert_eq!(inbox.len(), 1);
    assert_eq!(inbox.items()[0].kind, NotificationKind::Overdue);
}

#[test]
fn each_subscription_hears_each_event_once() {
    let mut svc = service_with_systems(2, Settings::default());
    let all = [
        NotificationKind::Created,
        NotificationKind::Approved,
        NotificationKind::Rejected,
        NotificationKind::SubTaskClosed,
        NotificationKind::RequestClosed,
        NotificationKind::Overdue,
    ];
    let inbox = attach_inbox(&mut svc, &[("ops", &all), ("dpo", &[NotificationKind::RequestClosed, NotificationKind::Created])]);
    let (id, _) = dispatched(&mut svc, "u-1", t(0));
    finish_next(&mut svc, &"sys-0".into(), success(t(5)), t(5));
    finish_next(&mut svc, &"sys-1".into(), success(t(6)), t(6));
    reconcile_cycle(&mut svc, t(7)).unwrap();
    let rejected = submit(&mut svc, "u-2", t(8));
    svc.review(&rejected, "rita", ReviewDecision::Reject, "no", t(8)).unwrap();

    let mut seen: BTreeMap<(String, NotificationKind, RequestId, Option<SubTaskId>), u32> = BTreeMap::new();
    for n in inbox.items() {
        *seen.entry((n.subscriber, n.kind, n.request_id, n.subtask_id)).or_default() += 1;
    }
    assert!(seen.values().all(|c| *c == 1), "{seen:?}");
    let count = |who: &str, kind| seen.keys().filter(|k| k.0 == who && k.1 == kind).count();
    assert_eq!(count("ops", NotificationKind::Created), 2);
    assert_eq!(count("ops", NotificationKind::Approved), 1);
    assert_eq!(count("ops", NotificationKind::Rejected), 1);
    assert_eq!(count("ops", NotificationKind::SubTaskClosed), 2);
    assert_eq!(count("ops", NotificationKind::RequestClosed), 1);
    assert_eq!(count("dpo", NotificationKind::Created), 2);
    assert_eq!(count("dpo", NotificationKind::RequestClosed), 1);
    assert_eq!(count("dpo", NotificationKind::Approved), 0);
    assert!(seen.keys().any(|k| k.2 == id));

    let before = inbox.len();
    let replayed = Service::from_log_bytes(&svc.store().log_bytes(), Settings::default()).unwrap();
    assert_eq!(replayed.state(), svc.state());
    assert_eq!(inbox.len(), before, "replay does not notify");
}

#[derive(Clone, Debug)]
enum Op {
    Submit { user: u8, manual: bool },
    Review { req: usize, reviewer: usize, approve: bool },
    Scan,
    Finish { system: usize, outcome: u8 },
    Retry { subtask: usize },
    Close { req: usize },
    Exempt { req: usize },
    Expire { secs: i64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..4, any::<bool>()).prop_map(|(user, manual)| Op::Submit { user, manual }),
        (0usize..8, 0usize..3, prop::bool::weighted(0.85))
            .prop_map(|(req, reviewer, approve)| Op::Review { req, reviewer, approve }),
        Just(Op::Scan),
        (0usize..3, 0u8..3).prop_map(|(system, outcome)| Op::Finish { system, outcome }),
        (0usize..16).prop_map(|subtask| Op::Retry { subtask }),
        (0usize..8).prop_map(|req| Op::Close { req }),
        (0usize..8).prop_map(|req| Op::Exempt { req }),
        (0i64..400).prop_map(|secs| Op::Expire { secs }),
    ]
}

const REVIEWERS: [&str; 3] = ["olivia", "rita", "rob"];

fn allowed(from: RequestState, to: RequestState) -> bool {
    use RequestState::*;
    from == to
        || matches!(
            (from, to),
            (Submitted, UnderReview | Approved | Rejected)
                | (UnderReview, Approved | Rejected)
                | (Approved, Executing | Completed | PartiallyCompleted | Failed)
                | (Executing, Completed | PartiallyCompleted | Failed)
                | (PartiallyCompleted, Executing)
        )
}

fn nth<T: Clone>(items: &[T], i: usize) -> Option<T> {
    (!items.is_empty()).then(|| items[i % items.len()].clone())
}

fn apply(svc: &mut Service, op: &Op, now: erasure_core::time::Timestamp) -> erasure_core::Result<()> {
    let reqs: Vec<RequestId> = svc.workflow().requests().map(|r| r.id.clone()).collect();
    match op {
        Op::Submit { user, manual } => {
            let scope = RequestScope { subject: SubjectRef::user(format!("u-{user}")), purpose_filter: None };
            let origin = if *manual { Origin::Manual("olivia".into()) } else { Origin::Api("intake".into()) };
            svc.submit_request(scope, origin, now).map(|_| ())
        }
        Op::Review { req, reviewer, approve } => {
            let Some(id) = nth(&reqs, *req) else { return Ok(()) };
            let d = if *approve { ReviewDecision::Approve } else { ReviewDecision::Reject };
            svc.review(&id, REVIEWERS[*reviewer], d, "", now).map(|_| ())
        }
        Op::Scan => scan_cycle(svc, &NoMetadata, &ExecutorConfig::default(), now).map(|_| ()),
        Op::Finish { system, outcome } => {
            let sys = SystemId::new(format!("sys-{system}"));
            let r = common::runner(&sys);
            let Some(job) = svc.claim_next(&r, &sys, &format!("token-{sys}"), now)? else { return Ok(()) };
            let ev = match outcome {
                0 => success(now),
                1 => common::no_data(now),
                _ => error(now),
            };
            svc.report_completion(&job.id, &r, ev, now)?;
            reconcile_cycle(svc, now).map(|_| ())
        }
        Op::Retry { subtask } => {
            let sts: Vec<SubTaskId> = svc.workflow().subtasks().map(|s| s.id.clone()).collect();
            let Some(id) = nth(&sts, *subtask) else { return Ok(()) };
            svc.retry_subtask("olivia", &id, now).map(|_| ())
        }
        Op::Close { req } => {
            let Some(id) = nth(&reqs, *req) else { return Ok(()) };
            svc.try_close_request("olivia", &id, now).map(|_| ())
        }
        Op::Exempt { req } => {
            let Some(id) = nth(&reqs, *req) else { return Ok(()) };
            svc.record_exemption("rita", &id, exemption(0), now)
        }
        Op::Expire { .. } => svc.expire_claims(now).map(|_| ()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_operations_respect_the_state_machine(ops in prop::collection::vec(op(), 1..60), q in 1u32..3) {
        let mut svc = service_with_systems(3, quorum(q));
        let mut now = t(0);
        let mut prev: BTreeMap<RequestId, RequestState> = BTreeMap::new();
        for op in &ops {
            if let Op::Expire { secs } = op {
                now = now.plus_secs(*secs);
            }
            let before_state = svc.state().clone();
            let before_len = svc.store().len();
            match apply(&mut svc, op, now) {
                Ok(()) => {}
                Err(e) => {
                    prop_assert!(!e.is_fatal(), "{e}");
                    if !matches!(op, Op::Finish { .. } | Op::Scan) {
                        prop_assert_eq!(svc.store().len(), before_len, "{:?} failed with {} but logged", op, e);
                        prop_assert!(*svc.state() == before_state);
                    }
                }
            }
            for r in svc.workflow().requests() {
                let from = prev.get(&r.id).copied().unwrap_or(RequestState::Submitted);
                prop_assert!(allowed(from, r.state), "{}: {:?} -> {:?} after {:?}", r.id, from, r.state, op);
                prev.insert(r.id.clone(), r.state);
            }
            prop_assert_eq!(svc.store().len(), svc.state().transition_total());
        }

        // Drain: approve everything open and finish every job successfully.
        let mut rounds = 0;
        while svc.workflow().requests().any(|r| !r.state.is_terminal()) {
            rounds += 1;
            prop_assert!(rounds < 20, "did not drain");
            now = now.plus_secs(10);
            let open: Vec<RequestId> = svc.workflow().requests().filter(|r| r.state.is_pre_execution()).map(|r| r.id.clone()).collect();
            for id in open {
                for who in REVIEWERS.iter().chain(["extra-1", "extra-2"].iter()) {
                    let _ = svc.review(&id, who, ReviewDecision::Approve, "", now);
                }
            }
            scan_cycle(&mut svc, &NoMetadata, &ExecutorConfig::default(), now).unwrap();
            for i in 0..3 {
                let sys = SystemId::new(format!("sys-{i}"));
                let r = common::runner(&sys);
                svc.expire_claims(now.plus_secs(3600)).unwrap();
                while let Some(job) = svc.claim_next(&r, &sys, &format!("token-{sys}"), now).unwrap() {
                    svc.report_completion(&job.id, &r, success(now), now).unwrap();
                }
            }
            reconcile_cycle(&mut svc, now).unwrap();
        }
        let terminal: BTreeSet<RequestState> = svc.workflow().requests().map(|r| r.state).collect();
        prop_assert!(terminal.iter().all(|s| s.is_terminal()));
        prop_assert!(svc.store().verify_all().intact);
    }
}
