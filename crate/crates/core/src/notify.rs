//! Notifications derived from committed workflow events.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{RequestId, SubTaskId};
use crate::time::Timestamp;
use crate::workflow::{RequestState, WorkflowEvent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NotificationKind {
    Created,
    Approved,
    Rejected,
    SubTaskClosed,
    RequestClosed,
    Overdue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscriber: String,
    pub events: BTreeSet<NotificationKind>,
    pub channel: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub subscriber: String,
    pub kind: NotificationKind,
    pub request_id: RequestId,
    pub subtask_id: Option<SubTaskId>,
    pub at: Timestamp,
    pub detail: String,
}

pub trait NotificationSink: Send + Sync {
    fn deliver(&self, n: &Notification) -> Result<()>;
}

/// Collects notifications in memory.
#[derive(Clone, Debug, Default)]
pub struct Inbox {
    items: Arc<Mutex<Vec<Notification>>>,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn items(&self) -> Vec<Notification> {
        self.items.lock().expect("inbox lock").clone()
    }

    pub fn len(&self) -> usize {
        self.items.lock().expect("inbox lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl NotificationSink for Inbox {
    fn deliver(&self, n: &Notification) -> Result<()> {
        self.items.lock().expect("inbox lock").push(n.clone());
        Ok(())
    }
}

/// Appends one JSON line per notification.
#[derive(Debug)]
pub struct FileSink {
    path: PathBuf,
    lock: Mutex<()>,
}

impl FileSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileSink { path: path.into(), lock: Mutex::new(()) }
    }
}

impl NotificationSink for FileSink {
    fn deliver(&self, n: &Notification) -> Result<()> {
        let _guard = self.lock.lock().expect("sink lock");
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let line = serde_json::to_string(n).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}

/// Routes workflow occurrences to subscribed sinks.
#[derive(Default)]
pub struct Notifier {
    subscriptions: Vec<Subscription>,
    sinks: Vec<(String, Arc<dyn NotificationSink>)>,
}

impl std::fmt::Debug for Notifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Notifier")
            .field("subscriptions", &self.subscriptions)
            .field("sinks", &self.sinks.iter().map(|(n, _)| n).collect::<Vec<_>>())
            .finish()
    }
}

impl Notifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_sink(&mut self, channel: impl Into<String>, sink: Arc<dyn NotificationSink>) {
        let channel = channel.into();
        self.sinks.retain(|(c, _)| *c != channel);
        self.sinks.push((channel, sink));
    }

    pub fn subscribe(&mut self, sub: Subscription) -> Result<()> {
        if sub.events.is_empty() {
            return Err(Error::Malformed("subscription needs at least one event".into()));
        }
        if !self.sinks.iter().any(|(c, _)| *c == sub.channel) {
            return Err(Error::UnknownReference { kind: "channel", id: sub.channel });
        }
        self.subscriptions.push(sub);
        Ok(())
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    /// Fires the notifications for one committed event. Sink failures are
    /// logged and do not affect the committed state.
    pub fn observe(&self, event: &WorkflowEvent, request_id: &RequestId) {
        let Some((kind, subtask_id, at, detail)) = occurrence(event) else {
            return;
        };
        for sub in self.subscriptions.iter().filter(|s| s.events.contains(&kind)) {
            let n = Notification {
                subscriber: sub.subscriber.clone(),
                kind,
                request_id: request_id.clone(),
                subtask_id: subtask_id.clone(),
                at,
                detail: detail.clone(),
            };
            for (_, sink) in self.sinks.iter().filter(|(c, _)| *c == sub.channel) {
                if let Err(e) = sink.deliver(&n) {
                    tracing::warn!(channel = %sub.channel, error = %e, "notification delivery failed");
                }
            }
        }
    }
}

fn occurrence(event: &WorkflowEvent) -> Option<(NotificationKind, Option<SubTaskId>, Timestamp, String)> {
    Some(match event {
        WorkflowEvent::Submitted { request } => (
            NotificationKind::Created,
            None,
            request.submitted_at,
            format!("request for {} submitted", request.scope.subject),
        ),
        WorkflowEvent::Reviewed { approval, state: RequestState::Approved, .. } => {
            (NotificationKind::Approved, None, approval.timestamp, format!("approved by {}", approval.reviewer))
        }
        WorkflowEvent::Reviewed { approval, state: RequestState::Rejected, .. } => {
            (NotificationKind::Rejected, None, approval.timestamp, format!("rejected by {}", approval.reviewer))
        }
        WorkflowEvent::SubtaskClosed { subtask_id, state, at, .. } => {
            (NotificationKind::SubTaskClosed, Some(subtask_id.clone()), *at, format!("{state:?}"))
        }
        WorkflowEvent::RequestClosed { state, at, .. } => (NotificationKind::RequestClosed, None, *at, format!("{state:?}")),
        WorkflowEvent::RequestOverdue { at, .. } => (NotificationKind::Overdue, None, *at, "deadline passed".into()),
        _ => return None,
    })
}
