//! Shared service state behind the HTTP handlers.

use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use erasure_core::executor::{self, Dispatch, ExecutorConfig, NoMetadata};
use erasure_core::ids::{JobId, RequestId, SubTaskId};
use erasure_core::notify::{FileSink, Notifier};
use erasure_core::service::Service;
use erasure_core::time::{Clock, ClockMode, SystemClock, Timestamp, VirtualClock};
use erasure_core::Error;
use serde::Serialize;

use crate::auth::Directory;
use crate::config::ServiceConfig;

pub const NOTIFICATIONS_FILE: &str = "notifications.jsonl";

#[derive(Clone, Debug)]
pub enum GatewayClock {
    Real,
    Virtual(Arc<VirtualClock>),
}

impl GatewayClock {
    pub fn now(&self) -> Timestamp {
        match self {
            GatewayClock::Real => SystemClock.now(),
            GatewayClock::Virtual(c) => c.now(),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            GatewayClock::Real => ClockMode::RealTime,
            GatewayClock::Virtual(_) => ClockMode::Virtual,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BootError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("StoreCorrupt: refusing to start, log is corrupt at seq {seq}: {reason}")]
    StoreCorrupt { seq: u64, reason: String },
    #[error("cannot open store: {0}")]
    Store(Error),
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
}

/// What one executor pass did.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PassSummary {
    pub now: Timestamp,
    pub dispatched: Vec<Dispatch>,
    pub expired: Vec<JobId>,
    pub reconciled: Vec<SubTaskId>,
    pub overdue: Vec<RequestId>,
}

pub struct Inner {
    service: RwLock<Service>,
    pub clock: GatewayClock,
    pub directory: Directory,
    pub executor: ExecutorConfig,
    data_dir: Option<PathBuf>,
    snapshot_every: u64,
    last_snapshot: Mutex<u64>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl std::ops::Deref for AppState {
    type Target = Inner;

    fn deref(&self) -> &Inner {
        &self.0
    }
}

impl AppState {
    /// Wraps an already-built service. The vault is replaced by the
    /// directory's runner tokens.
    pub fn new(mut service: Service, clock: GatewayClock, directory: Directory, executor: ExecutorConfig) -> Self {
        service.set_vault(directory.vault());
        let len = service.store().len();
        AppState(Arc::new(Inner {
            service: RwLock::new(service),
            clock,
            directory,
            executor,
            data_dir: None,
            snapshot_every: 0,
            last_snapshot: Mutex::new(len),
        }))
    }

    /// Opens the data directory and replays the log.
    pub fn boot(config: &ServiceConfig) -> Result<Self, BootError> {
        config.validate()?;
        config.prepare_data_dir()?;
        let mut service = Service::open(&config.data_dir, config.workflow.clone(), config.fsync).map_err(|e| match e {
            Error::CorruptLog { seq, reason } => BootError::StoreCorrupt { seq, reason },
            Error::ChainMismatch { expected, got } => BootError::StoreCorrupt {
                seq: 0,
                reason: format!("chain mismatch: expected {expected}, got {got}"),
            },
            other => BootError::Store(other),
        })?;
        let report = service.store().verify_all();
        if !report.intact {
            let m = report.first_mismatch.expect("broken chain names a seq");
            return Err(BootError::StoreCorrupt { seq: m.seq, reason: "hash chain does not verify".into() });
        }
        let mut notifier = Notifier::new();
        notifier.add_sink("file", Arc::new(FileSink::new(config.data_dir.join(NOTIFICATIONS_FILE))));
        for sub in &config.subscriptions {
            notifier.subscribe(sub.clone()).map_err(BootError::Store)?;
        }
        service.set_notifier(notifier);
        let clock = match config.clock.mode {
            ClockMode::RealTime => GatewayClock::Real,
            ClockMode::Virtual => {
                let last = service.log().last().map(|e| e.audit.at).unwrap_or_default();
                GatewayClock::Virtual(Arc::new(VirtualClock::new(config.virtual_start().max(last))))
            }
        };
        let mut state = Self::new(service, clock, Directory::new(config.principals()), config.executor.clone());
        let inner = Arc::get_mut(&mut state.0).expect("fresh state is unshared");
        inner.data_dir = Some(config.data_dir.clone());
        inner.snapshot_every = config.snapshot_every;
        Ok(state)
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Service> {
        self.service.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Service> {
        self.service.write().unwrap_or_else(|e| e.into_inner())
    }

    /// Runs `f` under the writer lock at the current clock reading.
    pub fn mutate<T>(&self, f: impl FnOnce(&mut Service, Timestamp) -> erasure_core::Result<T>) -> erasure_core::Result<T> {
        let mut svc = self.write();
        let out = f(&mut svc, self.now());
        self.maybe_snapshot(&svc);
        out
    }

    fn maybe_snapshot(&self, svc: &Service) {
        let (Some(dir), true) = (&self.data_dir, self.snapshot_every > 0) else {
            return;
        };
        let mut last = self.last_snapshot.lock().unwrap_or_else(|e| e.into_inner());
        let len = svc.store().len();
        if len >= *last + self.snapshot_every {
            match svc.write_snapshot(dir) {
                Ok(()) => *last = len,
                Err(e) => tracing::warn!(error = %e, "snapshot failed"),
            }
        }
    }

    /// Dispatch scan only.
    pub fn scan(&self) -> erasure_core::Result<Vec<Dispatch>> {
        let cfg = self.executor.clone();
        self.mutate(|svc, now| executor::scan_cycle(svc, &NoMetadata, &cfg, now))
    }

    /// Lease expiry, reconciliation and the overdue scan.
    pub fn reconcile(&self) -> erasure_core::Result<PassSummary> {
        self.mutate(|svc, now| {
            let expired = svc.expire_claims(now)?;
            let reconciled = executor::reconcile_cycle(svc, now)?;
            let overdue = executor::overdue_scan(svc, now)?;
            Ok(PassSummary { now, expired, reconciled, overdue, ..Default::default() })
        })
    }

    /// One full executor pass: scan, then reconcile.
    pub fn executor_pass(&self) -> erasure_core::Result<PassSummary> {
        let dispatched = self.scan()?;
        let mut summary = self.reconcile()?;
        summary.dispatched = dispatched;
        Ok(summary)
    }
}
