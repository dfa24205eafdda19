//! Timestamps and clocks.
//!
//! All orchestration logic takes `now` as an explicit argument; the clock only
//! decides where that value comes from. Under [`VirtualClock`] time moves only
//! when the driver advances it, which makes whole runs reproducible.

use std::fmt;
use std::sync::atomic::{AtomicI64, Ordering};

use serde::{Deserialize, Serialize};

pub const SECS_PER_DAY: i64 = 86_400;

/// Seconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn secs(self) -> i64 {
        self.0
    }

    pub fn plus_secs(self, secs: i64) -> Self {
        Timestamp(self.0.saturating_add(secs))
    }

    pub fn plus_days(self, days: i64) -> Self {
        self.plus_secs(days.saturating_mul(SECS_PER_DAY))
    }

    pub fn minus_days(self, days: i64) -> Self {
        self.plus_secs(-days.saturating_mul(SECS_PER_DAY))
    }

    /// RFC 3339 rendering, used only for human-readable output.
    pub fn to_rfc3339(self) -> String {
        chrono::DateTime::from_timestamp(self.0, 0)
            .map(|dt| dt.format("%Y-%m-%dT%H:%M:%SZ").to_string())
            .unwrap_or_else(|| format!("@{}", self.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    RealTime,
    Virtual,
}

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
    fn mode(&self) -> ClockMode;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        Timestamp(secs)
    }

    fn mode(&self) -> ClockMode {
        ClockMode::RealTime
    }
}

/// Test-controlled clock. Only [`VirtualClock::advance`] and
/// [`VirtualClock::advance_to`] move it, and never backwards.
#[derive(Debug)]
pub struct VirtualClock {
    now: AtomicI64,
}

impl VirtualClock {
    pub fn new(start: Timestamp) -> Self {
        Self {
            now: AtomicI64::new(start.0),
        }
    }

    pub fn advance(&self, secs: u64) -> Timestamp {
        let secs = i64::try_from(secs).unwrap_or(i64::MAX);
        Timestamp(self.now.fetch_add(secs, Ordering::SeqCst).saturating_add(secs))
    }

    /// Moves to `t` if it lies ahead; earlier targets are ignored.
    pub fn advance_to(&self, t: Timestamp) -> Timestamp {
        let prev = self.now.fetch_max(t.0, Ordering::SeqCst);
        Timestamp(prev.max(t.0))
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now.load(Ordering::SeqCst))
    }

    fn mode(&self) -> ClockMode {
        ClockMode::Virtual
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_only_moves_forward() {
        let clock = VirtualClock::new(Timestamp(100));
        assert_eq!(clock.now(), Timestamp(100));
        assert_eq!(clock.advance(5), Timestamp(105));
        assert_eq!(clock.advance_to(Timestamp(50)), Timestamp(105));
        assert_eq!(clock.advance_to(Timestamp(200)), Timestamp(200));
        assert_eq!(clock.now(), Timestamp(200));
    }

    #[test]
    fn day_arithmetic() {
        let t = Timestamp(0).plus_days(1825);
        assert_eq!(t.secs(), 1825 * SECS_PER_DAY);
        assert_eq!(t.minus_days(1825), Timestamp(0));
        assert_eq!(Timestamp(0).to_rfc3339(), "1970-01-01T00:00:00Z");
    }
}
