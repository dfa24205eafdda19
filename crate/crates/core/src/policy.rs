//! Retention decisions and legal exemption claims.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{PolicyId, PurposeId, SystemId};
use crate::registry::Registry;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Deny,
}

/// `Deny` always cites a policy and the earliest instant the data may go.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionDecision {
    pub verdict: Verdict,
    pub policy_id: Option<PolicyId>,
    pub earliest_deletion: Option<Timestamp>,
    pub rationale: String,
}

impl RetentionDecision {
    pub fn allow(rationale: impl Into<String>) -> Self {
        RetentionDecision {
            verdict: Verdict::Allow,
            policy_id: None,
            earliest_deletion: None,
            rationale: rationale.into(),
        }
    }

    pub fn is_deny(&self) -> bool {
        self.verdict == Verdict::Deny
    }
}

pub const NO_APPLICABLE_POLICY: &str = "no applicable retention policy";
pub const ALL_PERIODS_ELAPSED: &str = "all retention periods elapsed";

/// Decides whether data on `system_id` written at `data_timestamp` may be
/// deleted at `now`.
///
/// Every policy returned by [`Registry::policies_for`] under the purpose
/// filter is checked. When several still hold the data, the one releasing it
/// last is cited (ties go to the lowest policy id).
pub fn evaluate_retention(
    registry: &Registry,
    system_id: &SystemId,
    purpose: Option<&PurposeId>,
    data_timestamp: Timestamp,
    now: Timestamp,
) -> Result<RetentionDecision> {
    if data_timestamp > now {
        return Err(Error::TimestampOrder {
            data: data_timestamp.secs(),
            now: now.secs(),
        });
    }
    let policies = registry.policies_for(system_id, purpose)?;
    if policies.is_empty() {
        return Ok(RetentionDecision::allow(NO_APPLICABLE_POLICY));
    }
    let binding = policies
        .iter()
        .map(|p| (p, data_timestamp.plus_days(i64::from(p.min_retention))))
        .filter(|(_, until)| now < *until)
        .max_by(|(a, ua), (b, ub)| ua.cmp(ub).then_with(|| b.id.cmp(&a.id)));
    Ok(match binding {
        None => RetentionDecision::allow(ALL_PERIODS_ELAPSED),
        Some((p, until)) => RetentionDecision {
            verdict: Verdict::Deny,
            policy_id: Some(p.id.clone()),
            earliest_deletion: Some(until),
            rationale: format!(
                "retention policy {} '{}' ({} days{}) holds the data until {}",
                p.id,
                p.label,
                p.min_retention,
                if p.legal_basis.is_empty() {
                    String::new()
                } else {
                    format!(", {}", p.legal_basis)
                },
                until
            ),
        },
    })
}

/// Grounds on which an erasure may be refused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExemptionCategory {
    FreedomOfExpression,
    LegalObligation,
    PublicInterestArchiving,
    ScientificHistoricalResearch,
    LegalClaims,
    PublicHealth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemptionClaim {
    pub category: ExemptionCategory,
    pub justification: String,
    pub claimed_by: String,
    pub timestamp: Timestamp,
}

impl ExemptionClaim {
    pub fn validate(&self) -> Result<()> {
        if self.justification.trim().is_empty() {
            return Err(Error::Malformed("exemption justification must be non-empty".into()));
        }
        if self.claimed_by.trim().is_empty() {
            return Err(Error::Malformed("exemption claimed_by must be non-empty".into()));
        }
        Ok(())
    }
}
