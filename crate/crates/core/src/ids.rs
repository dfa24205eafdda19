//! Opaque identifier newtypes.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(PurposeId);
string_id!(DataCategoryId);
string_id!(SystemTypeId);
string_id!(SystemId);
string_id!(PolicyId);
string_id!(RequestId);
string_id!(SubTaskId);
string_id!(
    /// Idempotency key of a deletion job, derived from its request and sub-task.
    JobId
);
string_id!(RunnerId);

impl JobId {
    pub fn derive(request: &RequestId, subtask: &SubTaskId) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(request.as_str().as_bytes());
        hasher.update([0u8]);
        hasher.update(subtask.as_str().as_bytes());
        let digest = hasher.finalize();
        JobId(format!("job-{}", hex::encode(&digest[..8])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_id_is_stable_and_separates_fields() {
        let a = JobId::derive(&"req-1".into(), &"st-12".into());
        let b = JobId::derive(&"req-1".into(), &"st-12".into());
        let c = JobId::derive(&"req-11".into(), &"st-2".into());
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.as_str().starts_with("job-"));
        assert_eq!(a.as_str().len(), 4 + 16);
    }
}
