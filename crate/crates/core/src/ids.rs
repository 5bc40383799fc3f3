//! Opaque identifiers.
//!
//! Numeric ids are rendered with a one-letter prefix (`u7`, `p12`) on the
//! wire and in JSON map keys, but order by their numeric value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid {kind} id: {raw:?}")]
pub struct IdParseError {
    pub kind: &'static str,
    pub raw: String,
}

macro_rules! prefixed_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal, $kind:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }

        impl FromStr for $name {
            type Err = IdParseError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                s.strip_prefix($prefix)
                    .filter(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|rest| rest.parse().ok())
                    .map($name)
                    .ok_or_else(|| IdParseError {
                        kind: $kind,
                        raw: s.to_string(),
                    })
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

prefixed_id!(
    /// A registered user.
    UserId,
    "u",
    "user"
);
prefixed_id!(
    /// A composed weekly plan.
    PlanId,
    "p",
    "plan"
);
prefixed_id!(
    /// A scheduled notification.
    NotificationId,
    "n",
    "notification"
);

/// Chat handle on the bot channel. Plain integer, as in the bot wire format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChatId(pub i64);

impl fmt::Display for ChatId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        let id: PlanId = "p12".parse().unwrap();
        assert_eq!(id, PlanId(12));
        assert_eq!(id.to_string(), "p12");
        assert!("p".parse::<PlanId>().is_err());
        assert!("u3".parse::<PlanId>().is_err());
        assert!("p-1".parse::<PlanId>().is_err());
    }

    #[test]
    fn numeric_order() {
        assert!(UserId(2) < UserId(10));
    }

    #[test]
    fn json_map_keys() {
        let mut m = std::collections::BTreeMap::new();
        m.insert(UserId(3), 1);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"u3":1}"#);
        let back: std::collections::BTreeMap<UserId, i32> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
