//! UTC timestamps at second precision, written as RFC3339 with a `Z` suffix.

use chrono::{DateTime, SecondsFormat, Timelike, Utc};

use crate::{Error, Result};

pub type Timestamp = DateTime<Utc>;

pub fn format(ts: &Timestamp) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Parses any RFC3339 instant and truncates it to whole seconds.
pub fn parse(s: &str) -> Result<Timestamp> {
    let parsed = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| Error::parse(s, format!("invalid RFC3339 timestamp: {e}")))?;
    Ok(truncate(parsed.with_timezone(&Utc)))
}

pub fn truncate(ts: Timestamp) -> Timestamp {
    ts.with_nanosecond(0).unwrap_or(ts)
}

pub fn midnight_of(ts: &Timestamp) -> Timestamp {
    ts.date_naive()
        .and_hms_opt(0, 0, 0)
        .expect("midnight is always valid")
        .and_utc()
}

/// serde adapter for [`Timestamp`] fields.
pub mod rfc3339 {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::Timestamp;

    pub fn serialize<S: Serializer>(ts: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse(&raw).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        use super::super::Timestamp;

        pub fn serialize<S: Serializer>(ts: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
            match ts {
                Some(ts) => s.serialize_str(&super::super::format(ts)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|raw| super::super::parse(&raw).map_err(serde::de::Error::custom))
                .transpose()
        }
    }
}
