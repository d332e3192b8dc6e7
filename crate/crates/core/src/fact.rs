//! Values a model may decline to ground in the paper.

use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};

/// The only placeholder token a backend may use for missing information.
pub const UNKNOWN: &str = "UNKNOWN";

/// Either a value taken from the backend response or the `UNKNOWN` marker.
///
/// Serializes `Unknown` as the bare string `"UNKNOWN"`, so a field that is
/// `"UNKNOWN"` on the wire is never mistaken for a real value.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Fact<T> {
    Known(T),
    #[default]
    Unknown,
}

impl<T> Fact<T> {
    pub fn known(&self) -> Option<&T> {
        match self {
            Fact::Known(v) => Some(v),
            Fact::Unknown => None,
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Fact::Unknown)
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> Fact<U> {
        match self {
            Fact::Known(v) => Fact::Known(f(v)),
            Fact::Unknown => Fact::Unknown,
        }
    }
}

impl Fact<String> {
    /// `UNKNOWN` and empty strings both become `Unknown`.
    pub fn from_text(s: impl Into<String>) -> Fact<String> {
        let s = s.into();
        if s.trim().is_empty() || s.trim() == UNKNOWN {
            Fact::Unknown
        } else {
            Fact::Known(s)
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Fact::Known(s) => s,
            Fact::Unknown => UNKNOWN,
        }
    }
}

impl<T: fmt::Display> fmt::Display for Fact<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fact::Known(v) => v.fmt(f),
            Fact::Unknown => f.write_str(UNKNOWN),
        }
    }
}

impl<T: Serialize> Serialize for Fact<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Fact::Known(v) => v.serialize(serializer),
            Fact::Unknown => serializer.serialize_str(UNKNOWN),
        }
    }
}

struct UnknownMarker;

impl<'de> Deserialize<'de> for UnknownMarker {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == UNKNOWN {
            Ok(UnknownMarker)
        } else {
            Err(de::Error::custom("not the UNKNOWN marker"))
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr<T> {
    Unknown(UnknownMarker),
    Known(T),
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Fact<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Repr::<T>::deserialize(deserializer)? {
            Repr::Unknown(_) => Ok(Fact::Unknown),
            Repr::Known(v) => Ok(Fact::Known(v)),
        }
    }
}
