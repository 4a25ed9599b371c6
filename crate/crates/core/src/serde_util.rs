//! Serde helpers for `f64` fields that may legitimately hold infinities
//! (gate thresholds used as sweep endpoints). JSON has no infinity literal,
//! so those are written as the strings `"inf"` and `"-inf"`.

use serde::{de, Deserialize, Deserializer, Serializer};

pub mod extended_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => parse_extended(&t).map_err(de::Error::custom),
        }
    }
}

/// Parses a float, also accepting `inf`, `+inf`, `-inf`, `infinity`.
pub fn parse_extended(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        other => other.parse::<f64>().map_err(|e| format!("invalid number `{s}`: {e}")),
    }
}
