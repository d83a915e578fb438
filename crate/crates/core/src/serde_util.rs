//! Serde helpers for floats that may be infinite.
//!
//! JSON has no representation for IEEE infinities or NaN, so non-finite
//! values travel as the strings `"inf"`, `"-inf"` and `"nan"`.

use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;
use std::fmt;

pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        ser.serialize_f64(*value)
    } else if value.is_nan() {
        ser.serialize_str("nan")
    } else if *value > 0.0 {
        ser.serialize_str("inf")
    } else {
        ser.serialize_str("-inf")
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    de.deserialize_any(TaggedFloat)
}

struct TaggedFloat;

impl<'de> Visitor<'de> for TaggedFloat {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        match v {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
        }
    }
}

/// Formats a float with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{:.16e}", x)
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}
