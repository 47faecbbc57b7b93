//! Deterministic text output: every float is written with 17 significant
//! digits so that payloads round-trip bit-exactly.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

use crate::error::{FemError, Result};

pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// Pretty JSON with floats at full precision. Integers stay integers.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| FemError::InvalidArgument(e.to_string()))?;
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().unwrap();
                out.push_str(&format_float(f));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            let flat = items.iter().all(|i| !i.is_array() && !i.is_object());
            if flat {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_value(item, indent, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(item, indent + 1, out);
                if k + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            let _ = write!(out, "{}]", pad(indent));
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (k, (key, item)) in map.iter().enumerate() {
                let _ = write!(out, "{}{}: ", pad(indent + 1), Value::String(key.clone()));
                write_value(item, indent + 1, out);
                if k + 1 < map.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            let _ = write!(out, "{}}}", pad(indent));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_and_stay_valid_json() {
        #[derive(Serialize)]
        struct R {
            a: f64,
            b: Vec<f64>,
            n: usize,
            s: &'static str,
            o: Option<f64>,
        }
        let r = R {
            a: 0.1 + 0.2,
            b: vec![1.0 / 3.0, -2.5e-300],
            n: 7,
            s: "q\"x",
            o: None,
        };
        let text = to_json_string(&r).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64().unwrap().to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back["b"][0].as_f64().unwrap(), 1.0 / 3.0);
        assert_eq!(back["n"].as_u64(), Some(7));
        assert!(back["o"].is_null());
        assert!(text.contains("3.0000000000000004e-1"));
    }

    #[test]
    fn format_float_has_17_digits() {
        let s = format_float(std::f64::consts::PI);
        assert_eq!(s, "3.1415926535897931e0");
        assert_eq!(s.parse::<f64>().unwrap(), std::f64::consts::PI);
    }
}
