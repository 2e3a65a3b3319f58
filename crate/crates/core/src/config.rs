//! `key = value` configuration text shared by every run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the
//! kebab-case field names that the command line also uses, so a config file
//! and a flag set describe the same thing.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A configuration that can be overridden one key at a time and echoed back.
pub trait KeyValue {
    /// Sets one field from its textual value.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every field in a stable order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Whether `key` names a field of this configuration.
    fn knows(&self, key: &str) -> bool {
        self.entries().iter().any(|(k, _)| *k == key)
    }
}

/// Splits config text into `(key, value)` pairs, keeping file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "config",
            line: i + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                what: "config",
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Renders entries as `key = value` lines.
pub fn format_kv(entries: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

/// Applies pairs to whichever of `targets` knows each key. A key no target
/// knows is an error.
pub fn apply_kv(pairs: &[(String, String)], targets: &mut [&mut dyn KeyValue]) -> Result<()> {
    for (k, v) in pairs {
        let mut hit = false;
        for t in targets.iter_mut() {
            if t.knows(k) {
                t.set(k, v)?;
                hit = true;
            }
        }
        if !hit {
            return Err(Error::invalid(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

/// Parses one value, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("bad value {value:?} for {key}: {e}")))
}

/// Parses `on/off`, `true/false`, `1/0`.
pub fn parse_flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

/// Parses a grid `start:step:end` (inclusive, tolerant to rounding) or a
/// comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let grid = match parts.as_slice() {
        [a, step, b] => {
            let (a, step, b): (f64, f64, f64) = (
                parse_value("grid", a.trim())?,
                parse_value("grid", step.trim())?,
                parse_value("grid", b.trim())?,
            );
            if !(step > 0.0) || b < a {
                return Err(Error::invalid(format!("empty grid {text:?}")));
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            // round to 1e-9 so 0.1:0.1:0.9 yields 0.3 rather than 0.30000000000000004
            (0..=n)
                .map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9)
                .collect()
        }
        [_] => text
            .split(',')
            .map(|v| parse_value("grid", v.trim()))
            .collect::<Result<Vec<f64>>>()?,
        _ => return Err(Error::invalid(format!("bad grid {text:?}"))),
    };
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid(format!("grid thresholds must lie in [0, 1]: {text:?}")));
    }
    Ok(grid)
}
