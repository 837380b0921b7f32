//! Flat `key = value` configuration text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are struct
//! field names; values use each field's `FromStr`/`Display` form.

use crate::error::{Error, Result};

/// A configuration struct whose fields round-trip through flat text.
pub trait FlatConfig {
    fn pairs(&self) -> Vec<(&'static str, String)>;

    /// Sets one field; `Ok(false)` when `key` is not a field of this struct.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies every pair this struct knows and returns the keys it did not.
    fn apply(&mut self, pairs: &[(String, String)]) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (k, v) in pairs {
            if !self.set(k, v)? {
                unknown.push(k.clone());
            }
        }
        Ok(unknown)
    }
}

pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Malformed { line: i + 1, message: format!("expected `key = value`, got {line:?}") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[doc(hidden)]
pub fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::invalid(format!("cannot parse {key} = {value:?}")))
}

/// Implements [`FlatConfig`] over the listed fields.
#[macro_export]
macro_rules! flat_config {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::config::FlatConfig for $ty {
            fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string())),*]
            }

            fn set(&mut self, key: &str, value: &str) -> $crate::Result<bool> {
                match key {
                    $(stringify!($field) => self.$field = $crate::config::parse_field(key, value)?,)*
                    _ => return Ok(false),
                }
                Ok(true)
            }
        }
    };
}
