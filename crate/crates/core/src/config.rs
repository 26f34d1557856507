//! `key = value` configuration text.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key} = {value:?}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key} = {value:?}: expected true or false"))),
    }
}

/// `none` maps to `None`.
pub fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

pub fn format_optional<T: Display>(value: &Option<T>) -> String {
    value.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_comments() {
        let kv = parse_kv("# c\n a = 1 \n\nb=two words\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "two words".into())]);
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv(" = 3\n").is_err());
    }

    #[test]
    fn optional_values() {
        assert_eq!(parse_optional::<f64>("p", "none").unwrap(), None);
        assert_eq!(parse_optional::<f64>("p", "0.5").unwrap(), Some(0.5));
        assert!(parse_optional::<f64>("p", "x").is_err());
        assert_eq!(format_optional(&Some(0.5)), "0.5");
    }
}
