//! Flat `key = value` run configuration.
//!
//! ```text
//! file    = { line } ;
//! line    = [ ws ] ( comment | entry | "" ) newline ;
//! comment = "#" { any } ;
//! entry   = key [ ws ] "=" [ ws ] value ;
//! key     = ident { "." ident } ;
//! ident   = ( letter | digit | "_" ) { letter | digit | "_" } ;
//! value   = { any } ;              (* trimmed; may be empty only for no key *)
//! ```
//!
//! The first dotted component is the section (`bundle.alpha`, `metric.row1`).
//! Keys are unique; unknown keys are rejected per command.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config line {}: {}", self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, (usize, String)>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .split('.')
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| ConfigError {
                line,
                message: format!("expected `key = value`, got `{s}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_key(key) {
                return Err(ConfigError {
                    line,
                    message: format!("invalid key `{key}`"),
                });
            }
            if value.is_empty() {
                return Err(ConfigError {
                    line,
                    message: format!("key `{key}` has an empty value"),
                });
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (line, value.to_string())) {
                return Err(ConfigError {
                    line,
                    message: format!("duplicate key `{key}` (first set on line {first})"),
                });
            }
        }
        if entries.is_empty() {
            return Err(ConfigError {
                line: 0,
                message: "no entries".into(),
            });
        }
        Ok(Self { entries })
    }

    /// SHA-256 of the canonical `key=value` lines in key order, so comments
    /// and layout do not change it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, (_, v)) in &self.entries {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(l, _)| *l)
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| ConfigError {
                line: self.line_of(key),
                message: format!("cannot read `{v}` for `{key}`"),
            }),
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.require(key)?;
        Ok(self.parsed(key)?.expect("present"))
    }

    /// Comma-separated reals.
    pub fn reals(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|p| {
                p.trim().parse::<f64>().map_err(|_| ConfigError {
                    line: self.line_of(key),
                    message: format!("`{}` in `{key}` is not a number", p.trim()),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    /// Values of `prefix1`, `prefix2`, … up to the first gap.
    pub fn indexed(&self, prefix: &str) -> Vec<&str> {
        (1..).map_while(|i| self.get(&format!("{prefix}{i}"))).collect()
    }

    /// Reject keys outside `allowed`; an entry ending in `*` matches any suffix.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            let ok = allowed.iter().any(|a| match a.strip_suffix('*') {
                Some(prefix) => key.starts_with(prefix),
                None => key == a,
            });
            if !ok {
                return Err(ConfigError {
                    line: self.line_of(key),
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_entries_and_comments() {
        let c = Config::parse("# run\nbundle.alpha = 0.3\n\n  lagrangian.expr = x1^2 + y1_1\n").unwrap();
        assert_eq!(c.get("bundle.alpha"), Some("0.3"));
        assert_eq!(c.get("lagrangian.expr"), Some("x1^2 + y1_1"));
        assert_eq!(c.required::<f64>("bundle.alpha").unwrap(), 0.3);
    }

    #[test]
    fn rejects_malformed_input() {
        assert_eq!(Config::parse("").unwrap_err().line, 0);
        assert_eq!(Config::parse("a = 1\nnot an entry").unwrap_err().line, 2);
        assert!(Config::parse("a = 1\na = 2").unwrap_err().message.contains("duplicate"));
        assert!(Config::parse("a..b = 1").is_err());
        assert!(Config::parse("a =").is_err());
    }

    #[test]
    fn hash_ignores_layout() {
        let a = Config::parse("x = 1\ny = 2").unwrap();
        let b = Config::parse("# c\n  y=2\nx   =   1\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), Config::parse("x = 1\ny = 3").unwrap().hash());
    }

    #[test]
    fn indexed_and_reals() {
        let c = Config::parse("ode.rhs.1 = x1\node.rhs.2 = x2\node.rhs.4 = 1\node.x0 = 1, 2.5").unwrap();
        assert_eq!(c.indexed("ode.rhs."), ["x1", "x2"]);
        assert_eq!(c.reals("ode.x0").unwrap().unwrap(), [1.0, 2.5]);
        assert!(c.check_keys(&["ode.*"]).is_ok());
        assert!(c.check_keys(&["ode.x0"]).is_err());
    }
}
