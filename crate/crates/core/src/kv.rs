//! Line-oriented `key = value` text with `#` comments.

use crate::error::ConfigError;

/// One `key = value` entry and the 1-based line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        entries.push(Entry {
            line: i + 1,
            key: key.to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(entries)
}

pub fn value<T: std::str::FromStr>(entry: &Entry) -> Result<T, ConfigError> {
    entry.value.parse().map_err(|_| ConfigError::Parse {
        line: entry.line,
        message: format!("invalid value `{}` for `{}`", entry.value, entry.key),
    })
}

/// Writes `key = value` lines in the given order.
pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}
