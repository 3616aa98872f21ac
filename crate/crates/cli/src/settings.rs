use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use densematch::config::KeyValues;
use densematch::Result;

/// Resolves each option from the command line, then the `--config` file,
/// then the built-in default, and records the value actually used.
pub(crate) struct Settings {
    file: KeyValues,
    effective: KeyValues,
}

impl Settings {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::new(),
        };
        Ok(Self { file, effective: KeyValues::new() })
    }

    pub fn pick<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T> {
        let v = match cli {
            Some(v) => v,
            None => self.file.get(key)?.unwrap_or(default),
        };
        self.effective.set(key, &v);
        Ok(v)
    }

    /// Like [`pick`](Self::pick) for options without a default; absent
    /// values are recorded as an empty string.
    pub fn pick_opt<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>) -> Result<Option<T>> {
        let v = match cli {
            Some(v) => Some(v),
            None => match self.file.raw(key) {
                Some("") | None => None,
                Some(_) => self.file.get(key)?,
            },
        };
        self.effective.set(key, v.as_ref().map(|v| v.to_string()).unwrap_or_default());
        Ok(v)
    }

    /// Records a derived value that is not an option.
    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.effective.set(key, value);
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.effective.save(&dir.join("config.txt"))
    }
}
