//! Flat `key=value` config files and flag-over-file resolution.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Values read from a config file. Every key must be consumed by the
/// subcommand, so a typo is reported rather than silently ignored.
#[derive(Debug, Default)]
pub struct FileSettings {
    values: BTreeMap<String, String>,
    source: String,
}

impl FileSettings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileSettings::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{source}:{}: expected key=value", n + 1)))?;
            let key = key.trim().replace('_', "-");
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{source}:{}: duplicate key {key}", n + 1)));
            }
        }
        Ok(FileSettings {
            values,
            source: source.to_string(),
        })
    }

    /// Flag value if given, else the file's, else `default`.
    pub fn pick<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if let Some(v) = flag {
            return Ok(v);
        }
        match from_file {
            Some(text) => text
                .parse()
                .map_err(|e| CliError::Usage(format!("{}: bad value {text:?} for {key}: {e}", self.source))),
            None => Ok(default),
        }
    }

    /// Switches: present on the command line wins, otherwise the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool, CliError> {
        let from_file: bool = self.pick(key, None, false)?;
        Ok(flag || from_file)
    }

    /// Optional value with no default.
    pub fn maybe<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let from_file = self.values.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        from_file
            .map(|text| {
                text.parse()
                    .map_err(|e| CliError::Usage(format!("{}: bad value {text:?} for {key}: {e}", self.source)))
            })
            .transpose()
    }

    /// Fails on any key the subcommand did not ask for.
    pub fn finish(self) -> Result<(), CliError> {
        match self.values.keys().next() {
            Some(key) => Err(CliError::Usage(format!("{}: unknown key {key}", self.source))),
            None => Ok(()),
        }
    }
}
