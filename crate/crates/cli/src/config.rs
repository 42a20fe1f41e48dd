//! key=value config files, flag/file/default precedence, and run
//! manifests.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

/// Types that can come from a flag or a config-file string and be echoed
/// into a manifest.
pub trait ConfigValue: Sized {
    fn parse_cfg(raw: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! impl_config_value {
    ($($t:ty),*) => {
        $(impl ConfigValue for $t {
            fn parse_cfg(raw: &str) -> Option<Self> {
                raw.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        })*
    };
}

impl_config_value!(u64, usize, f64, bool, String);

impl ConfigValue for PathBuf {
    fn parse_cfg(raw: &str) -> Option<Self> {
        Some(PathBuf::from(raw))
    }

    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Error carrying the process exit code: 2 usage, 3 input validation,
/// 4 numerical failure.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<psrecon_core::Error> for CliError {
    fn from(e: psrecon_core::Error) -> Self {
        let code = match &e {
            psrecon_core::Error::Numerical(_)
            | psrecon_core::Error::SolverDiverged { .. }
            | psrecon_core::Error::NonFinite { .. } => 4,
            _ => 3,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { code: 3, message: e.to_string() }
    }
}

/// Parsed config file plus the manifest being accumulated while flags
/// are resolved. Precedence: flag > config file > built-in default.
pub struct Settings {
    file: BTreeMap<String, String>,
    manifest: Vec<(String, String)>,
}

impl Settings {
    pub fn load(command: &str, path: Option<&Path>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::validation(format!(
                        "config {} line {}: expected key=value",
                        p.display(),
                        lineno + 1
                    ))
                })?;
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let manifest = vec![("command".to_string(), command.to_string())];
        Ok(Self { file, manifest })
    }

    fn from_file<T: ConfigValue>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.file.get(key) {
            None => Ok(None),
            Some(raw) => T::parse_cfg(raw).map(Some).ok_or_else(|| {
                CliError::validation(format!("config value {key}={raw} does not parse"))
            }),
        }
    }

    /// Value with a built-in default.
    pub fn get<T: ConfigValue>(
        &mut self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self.from_file(key)?.unwrap_or(default),
        };
        self.manifest.push((key.to_string(), v.render()));
        Ok(v)
    }

    /// Value that must come from a flag or the config file.
    pub fn require<T: ConfigValue>(
        &mut self,
        flag: Option<T>,
        key: &str,
    ) -> Result<T, CliError> {
        let v = match flag {
            Some(v) => v,
            None => self
                .from_file(key)?
                .ok_or_else(|| CliError::usage(format!("missing required --{key}")))?,
        };
        self.manifest.push((key.to_string(), v.render()));
        Ok(v)
    }

    /// Optional value with no default; recorded only when present.
    pub fn optional<T: ConfigValue>(
        &mut self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, CliError> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.from_file(key)?,
        };
        if let Some(v) = &v {
            self.manifest.push((key.to_string(), v.render()));
        }
        Ok(v)
    }

    /// Boolean switch: the flag's presence wins, else the config file.
    pub fn get_bool(&mut self, flag: bool, key: &str) -> Result<bool, CliError> {
        let v = if flag { true } else { self.from_file(key)?.unwrap_or(false) };
        self.manifest.push((key.to_string(), v.render()));
        Ok(v)
    }

    /// Extra manifest entries computed by the command (e.g. phantom roots).
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.manifest.push((key.to_string(), value.to_string()));
    }

    /// Writes `<out>.manifest` next to the primary output.
    pub fn write_manifest(&self, out: &Path) -> Result<(), CliError> {
        let path = PathBuf::from(format!("{}.manifest", out.display()));
        let mut text = String::new();
        for (k, v) in &self.manifest {
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        fs::write(&path, text)
            .map_err(|e| CliError::validation(format!("manifest {}: {e}", path.display())))?;
        Ok(())
    }
}
