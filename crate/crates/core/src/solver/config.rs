//! Layered key-path configuration: project `.jno.toml` over user
//! `~/.jno/config.toml` over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const PROJECT_FILE: &str = ".jno.toml";
pub const ENV_VAR: &str = "JNO_CONFIG";

const DEFAULTS: [(&str, &str); 5] = [
    ("keys.signing", ""),
    ("keys.verifying", ""),
    ("output.dir", "runs"),
    ("plot.format", "svg"),
    ("train.seed", "0"),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("cannot read {}: {source}", file.display())]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    User(PathBuf),
    Project(PathBuf),
    /// File named by `JNO_CONFIG`.
    Env(PathBuf),
}

impl Source {
    fn describe(&self) -> String {
        match self {
            Source::Default => "default".into(),
            Source::User(p) => format!("user {}", p.display()),
            Source::Project(p) => format!("project {}", p.display()),
            Source::Env(p) => format!("{ENV_VAR} {}", p.display()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    values: BTreeMap<String, (String, Source)>,
    layers: Vec<(Source, bool)>,
}

impl Config {
    pub fn defaults() -> Config {
        Config {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), (v.to_string(), Source::Default)))
                .collect(),
            layers: vec![(Source::Default, true)],
        }
    }

    /// Resolve from the environment: `JNO_CONFIG` when set, otherwise the
    /// project file in the current directory and the user file under `HOME`.
    pub fn resolve() -> Result<Config, ConfigError> {
        if let Some(p) = std::env::var_os(ENV_VAR) {
            let p = PathBuf::from(p);
            let mut c = Config::defaults();
            c.layer(Source::Env(p.clone()), &p, true)?;
            return Ok(c);
        }
        let project = std::env::current_dir().ok().map(|d| d.join(PROJECT_FILE));
        let user = std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".jno").join("config.toml"));
        Config::resolve_from(project.as_deref(), user.as_deref())
    }

    /// Layer the given files over the defaults; missing files are skipped.
    pub fn resolve_from(project: Option<&Path>, user: Option<&Path>) -> Result<Config, ConfigError> {
        let mut c = Config::defaults();
        if let Some(u) = user {
            c.layer(Source::User(u.to_path_buf()), u, false)?;
        }
        if let Some(p) = project {
            c.layer(Source::Project(p.to_path_buf()), p, false)?;
        }
        Ok(c)
    }

    fn layer(&mut self, src: Source, path: &Path, required: bool) -> Result<(), ConfigError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if !required && e.kind() == std::io::ErrorKind::NotFound => {
                self.layers.push((src, false));
                return Ok(());
            }
            Err(source) => {
                return Err(ConfigError::Io {
                    file: path.to_path_buf(),
                    source,
                })
            }
        };
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            ConfigError::Parse {
                file: path.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        for (k, v) in flat {
            self.values.insert(k, (v, src.clone()));
        }
        self.layers.push((src, true));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    /// Non-empty value of `key`.
    pub fn get_nonempty(&self, key: &str) -> Option<&str> {
        self.get(key).filter(|v| !v.is_empty())
    }

    pub fn source(&self, key: &str) -> Option<&Source> {
        self.values.get(key).map(|(_, s)| s)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    /// Layers in the order applied, then every key with its winning source.
    pub fn diagnostics(&self) -> String {
        let mut s = String::from("resolution order (later wins):\n");
        for (src, found) in &self.layers {
            let _ = writeln!(s, "  {}{}", src.describe(), if *found { "" } else { " (absent)" });
        }
        for (k, (v, src)) in &self.values {
            let _ = writeln!(s, "{k} = {v:?} [{}]", src.describe());
        }
        s
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}
